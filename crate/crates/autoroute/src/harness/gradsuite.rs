//! Finite-difference validation of every differentiable path: dense blocks,
//! the source transform in both modes, and each aggregation operator inside
//! a full routed forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numgrad::{grad_check, Activation, LayeredNet, ParamTensor, Tape, Tensor};
use crate::routing::{routed_forward, AggOp, RouteParamStore, RoutingAction, SourceTransform};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradPathReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

fn flatten(params: &mut [&mut ParamTensor]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
}

fn assign(params: &mut [&mut ParamTensor], flat: &[f64]) {
    let mut k = 0;
    for p in params.iter_mut() {
        let d = p.value.data_mut();
        d.copy_from_slice(&flat[k..k + d.len()]);
        k += d.len();
    }
}

fn dense_path(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = LayeredNet::chain(&[2, 3, 1], Activation::Tanh, true, &mut rng);
    let x = Tensor::from_fn(4, 2, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.1);
    let y = Tensor::from_fn(4, 1, |r, _| (r as f64 * 0.5).sin());

    let loss_of = |net: &mut LayeredNet| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let (out, _, ids) = net.forward(&mut tape, xid)?;
        let loss = tape.mse_loss(out, &y)?;
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .flat_map(|&id| tape.grad(id).data().to_vec())
            .collect();
        Ok((tape.value(loss).item(), grads))
    };
    let (_, analytic) = loss_of(&mut net)?;
    let mut params: Vec<&mut ParamTensor> = net.params_mut().collect();
    let point = flatten(&mut params);
    drop(params);

    let report = grad_check(
        |flat| {
            let mut params: Vec<&mut ParamTensor> = net.params_mut().collect();
            assign(&mut params, flat);
            drop(params);
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let (out, _, _) = net.forward(&mut tape, xid).unwrap();
            let loss = tape.mse_loss(out, &y).unwrap();
            tape.value(loss).item()
        },
        &analytic,
        &point,
        GRAD_EPS,
    );
    Ok((report.max_rel_err, report.checked))
}

fn transform_path(seed: u64, training: bool) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = SourceTransform::new(3, 2, 0.1, 1e-5, &mut rng);
    if !training {
        t.running_mean = vec![0.2, -0.4];
        t.running_var = vec![0.9, 1.3];
    }
    let x = Tensor::from_fn(5, 3, |r, c| 0.4 * (r as f64) - 0.3 * (c as f64) + 0.05);
    let y = Tensor::from_fn(5, 2, |r, c| ((r + c) as f64 * 0.3).cos());

    let (analytic, point) = {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let mut ids = Vec::new();
        let out = t.forward(&mut tape, xid, training, Some(&mut ids))?;
        let loss = tape.mse_loss(out, &y)?;
        tape.backward(loss)?;
        let analytic: Vec<f64> = ids
            .iter()
            .flat_map(|&id| tape.grad(id).data().to_vec())
            .collect();
        let mut params: Vec<&mut ParamTensor> = t.params_mut().collect();
        let point = flatten(&mut params);
        (analytic, point)
    };

    let report = grad_check(
        |flat| {
            let mut params: Vec<&mut ParamTensor> = t.params_mut().collect();
            assign(&mut params, flat);
            drop(params);
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let mut ids = Vec::new();
            let out = t.forward(&mut tape, xid, training, Some(&mut ids)).unwrap();
            let loss = tape.mse_loss(out, &y).unwrap();
            tape.value(loss).item()
        },
        &analytic,
        &point,
        GRAD_EPS,
    );
    Ok((report.max_rel_err, report.checked))
}

fn routed_path(seed: u64, op: AggOp) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = LayeredNet::chain(&[1, 4, 4, 1], Activation::Tanh, false, &mut rng);
    let mut target = LayeredNet::chain(&[1, 4, 4, 1], Activation::Tanh, true, &mut rng);
    let mut store = RouteParamStore::new(seed, 0.5);
    let action = RoutingAction::Route { source: 1, op };
    let actions = vec![action, RoutingAction::Null];
    store.get_or_init(0, action, 4, 4)?;
    let x = Tensor::from_fn(6, 1, |r, _| 0.25 * (r as f64) - 0.6);
    let y = Tensor::from_fn(6, 1, |r, _| (r as f64 * 0.4).sin());

    let forward = |target: &LayeredNet, store: &mut RouteParamStore, tape: &mut Tape| {
        let xid = tape.constant(x.clone());
        let rf = routed_forward(tape, Some(&source), target, &actions, store, xid, true).unwrap();
        let mut loss = tape.mse_loss(rf.output, &y).unwrap();
        if let Some(e) = rf.extra_loss {
            loss = tape.add(loss, e).unwrap();
        }
        (loss, rf)
    };

    let (analytic, point) = {
        let mut tape = Tape::new();
        let (loss, rf) = forward(&target, &mut store, &mut tape);
        tape.backward(loss)?;
        let mut analytic: Vec<f64> = rf
            .target_param_ids
            .iter()
            .flat_map(|&id| tape.grad(id).data().to_vec())
            .collect();
        let mut point = {
            let mut params: Vec<&mut ParamTensor> = target.params_mut().collect();
            flatten(&mut params)
        };
        for (_, _, ids) in &rf.route_bindings {
            analytic.extend(ids.iter().flat_map(|&id| tape.grad(id).data().to_vec()));
        }
        if !rf.route_bindings.is_empty() {
            let (layer, act, _) = &rf.route_bindings[0];
            let entry = store.get_or_init(*layer, *act, 4, 4)?;
            let mut params = entry.params_mut();
            point.extend(flatten(&mut params));
        }
        (analytic, point)
    };

    let n_target: usize = {
        let mut params: Vec<&mut ParamTensor> = target.params_mut().collect();
        flatten(&mut params).len()
    };
    let report = grad_check(
        |flat| {
            {
                let mut params: Vec<&mut ParamTensor> = target.params_mut().collect();
                assign(&mut params, &flat[..n_target]);
            }
            if flat.len() > n_target {
                let entry = store.get_or_init(0, action, 4, 4).unwrap();
                let mut params = entry.params_mut();
                assign(&mut params, &flat[n_target..]);
            }
            let mut tape = Tape::new();
            let (loss, _) = forward(&target, &mut store, &mut tape);
            tape.value(loss).item()
        },
        &analytic,
        &point,
        GRAD_EPS,
    );
    Ok((report.max_rel_err, report.checked))
}

/// Run every gradient path over `n_seeds` random initializations and report
/// the worst relative error per path.
pub fn run_grad_suite(n_seeds: u64) -> Result<Vec<GradPathReport>> {
    let mut reports = Vec::new();
    let mut push = |name: &str, f: &mut dyn FnMut(u64) -> Result<(f64, usize)>| -> Result<()> {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 1..=n_seeds {
            let (err, n) = f(seed)?;
            worst = worst.max(err);
            checked += n;
        }
        reports.push(GradPathReport { name: name.into(), max_rel_err: worst, checked });
        Ok(())
    };
    push("dense_tanh", &mut dense_path)?;
    push("transform_train", &mut |s| transform_path(s, true))?;
    push("transform_eval", &mut |s| transform_path(s, false))?;
    for op in AggOp::ALL {
        push(&format!("routed_{}", op.name()), &mut |s| routed_path(s, op))?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_paths_pass_at_tolerance() {
        for r in run_grad_suite(3).unwrap() {
            assert!(r.max_rel_err < GRAD_TOL, "{}: {}", r.name, r.max_rel_err);
            assert!(r.checked > 0);
        }
    }
}
