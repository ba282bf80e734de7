//! Representation routing: the action space over (source layer, aggregation
//! operator), the source-feature transform, and the routed forward pass that
//! swaps combined representations into the target network.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numgrad::{LayeredNet, ParamTensor, SgdConfig, Tape, Tensor, VarId};

/// Aggregation operator combining a transformed source representation with
/// the target representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AggOp {
    Iden,
    SAdd,
    WAdd,
    LinComb,
    Fm,
    FactRed,
}

impl AggOp {
    pub const ALL: [AggOp; 6] = [
        AggOp::Iden,
        AggOp::SAdd,
        AggOp::WAdd,
        AggOp::LinComb,
        AggOp::Fm,
        AggOp::FactRed,
    ];

    /// Default bandit-selectable set (FM is opt-in).
    pub const DEFAULT_SET: [AggOp; 5] = [
        AggOp::Iden,
        AggOp::SAdd,
        AggOp::WAdd,
        AggOp::LinComb,
        AggOp::FactRed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggOp::Iden => "iden",
            AggOp::SAdd => "sadd",
            AggOp::WAdd => "wadd",
            AggOp::LinComb => "lincomb",
            AggOp::Fm => "fm",
            AggOp::FactRed => "factred",
        }
    }

    pub fn parse(s: &str) -> Result<AggOp> {
        AggOp::ALL
            .iter()
            .find(|op| op.name() == s)
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown aggregation operator '{s}'")))
    }
}

/// One element of the routing choice set. NULL is canonical: there is exactly
/// one NULL arm regardless of operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoutingAction {
    Null,
    Route { source: usize, op: AggOp },
}

impl RoutingAction {
    pub fn label(&self) -> String {
        match self {
            RoutingAction::Null => "null".into(),
            RoutingAction::Route { source, op } => format!("{}:{}", source, op.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    Full,
    Route,
}

/// Build the per-target-layer action space. FactRed arms are excluded when
/// the target width is odd; the bandit must not sample unusable arms.
pub fn build_action_space(
    n_sources: usize,
    mode: RouteMode,
    ops: &[AggOp],
    target_dim: usize,
) -> Result<Vec<RoutingAction>> {
    if n_sources < 1 {
        return Err(Error::Config("need at least one source tap".into()));
    }
    let mut actions = vec![RoutingAction::Null];
    let selected: Vec<AggOp> = match mode {
        RouteMode::Route => vec![AggOp::WAdd],
        RouteMode::Full => ops.to_vec(),
    };
    for j in 0..n_sources {
        for &op in &selected {
            if op == AggOp::FactRed && target_dim % 2 != 0 {
                continue;
            }
            actions.push(RoutingAction::Route { source: j, op });
        }
    }
    Ok(actions)
}

/// Bias-free dense map plus 1-D batch normalization, adapting a source
/// representation's width and statistics to the target layer.
#[derive(Debug, Clone)]
pub struct SourceTransform {
    pub dense: ParamTensor,
    pub bn_gamma: ParamTensor,
    pub bn_beta: ParamTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl SourceTransform {
    pub fn new(source_dim: usize, target_dim: usize, bn_momentum: f64, bn_eps: f64, rng: &mut ChaCha8Rng) -> Self {
        SourceTransform {
            dense: ParamTensor::uniform_fan_in(source_dim, target_dim, source_dim, rng),
            bn_gamma: ParamTensor::new(Tensor::from_fn(1, target_dim, |_, _| 1.0)),
            bn_beta: ParamTensor::new(Tensor::zeros(1, target_dim)),
            running_mean: vec![0.0; target_dim],
            running_var: vec![1.0; target_dim],
            bn_momentum,
            bn_eps,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.dense.value.rows()
    }

    pub fn target_dim(&self) -> usize {
        self.dense.value.cols()
    }

    /// BN(dense(f_s)). In training mode uses batch statistics (biased
    /// variance, eps-guarded so batch size 1 is tolerated) and updates the
    /// running statistics; in evaluation mode uses running statistics.
    /// Trainable parameter ids are pushed only when `collect` is given.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        f_s: VarId,
        training: bool,
        collect: Option<&mut Vec<VarId>>,
    ) -> Result<VarId> {
        let trainable = collect.is_some();
        let mut sink = Vec::new();
        let ids: &mut Vec<VarId> = match collect {
            Some(v) => v,
            None => &mut sink,
        };
        let w = self.dense.bind(tape, trainable);
        let gamma = self.bn_gamma.bind(tape, trainable);
        let beta = self.bn_beta.bind(tape, trainable);
        if trainable {
            ids.push(w);
            ids.push(gamma);
            ids.push(beta);
        }
        let h = tape.matmul(f_s, w)?;
        let (mean, var, batch_stats) = if training {
            let v = tape.value(h);
            let (b, c) = v.shape();
            let bf = b as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for r in 0..b {
                for j in 0..c {
                    mean[j] += v.at(r, j);
                }
            }
            for m in mean.iter_mut() {
                *m /= bf;
            }
            for r in 0..b {
                for j in 0..c {
                    let d = v.at(r, j) - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= bf;
            }
            let m = self.bn_momentum;
            for j in 0..c {
                self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
                self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j];
            }
            (mean, var, true)
        } else {
            (self.running_mean.clone(), self.running_var.clone(), false)
        };
        tape.batch_norm(h, gamma, beta, mean, var, self.bn_eps, batch_stats)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        [&mut self.dense, &mut self.bn_gamma, &mut self.bn_beta].into_iter()
    }
}

/// Trainable parameters of an aggregation operator.
#[derive(Debug, Clone)]
pub enum OpParams {
    None,
    WAdd { w_s: ParamTensor, w_t: ParamTensor },
    LinComb { lin_s: ParamTensor, lin_t: ParamTensor },
    FactRed { dense_s: ParamTensor, dense_t: ParamTensor },
}

impl OpParams {
    fn new(op: AggOp, target_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match op {
            AggOp::Iden | AggOp::SAdd | AggOp::Fm => OpParams::None,
            AggOp::WAdd => OpParams::WAdd {
                w_s: ParamTensor::new(Tensor::scalar(0.0)),
                w_t: ParamTensor::new(Tensor::scalar(1.0)),
            },
            AggOp::LinComb => OpParams::LinComb {
                lin_s: ParamTensor::uniform_fan_in(1, 1, 1, rng),
                lin_t: ParamTensor::uniform_fan_in(1, 1, 1, rng),
            },
            AggOp::FactRed => {
                if target_dim % 2 != 0 {
                    return Err(Error::Config(format!(
                        "factorized reduce needs an even width, got {target_dim}"
                    )));
                }
                let half = target_dim / 2;
                OpParams::FactRed {
                    dense_s: ParamTensor::uniform_fan_in(target_dim, half, target_dim, rng),
                    dense_t: ParamTensor::uniform_fan_in(target_dim, half, target_dim, rng),
                }
            }
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            OpParams::None => vec![],
            OpParams::WAdd { w_s, w_t } => vec![w_s, w_t],
            OpParams::LinComb { lin_s, lin_t } => vec![lin_s, lin_t],
            OpParams::FactRed { dense_s, dense_t } => vec![dense_s, dense_t],
        }
    }
}

/// Parameters attached to one (target layer, action) entry.
#[derive(Debug, Clone)]
pub struct RouteParams {
    pub transform: SourceTransform,
    pub op: OpParams,
}

impl RouteParams {
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = self.transform.params_mut().collect();
        v.extend(self.op.params_mut());
        v
    }
}

/// Lazily-initialized trainable parameters keyed by (target layer, action).
/// Entry seeds are derived from the base seed and the key, so initialization
/// does not depend on the order in which arms are first selected.
#[derive(Debug, Clone)]
pub struct RouteParamStore {
    pub base_seed: u64,
    pub fm_weight: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    entries: BTreeMap<(usize, RoutingAction), RouteParams>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl RouteParamStore {
    pub fn new(base_seed: u64, fm_weight: f64) -> Self {
        RouteParamStore {
            base_seed,
            fm_weight,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            entries: BTreeMap::new(),
        }
    }

    fn entry_seed(&self, layer: usize, action: &RoutingAction) -> u64 {
        let tag = match action {
            RoutingAction::Null => 0u64,
            RoutingAction::Route { source, op } => {
                1 + (*source as u64) * 16 + AggOp::ALL.iter().position(|o| o == op).unwrap() as u64
            }
        };
        splitmix64(self.base_seed ^ splitmix64((layer as u64) << 32 | tag))
    }

    pub fn get_or_init(
        &mut self,
        layer: usize,
        action: RoutingAction,
        source_dim: usize,
        target_dim: usize,
    ) -> Result<&mut RouteParams> {
        let (bn_momentum, bn_eps) = (self.bn_momentum, self.bn_eps);
        let seed = self.entry_seed(layer, &action);
        let entry = self.entries.entry((layer, action));
        use std::collections::btree_map::Entry;
        match entry {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(v) => {
                let op = match action {
                    RoutingAction::Null => {
                        return Err(Error::State("NULL action has no parameters".into()))
                    }
                    RoutingAction::Route { op, .. } => op,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = RouteParams {
                    transform: SourceTransform::new(source_dim, target_dim, bn_momentum, bn_eps, &mut rng),
                    op: OpParams::new(op, target_dim, &mut rng)?,
                };
                Ok(v.insert(params))
            }
        }
    }

    pub fn get(&self, layer: usize, action: &RoutingAction) -> Option<&RouteParams> {
        self.entries.get(&(layer, *action))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, RoutingAction), &RouteParams)> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&(usize, RoutingAction), &mut RouteParams)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, layer: usize, action: RoutingAction, params: RouteParams) {
        self.entries.insert((layer, action), params);
    }
}

/// Result of one routed forward pass: the final representation, accumulated
/// FM regularization, and the parameter bindings needed for the update step.
pub struct RoutedForward {
    pub output: VarId,
    pub extra_loss: Option<VarId>,
    pub target_param_ids: Vec<VarId>,
    /// (layer, action, bound ids) for every routed layer that trained params.
    pub route_bindings: Vec<(usize, RoutingAction, Vec<VarId>)>,
}

/// Apply one aggregation. `tf_s` is the transformed source representation
/// (already target-width), `f_t` the target representation at the layer.
fn aggregate(
    tape: &mut Tape,
    op: AggOp,
    params: &RouteParams,
    tf_s: VarId,
    f_t: VarId,
    fm_weight: f64,
    trainable: bool,
    ids: &mut Vec<VarId>,
) -> Result<(VarId, Option<VarId>)> {
    match (op, &params.op) {
        (AggOp::Iden, _) => Ok((f_t, None)),
        (AggOp::SAdd, _) => Ok((tape.add(tf_s, f_t)?, None)),
        (AggOp::WAdd, OpParams::WAdd { w_s, w_t }) => {
            let ws = w_s.bind(tape, trainable);
            let wt = w_t.bind(tape, trainable);
            if trainable {
                ids.push(ws);
                ids.push(wt);
            }
            let a = tape.scalar_mul(ws, tf_s)?;
            let b = tape.scalar_mul(wt, f_t)?;
            Ok((tape.add(a, b)?, None))
        }
        (AggOp::LinComb, OpParams::LinComb { lin_s, lin_t }) => {
            let ls = lin_s.bind(tape, trainable);
            let lt = lin_t.bind(tape, trainable);
            if trainable {
                ids.push(ls);
                ids.push(lt);
            }
            let pool_s = tape.mean_rows(tf_s);
            let pool_t = tape.mean_rows(f_t);
            let gate_s = tape.scalar_mul(ls, pool_s)?;
            let gate_t = tape.scalar_mul(lt, pool_t)?;
            let a = tape.row_gate_mul(gate_s, tf_s)?;
            let b = tape.row_gate_mul(gate_t, f_t)?;
            Ok((tape.add(a, b)?, None))
        }
        (AggOp::Fm, _) => {
            let extra = tape.fm_loss(tf_s, f_t, fm_weight)?;
            Ok((f_t, Some(extra)))
        }
        (AggOp::FactRed, OpParams::FactRed { dense_s, dense_t }) => {
            let ds = dense_s.bind(tape, trainable);
            let dt = dense_t.bind(tape, trainable);
            if trainable {
                ids.push(ds);
                ids.push(dt);
            }
            let a = tape.matmul(tf_s, ds)?;
            let b = tape.matmul(f_t, dt)?;
            Ok((tape.concat_cols(a, b)?, None))
        }
        (op, other) => Err(Error::State(format!(
            "operator {:?} paired with mismatched parameters {:?}",
            op,
            std::mem::discriminant(other)
        ))),
    }
}

/// Forward the target network with per-layer routing actions applied at its
/// internal taps. The source network is run once (frozen, no gradients) and
/// its taps cached; the final target representation is never replaced.
pub fn routed_forward(
    tape: &mut Tape,
    source: Option<&LayeredNet>,
    target: &LayeredNet,
    actions: &[RoutingAction],
    store: &mut RouteParamStore,
    x: VarId,
    training: bool,
) -> Result<RoutedForward> {
    let n_routed = target.tap_indices.len();
    if actions.len() != n_routed {
        return Err(Error::Config(format!(
            "expected {n_routed} actions (one per routed target layer), got {}",
            actions.len()
        )));
    }
    let source_taps: Vec<VarId> = match source {
        Some(s) => {
            let (_, taps, _) = s.forward(tape, x)?;
            taps
        }
        None => Vec::new(),
    };
    let source_dims: Vec<usize> = source.map(|s| s.tap_dims()).unwrap_or_default();
    let target_dims = target.tap_dims();

    let mut target_param_ids = Vec::new();
    let mut route_bindings = Vec::new();
    let mut extra_loss: Option<VarId> = None;
    let mut h = x;
    let mut tap_pos = 0usize;
    for (k, block) in target.blocks.iter().enumerate() {
        h = block.forward(tape, h, target.trainable, &mut target_param_ids, k)?;
        if target.tap_indices.contains(&k) {
            let action = actions[tap_pos];
            if let RoutingAction::Route { source: j, op } = action {
                if j >= source_taps.len() {
                    return Err(Error::Config(format!(
                        "routing (layer {tap_pos}, source {j}): source has only {} taps",
                        source_taps.len()
                    )));
                }
                let fm_weight = store.fm_weight;
                let params =
                    store.get_or_init(tap_pos, action, source_dims[j], target_dims[tap_pos])?;
                let mut ids = Vec::new();
                // Iden detaches the source branch: the transform is evaluated
                // for parity but neither trains nor updates running stats.
                let op_trainable = training && op != AggOp::Iden;
                let tf_s = params.transform.forward(
                    tape,
                    source_taps[j],
                    op_trainable,
                    if op_trainable { Some(&mut ids) } else { None },
                )?;
                let (combined, extra) =
                    aggregate(tape, op, params, tf_s, h, fm_weight, op_trainable, &mut ids)?;
                h = combined;
                if let Some(e) = extra {
                    extra_loss = Some(match extra_loss {
                        Some(acc) => tape.add(acc, e)?,
                        None => e,
                    });
                }
                if !ids.is_empty() {
                    route_bindings.push((tap_pos, action, ids));
                }
            }
            tap_pos += 1;
        }
    }
    Ok(RoutedForward {
        output: h,
        extra_loss,
        target_param_ids,
        route_bindings,
    })
}

/// Apply gradients to the route-parameter entries bound by a forward pass.
pub fn apply_route_grads(
    store: &mut RouteParamStore,
    tape: &Tape,
    bindings: &[(usize, RoutingAction, Vec<VarId>)],
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    for (layer, action, ids) in bindings {
        let entry = store
            .entries
            .get_mut(&(*layer, *action))
            .ok_or_else(|| Error::State("binding for uninitialized route entry".into()))?;
        let params = entry.params_mut();
        if params.len() != ids.len() {
            return Err(Error::State(format!(
                "route entry {layer}/{} has {} params but {} bindings",
                action.label(),
                params.len(),
                ids.len()
            )));
        }
        for (p, id) in params.into_iter().zip(ids) {
            p.apply_grad(&tape.grad(*id), cfg, lr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Activation;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn action_space_counts() {
        // N=3, route -> K=4
        let a = build_action_space(3, RouteMode::Route, &AggOp::DEFAULT_SET, 16).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a[0], RoutingAction::Null);
        // N=3, full with 5 ops -> K=16
        let a = build_action_space(3, RouteMode::Full, &AggOp::DEFAULT_SET, 16).unwrap();
        assert_eq!(a.len(), 16);
        // N=4, |ops|=5 -> K=21
        let a = build_action_space(4, RouteMode::Full, &AggOp::DEFAULT_SET, 16).unwrap();
        assert_eq!(a.len(), 21);
    }

    #[test]
    fn odd_width_excludes_factred() {
        let a = build_action_space(2, RouteMode::Full, &AggOp::DEFAULT_SET, 7).unwrap();
        assert!(a.iter().all(|act| !matches!(
            act,
            RoutingAction::Route { op: AggOp::FactRed, .. }
        )));
        assert_eq!(a.len(), 1 + 2 * 4);
    }

    #[test]
    fn transform_identity_conditions() {
        // dense=I, gamma=1, beta=0, zero-mean unit-var batch -> output ~ input
        let mut t = SourceTransform::new(2, 2, 0.1, 1e-5, &mut rng(0));
        t.dense = ParamTensor::new(Tensor::identity(2));
        let mut tape = Tape::new();
        // columns with mean 0 and biased variance 1
        let x = tape.constant(Tensor::from_vec(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap());
        let y = t.forward(&mut tape, x, true, None).unwrap();
        let v = tape.value(y);
        for (a, b) in v.data().iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn transform_gamma_zero_yields_beta() {
        let mut t = SourceTransform::new(3, 2, 0.1, 1e-5, &mut rng(1));
        t.bn_gamma = ParamTensor::new(Tensor::zeros(1, 2));
        t.bn_beta = ParamTensor::new(Tensor::from_vec(1, 2, vec![0.7, -0.3]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(4, 3, |r, c| (r + c) as f64));
        let y = t.forward(&mut tape, x, true, None).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            assert!((v.at(r, 0) - 0.7).abs() < 1e-12);
            assert!((v.at(r, 1) + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update_only_in_training() {
        let mut t = SourceTransform::new(2, 2, 0.1, 1e-5, &mut rng(2));
        let before = t.running_mean.clone();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        t.forward(&mut tape, x, false, None).unwrap();
        assert_eq!(before, t.running_mean);
        t.forward(&mut tape, x, true, None).unwrap();
        assert_ne!(before, t.running_mean);
    }

    fn toy_nets(seed: u64) -> (LayeredNet, LayeredNet) {
        let mut r = rng(seed);
        let source = LayeredNet::chain(&[1, 6, 6, 6, 1], Activation::Tanh, false, &mut r);
        let target = LayeredNet::chain(&[1, 4, 4, 4, 1], Activation::Tanh, true, &mut r);
        (source, target)
    }

    #[test]
    fn null_equivalence_is_bitwise() {
        let (source, target) = toy_nets(3);
        let x = Tensor::from_fn(8, 1, |r, _| 0.25 * r as f64 - 1.0);
        let mut store = RouteParamStore::new(0, 0.5);

        let mut tape1 = Tape::new();
        let x1 = tape1.constant(x.clone());
        let (plain, _, _) = target.forward(&mut tape1, x1).unwrap();

        let mut tape2 = Tape::new();
        let x2 = tape2.constant(x);
        let actions = vec![RoutingAction::Null; 3];
        let rf = routed_forward(&mut tape2, Some(&source), &target, &actions, &mut store, x2, true)
            .unwrap();
        assert_eq!(tape1.value(plain), tape2.value(rf.output));
        assert!(rf.extra_loss.is_none());
        assert!(store.is_empty());
    }

    #[test]
    fn wadd_identity_weights() {
        // w_s=0, w_t=1 -> output = f_t exactly
        let (source, target) = toy_nets(4);
        let x = Tensor::from_fn(5, 1, |r, _| r as f64 * 0.1);
        let mut store = RouteParamStore::new(0, 0.5);
        let action = RoutingAction::Route { source: 0, op: AggOp::WAdd };
        {
            let e = store.get_or_init(0, action, 6, 4).unwrap();
            if let OpParams::WAdd { w_s, w_t } = &mut e.op {
                w_s.value = Tensor::scalar(0.0);
                w_t.value = Tensor::scalar(1.0);
            }
        }
        let mut actions = vec![RoutingAction::Null; 3];
        actions[0] = action;

        let mut tape1 = Tape::new();
        let x1 = tape1.constant(x.clone());
        let (plain, _, _) = target.forward(&mut tape1, x1).unwrap();

        let mut tape2 = Tape::new();
        let x2 = tape2.constant(x);
        let rf = routed_forward(&mut tape2, Some(&source), &target, &actions, &mut store, x2, false)
            .unwrap();
        let a = tape1.value(plain);
        let b = tape2.value(rf.output);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn factred_selector_matrices() {
        // hand-built selector maps: output = [tf_s[0:2] || f_t[0:2]]
        let mut store = RouteParamStore::new(0, 0.5);
        let action = RoutingAction::Route { source: 0, op: AggOp::FactRed };
        let d = 4usize;
        {
            let e = store.get_or_init(0, action, d, d).unwrap();
            // make the transform the identity in eval mode
            e.transform.dense = ParamTensor::new(Tensor::identity(d));
            e.transform.running_mean = vec![0.0; d];
            e.transform.running_var = vec![1.0 - 1e-5; d]; // cancels eps exactly
            if let OpParams::FactRed { dense_s, dense_t } = &mut e.op {
                let sel = Tensor::from_fn(d, 2, |r, c| if r == c { 1.0 } else { 0.0 });
                dense_s.value = sel.clone();
                dense_t.value = sel;
            }
        }
        let mut tape = Tape::new();
        let tf_s_in = tape.constant(Tensor::from_vec(1, d, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f_t = tape.constant(Tensor::from_vec(1, d, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let fm_weight = store.fm_weight;
        let params = store.get_or_init(0, action, d, d).unwrap();
        let mut ids = Vec::new();
        let tf_s = params.transform.forward(&mut tape, tf_s_in, false, None).unwrap();
        let (out, _) =
            aggregate(&mut tape, AggOp::FactRed, params, tf_s, f_t, fm_weight, false, &mut ids)
                .unwrap();
        let v = tape.value(out);
        for (a, b) in v.data().iter().zip([1.0, 2.0, 5.0, 6.0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sadd_with_zero_source_is_target() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 3));
        let f_t = tape.constant(Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let out = tape.add(z, f_t).unwrap();
        assert_eq!(tape.value(out), tape.value(f_t));
    }

    #[test]
    fn gradient_isolation_from_source() {
        let (source, target) = toy_nets(5);
        let checksum = source.checksum();
        let x = Tensor::from_fn(6, 1, |r, _| 0.2 * r as f64 - 0.5);
        let mut store = RouteParamStore::new(1, 0.5);
        for op in AggOp::ALL {
            let mut actions = vec![RoutingAction::Null; 3];
            actions[1] = RoutingAction::Route { source: 2, op };
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let rf =
                routed_forward(&mut tape, Some(&source), &target, &actions, &mut store, xid, true)
                    .unwrap();
            let mut loss = tape.mse_loss(rf.output, &Tensor::zeros(6, 1)).unwrap();
            if let Some(e) = rf.extra_loss {
                loss = tape.add(loss, e).unwrap();
            }
            tape.backward(loss).unwrap();
            // target received gradient, source parameters untouched
            assert!(rf.target_param_ids.iter().any(|&id| tape
                .grad(id)
                .data()
                .iter()
                .any(|&g| g != 0.0)));
        }
        assert_eq!(checksum, source.checksum());
    }

    #[test]
    fn lazy_init_is_order_independent() {
        let action_a = RoutingAction::Route { source: 0, op: AggOp::WAdd };
        let action_b = RoutingAction::Route { source: 1, op: AggOp::SAdd };
        let mut s1 = RouteParamStore::new(77, 0.5);
        let mut s2 = RouteParamStore::new(77, 0.5);
        s1.get_or_init(0, action_a, 6, 4).unwrap();
        s1.get_or_init(0, action_b, 6, 4).unwrap();
        s2.get_or_init(0, action_b, 6, 4).unwrap();
        s2.get_or_init(0, action_a, 6, 4).unwrap();
        let a1 = s1.get(0, &action_a).unwrap().transform.dense.value.clone();
        let a2 = s2.get(0, &action_a).unwrap().transform.dense.value.clone();
        assert_eq!(a1, a2);
    }

    #[test]
    fn store_roundtrip_after_training_other_arm() {
        // select a, train it, select b, re-select a: a's parameters persist
        let action_a = RoutingAction::Route { source: 0, op: AggOp::WAdd };
        let action_b = RoutingAction::Route { source: 0, op: AggOp::SAdd };
        let mut store = RouteParamStore::new(9, 0.5);
        store.get_or_init(0, action_a, 6, 4).unwrap();
        let snapshot = store.get(0, &action_a).unwrap().transform.dense.value.clone();
        {
            let e = store.get_or_init(0, action_b, 6, 4).unwrap();
            e.transform.dense.value.data_mut()[0] += 1.0;
        }
        let back = store.get_or_init(0, action_a, 6, 4).unwrap();
        assert_eq!(snapshot, back.transform.dense.value);
    }

    #[test]
    fn wadd_weights_receive_nonzero_gradients() {
        let (source, target) = toy_nets(6);
        let x = Tensor::from_fn(6, 1, |r, _| 0.3 * r as f64 - 0.7);
        let mut store = RouteParamStore::new(2, 0.5);
        let mut actions = vec![RoutingAction::Null; 3];
        actions[0] = RoutingAction::Route { source: 0, op: AggOp::WAdd };
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let rf = routed_forward(&mut tape, Some(&source), &target, &actions, &mut store, xid, true)
            .unwrap();
        let loss = tape.mse_loss(rf.output, &Tensor::from_fn(6, 1, |r, _| r as f64)).unwrap();
        tape.backward(loss).unwrap();
        let (_, _, ids) = &rf.route_bindings[0];
        // last two bindings are w_s, w_t
        let n = ids.len();
        assert!(tape.grad(ids[n - 2]).item() != 0.0);
        assert!(tape.grad(ids[n - 1]).item() != 0.0);
    }
}
