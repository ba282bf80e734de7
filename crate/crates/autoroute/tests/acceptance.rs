//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The pretrained source network is shared across tests; the first test that
//! needs it pays the pretraining cost once.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use autoroute::bandit::{direct_update_oracle, BanditState};
use autoroute::checkpoint::SourceCheckpoint;
use autoroute::config::ExperimentConfig;
use autoroute::harness::{
    self,
    gradsuite::{run_grad_suite, GRAD_TOL},
    run_experiment_with, ABLATION_OPS,
};
use autoroute::numgrad::{Activation, LayeredNet, SgdConfig, Tape, Tensor};
use autoroute::routing::{routed_forward, AggOp, RouteParamStore, RoutingAction};
use autoroute::transfer::{Dataset, GainMode, Mode, RewardScale, RunSpec, TransferRun};

fn source() -> &'static SourceCheckpoint {
    static SOURCE: OnceLock<SourceCheckpoint> = OnceLock::new();
    SOURCE.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        harness::pretrain_source(&cfg).expect("source pretraining")
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn report(criterion: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("{criterion}: {status} — {detail}");
    assert!(pass, "{criterion}: FAIL — {detail}");
}

#[test]
fn criterion_01_toy_reproduction() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let src = source();
    let mut med = |mode: &str| {
        cfg.mode = mode.into();
        let source = if mode == "scratch" { None } else { Some(src) };
        let finals: Vec<f64> = [1u64, 2, 3]
            .iter()
            .map(|&s| {
                cfg.seed = s;
                run_experiment_with(&cfg, source, None, None)
                    .unwrap()
                    .manifest
                    .final_test_mse
            })
            .collect();
        median(finals)
    };
    let scratch = med("scratch");
    let fixed = med("fixed");
    let route = med("route");
    let detail = format!(
        "median test MSE scratch {scratch:.5} fixed {fixed:.5} route {route:.5} (bar 0.02, transfer bar {:.5})",
        1.1 * scratch
    );
    let pass = scratch <= 0.02
        && fixed <= 0.02
        && route <= 0.02
        && fixed <= 1.1 * scratch
        && route <= 1.1 * scratch;
    report("criterion 1 (toy reproduction)", pass, &detail);
}

#[test]
fn criterion_02_gradient_suite() {
    let reports = run_grad_suite(20).unwrap();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .unwrap();
    let pass = reports.iter().all(|r| r.max_rel_err < GRAD_TOL && r.checked > 0);
    let detail = format!(
        "{} paths x 20 seeds, worst {} at {:.3e} (tol {GRAD_TOL:.0e})",
        reports.len(),
        worst.name,
        worst.max_rel_err
    );
    report("criterion 2 (gradient suite)", pass, &detail);
}

/// Build a state with chosen weights and estimates through the documented
/// checkpoint layout.
fn state_from_parts(w: &[f64], r_tilde: &[f64], beta: f64, gamma: f64) -> BanditState {
    let k = w.len();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"ATBD");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(k as u64).to_le_bytes());
    bytes.extend_from_slice(&1u64.to_le_bytes());
    bytes.extend_from_slice(&beta.to_le_bytes());
    bytes.extend_from_slice(&gamma.to_le_bytes());
    for arr in [w, r_tilde] {
        for v in arr {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for _ in 0..k {
        bytes.extend_from_slice(&(1.0 / k as f64).to_le_bytes());
    }
    BanditState::from_bytes(&bytes).unwrap()
}

#[test]
fn criterion_03_bandit_invariants() {
    // 1000-round fuzz: distribution invariants after every update
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, beta) = (6, 0.4);
    let mut s = BanditState::new(k, beta, 1e-2).unwrap();
    let floor = beta / k as f64;
    let mut worst_sum = 0.0f64;
    for t in 1..=1000u64 {
        s.update_weights(BanditState::alpha_schedule(t)).unwrap();
        let sum: f64 = s.pi().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        assert!((sum - 1.0).abs() <= 1e-12, "round {t}: sum {sum}");
        for &p in s.pi() {
            assert!(p >= floor, "round {t}: pi {p} below {floor}");
        }
        let a = s.sample_action(&mut rng);
        s.record_reward(a, rng.gen_range(-1.0..=1.0)).unwrap();
    }
    // 500 random small states: log-sum-exp vs direct formula
    let mut worst_err = 0.0f64;
    for _ in 0..500 {
        let k = rng.gen_range(2..=8usize);
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let rt: Vec<f64> = (0..k).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let gamma = rng.gen_range(1e-4..1.0);
        let alpha = rng.gen_range(0.0..=1.0);
        let want = direct_update_oracle(&w, &rt, gamma, alpha);
        let mut s = state_from_parts(&w, &rt, 0.4, gamma);
        s.update_weights(alpha).unwrap();
        for (got, want) in s.weights().iter().zip(&want) {
            worst_err = worst_err.max((got - want).abs());
        }
    }
    let pass = worst_err < 1e-10;
    let detail = format!(
        "1000-round fuzz worst |sum-1| {worst_sum:.2e}; oracle gap {worst_err:.2e} over 500 states"
    );
    report("criterion 3 (bandit invariants)", pass, &detail);
}

#[test]
fn criterion_04_estimator_unbiasedness() {
    // drive pi off-uniform, then freeze it and Monte-Carlo the estimator
    let k = 4;
    let mut s = BanditState::new(k, 0.4, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 1..=20u64 {
        s.update_weights(BanditState::alpha_schedule(t)).unwrap();
        let a = s.sample_action(&mut rng);
        s.record_reward(a, if a == 0 { 0.9 } else { -0.2 }).unwrap();
    }
    s.update_weights(0.05).unwrap();
    let truth = [0.8, -0.5, 0.3, 0.1];
    let n = 100_000usize;
    let mut sums = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let a = s.sample_action(&mut rng);
        s.record_reward(a, truth[a]).unwrap();
        for p in 0..k {
            let est = s.r_tilde()[p];
            sums[p] += est;
            sq[p] += est * est;
        }
    }
    let mut worst_z = 0.0f64;
    for p in 0..k {
        let mean = sums[p] / n as f64;
        let var = sq[p] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        worst_z = worst_z.max((mean - truth[p]).abs() / se);
    }
    let pass = worst_z < 3.0;
    let detail = format!("10^5 rounds, worst arm deviation {worst_z:.2} standard errors (bar 3)");
    report("criterion 4 (estimator unbiasedness)", pass, &detail);
}

#[test]
fn criterion_05_stationary_convergence() {
    let mut passes = 0;
    let mut freqs = Vec::new();
    for seed in 0..5u64 {
        let mut s = BanditState::new(5, 0.1, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0;
        for t in 1..=500u64 {
            s.update_weights(BanditState::alpha_schedule(t)).unwrap();
            let a = s.sample_action(&mut rng);
            if t > 300 && a == 0 {
                hits += 1;
            }
            s.record_reward(a, if a == 0 { 1.0 } else { 0.0 }).unwrap();
        }
        let f = hits as f64 / 200.0;
        freqs.push(format!("{f:.2}"));
        if f > 0.7 {
            passes += 1;
        }
    }
    let pass = passes >= 4;
    let detail = format!("best-arm frequency over rounds 300-500: [{}], {passes}/5 > 0.7", freqs.join(", "));
    report("criterion 5 (stationary convergence)", pass, &detail);
}

#[test]
fn criterion_06_null_equivalence() {
    // bitwise forward equality on 100 random inputs
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src_net = LayeredNet::chain(&[1, 64, 64, 64, 1], Activation::Tanh, false, &mut rng);
    let target = LayeredNet::chain(&[1, 16, 16, 16, 1], Activation::Tanh, true, &mut rng);
    let mut store = RouteParamStore::new(5, 0.5);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let x = Tensor::from_fn(100, 1, |_, _| normal.sample(&mut rng));
    let actions = vec![RoutingAction::Null; 3];
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let rf = routed_forward(&mut tape, Some(&src_net), &target, &actions, &mut store, xid, true).unwrap();
    let routed = tape.value(rf.output).clone();
    let mut plain = Tape::new();
    let xid = plain.constant(x);
    let (out, _, _) = target.forward(&mut plain, xid).unwrap();
    let bitwise = &routed == plain.value(out);

    // scratch and all-NULL transfer: identical training trajectories
    let mut cfg = ExperimentConfig::default();
    cfg.target_train = 300;
    cfg.epochs = 10;
    cfg.mode = "scratch".into();
    let mut a = harness::build_run(&cfg, None, None).unwrap();
    let ha = a.run(|_| Ok(())).unwrap();
    cfg.mode = "fixed".into();
    cfg.fixed_pairs = String::new();
    let mut b = harness::build_run(&cfg, Some(source().net.clone()), None).unwrap();
    let hb = b.run(|_| Ok(())).unwrap();
    let traj = ha.len() == hb.len()
        && ha.iter().zip(&hb).all(|(x, y)| {
            x.train_loss == y.train_loss
                && x.holdout_loss == y.holdout_loss
                && x.test_mse == y.test_mse
        })
        && a.target.checksum() == b.target.checksum();
    let pass = bitwise && traj;
    let detail = format!(
        "all-NULL forward bitwise equal: {bitwise}; scratch vs all-NULL trajectories identical: {traj}"
    );
    report("criterion 6 (NULL equivalence)", pass, &detail);
}

#[test]
fn criterion_07_synthetic_credit_assignment() {
    // the target task is the output of a frozen random net, so routing that
    // net's deepest tap is perfectly informative by construction
    let mut passes = 0;
    let mut pis = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let src_net = LayeredNet::chain(&[1, 8, 8, 1], Activation::Tanh, false, &mut rng);
        let label = |x: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let (out, _, _) = src_net.forward(&mut tape, xid).unwrap();
            tape.value(out).clone()
        };
        let normal = Normal::new(0.0, 3.0).unwrap();
        let mut gen = |n: usize| {
            let x = Tensor::from_fn(n, 1, |_, _| normal.sample(&mut rng));
            let y = label(&x);
            Dataset { x, y }
        };
        let train = gen(400);
        let holdout = gen(100);
        let test = gen(100);
        let target = LayeredNet::chain(&[1, 8, 8, 1], Activation::Tanh, true, &mut rng);
        let spec = RunSpec {
            mode: Mode::Route,
            epochs: 30,
            batch_size: 32,
            opt: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 },
            beta: 0.4,
            gamma: 0.2,
            reward_scale: RewardScale::RunningMax,
            gain_mode: GainMode::PerLayer,
            fm_weight: 0.5,
            full_ops: vec![AggOp::WAdd],
            fixed_pairs: vec![],
            fixed_op: AggOp::WAdd,
            seed,
        };
        let mut run = TransferRun::new(spec, Some(src_net), target, train, holdout, test).unwrap();
        let informative = run
            .action_space
            .iter()
            .position(|a| matches!(a, RoutingAction::Route { source: 1, .. }))
            .unwrap();
        let k = run.action_space.len() as f64;
        let history = run.run(|_| Ok(())).unwrap();
        let last = history.last().unwrap();
        let best = last
            .pis
            .iter()
            .map(|pi| pi[informative])
            .fold(f64::NEG_INFINITY, f64::max);
        pis.push(format!("{best:.3}"));
        if best > 1.0 / k {
            passes += 1;
        }
    }
    let pass = passes >= 4;
    let detail = format!(
        "pi on the informative arm at epoch 30: [{}] (uniform 0.333), {passes}/5 above",
        pis.join(", ")
    );
    report("criterion 7 (synthetic credit assignment)", pass, &detail);
}

#[test]
fn criterion_08_sample_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let src = source();
    let fractions = [0.1, 0.5, 1.0];
    let mut pass = true;
    let mut parts = Vec::new();
    for &f in &fractions {
        let mut meds = [0.0; 2];
        for (m, mode) in ["scratch", "route"].iter().enumerate() {
            cfg.mode = (*mode).into();
            let source = if m == 0 { None } else { Some(src) };
            let finals: Vec<f64> = [1u64, 2, 3]
                .iter()
                .map(|&s| {
                    cfg.seed = s;
                    run_experiment_with(&cfg, source, Some(f), None)
                        .unwrap()
                        .manifest
                        .final_test_mse
                })
                .collect();
            meds[m] = median(finals);
        }
        pass &= meds[1] <= meds[0];
        parts.push(format!("f={f}: scratch {:.4} route {:.4}", meds[0], meds[1]));
    }
    let detail = format!("median test MSE per fraction — {}", parts.join("; "));
    report("criterion 8 (sample efficiency)", pass, &detail);
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    cfg.mode = "route".into();
    cfg.target_train = 300;
    cfg.epochs = 8;
    let src = source();
    let read = |out: &harness::RunOutput| {
        (
            std::fs::read(out.run_dir.join("metrics.csv")).unwrap(),
            std::fs::read(out.run_dir.join("run.ckpt")).unwrap(),
        )
    };
    let first = read(&run_experiment_with(&cfg, Some(src), None, None).unwrap());
    let second = read(&run_experiment_with(&cfg, Some(src), None, None).unwrap());
    let pass = first == second;
    let detail = format!(
        "metrics.csv identical: {}; run.ckpt identical: {}",
        first.0 == second.0,
        first.1 == second.1
    );
    report("criterion 9 (determinism)", pass, &detail);
}

#[test]
fn criterion_10_operator_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let src = source();
    src.save(&harness::source_checkpoint_path(&cfg)).unwrap();
    let mut per_op: Vec<Vec<f64>> = vec![Vec::new(); ABLATION_OPS.len()];
    let mut scratch = Vec::new();
    for seed in [1u64, 2, 3] {
        cfg.seed = seed;
        cfg.mode = "route".into(); // ablate_ops switches to full itself
        for (i, out) in harness::ablate_ops(&cfg).unwrap().iter().enumerate() {
            per_op[i].push(match out {
                Some(o) => o.manifest.final_test_mse,
                None => f64::INFINITY, // diverged
            });
        }
        cfg.mode = "scratch".into();
        scratch.push(
            run_experiment_with(&cfg, None, None, None)
                .unwrap()
                .manifest
                .final_test_mse,
        );
    }
    let meds: Vec<f64> = per_op.into_iter().map(median).collect();
    let scratch_med = median(scratch);
    let idx = |name: &str| ABLATION_OPS.iter().position(|o| *o == name).unwrap();
    let compared = ["sadd", "wadd", "lincomb", "factred"];
    let best = compared.iter().map(|o| meds[idx(o)]).fold(f64::INFINITY, f64::min);
    let wadd = meds[idx("wadd")];
    let iden = meds[idx("iden")];
    let wadd_ok = wadd <= 1.1 * best;
    let iden_ok = (iden - scratch_med).abs() <= 0.2 * scratch_med;
    let pass = wadd_ok && iden_ok;
    let detail = format!(
        "median test MSE {}; scratch {scratch_med:.4}; wadd within 10% of best: {wadd_ok}; iden ~ scratch: {iden_ok}",
        ABLATION_OPS
            .iter()
            .zip(&meds)
            .map(|(o, m)| format!("{o} {m:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    report("criterion 10 (operator ablation)", pass, &detail);
}
