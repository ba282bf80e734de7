//! Experiment harness: data generation, source pretraining, baselines,
//! sample-efficiency sweeps, operator ablations, and run outputs
//! (metrics.csv, predictions.csv, manifest.json, checkpoints).

pub mod gradsuite;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{RunCheckpoint, SourceCheckpoint};
use crate::config::ExperimentConfig;
use crate::data::{gen_sinc, gen_sine, seeded_rng, sinc, subsample_indices};
use crate::error::{Error, Result};
use crate::numgrad::{cosine_lr, sgd_step, Activation, LayeredNet, Tape, Tensor};
use crate::routing::splitmix64;
use crate::transfer::{Dataset, EpochRecord, Mode, RunSpec, TransferRun};

pub const PREDICTION_GRID_MIN: f64 = -10.0;
pub const PREDICTION_GRID_MAX: f64 = 10.0;
pub const PREDICTION_GRID_POINTS: usize = 401;

/// Output root: AUTOROUTE_OUT overrides the configured directory.
pub fn out_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var("AUTOROUTE_OUT") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.out_dir),
    }
}

pub fn source_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    out_root(cfg).join(format!(
        "source_s{}_h{}_b{}.ckpt",
        cfg.source_seed, cfg.source_hidden, cfg.blocks
    ))
}

fn stream(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
    seeded_rng(splitmix64(seed ^ splitmix64(tag)))
}

/// Train the source network on the sine task, freeze it, report test MSE.
pub fn pretrain_source(cfg: &ExperimentConfig) -> Result<SourceCheckpoint> {
    cfg.validate()?;
    let mut rng = stream(cfg.source_seed, 0x50DA7A);
    let train = gen_sine(cfg.source_train, &mut rng, cfg.input_mu, cfg.input_sigma);
    let mut test_rng = stream(cfg.source_seed, 0x507E57);
    let test = gen_sine(cfg.source_test, &mut test_rng, cfg.input_mu, cfg.input_sigma);

    let mut init_rng = stream(cfg.source_seed, 0x501417);
    let mut net = LayeredNet::chain(&cfg.source_dims(), Activation::Tanh, true, &mut init_rng);
    let opt = cfg.sgd();
    let mut shuffle_rng = stream(cfg.source_seed, 0x505FFE);
    let n = train.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, opt.lr);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut shuffle_rng);
        for chunk in idx.chunks(cfg.batch_size.min(n)) {
            let batch = train.select(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(batch.x.clone());
            let (out, _, param_ids) = net.forward(&mut tape, x)?;
            let loss = tape.mse_loss(out, &batch.y)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric(
                    "source pretraining diverged (non-finite loss); lower lr".into(),
                ));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = param_ids.iter().map(|&id| tape.grad(id)).collect();
            sgd_step(net.params_mut(), &grads, &opt, lr)?;
        }
    }
    net.trainable = false;
    let test_mse = {
        let mut tape = Tape::new();
        let x = tape.constant(test.x.clone());
        let (out, _, _) = net.forward(&mut tape, x)?;
        let loss = tape.mse_loss(out, &test.y)?;
        tape.value(loss).item()
    };
    if !test_mse.is_finite() {
        return Err(Error::Numeric(
            "source pretraining diverged (non-finite test MSE); lower lr".into(),
        ));
    }
    Ok(SourceCheckpoint { net, test_mse })
}

/// Target-task datasets: (train, holdout, test). The holdout is carved from
/// the tail of the (optionally subsampled) training pool and is disjoint
/// from both the effective training set and the test set.
pub fn target_datasets(cfg: &ExperimentConfig, fraction: Option<f64>) -> Result<(Dataset, Dataset, Dataset)> {
    let mut rng = stream(cfg.seed, 0x7A17A);
    let pool = gen_sinc(cfg.target_train, &mut rng, cfg.input_mu, cfg.input_sigma);
    let idx: Vec<usize> = match fraction {
        None => (0..pool.len()).collect(),
        Some(f) => {
            if !(0.0..=1.0).contains(&f) || f == 0.0 {
                return Err(Error::Config(format!("fraction must be in (0,1], got {f}")));
            }
            subsample_indices(pool.len(), f, splitmix64(cfg.seed ^ 0xF4AC))
        }
    };
    let n = idx.len();
    let holdout_n = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let train_idx = &idx[..n - holdout_n];
    let holdout_idx = &idx[n - holdout_n..];
    let train = pool.select(train_idx);
    let holdout = pool.select(holdout_idx);
    let mut test_rng = stream(cfg.seed, 0x7E57);
    let test = gen_sinc(cfg.target_test, &mut test_rng, cfg.input_mu, cfg.input_sigma);
    Ok((train, holdout, test))
}

pub fn build_run(
    cfg: &ExperimentConfig,
    source: Option<LayeredNet>,
    fraction: Option<f64>,
) -> Result<TransferRun> {
    cfg.validate()?;
    let (train, holdout, test) = target_datasets(cfg, fraction)?;
    let mut batch = cfg.batch_size;
    if train.len() < 2 * batch {
        let reduced = (train.len() / 2).max(1);
        eprintln!(
            "warning: training set has {} samples (< 2x batch {}); reducing batch to {}",
            train.len(),
            batch,
            reduced
        );
        batch = reduced;
    }
    let mut init_rng = stream(cfg.seed, 0x7417);
    let target = LayeredNet::chain(&cfg.target_dims(), Activation::Tanh, true, &mut init_rng);
    let spec = RunSpec {
        mode: cfg.mode()?,
        epochs: cfg.epochs,
        batch_size: batch,
        opt: cfg.sgd(),
        beta: cfg.beta,
        gamma: cfg.gamma,
        reward_scale: cfg.reward_scale(),
        gain_mode: cfg.gain_mode()?,
        fm_weight: cfg.fm_weight,
        full_ops: cfg.full_ops()?,
        fixed_pairs: cfg.parse_fixed_pairs()?,
        fixed_op: cfg.fixed_op()?,
        seed: cfg.seed,
    };
    TransferRun::new(spec, source, target, train, holdout, test)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    pub fraction: Option<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub test_size: usize,
    pub final_test_mse: f64,
    pub source_test_mse: Option<f64>,
    pub action_space: Vec<String>,
    pub fixed_actions: Vec<String>,
    pub metrics_file: String,
    pub predictions_file: String,
    pub checkpoint_file: String,
}

pub struct RunOutput {
    pub manifest: Manifest,
    pub history: Vec<EpochRecord>,
    pub run_dir: PathBuf,
}

fn format_float(v: f64) -> String {
    // shortest round-trip form; deterministic within a build
    format!("{v}")
}

fn metrics_header(mode: Mode, n_layers: usize, k: usize) -> String {
    let mut cols = vec!["epoch".to_string()];
    if mode.uses_bandit() {
        for i in 0..n_layers {
            cols.push(format!("action_{i}"));
        }
        for i in 0..n_layers {
            cols.push(format!("reward_{i}"));
        }
        for i in 0..n_layers {
            for p in 0..k {
                cols.push(format!("pi_{i}_{p}"));
            }
        }
    }
    cols.extend(["train_loss", "holdout_loss", "test_mse", "lr"].map(String::from));
    cols.join(",")
}

fn metrics_row(mode: Mode, r: &EpochRecord) -> String {
    let mut cols = vec![r.epoch.to_string()];
    if mode.uses_bandit() {
        cols.extend(r.action_ids.iter().map(|a| a.to_string()));
        cols.extend(r.rewards.iter().map(|v| format_float(*v)));
        for pi in &r.pis {
            cols.extend(pi.iter().map(|v| format_float(*v)));
        }
    }
    cols.push(format_float(r.train_loss));
    cols.push(format_float(r.holdout_loss));
    cols.push(format_float(r.test_mse));
    cols.push(format_float(r.lr));
    cols.join(",")
}

/// Minimal numeric CSV reader for the files this harness writes.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(
            line.split(',')
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number '{v}'"))))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((header, rows))
}

pub fn prediction_grid() -> Vec<f64> {
    let step = (PREDICTION_GRID_MAX - PREDICTION_GRID_MIN) / (PREDICTION_GRID_POINTS - 1) as f64;
    (0..PREDICTION_GRID_POINTS)
        .map(|i| PREDICTION_GRID_MIN + step * i as f64)
        .collect()
}

fn run_dir_name(cfg: &ExperimentConfig, fraction: Option<f64>, tag: Option<&str>) -> String {
    let mut name = format!("{}_seed{}", cfg.mode, cfg.seed);
    if let Some(f) = fraction {
        name.push_str(&format!("_f{:03}", (f * 100.0).round() as usize));
    }
    if let Some(t) = tag {
        name.push_str(&format!("_{t}"));
    }
    name
}

/// Run one experiment and write its outputs under the output root.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let source = load_source_if_needed(cfg)?;
    run_experiment_with(cfg, source.as_ref(), None, None)
}

pub fn load_source_if_needed(cfg: &ExperimentConfig) -> Result<Option<SourceCheckpoint>> {
    if cfg.mode()?.uses_source() {
        Ok(Some(SourceCheckpoint::load(&source_checkpoint_path(cfg))?))
    } else {
        Ok(None)
    }
}

/// Core run: caller may supply the source checkpoint (kept in memory across
/// sweeps), a training-set fraction, and a directory tag.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    source: Option<&SourceCheckpoint>,
    fraction: Option<f64>,
    tag: Option<&str>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mode = cfg.mode()?;
    if mode.uses_source() && source.is_none() {
        return Err(Error::Config(format!(
            "mode {} needs a pretrained source network",
            mode.name()
        )));
    }
    let run_dir = out_root(cfg).join(run_dir_name(cfg, fraction, tag));
    fs::create_dir_all(&run_dir)?;
    let mut run = build_run(cfg, source.map(|s| s.net.clone()), fraction)?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;
    let k = run.action_space.len();
    let n_layers = run.bandits.len();
    writeln!(metrics, "{}", metrics_header(mode, n_layers, k))?;
    let history = run.run(|record| {
        writeln!(metrics, "{}", metrics_row(mode, record)).map_err(Error::from)
    })?;
    drop(metrics);

    // prediction dump over the fixed grid
    let grid = prediction_grid();
    let gx = Tensor::from_fn(grid.len(), 1, |r, _| grid[r]);
    let pred = run.predict(&gx)?;
    let pred_path = run_dir.join("predictions.csv");
    {
        let mut f = fs::File::create(&pred_path)?;
        writeln!(f, "x,y_true,y_pred")?;
        for (i, &x) in grid.iter().enumerate() {
            writeln!(
                f,
                "{},{},{}",
                format_float(x),
                format_float(sinc(x)),
                format_float(pred.at(i, 0))
            )?;
        }
    }

    let final_test_mse = match history.last() {
        Some(r) => r.test_mse,
        None => {
            let actions = run.current_actions.clone();
            let test = run.test_set.clone();
            run.loss_with_actions(&test, &actions)?
        }
    };

    let ckpt_path = run_dir.join("run.ckpt");
    let ck = RunCheckpoint {
        target: run.target.clone(),
        store: run.store.clone(),
        bandits: run.bandits.clone(),
        rng_state: cfg.seed.to_le_bytes().to_vec(),
    };
    ck.save(&ckpt_path)?;

    let manifest = Manifest {
        config_hash: format!("{:016x}", cfg.hash()),
        mode: cfg.mode.clone(),
        seed: cfg.seed,
        fraction,
        train_size: run.train_set.len(),
        holdout_size: run.holdout.len(),
        test_size: run.test_set.len(),
        final_test_mse,
        source_test_mse: source.map(|s| s.test_mse),
        action_space: run.action_space.iter().map(|a| a.label()).collect(),
        fixed_actions: run.current_actions.iter().map(|a| a.label()).collect(),
        metrics_file: "metrics.csv".into(),
        predictions_file: "predictions.csv".into(),
        checkpoint_file: "run.ckpt".into(),
    };
    fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(RunOutput { manifest, history, run_dir })
}

/// Sample-efficiency sweep: one run per fraction, nested seeded subsets,
/// plus a summary CSV.
pub fn sweep_samples(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<RunOutput>> {
    let source = load_source_if_needed(cfg)?;
    let mut outputs = Vec::new();
    for &f in fractions {
        outputs.push(run_experiment_with(cfg, source.as_ref(), Some(f), None)?);
    }
    let summary = out_root(cfg).join(format!("sweep_{}_seed{}.csv", cfg.mode, cfg.seed));
    let mut file = fs::File::create(&summary)?;
    writeln!(file, "fraction,final_test_mse")?;
    for (f, out) in fractions.iter().zip(&outputs) {
        writeln!(file, "{},{}", format_float(*f), format_float(out.manifest.final_test_mse))?;
    }
    Ok(outputs)
}

pub const ABLATION_OPS: [&str; 5] = ["iden", "sadd", "wadd", "lincomb", "factred"];

/// Fix the aggregation operator and let the bandit route over source layers,
/// once per operator. An operator whose run diverges is reported as NaN in
/// the summary instead of aborting the sweep.
pub fn ablate_ops(cfg: &ExperimentConfig) -> Result<Vec<Option<RunOutput>>> {
    let mut cfg = cfg.clone();
    cfg.mode = "full".into();
    let source = load_source_if_needed(&cfg)?;
    let mut outputs = Vec::new();
    for op in ABLATION_OPS {
        cfg.ops = op.into();
        match run_experiment_with(&cfg, source.as_ref(), None, Some(op)) {
            Ok(out) => outputs.push(Some(out)),
            Err(Error::Numeric(msg)) => {
                eprintln!("warning: op {op} diverged: {msg}");
                outputs.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let summary = out_root(&cfg).join(format!("ablate_seed{}.csv", cfg.seed));
    let mut file = fs::File::create(&summary)?;
    writeln!(file, "op,final_test_mse")?;
    for (op, out) in ABLATION_OPS.iter().zip(&outputs) {
        let mse = match out {
            Some(o) => format_float(o.manifest.final_test_mse),
            None => "nan".into(),
        };
        writeln!(file, "{op},{mse}")?;
    }
    Ok(outputs)
}

/// Parse `0.1..1.0` (step 0.1) or a comma list of fractions.
pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: f64 = lo.parse().map_err(|_| Error::Parse(format!("bad fraction '{lo}'")))?;
        let hi: f64 = hi.parse().map_err(|_| Error::Parse(format!("bad fraction '{hi}'")))?;
        let mut out = Vec::new();
        let mut f = lo;
        while f <= hi + 1e-9 {
            out.push((f * 100.0).round() / 100.0);
            f += 0.1;
        }
        Ok(out)
    } else {
        s.split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("bad fraction '{v}'"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.source_hidden = 8;
        cfg.target_hidden = 4;
        cfg.source_train = 200;
        cfg.source_test = 100;
        cfg.target_train = 100;
        cfg.target_test = 50;
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg.out_dir = dir.to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn parse_fraction_forms() {
        assert_eq!(parse_fractions("0.1..1.0").unwrap().len(), 10);
        assert_eq!(parse_fractions("0.1,0.5,1.0").unwrap(), vec![0.1, 0.5, 1.0]);
        assert!(parse_fractions("x").is_err());
    }

    #[test]
    fn grid_covers_documented_range() {
        let g = prediction_grid();
        assert_eq!(g.len(), 401);
        assert_eq!(g[0], -10.0);
        assert_eq!(*g.last().unwrap(), 10.0);
        assert!((g[1] - g[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn scratch_run_writes_outputs_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.mode = "scratch".into();
        let out = run_experiment_with(&cfg, None, None, None).unwrap();
        assert_eq!(out.history.len(), 3);
        let (header, rows) = read_csv(&out.run_dir.join("metrics.csv")).unwrap();
        assert_eq!(header, vec!["epoch", "train_loss", "holdout_loss", "test_mse", "lr"]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0][0], 1.0);
        let (pheader, prows) = read_csv(&out.run_dir.join("predictions.csv")).unwrap();
        assert_eq!(pheader, vec!["x", "y_true", "y_pred"]);
        assert_eq!(prows.len(), 401);
        // csv round-trip: rewrite from parsed rows reproduces the bytes
        let text = fs::read_to_string(out.run_dir.join("metrics.csv")).unwrap();
        let rebuilt = std::iter::once(header.join(","))
            .chain(rows.iter().map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, v)| if i == 0 { format!("{}", *v as usize) } else { format!("{v}") })
                    .collect::<Vec<_>>()
                    .join(",")
            }))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        assert_eq!(text, rebuilt);
    }

    #[test]
    fn transfer_mode_requires_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.mode = "route".into();
        let err = match run_experiment(&cfg) {
            Err(e) => e,
            Ok(_) => panic!("route mode ran without a source checkpoint"),
        };
        assert!(err.to_string().contains("source"), "{err}");
    }

    #[test]
    fn pretrain_is_deterministic_and_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let a = pretrain_source(&cfg).unwrap();
        let b = pretrain_source(&cfg).unwrap();
        assert!(!a.net.trainable);
        assert_eq!(a.net.checksum(), b.net.checksum());
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn fraction_one_matches_plain_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.mode = "scratch".into();
        let plain = run_experiment_with(&cfg, None, None, None).unwrap();
        let swept = run_experiment_with(&cfg, None, Some(1.0), None).unwrap();
        assert_eq!(plain.manifest.final_test_mse, swept.manifest.final_test_mse);
    }

    #[test]
    fn holdout_and_train_are_disjoint() {
        let cfg = small_cfg(Path::new("unused"));
        let (train, holdout, _) = target_datasets(&cfg, None).unwrap();
        assert_eq!(train.len() + holdout.len(), cfg.target_train);
        for i in 0..train.len() {
            for j in 0..holdout.len() {
                assert_ne!(train.x.at(i, 0), holdout.x.at(j, 0));
            }
        }
    }
}
