//! One training run: per-epoch bandit choices, prediction-gain rewards on a
//! holdout set, and target-network training under the sampled routing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bandit::BanditState;
use crate::error::{Error, Result};
use crate::numgrad::{cosine_lr, sgd_step, LayeredNet, SgdConfig, Tape, Tensor};
use crate::routing::{
    apply_route_grads, build_action_space, routed_forward, AggOp, RouteMode, RouteParamStore,
    RoutingAction,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Scratch,
    Fixed,
    Route,
    Full,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Fixed => "fixed",
            Mode::Route => "route",
            Mode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "fixed" => Ok(Mode::Fixed),
            "route" => Ok(Mode::Route),
            "full" => Ok(Mode::Full),
            other => Err(Error::Parse(format!("unknown mode '{other}'"))),
        }
    }

    pub fn uses_bandit(&self) -> bool {
        matches!(self, Mode::Route | Mode::Full)
    }

    pub fn uses_source(&self) -> bool {
        !matches!(self, Mode::Scratch)
    }
}

/// Per-layer credit assignment (default) or the literal global comparison
/// against the all-NULL target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    PerLayer,
    Global,
}

impl GainMode {
    pub fn parse(s: &str) -> Result<GainMode> {
        match s {
            "per_layer" => Ok(GainMode::PerLayer),
            "global" => Ok(GainMode::Global),
            other => Err(Error::Parse(format!("unknown gain mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GainMode::PerLayer => "per_layer",
            GainMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardScale {
    Fixed(f64),
    RunningMax,
}

/// clamp(gain / s, -1, 1)
pub fn shape_reward(gain: f64, s: f64) -> f64 {
    (gain / s).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let xd = self.x.cols();
        let yd = self.y.cols();
        Dataset {
            x: Tensor::from_fn(idx.len(), xd, |r, c| self.x.at(idx[r], c)),
            y: Tensor::from_fn(idx.len(), yd, |r, c| self.y.at(idx[r], c)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: SgdConfig,
    pub beta: f64,
    pub gamma: f64,
    pub reward_scale: RewardScale,
    pub gain_mode: GainMode,
    pub fm_weight: f64,
    /// Bandit-selectable operators in full mode.
    pub full_ops: Vec<AggOp>,
    /// (source j, target i) pairs for fixed mode.
    pub fixed_pairs: Vec<(usize, usize)>,
    pub fixed_op: AggOp,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Action ids into the shared action space; empty for scratch/fixed.
    pub action_ids: Vec<usize>,
    pub action_labels: Vec<String>,
    pub rewards: Vec<f64>,
    pub pis: Vec<Vec<f64>>,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub test_mse: f64,
    pub lr: f64,
}

pub struct TransferRun {
    pub spec: RunSpec,
    pub source: Option<LayeredNet>,
    pub target: LayeredNet,
    pub action_space: Vec<RoutingAction>,
    pub bandits: Vec<BanditState>,
    pub current_actions: Vec<RoutingAction>,
    pub store: RouteParamStore,
    pub train_set: Dataset,
    pub holdout: Dataset,
    pub test_set: Dataset,
    shuffle_rng: ChaCha8Rng,
    bandit_rng: ChaCha8Rng,
    running_max_gain: f64,
    source_checksum: Option<u64>,
}

fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(tag))
}

impl TransferRun {
    pub fn new(
        spec: RunSpec,
        source: Option<LayeredNet>,
        target: LayeredNet,
        train_set: Dataset,
        holdout: Dataset,
        test_set: Dataset,
    ) -> Result<Self> {
        spec.opt.validate()?;
        if holdout.is_empty() {
            return Err(Error::Config("holdout set must not be empty".into()));
        }
        if spec.mode.uses_source() && source.is_none() {
            return Err(Error::Config(format!(
                "mode {} requires a pretrained source network",
                spec.mode.name()
            )));
        }
        let n_routed = target.tap_indices.len();
        let n_sources = source.as_ref().map(|s| s.tap_indices.len()).unwrap_or(0);
        let target_dims = target.tap_dims();

        let mut action_space = Vec::new();
        let mut bandits = Vec::new();
        let mut current_actions = vec![RoutingAction::Null; n_routed];
        match spec.mode {
            Mode::Scratch => {}
            Mode::Fixed => {
                for &(j, i) in &spec.fixed_pairs {
                    if i >= n_routed || j >= n_sources {
                        return Err(Error::Config(format!(
                            "fixed pair ({j}, {i}) out of range: source has {n_sources} taps, \
                             target has {n_routed} routed layers"
                        )));
                    }
                    current_actions[i] = RoutingAction::Route { source: j, op: spec.fixed_op };
                }
            }
            Mode::Route | Mode::Full => {
                let mode = if spec.mode == Mode::Route { RouteMode::Route } else { RouteMode::Full };
                // all routed target layers share one width here; the space is
                // built against the smallest so FactRed exclusion is uniform
                let dim = *target_dims.iter().min().unwrap();
                action_space = build_action_space(n_sources, mode, &spec.full_ops, dim)?;
                for _ in 0..n_routed {
                    bandits.push(BanditState::new(action_space.len(), spec.beta, spec.gamma)?);
                }
            }
        }

        let source_checksum = source.as_ref().map(|s| s.checksum());
        Ok(TransferRun {
            store: RouteParamStore::new(
                crate::routing::splitmix64(spec.seed ^ 0xA11CE),
                spec.fm_weight,
            ),
            shuffle_rng: substream(spec.seed, 0x5f),
            bandit_rng: substream(spec.seed, 0xBd),
            running_max_gain: 0.0,
            spec,
            source,
            target,
            action_space,
            bandits,
            current_actions,
            train_set,
            holdout,
            test_set,
            source_checksum,
        })
    }

    pub fn source_unchanged(&self) -> bool {
        match (&self.source, self.source_checksum) {
            (Some(s), Some(c)) => s.checksum() == c,
            _ => true,
        }
    }

    /// Task loss (MSE) of the routed model on a dataset, evaluation mode.
    pub fn loss_with_actions(&mut self, data: &Dataset, actions: &[RoutingAction]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(data.x.clone());
        let rf = routed_forward(
            &mut tape,
            self.source.as_ref(),
            &self.target,
            actions,
            &mut self.store,
            x,
            false,
        )?;
        let loss = tape.mse_loss(rf.output, &data.y)?;
        Ok(tape.value(loss).item())
    }

    /// Holdout prediction gain for setting layer `i` to `candidate`, against
    /// the same configuration with layer `i` forced to NULL.
    pub fn evaluate_gain(&mut self, layer: usize, candidate: RoutingAction) -> Result<f64> {
        let mut baseline = self.current_actions.clone();
        baseline[layer] = RoutingAction::Null;
        let mut routed = baseline.clone();
        routed[layer] = candidate;
        let holdout = self.holdout.clone();
        let l_base = self.loss_with_actions(&holdout, &baseline)?;
        let l_routed = self.loss_with_actions(&holdout, &routed)?;
        Ok(l_base - l_routed)
    }

    fn scale_gain(&mut self, gain: f64) -> f64 {
        let s = match self.spec.reward_scale {
            RewardScale::Fixed(s) => s,
            RewardScale::RunningMax => {
                self.running_max_gain = self.running_max_gain.max(gain.abs());
                self.running_max_gain.max(1e-12)
            }
        };
        shape_reward(gain, s)
    }

    /// One pass over the shuffled training set with fixed actions.
    /// Returns the mean minibatch loss (task loss plus FM regularization).
    pub fn train_epoch(&mut self, actions: &[RoutingAction], lr: f64) -> Result<f64> {
        let n = self.train_set.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.shuffle_rng);
        let batch = self.spec.batch_size.min(n).max(1);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in idx.chunks(batch).enumerate() {
            let data = self.train_set.select(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(data.x.clone());
            let rf = routed_forward(
                &mut tape,
                self.source.as_ref(),
                &self.target,
                actions,
                &mut self.store,
                x,
                true,
            )?;
            let mut loss = tape.mse_loss(rf.output, &data.y)?;
            if let Some(extra) = rf.extra_loss {
                loss = tape.add(loss, extra)?;
            }
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                let labels: Vec<String> = actions.iter().map(|a| a.label()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss in batch {b} under actions [{}]",
                    labels.join(", ")
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> =
                rf.target_param_ids.iter().map(|&id| tape.grad(id)).collect();
            sgd_step(self.target.params_mut(), &grads, &self.spec.opt, lr)?;
            apply_route_grads(&mut self.store, &tape, &rf.route_bindings, &self.spec.opt, lr)?;
            total += loss_val;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Full run; per epoch, in order: update weights, sample,
    /// evaluate reward on pre-training parameters, record, then train.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<Vec<EpochRecord>> {
        let epochs = self.spec.epochs;
        let mut history = Vec::with_capacity(epochs);
        for t in 1..=epochs {
            let lr = cosine_lr(t - 1, epochs, self.spec.opt.lr);
            let mut action_ids = Vec::new();
            let mut rewards = Vec::new();
            let mut pis = Vec::new();
            if self.spec.mode.uses_bandit() {
                let alpha = BanditState::alpha_schedule(t as u64);
                for b in self.bandits.iter_mut() {
                    b.update_weights(alpha)?;
                }
                match self.spec.gain_mode {
                    GainMode::PerLayer => {
                        for i in 0..self.bandits.len() {
                            let a_id = self.bandits[i].sample_action(&mut self.bandit_rng);
                            let action = self.action_space[a_id];
                            let gain = self.evaluate_gain(i, action)?;
                            let r = self.scale_gain(gain);
                            self.bandits[i].record_reward(a_id, r)?;
                            self.current_actions[i] = action;
                            action_ids.push(a_id);
                            rewards.push(r);
                            pis.push(self.bandits[i].pi().to_vec());
                        }
                    }
                    GainMode::Global => {
                        for i in 0..self.bandits.len() {
                            let a_id = self.bandits[i].sample_action(&mut self.bandit_rng);
                            self.current_actions[i] = self.action_space[a_id];
                            action_ids.push(a_id);
                            pis.push(self.bandits[i].pi().to_vec());
                        }
                        let all_null = vec![RoutingAction::Null; self.current_actions.len()];
                        let routed = self.current_actions.clone();
                        let holdout = self.holdout.clone();
                        let l_base = self.loss_with_actions(&holdout, &all_null)?;
                        let l_routed = self.loss_with_actions(&holdout, &routed)?;
                        let r = self.scale_gain(l_base - l_routed);
                        for (i, &a_id) in action_ids.iter().enumerate() {
                            self.bandits[i].record_reward(a_id, r)?;
                            rewards.push(r);
                        }
                    }
                }
            }
            let actions = self.current_actions.clone();
            let train_loss = self.train_epoch(&actions, lr)?;
            let holdout_set = self.holdout.clone();
            let test_set = self.test_set.clone();
            let holdout_loss = self.loss_with_actions(&holdout_set, &actions)?;
            let test_mse = self.loss_with_actions(&test_set, &actions)?;
            let record = EpochRecord {
                epoch: t,
                action_labels: action_ids
                    .iter()
                    .map(|&id| self.action_space[id].label())
                    .collect(),
                action_ids,
                rewards,
                pis,
                train_loss,
                holdout_loss,
                test_mse,
                lr,
            };
            on_epoch(&record)?;
            history.push(record);
        }
        Ok(history)
    }

    /// Predictions under the current actions, evaluation mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let actions = self.current_actions.clone();
        let rf = routed_forward(
            &mut tape,
            self.source.as_ref(),
            &self.target,
            &actions,
            &mut self.store,
            xid,
            false,
        )?;
        Ok(tape.value(rf.output).clone())
    }
}
