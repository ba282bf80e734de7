//! Experiment configuration: flat key=value files with CLI overrides.
//!
//! Defaults reproduce the toy-scale sine -> sinc setup: source 1-64-64-64-1
//! trained on 30000/10000 sine samples, target 1-16-16-16-1 with 1000/800
//! sinc samples, 50 epochs. The real-scale optimizer settings (lr 0.1,
//! weight decay 1e-3) are documented here but the toy defaults use a gentler
//! lr 0.05 / wd 1e-4 for stability at this scale.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::SgdConfig;
use crate::routing::AggOp;
use crate::transfer::{GainMode, Mode, RewardScale};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    // networks
    pub source_hidden: usize,
    pub target_hidden: usize,
    pub blocks: usize,
    // datasets
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub holdout_fraction: f64,
    pub input_mu: f64,
    pub input_sigma: f64,
    // run
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    // bandit
    pub beta: f64,
    pub gamma: f64,
    pub reward_scale: f64,
    pub reward_scale_auto: bool,
    pub gain_mode: String,
    pub fm_weight: f64,
    pub include_fm: bool,
    /// comma list restricting the bandit's operator set; empty = default set
    pub ops: String,
    // fixed-mode pairs "j:i,j:i,..."
    pub fixed_pairs: String,
    pub fixed_op: String,
    // misc
    pub seed: u64,
    pub source_seed: u64,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source_hidden: 64,
            target_hidden: 16,
            blocks: 4,
            source_train: 30000,
            source_test: 10000,
            target_train: 1000,
            target_test: 800,
            holdout_fraction: 0.2,
            input_mu: 0.0,
            input_sigma: 3.0,
            mode: "route".into(),
            epochs: 50,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta: 0.4,
            gamma: 1e-3,
            reward_scale: 1.0,
            reward_scale_auto: false,
            gain_mode: "per_layer".into(),
            fm_weight: 0.5,
            include_fm: false,
            ops: String::new(),
            fixed_pairs: "0:0,1:1,2:2".into(),
            fixed_op: "wadd".into(),
            seed: 1,
            source_seed: 0,
            out_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn mode(&self) -> Result<Mode> {
        Mode::parse(&self.mode)
    }

    pub fn gain_mode(&self) -> Result<GainMode> {
        GainMode::parse(&self.gain_mode)
    }

    pub fn fixed_op(&self) -> Result<AggOp> {
        AggOp::parse(&self.fixed_op)
    }

    pub fn reward_scale(&self) -> RewardScale {
        if self.reward_scale_auto {
            RewardScale::RunningMax
        } else {
            RewardScale::Fixed(self.reward_scale)
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn source_dims(&self) -> Vec<usize> {
        let mut dims = vec![1];
        dims.extend(std::iter::repeat(self.source_hidden).take(self.blocks - 1));
        dims.push(1);
        dims
    }

    pub fn target_dims(&self) -> Vec<usize> {
        let mut dims = vec![1];
        dims.extend(std::iter::repeat(self.target_hidden).take(self.blocks - 1));
        dims.push(1);
        dims
    }

    /// Bandit-selectable operator set; FM joins only when configured, and a
    /// non-empty `ops` list overrides everything.
    pub fn full_ops(&self) -> Result<Vec<AggOp>> {
        if !self.ops.trim().is_empty() {
            return self.ops.split(',').map(|s| AggOp::parse(s.trim())).collect();
        }
        let mut ops = AggOp::DEFAULT_SET.to_vec();
        if self.include_fm {
            let idx = ops.iter().position(|o| *o == AggOp::FactRed).unwrap();
            ops.insert(idx, AggOp::Fm);
        }
        Ok(ops)
    }

    pub fn parse_fixed_pairs(&self) -> Result<Vec<(usize, usize)>> {
        if self.fixed_pairs.trim().is_empty() {
            return Ok(vec![]);
        }
        self.fixed_pairs
            .split(',')
            .map(|pair| {
                let (j, i) = pair
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("bad fixed pair '{pair}', want j:i")))?;
                Ok((
                    j.trim().parse().map_err(|_| Error::Parse(format!("bad source index '{j}'")))?,
                    i.trim().parse().map_err(|_| Error::Parse(format!("bad target index '{i}'")))?,
                ))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.gain_mode()?;
        self.fixed_op()?;
        self.full_ops()?;
        self.parse_fixed_pairs()?;
        self.sgd().validate()?;
        if self.blocks < 2 {
            return Err(Error::Config("need at least 2 blocks".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            return Err(Error::Config(format!(
                "holdout_fraction must be in (0,1), got {}",
                self.holdout_fraction
            )));
        }
        if self.input_sigma <= 0.0 {
            return Err(Error::Config("input_sigma must be > 0".into()));
        }
        Ok(())
    }

    fn as_pairs(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        json.as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut json = serde_json::to_value(&*self).expect("config serializes");
        let obj = json.as_object_mut().unwrap();
        let slot = obj
            .get_mut(key)
            .ok_or_else(|| Error::Parse(format!("unknown config key '{key}'")))?;
        *slot = match slot {
            serde_json::Value::String(_) => serde_json::Value::String(value.to_string()),
            serde_json::Value::Bool(_) => serde_json::Value::Bool(
                value
                    .parse()
                    .map_err(|_| Error::Parse(format!("key '{key}' wants a bool, got '{value}'")))?,
            ),
            _ => serde_json::from_str(value)
                .map_err(|_| Error::Parse(format!("key '{key}' rejects value '{value}'")))?,
        };
        *self = serde_json::from_value(json)
            .map_err(|e| Error::Parse(format!("config update failed: {e}")))?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: sorted key=value lines.
    pub fn canonical(&self) -> String {
        self.as_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// FNV-1a over the canonical form; identifies a configuration in manifests.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
