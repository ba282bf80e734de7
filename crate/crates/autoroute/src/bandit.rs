//! EXP3.P-style adversarial multi-armed bandit.
//!
//! The weight recursion mixes each arm's exponential weight with the average
//! of the others, then the sampling distribution adds a uniform exploration
//! floor. Rewards enter as importance-weighted estimates that are consumed by
//! exactly one subsequent weight update.

use rand::Rng;

use crate::bytes::Cursor;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"ATBD";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    k: usize,
    /// Log-weights w_{t,p}.
    w: Vec<f64>,
    /// Importance-weighted estimates recorded this round, consumed and
    /// cleared by the next weight update.
    r_tilde: Vec<f64>,
    /// Round counter, starts at 1.
    t: u64,
    beta: f64,
    gamma: f64,
    pi: Vec<f64>,
}

impl BanditState {
    pub fn new(k: usize, beta: f64, gamma: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!(
                "bandit needs at least 2 actions, got {k}"
            )));
        }
        if !(0.0..1.0).contains(&beta) || beta == 0.0 {
            return Err(Error::Config(format!("beta must be in (0,1), got {beta}")));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
        }
        Ok(BanditState {
            k,
            w: vec![0.0; k],
            r_tilde: vec![0.0; k],
            t: 1,
            beta,
            gamma,
            pi: vec![1.0 / k as f64; k],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn r_tilde(&self) -> &[f64] {
        &self.r_tilde
    }

    /// Learning-rate schedule alpha_t = 1/t.
    pub fn alpha_schedule(t: u64) -> f64 {
        debug_assert!(t >= 1);
        1.0 / t as f64
    }

    /// One weight update:
    /// w_p = log[(1-a) e^{w_p + g r_p} + a/(K-1) sum_{j != p} e^{w_j + g r_j}]
    /// computed with log-sum-exp, followed by the exploration-mixed softmax.
    /// Consumes and clears the recorded estimates.
    pub fn update_weights(&mut self, alpha_t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha_t) {
            return Err(Error::Contract(format!(
                "alpha_t must be in [0,1], got {alpha_t}"
            )));
        }
        let k = self.k;
        let v: Vec<f64> = (0..k).map(|p| self.w[p] + self.gamma * self.r_tilde[p]).collect();

        let mut new_w = vec![0.0; k];
        for p in 0..k {
            // terms in log space; -inf entries drop out of the log-sum-exp
            let mut terms = Vec::with_capacity(k);
            if alpha_t < 1.0 {
                terms.push((1.0 - alpha_t).ln() + v[p]);
            }
            if alpha_t > 0.0 {
                let coef = alpha_t.ln() - ((k - 1) as f64).ln();
                for (j, vj) in v.iter().enumerate() {
                    if j != p {
                        terms.push(coef + vj);
                    }
                }
            }
            new_w[p] = log_sum_exp(&terms);
        }
        self.w = new_w;
        self.recompute_pi();
        self.r_tilde.iter_mut().for_each(|r| *r = 0.0);
        Ok(())
    }

    fn recompute_pi(&mut self) {
        let max_w = self.w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.w.iter().map(|w| (w - max_w).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let kf = self.k as f64;
        for (pi, e) in self.pi.iter_mut().zip(&exps) {
            *pi = (1.0 - self.beta) * (e / sum) + self.beta / kf;
        }
    }

    /// Inverse-CDF sample from pi using a single rng draw.
    pub fn sample_action(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.k - 1
    }

    /// Record this round's importance-weighted reward and advance the round.
    pub fn record_reward(&mut self, action: usize, r: f64) -> Result<()> {
        if action >= self.k {
            return Err(Error::Contract(format!(
                "action {action} out of range for K={}",
                self.k
            )));
        }
        if !(-1.0..=1.0).contains(&r) {
            return Err(Error::Contract(format!(
                "reward must lie in [-1,1], got {r}"
            )));
        }
        self.r_tilde.iter_mut().for_each(|x| *x = 0.0);
        self.r_tilde[action] = r / self.pi[action];
        self.t += 1;
        Ok(())
    }

    /// Checkpoint layout: magic, version, then K, t, beta, gamma, w[],
    /// r_tilde[], pi[], all little-endian 64-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (4 + 3 * self.k));
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        for arr in [&self.w, &self.r_tilde, &self.pi] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Parse("bad bandit checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported bandit checkpoint version {version}"
            )));
        }
        let k = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let t = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let beta = cur.f64()?;
        let gamma = cur.f64()?;
        let read_vec = |cur: &mut Cursor| -> Result<Vec<f64>> {
            (0..k).map(|_| cur.f64()).collect()
        };
        let w = read_vec(&mut cur)?;
        let r_tilde = read_vec(&mut cur)?;
        let pi = read_vec(&mut cur)?;
        Ok(BanditState { k, w, r_tilde, t, beta, gamma, pi })
    }

    #[cfg(test)]
    pub(crate) fn inject(k: usize, w: Vec<f64>, r_tilde: Vec<f64>, beta: f64, gamma: f64) -> Self {
        let mut s = BanditState { k, w, r_tilde, t: 1, beta, gamma, pi: vec![0.0; k] };
        s.recompute_pi();
        s
    }

    #[cfg(test)]
    pub(crate) fn set_pi(&mut self, pi: Vec<f64>) {
        self.pi = pi;
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Direct exponential-space evaluation of the weight recursion, used as an
/// independent oracle against the log-sum-exp implementation. Overflows for
/// large inputs; only valid on small states.
pub fn direct_update_oracle(w: &[f64], r_tilde: &[f64], gamma: f64, alpha: f64) -> Vec<f64> {
    let k = w.len();
    let e: Vec<f64> = (0..k).map(|p| (w[p] + gamma * r_tilde[p]).exp()).collect();
    (0..k)
        .map(|p| {
            let others: f64 = (0..k).filter(|&j| j != p).map(|j| e[j]).sum();
            ((1.0 - alpha) * e[p] + alpha / (k - 1) as f64 * others).ln()
        })
        .collect()
}
