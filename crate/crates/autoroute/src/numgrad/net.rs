//! Dense blocks and layered networks with intermediate taps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numgrad::optim::SgdConfig;
use crate::numgrad::tape::{Tape, VarId};
use crate::numgrad::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
}

/// A trainable tensor together with its momentum buffer.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Tensor,
    pub velocity: Tensor,
}

impl ParamTensor {
    pub fn new(value: Tensor) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            value,
            velocity: Tensor::zeros(r, c),
        }
    }

    /// Fan-in scaled uniform init in +-1/sqrt(in_dim).
    pub fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        ParamTensor::new(Tensor::from_fn(rows, cols, |_, _| {
            rng.gen_range(-bound..bound)
        }))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> VarId {
        tape.leaf(self.value.clone(), trainable)
    }

    /// One SGD step: v <- momentum*v + g + wd*p; p <- p - lr*v
    pub fn apply_grad(&mut self, grad: &Tensor, cfg: &SgdConfig, lr: f64) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                "apply_grad",
                format!("{:?}", self.value.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient in sgd step".into()));
        }
        for i in 0..self.value.len() {
            let p = self.value.data()[i];
            let g = grad.data()[i] + cfg.weight_decay * p;
            let v = cfg.momentum * self.velocity.data()[i] + g;
            self.velocity.data_mut()[i] = v;
            self.value.data_mut()[i] = p - lr * v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub weight: ParamTensor,
    pub bias: Option<ParamTensor>,
    pub activation: Activation,
}

impl DenseBlock {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        DenseBlock {
            weight: ParamTensor::uniform_fan_in(in_dim, out_dim, in_dim, rng),
            bias: Some(ParamTensor::uniform_fan_in(1, out_dim, in_dim, rng)),
            activation,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, activation: Activation) -> Self {
        DenseBlock {
            weight: ParamTensor::new(weight),
            bias: bias.map(ParamTensor::new),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// Forward on the tape. Pushes bound parameter ids to `param_ids` (weight
    /// then bias) when trainable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: VarId,
        trainable: bool,
        param_ids: &mut Vec<VarId>,
        block_index: usize,
    ) -> Result<VarId> {
        let (_, xc) = tape.value(x).shape();
        if xc != self.in_dim() {
            return Err(Error::shape(
                format!("dense block {block_index}"),
                format!("{} input columns", self.in_dim()),
                format!("{xc}"),
            ));
        }
        let w = self.weight.bind(tape, trainable);
        if trainable {
            param_ids.push(w);
        }
        let mut h = tape.matmul(x, w)?;
        if let Some(b) = &self.bias {
            let bid = b.bind(tape, trainable);
            if trainable {
                param_ids.push(bid);
            }
            h = tape.add_bias(h, bid)?;
        }
        Ok(match self.activation {
            Activation::None => h,
            Activation::Tanh => tape.tanh(h),
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Ordered dense blocks with taps exposing intermediate representations.
#[derive(Debug, Clone)]
pub struct LayeredNet {
    pub blocks: Vec<DenseBlock>,
    /// Block indices whose activation outputs are exposed as taps.
    pub tap_indices: Vec<usize>,
    pub trainable: bool,
}

impl LayeredNet {
    /// A chain dims[0] -> dims[1] -> ... -> dims[last], tanh on every block
    /// except the last, taps on every non-final block.
    pub fn chain(dims: &[usize], activation: Activation, trainable: bool, rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let blocks: Vec<DenseBlock> = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::None } else { activation };
                DenseBlock::new(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        LayeredNet {
            blocks,
            tap_indices: (0..n.saturating_sub(1)).collect(),
            trainable,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().unwrap().out_dim()
    }

    /// Widths of the tapped representations, in tap order.
    pub fn tap_dims(&self) -> Vec<usize> {
        self.tap_indices.iter().map(|&i| self.blocks[i].out_dim()).collect()
    }

    /// Plain forward. Returns (output, taps, bound trainable param ids).
    pub fn forward(&self, tape: &mut Tape, x: VarId) -> Result<(VarId, Vec<VarId>, Vec<VarId>)> {
        let mut param_ids = Vec::new();
        let mut taps = Vec::new();
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, self.trainable, &mut param_ids, i)?;
            if self.tap_indices.contains(&i) {
                taps.push(h);
            }
        }
        Ok((h, taps, param_ids))
    }

    /// Mutable parameter iterator in the same order `forward` binds them.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut())
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in &self.blocks {
            h ^= b.weight.value.checksum();
            h = h.wrapping_mul(0x100000001b3);
            if let Some(bias) = &b.bias {
                h ^= bias.value.checksum();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
