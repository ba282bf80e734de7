//! Versioned binary checkpoints: source networks and full run state
//! (target network, route-parameter store, bandits, rng state).
//! All scalars little-endian; floats are 64-bit.

use std::path::Path;

use crate::bandit::BanditState;
use crate::bytes::{put_f64, put_f64_slice, put_usize, Cursor};
use crate::error::{Error, Result};
use crate::numgrad::{Activation, DenseBlock, LayeredNet, ParamTensor, Tensor};
use crate::routing::{AggOp, OpParams, RouteParamStore, RouteParams, RoutingAction, SourceTransform};

const SOURCE_MAGIC: &[u8; 4] = b"ATSR";
const RUN_MAGIC: &[u8; 4] = b"ATCK";
const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_usize(out, t.rows());
    put_usize(out, t.cols());
    put_f64_slice(out, t.data());
}

fn read_tensor(cur: &mut Cursor) -> Result<Tensor> {
    let rows = cur.usize()?;
    let cols = cur.usize()?;
    let data = cur.f64_vec(rows * cols)?;
    Tensor::from_vec(rows, cols, data)
}

fn put_param(out: &mut Vec<u8>, p: &ParamTensor) {
    put_tensor(out, &p.value);
    put_tensor(out, &p.velocity);
}

fn read_param(cur: &mut Cursor) -> Result<ParamTensor> {
    let value = read_tensor(cur)?;
    let velocity = read_tensor(cur)?;
    Ok(ParamTensor { value, velocity })
}

pub fn net_to_bytes(net: &LayeredNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(net.trainable as u8);
    put_usize(&mut out, net.blocks.len());
    for b in &net.blocks {
        out.push(match b.activation {
            Activation::None => 0,
            Activation::Tanh => 1,
        });
        out.push(b.bias.is_some() as u8);
        put_param(&mut out, &b.weight);
        if let Some(bias) = &b.bias {
            put_param(&mut out, bias);
        }
    }
    put_usize(&mut out, net.tap_indices.len());
    for &t in &net.tap_indices {
        put_usize(&mut out, t);
    }
    out
}

pub fn net_from_cursor(cur: &mut Cursor) -> Result<LayeredNet> {
    let trainable = cur.take(1)?[0] != 0;
    let n_blocks = cur.usize()?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let activation = match cur.take(1)?[0] {
            0 => Activation::None,
            1 => Activation::Tanh,
            other => return Err(Error::Parse(format!("unknown activation tag {other}"))),
        };
        let has_bias = cur.take(1)?[0] != 0;
        let weight = read_param(cur)?;
        let bias = if has_bias { Some(read_param(cur)?) } else { None };
        blocks.push(DenseBlock { weight, bias, activation });
    }
    let n_taps = cur.usize()?;
    let tap_indices = (0..n_taps).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    Ok(LayeredNet { blocks, tap_indices, trainable })
}

fn op_index(op: AggOp) -> u8 {
    AggOp::ALL.iter().position(|o| *o == op).unwrap() as u8
}

fn put_action(out: &mut Vec<u8>, a: &RoutingAction) {
    match a {
        RoutingAction::Null => out.push(0),
        RoutingAction::Route { source, op } => {
            out.push(1);
            put_usize(out, *source);
            out.push(op_index(*op));
        }
    }
}

fn read_action(cur: &mut Cursor) -> Result<RoutingAction> {
    match cur.take(1)?[0] {
        0 => Ok(RoutingAction::Null),
        1 => {
            let source = cur.usize()?;
            let op = *AggOp::ALL
                .get(cur.take(1)?[0] as usize)
                .ok_or_else(|| Error::Parse("unknown operator tag".into()))?;
            Ok(RoutingAction::Route { source, op })
        }
        other => Err(Error::Parse(format!("unknown action tag {other}"))),
    }
}

fn put_transform(out: &mut Vec<u8>, t: &SourceTransform) {
    put_param(out, &t.dense);
    put_param(out, &t.bn_gamma);
    put_param(out, &t.bn_beta);
    put_usize(out, t.running_mean.len());
    put_f64_slice(out, &t.running_mean);
    put_f64_slice(out, &t.running_var);
    put_f64(out, t.bn_momentum);
    put_f64(out, t.bn_eps);
}

fn read_transform(cur: &mut Cursor) -> Result<SourceTransform> {
    let dense = read_param(cur)?;
    let bn_gamma = read_param(cur)?;
    let bn_beta = read_param(cur)?;
    let n = cur.usize()?;
    let running_mean = cur.f64_vec(n)?;
    let running_var = cur.f64_vec(n)?;
    let bn_momentum = cur.f64()?;
    let bn_eps = cur.f64()?;
    Ok(SourceTransform {
        dense,
        bn_gamma,
        bn_beta,
        running_mean,
        running_var,
        bn_momentum,
        bn_eps,
    })
}

fn put_op_params(out: &mut Vec<u8>, op: &OpParams) {
    match op {
        OpParams::None => out.push(0),
        OpParams::WAdd { w_s, w_t } => {
            out.push(1);
            put_param(out, w_s);
            put_param(out, w_t);
        }
        OpParams::LinComb { lin_s, lin_t } => {
            out.push(2);
            put_param(out, lin_s);
            put_param(out, lin_t);
        }
        OpParams::FactRed { dense_s, dense_t } => {
            out.push(3);
            put_param(out, dense_s);
            put_param(out, dense_t);
        }
    }
}

fn read_op_params(cur: &mut Cursor) -> Result<OpParams> {
    Ok(match cur.take(1)?[0] {
        0 => OpParams::None,
        1 => OpParams::WAdd { w_s: read_param(cur)?, w_t: read_param(cur)? },
        2 => OpParams::LinComb { lin_s: read_param(cur)?, lin_t: read_param(cur)? },
        3 => OpParams::FactRed { dense_s: read_param(cur)?, dense_t: read_param(cur)? },
        other => return Err(Error::Parse(format!("unknown op-params tag {other}"))),
    })
}

pub fn store_to_bytes(store: &RouteParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&store.base_seed.to_le_bytes());
    put_f64(&mut out, store.fm_weight);
    put_f64(&mut out, store.bn_momentum);
    put_f64(&mut out, store.bn_eps);
    put_usize(&mut out, store.len());
    for ((layer, action), params) in store.entries() {
        put_usize(&mut out, *layer);
        put_action(&mut out, action);
        put_transform(&mut out, &params.transform);
        put_op_params(&mut out, &params.op);
    }
    out
}

pub fn store_from_cursor(cur: &mut Cursor) -> Result<RouteParamStore> {
    let base_seed = cur.u64()?;
    let fm_weight = cur.f64()?;
    let bn_momentum = cur.f64()?;
    let bn_eps = cur.f64()?;
    let mut store = RouteParamStore::new(base_seed, fm_weight);
    store.bn_momentum = bn_momentum;
    store.bn_eps = bn_eps;
    let n = cur.usize()?;
    for _ in 0..n {
        let layer = cur.usize()?;
        let action = read_action(cur)?;
        let transform = read_transform(cur)?;
        let op = read_op_params(cur)?;
        store.insert(layer, action, RouteParams { transform, op });
    }
    Ok(store)
}

/// A frozen pretrained source network plus its held-out test MSE.
pub struct SourceCheckpoint {
    pub net: LayeredNet,
    pub test_mse: f64,
}

impl SourceCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SOURCE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_f64(&mut out, self.test_mse);
        out.extend_from_slice(&net_to_bytes(&self.net));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != SOURCE_MAGIC {
            return Err(Error::Parse("bad source checkpoint magic".into()));
        }
        if cur.u32()? != VERSION {
            return Err(Error::Parse("unsupported source checkpoint version".into()));
        }
        let test_mse = cur.f64()?;
        let net = net_from_cursor(&mut cur)?;
        Ok(SourceCheckpoint { net, test_mse })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing source checkpoint {}; run `autoroute pretrain` first",
                path.display()
            )));
        }
        SourceCheckpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// End-of-run state: target network, route parameters, bandits, rng state.
pub struct RunCheckpoint {
    pub target: LayeredNet,
    pub store: RouteParamStore,
    pub bandits: Vec<BanditState>,
    /// Opaque serialized rng streams (seed + word position pairs).
    pub rng_state: Vec<u8>,
}

impl RunCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RUN_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&net_to_bytes(&self.target));
        out.extend_from_slice(&store_to_bytes(&self.store));
        put_usize(&mut out, self.bandits.len());
        for b in &self.bandits {
            let bytes = b.to_bytes();
            put_usize(&mut out, bytes.len());
            out.extend_from_slice(&bytes);
        }
        put_usize(&mut out, self.rng_state.len());
        out.extend_from_slice(&self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != RUN_MAGIC {
            return Err(Error::Parse("bad run checkpoint magic".into()));
        }
        if cur.u32()? != VERSION {
            return Err(Error::Parse("unsupported run checkpoint version".into()));
        }
        let target = net_from_cursor(&mut cur)?;
        let store = store_from_cursor(&mut cur)?;
        let n = cur.usize()?;
        let mut bandits = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.usize()?;
            bandits.push(BanditState::from_bytes(cur.take(len)?)?);
        }
        let len = cur.usize()?;
        let rng_state = cur.take(len)?.to_vec();
        Ok(RunCheckpoint { target, store, bandits, rng_state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunCheckpoint::from_bytes(&std::fs::read(path)?)
    }
}
