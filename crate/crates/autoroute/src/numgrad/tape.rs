//! Reverse-mode differentiation on a flat tape.
//!
//! Every differentiable forward pass builds a fresh `Tape`. Leaves are either
//! trainable (gradients accumulated) or constant (gradients never propagated
//! into them, which is how frozen networks and inputs stay untouched).

use crate::error::{Error, Result};
use crate::numgrad::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// x (B,C) + bias (1,C) broadcast over rows
    AddBias(VarId, VarId),
    Tanh(VarId),
    /// s (1,1) * x
    ScalarMul(VarId, VarId),
    /// gate (B,1) * x (B,C), gate broadcast over columns
    RowGateMul(VarId, VarId),
    /// per-row mean over features: (B,C) -> (B,1)
    MeanRows(VarId),
    ConcatCols(VarId, VarId),
    /// y = gamma * (x - mean) * inv_std + beta, per feature column.
    /// `batch_stats` marks whether mean/inv_std were computed from this batch
    /// (training mode; they depend on x) or injected (running statistics).
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// mean over all entries of (pred - target)^2; target is a constant
    MseLoss(VarId, Tensor),
    /// weight * mean over rows of the L2 norm of (a - b) rows
    FmLoss(VarId, VarId, f64),
    ScaleConst(VarId, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> VarId {
        self.push(value, trainable, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` loss w.r.t. this node.
    /// Zeros when the node never received gradient.
    pub fn grad(&self, id: VarId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[id.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_of(&self, id: VarId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        if ac != br {
            return Err(Error::shape(
                "matmul",
                format!("inner dims equal ({ar}x{ac})"),
                format!("{br}x{bc}"),
            ));
        }
        let v = Tensor::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, ng, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise_binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise_binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    fn elementwise_binary(
        &mut self,
        a: VarId,
        b: VarId,
        what: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<VarId> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::shape(what, format!("{sa:?}"), format!("{sb:?}")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = va.clone();
        for (o, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = f(*o, *y);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, op))
    }

    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (_, c) = self.shape_of(x);
        let sb = self.shape_of(bias);
        if sb != (1, c) {
            return Err(Error::shape("add_bias", format!("(1, {c})"), format!("{sb:?}")));
        }
        let vx = self.value(x);
        let vb = self.value(bias).clone();
        let mut out = vx.clone();
        let cols = c;
        for r in 0..out.rows() {
            for j in 0..cols {
                let v = out.at(r, j) + vb.at(0, j);
                out.set(r, j, v);
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, ng, Op::AddBias(x, bias)))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let ng = self.needs(x);
        self.push(out, ng, Op::Tanh(x))
    }

    pub fn scalar_mul(&mut self, s: VarId, x: VarId) -> Result<VarId> {
        if self.shape_of(s) != (1, 1) {
            return Err(Error::shape(
                "scalar_mul",
                "(1, 1)",
                format!("{:?}", self.shape_of(s)),
            ));
        }
        let sv = self.value(s).item();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= sv);
        let ng = self.needs(s) || self.needs(x);
        Ok(self.push(out, ng, Op::ScalarMul(s, x)))
    }

    pub fn row_gate_mul(&mut self, gate: VarId, x: VarId) -> Result<VarId> {
        let (b, _) = self.shape_of(x);
        if self.shape_of(gate) != (b, 1) {
            return Err(Error::shape(
                "row_gate_mul",
                format!("({b}, 1)"),
                format!("{:?}", self.shape_of(gate)),
            ));
        }
        let g = self.value(gate).clone();
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let gv = g.at(r, 0);
            for j in 0..out.cols() {
                let v = out.at(r, j) * gv;
                out.set(r, j, v);
            }
        }
        let ng = self.needs(gate) || self.needs(x);
        Ok(self.push(out, ng, Op::RowGateMul(gate, x)))
    }

    pub fn mean_rows(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let c = vx.cols() as f64;
        let out = Tensor::from_fn(vx.rows(), 1, |r, _| vx.row(r).iter().sum::<f64>() / c);
        let ng = self.needs(x);
        self.push(out, ng, Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        if ar != br {
            return Err(Error::shape(
                "concat_cols",
                format!("{ar} rows"),
                format!("{br} rows"),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::from_vec(ar, ac + bc, data).expect("concat sizes");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::ConcatCols(a, b)))
    }

    /// Batch normalization with caller-supplied per-column statistics.
    /// `batch_stats = true` means mean/var came from this very batch, so the
    /// backward pass accounts for their dependence on x.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    ) -> Result<VarId> {
        let (_, c) = self.shape_of(x);
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm stats",
                format!("{c} columns"),
                format!("{} / {}", mean.len(), var.len()),
            ));
        }
        if self.shape_of(gamma) != (1, c) || self.shape_of(beta) != (1, c) {
            return Err(Error::shape(
                "batch_norm affine",
                format!("(1, {c})"),
                format!("{:?} / {:?}", self.shape_of(gamma), self.shape_of(beta)),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let vx = self.value(x);
        let g = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let out = Tensor::from_fn(vx.rows(), c, |r, j| {
            g.at(0, j) * (vx.at(r, j) - mean[j]) * inv_std[j] + bt.at(0, j)
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn mse_loss(&mut self, pred: VarId, target: &Tensor) -> Result<VarId> {
        let sp = self.shape_of(pred);
        if sp != target.shape() {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?}", target.shape()),
                format!("{sp:?}"),
            ));
        }
        let vp = self.value(pred);
        let n = vp.len() as f64;
        let s: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(s / n), ng, Op::MseLoss(pred, target.clone())))
    }

    /// weight * (1/B) * sum_r ||a_r - b_r||_2
    pub fn fm_loss(&mut self, a: VarId, b: VarId, weight: f64) -> Result<VarId> {
        let sa = self.shape_of(a);
        if sa != self.shape_of(b) {
            return Err(Error::shape(
                "fm_loss",
                format!("{sa:?}"),
                format!("{:?}", self.shape_of(b)),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut total = 0.0;
        for r in 0..va.rows() {
            let mut ss = 0.0;
            for (x, y) in va.row(r).iter().zip(vb.row(r)) {
                ss += (x - y) * (x - y);
            }
            total += ss.sqrt();
        }
        let v = weight * total / va.rows() as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(v), ng, Op::FmLoss(a, b, weight)))
    }

    pub fn scale_const(&mut self, x: VarId, c: f64) -> VarId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.needs(x);
        self.push(out, ng, Op::ScaleConst(x, c))
    }

    fn acc_grad(&mut self, id: VarId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        let g = node.grad.get_or_insert_with(|| {
            let (r, c) = node.value.shape();
            Tensor::zeros(r, c)
        });
        for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
            *gv += dv;
        }
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward without a recorded forward".into()));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward loss",
                "(1, 1)",
                format!("{:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].value.item().is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.ran_backward = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let dy = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let mut da = Tensor::zeros(self.shape_of(a).0, self.shape_of(a).1);
                        Tensor::matmul_nt_acc(&dy, self.value(b), &mut da);
                        self.acc_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = Tensor::zeros(self.shape_of(b).0, self.shape_of(b).1);
                        Tensor::matmul_tn_acc(self.value(a), &dy, &mut db);
                        self.acc_grad(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_grad(a, &dy);
                    self.acc_grad(b, &dy);
                }
                Op::Sub(a, b) => {
                    self.acc_grad(a, &dy);
                    let mut neg = dy.clone();
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.acc_grad(b, &neg);
                }
                Op::AddBias(x, bias) => {
                    self.acc_grad(x, &dy);
                    if self.needs(bias) {
                        let mut db = Tensor::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for j in 0..dy.cols() {
                                let v = db.at(0, j) + dy.at(r, j);
                                db.set(0, j, v);
                            }
                        }
                        self.acc_grad(bias, &db);
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[idx].value.clone();
                    let mut dx = dy.clone();
                    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - yv * yv;
                    }
                    self.acc_grad(x, &dx);
                }
                Op::ScalarMul(s, x) => {
                    let sv = self.value(s).item();
                    if self.needs(x) {
                        let mut dx = dy.clone();
                        dx.data_mut().iter_mut().for_each(|v| *v *= sv);
                        self.acc_grad(x, &dx);
                    }
                    if self.needs(s) {
                        let ds: f64 = dy
                            .data()
                            .iter()
                            .zip(self.value(x).data())
                            .map(|(d, xv)| d * xv)
                            .sum();
                        self.acc_grad(s, &Tensor::scalar(ds));
                    }
                }
                Op::RowGateMul(gate, x) => {
                    let g = self.value(gate).clone();
                    if self.needs(x) {
                        let mut dx = dy.clone();
                        for r in 0..dx.rows() {
                            let gv = g.at(r, 0);
                            for j in 0..dx.cols() {
                                let v = dx.at(r, j) * gv;
                                dx.set(r, j, v);
                            }
                        }
                        self.acc_grad(x, &dx);
                    }
                    if self.needs(gate) {
                        let xv = self.value(x).clone();
                        let dg = Tensor::from_fn(dy.rows(), 1, |r, _| {
                            dy.row(r).iter().zip(xv.row(r)).map(|(d, x)| d * x).sum()
                        });
                        self.acc_grad(gate, &dg);
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape_of(x);
                    let dx = Tensor::from_fn(r, c, |ri, _| dy.at(ri, 0) / c as f64);
                    self.acc_grad(x, &dx);
                }
                Op::ConcatCols(a, b) => {
                    let (ar, ac) = self.shape_of(a);
                    let (_, bc) = self.shape_of(b);
                    if self.needs(a) {
                        let da = Tensor::from_fn(ar, ac, |r, c| dy.at(r, c));
                        self.acc_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = Tensor::from_fn(ar, bc, |r, c| dy.at(r, ac + c));
                        self.acc_grad(b, &db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let vx = self.value(x).clone();
                    let g = self.value(gamma).clone();
                    let (b_sz, c) = vx.shape();
                    let bn = b_sz as f64;
                    let xhat =
                        Tensor::from_fn(b_sz, c, |r, j| (vx.at(r, j) - mean[j]) * inv_std[j]);
                    if self.needs(gamma) {
                        let dg = Tensor::from_fn(1, c, |_, j| {
                            (0..b_sz).map(|r| dy.at(r, j) * xhat.at(r, j)).sum()
                        });
                        self.acc_grad(gamma, &dg);
                    }
                    if self.needs(beta) {
                        let db =
                            Tensor::from_fn(1, c, |_, j| (0..b_sz).map(|r| dy.at(r, j)).sum());
                        self.acc_grad(beta, &db);
                    }
                    if self.needs(x) {
                        let dx = if batch_stats {
                            let mut mean_dy = vec![0.0; c];
                            let mut mean_dy_xhat = vec![0.0; c];
                            for r in 0..b_sz {
                                for j in 0..c {
                                    mean_dy[j] += dy.at(r, j);
                                    mean_dy_xhat[j] += dy.at(r, j) * xhat.at(r, j);
                                }
                            }
                            for j in 0..c {
                                mean_dy[j] /= bn;
                                mean_dy_xhat[j] /= bn;
                            }
                            Tensor::from_fn(b_sz, c, |r, j| {
                                g.at(0, j)
                                    * inv_std[j]
                                    * (dy.at(r, j)
                                        - mean_dy[j]
                                        - xhat.at(r, j) * mean_dy_xhat[j])
                            })
                        } else {
                            Tensor::from_fn(b_sz, c, |r, j| dy.at(r, j) * g.at(0, j) * inv_std[j])
                        };
                        self.acc_grad(x, &dx);
                    }
                }
                Op::MseLoss(pred, target) => {
                    let vp = self.value(pred).clone();
                    let n = vp.len() as f64;
                    let scale = 2.0 * dy.item() / n;
                    let dp = Tensor::from_fn(vp.rows(), vp.cols(), |r, c| {
                        scale * (vp.at(r, c) - target.at(r, c))
                    });
                    self.acc_grad(pred, &dp);
                }
                Op::FmLoss(a, b, weight) => {
                    let va = self.value(a).clone();
                    let vb = self.value(b).clone();
                    let bn = va.rows() as f64;
                    let scale = dy.item() * weight / bn;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let mut ss = 0.0;
                        for (x, y) in va.row(r).iter().zip(vb.row(r)) {
                            ss += (x - y) * (x - y);
                        }
                        let norm = ss.sqrt();
                        if norm > 1e-12 {
                            for j in 0..va.cols() {
                                da.set(r, j, scale * (va.at(r, j) - vb.at(r, j)) / norm);
                            }
                        }
                    }
                    self.acc_grad(a, &da);
                    let mut db = da.clone();
                    db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.acc_grad(b, &db);
                }
                Op::ScaleConst(x, cst) => {
                    let mut dx = dy.clone();
                    dx.data_mut().iter_mut().for_each(|v| *v *= cst);
                    self.acc_grad(x, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_chain_rule() {
        // loss = mean((w*x - y)^2), w=1, x=2, y=1 -> dL/dw = 2*(2-1)*2 = 4
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        let x = tape.constant(Tensor::scalar(2.0));
        let pred = tape.matmul(x, w).unwrap();
        let loss = tape.mse_loss(pred, &Tensor::scalar(1.0)).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(w).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::scalar(3.0));
        let x = tape.constant(Tensor::scalar(2.0));
        let pred = tape.matmul(x, w).unwrap();
        let loss = tape.mse_loss(pred, &Tensor::scalar(0.0)).unwrap();
        // entire graph is constant: backward refuses nothing, grads stay zero
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).item(), 0.0);
        assert_eq!(tape.grad(x).item(), 0.0);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_nonfinite_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(f64::INFINITY), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fm_loss_zero_at_equal_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = tape.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = tape.fm_loss(a, b, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}
