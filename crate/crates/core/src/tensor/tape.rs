//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node to the [`Tape`]; nodes only ever refer to
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise and row-wise primitives selectable at runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    L2NormRows,
    MeanRows,
    Scale(ScaleBits),
}

/// An `f64` factor carried inside a `Copy + Eq` enum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleBits(u64);

impl ScaleBits {
    pub fn new(s: f64) -> Self {
        Self(s.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddBias(Var, Var),
    L2NormRows(Var),
    MeanRows(Var),
    Sum(Var),
    Exp(Var),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    PairwiseSqDist(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    ///
    /// Leaves that require a gradient but are disconnected from the loss
    /// report an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(1.0, self.value(b));
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(-1.0, self.value(b));
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Adds the `1 x d` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if bs != (1, xs.1) {
            return Err(Error::dim("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let b = self.value(bias).row(0).to_vec();
        let mut value = self.value(x).clone();
        for r in 0..xs.0 {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Divides every row by `max(norm, NORM_EPS)`, so all-zero rows stay zero.
    pub fn l2norm_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let norm = row_norm(x.row(r)).max(NORM_EPS);
            value.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        self.push("l2norm_rows", value, Op::L2NormRows(a), &[a])
    }

    /// Column means: an `n x d` input becomes `1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::degenerate("mean_rows", "no rows"));
        }
        let n = x.rows() as f64;
        let value = Tensor::from_fn(1, x.cols(), |_, c| {
            (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n
        });
        self.push("mean_rows", value, Op::MeanRows(a), &[a])
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} of {}", x.rows()),
            ));
        }
        let value = x.select_rows(idx);
        self.push("gather_rows", value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Multiplies row `i` of `x` by `s[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape(), self.value(s).shape());
        if ss != (xs.0, 1) {
            return Err(Error::dim("scale_rows", format!("{xs:?} by {ss:?}")));
        }
        let factors = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (r, f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push("scale_rows", value, Op::ScaleRows(x, s), &[x, s])
    }

    /// `out[i, j] = ||a_i - b_j||^2` for rows of `a` (q x d) and `b` (n x d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::dim(
                "pairwise_sq_dist",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let value = Tensor::from_fn(av.rows(), bv.rows(), |i, j| {
            av.row(i)
                .iter()
                .zip(bv.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() || l.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), l.rows()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {bad} of {} classes", l.cols()),
            ));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += log_sum_exp(l.row(r)) - l.get(r, t);
        }
        let value = Tensor::scalar(total / l.rows() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy(logits, targets.to_vec()),
            &[logits],
        )
    }

    /// Runtime-dispatched elementwise primitive; `b` is required for the binary kinds.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Contract(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => self.relu(a),
            Elementwise::L2NormRows => self.l2norm_rows(a),
            Elementwise::MeanRows => self.mean_rows(a),
            Elementwise::Scale(s) => self.scale(a, s.get()),
        }
    }

    /// Populates gradients of the scalar `loss` for every node that requires one.
    ///
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() && matches!(node.op, Op::Leaf) {
                node.grad = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, av);
                    gemm(g, false, bv, true, acc, true);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv);
                    gemm(av, true, g, false, acc, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, v, g).axpy(1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, *a, g).axpy(1.0, g);
                }
                if wants(*b) {
                    slot(grads, *b, g).axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, av);
                    for ((d, gg), y) in acc.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gg * y;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv);
                    for ((d, gg), x) in acc.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gg * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    slot(grads, *a, g).axpy(*s, g);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let acc = slot(grads, *a, x);
                    for ((d, gg), xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > 0.0 {
                            *d += gg;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    slot(grads, *x, g).axpy(1.0, g);
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, self.value(*bias));
                    for r in 0..g.rows() {
                        for (d, gg) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::L2NormRows(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let acc = slot(grads, *a, x);
                    for r in 0..x.rows() {
                        let norm = row_norm(x.row(r));
                        if norm < NORM_EPS {
                            for (d, gg) in acc.row_mut(r).iter_mut().zip(g.row(r)) {
                                *d += gg / NORM_EPS;
                            }
                            continue;
                        }
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((d, gg), yy) in acc.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d += (gg - yy * dot) / norm;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let n = x.rows() as f64;
                    let acc = slot(grads, *a, x);
                    for r in 0..x.rows() {
                        for (d, gg) in acc.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d += gg / n;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let gg = g.item();
                    let acc = slot(grads, *a, self.value(*a));
                    acc.data_mut().iter_mut().for_each(|d| *d += gg);
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let acc = slot(grads, *a, &node.value);
                    for ((d, gg), y) in acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(node.value.data())
                    {
                        *d += gg * y;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let acc = slot(grads, *a, self.value(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, gg) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if wants(*x) {
                    let acc = slot(grads, *x, xv);
                    for r in 0..xv.rows() {
                        let f = sv.get(r, 0);
                        for (d, gg) in acc.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gg * f;
                        }
                    }
                }
                if wants(*s) {
                    let acc = slot(grads, *s, sv);
                    for r in 0..xv.rows() {
                        let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(p, q)| p * q).sum();
                        acc.data_mut()[r] += dot;
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                if wants(*a) {
                    let acc = slot(grads, *a, av);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = av.get(i, c) - bv.get(j, c);
                                acc.data_mut()[i * d + c] += w * diff;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = av.get(i, c) - bv.get(j, c);
                                acc.data_mut()[j * d + c] -= w * diff;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if wants(*logits) {
                    let l = self.value(*logits);
                    let scale = g.item() / l.rows() as f64;
                    let acc = slot(grads, *logits, l);
                    for (r, &t) in targets.iter().enumerate() {
                        let lse = log_sum_exp(l.row(r));
                        for (c, d) in acc.row_mut(r).iter_mut().enumerate() {
                            let p = (l.get(r, c) - lse).exp();
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *d += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

/// Floor on row norms in [`Tape::l2norm_rows`].
pub const NORM_EPS: f64 = 1e-12;

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
