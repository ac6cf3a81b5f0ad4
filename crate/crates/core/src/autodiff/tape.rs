//! Eager tape: every op computes its value immediately and records what the
//! reverse sweep needs. [`Tape::backward`] consumes the tape.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, sigmoid, softplus};

/// Negative-side slope of `leaky_relu`.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Batch variances below this value are clamped before normalizing.
pub const BN_VAR_FLOOR: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Eval,
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Operation selector for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Affine,
    Relu,
    LeakyRelu,
    Sigmoid,
    LogSigmoid,
    Softmax,
    Mean,
    Sum,
    Square,
    NormSqRows,
    /// Inputs: `x, gamma, beta` (train) or `x, gamma, beta, running_mean, running_var` (eval).
    BatchNorm(BatchNormMode),
    CrossEntropy(Vec<usize>),
    /// Inputs: `logits, soft_targets`.
    BceWithSoftTargets,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Mul(Var, Var, bool),
    Affine(Var, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Mean(Var),
    Sum(Var),
    Square(Var),
    NormSqRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        clamped: Vec<bool>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceSoft(Var, Var),
    GatherRows(Var, Vec<usize>),
    PoolRows(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `Aᵀ·B` with `A: m×k`, `B: m×n`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in c[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `A·Bᵀ` with `A: m×n`, `B: k×n`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] = arow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    c
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Same shape, or `b` is a row vector broadcast over the rows of `a`.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(false)
        } else if is_matrix(ta) && tb.numel() == ta.cols() && tb.rows() * tb.cols() == tb.numel()
            && (tb.shape().len() == 1 || tb.rows() == 1)
        {
            Ok(true)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::BceWithSoftTargets => 2,
            OpKind::Affine => 3,
            OpKind::BatchNorm(BatchNormMode::Train) => 3,
            OpKind::BatchNorm(BatchNormMode::Eval) => 5,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let i = inputs;
        match kind {
            OpKind::MatMul => self.matmul(i[0], i[1]),
            OpKind::Add => self.add(i[0], i[1]),
            OpKind::Mul => self.mul(i[0], i[1]),
            OpKind::Affine => self.affine(i[0], i[1], i[2]),
            OpKind::Relu => self.relu(i[0]),
            OpKind::LeakyRelu => self.leaky_relu(i[0]),
            OpKind::Sigmoid => self.sigmoid(i[0]),
            OpKind::LogSigmoid => self.log_sigmoid(i[0]),
            OpKind::Softmax => self.softmax(i[0]),
            OpKind::Mean => self.mean(i[0]),
            OpKind::Sum => self.sum(i[0]),
            OpKind::Square => self.square(i[0]),
            OpKind::NormSqRows => self.norm_sq_rows(i[0]),
            OpKind::BatchNorm(BatchNormMode::Train) => {
                self.batchnorm_train(i[0], i[1], i[2]).map(|(v, _)| v)
            }
            OpKind::BatchNorm(BatchNormMode::Eval) => {
                let (rm, rv) = (self.value(i[3]).data().to_vec(), self.value(i[4]).data().to_vec());
                self.batchnorm_eval(i[0], i[1], i[2], &rm, &rv)
            }
            OpKind::CrossEntropy(labels) => self.cross_entropy(i[0], labels),
            OpKind::BceWithSoftTargets => self.bce_with_soft_targets(i[0], i[1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::matrix(m, n, mm(ta.data(), tb.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if bc {
            let c = tb.numel();
            ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b, bc), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if bc {
            let c = tb.numel();
            ta.data().iter().enumerate().map(|(i, x)| x * tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b, bc), &[a, b])
    }

    /// `x·W + b` with `x: n×in`, `W: in×out`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if !is_matrix(tx) || !is_matrix(tw) || tx.shape()[1] != tw.shape()[0] {
            return Err(self.mismatch("affine", x, w));
        }
        let (n, k, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.numel() != m {
            return Err(self.mismatch("affine", w, b));
        }
        let mut data = mm(tx.data(), tw.data(), n, k, m);
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(tb.data()).for_each(|(y, bias)| *y += bias);
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push("affine", out, Op::Affine(x, w, b), &[x, w, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.map("leaky_relu", a, |x| if x > 0.0 { x } else { LEAKY_SLOPE * x }, Op::LeakyRelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(Error::invalid(format!("softmax expects a matrix, got {:?}", ta.shape())));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Squared Euclidean norm of each row, as an `n×1` column.
    pub fn norm_sq_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let data = ta.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum()).collect();
        let out = Tensor::matrix(ta.rows(), 1, data)?;
        self.push("norm_sq_rows", out, Op::NormSqRows(a), &[a])
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let tx = self.value(x);
        if !is_matrix(tx) {
            return Err(Error::invalid(format!("batchnorm expects a matrix, got {:?}", tx.shape())));
        }
        let c = tx.cols();
        if self.value(gamma).numel() != c {
            return Err(self.mismatch("batchnorm", x, gamma));
        }
        if self.value(beta).numel() != c {
            return Err(self.mismatch("batchnorm", x, beta));
        }
        Ok(c)
    }

    fn bn_output(&self, xhat: &[f64], gamma: Var, beta: Var, c: usize) -> Vec<f64> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        xhat.iter().enumerate().map(|(i, &h)| g[i % c] * h + b[i % c]).collect()
    }

    /// Per-column normalization with batch statistics over the rows of `x`.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let c = self.bn_check(x, gamma, beta)?;
        let tx = self.value(x);
        let n = tx.rows();
        let mut mean = vec![0.0; c];
        for row in tx.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let clamped: Vec<bool> = var.iter().map(|&v| v < BN_VAR_FLOOR).collect();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(BN_VAR_FLOOR).sqrt()).collect();
        let xhat: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), self.bn_output(&xhat, gamma, beta, c))?;
        let stats = BatchStats { mean, var, count: n };
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, clamped, train: true };
        let v = self.push("batchnorm", out, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Normalization with fixed running statistics (treated as constants).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / v.max(BN_VAR_FLOOR).sqrt()).collect();
        let xhat: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - running_mean[i % c]) * inv_std[i % c])
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), self.bn_output(&xhat, gamma, beta, c))?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, clamped: vec![false; c], train: false };
        self.push("batchnorm", out, op, &[x, gamma, beta])
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if !is_matrix(t) || t.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(c).zip(labels) {
            let lse = crate::numeric::log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", out, op, &[logits])
    }

    /// Mean of `-[p·log σ(x) + (1-p)·log(1-σ(x))]`, computed as `softplus(x) - p·x`.
    pub fn bce_with_soft_targets(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(targets));
        if tl.numel() != tt.numel() {
            return Err(self.mismatch("bce_with_soft_targets", logits, targets));
        }
        let total: f64 = tl.data().iter().zip(tt.data()).map(|(&x, &p)| softplus(x) - p * x).sum();
        let out = Tensor::scalar(total / tl.numel() as f64);
        self.push("bce_with_soft_targets", out, Op::BceSoft(logits, targets), &[logits, targets])
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row index {bad} out of range for {r} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    /// Averages consecutive groups of `group` rows.
    pub fn pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(format!("cannot pool {r} rows in groups of {group}")));
        }
        let mut data = vec![0.0; (r / group) * c];
        for (i, row) in ta.data().chunks(c).enumerate() {
            let dst = &mut data[(i / group) * c..(i / group + 1) * c];
            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v / group as f64);
        }
        let out = Tensor::matrix(r / group, c, data)?;
        self.push("pool_rows", out, Op::PoolRows(a, group), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).detached().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| nodes[v.0].value.data();
            let tv = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (tv(*a), tv(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, mm_nt(&g, tb.data(), m, n, k));
                    }
                    if nodes[b.0].tracked {
                        acc(&mut grads, &nodes, *b, mm_tn(ta.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b, bc) => {
                    let gb = if *bc { col_sums(&g, tv(*b).numel()) } else { g.clone() };
                    acc(&mut grads, &nodes, *a, g);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Mul(a, b, bc) => {
                    let (da, db) = (val(*a), val(*b));
                    let c = db.len();
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * db[if *bc { i % c } else { i }]).collect();
                    let prod: Vec<f64> = g.iter().zip(da).map(|(x, y)| x * y).collect();
                    let gb = if *bc { col_sums(&prod, c) } else { prod };
                    acc(&mut grads, &nodes, *a, ga);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Affine(x, w, b) => {
                    let (tx, tw) = (tv(*x), tv(*w));
                    let (n, k, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                    if nodes[x.0].tracked {
                        acc(&mut grads, &nodes, *x, mm_nt(&g, tw.data(), n, m, k));
                    }
                    if nodes[w.0].tracked {
                        acc(&mut grads, &nodes, *w, mm_tn(tx.data(), &g, n, k, m));
                    }
                    acc(&mut grads, &nodes, *b, col_sums(&g, m));
                }
                Op::Scale(a, c) => acc(&mut grads, &nodes, *a, g.iter().map(|x| x * c).collect()),
                Op::Relu(a) => {
                    let ga = g.iter().zip(val(*a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect();
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LeakyRelu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(d, &x)| if x > 0.0 { *d } else { LEAKY_SLOPE * d })
                        .collect();
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Sigmoid(_) | Op::LogSigmoid(_) | Op::Square(_) => {
                    let (a, f): (Var, fn(f64, f64) -> f64) = match &node.op {
                        Op::Sigmoid(a) => (*a, |_x, y| y * (1.0 - y)),
                        Op::LogSigmoid(a) => (*a, |x, _y| sigmoid(-x)),
                        Op::Square(a) => (*a, |x, _y| 2.0 * x),
                        _ => unreachable!(),
                    };
                    let ga = g
                        .iter()
                        .zip(val(a))
                        .zip(node.value.data())
                        .map(|((d, &x), &y)| d * f(x, y))
                        .collect();
                    acc(&mut grads, &nodes, a, ga);
                }
                Op::Softmax(a) => {
                    let c = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, sr), out) in g.chunks(c).zip(node.value.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            out[j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Mean(a) => {
                    let n = tv(*a).numel();
                    acc(&mut grads, &nodes, *a, vec![g[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = tv(*a).numel();
                    acc(&mut grads, &nodes, *a, vec![g[0]; n]);
                }
                Op::NormSqRows(a) => {
                    let c = tv(*a).cols();
                    let ga = val(*a).iter().enumerate().map(|(i, x)| 2.0 * x * g[i / c]).collect();
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, clamped, train } => {
                    let c = inv_std.len();
                    let n = g.len() / c;
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for i in 0..g.len() {
                        let j = i % c;
                        dgamma[j] += g[i] * xhat[i];
                        dbeta[j] += g[i];
                        let dxh = g[i] * gam[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[i];
                    }
                    if nodes[x.0].tracked {
                        let nf = n as f64;
                        let gx = (0..g.len())
                            .map(|i| {
                                let j = i % c;
                                let dxh = g[i] * gam[j];
                                if !*train {
                                    dxh * inv_std[j]
                                } else if clamped[j] {
                                    inv_std[j] * (dxh - sum_dxhat[j] / nf)
                                } else {
                                    inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xhat[i] * sum_dxhat_xhat[j])
                                }
                            })
                            .collect();
                        acc(&mut grads, &nodes, *x, gx);
                    }
                    acc(&mut grads, &nodes, *gamma, dgamma);
                    acc(&mut grads, &nodes, *beta, dbeta);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = tv(*logits).cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut ga: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        ga[r * c + y] -= scale;
                    }
                    acc(&mut grads, &nodes, *logits, ga);
                }
                Op::BceSoft(logits, targets) => {
                    let (x, p) = (val(*logits), val(*targets));
                    let scale = g[0] / x.len() as f64;
                    let gl = x.iter().zip(p).map(|(&xi, &pi)| (sigmoid(xi) - pi) * scale).collect();
                    let gt = x.iter().map(|&xi| -xi * scale).collect();
                    acc(&mut grads, &nodes, *logits, gl);
                    acc(&mut grads, &nodes, *targets, gt);
                }
                Op::GatherRows(a, indices) => {
                    let c = tv(*a).cols();
                    let mut ga = vec![0.0; tv(*a).numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[k * c + j];
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::PoolRows(a, group) => {
                    let c = tv(*a).cols();
                    let ga = (0..tv(*a).numel())
                        .map(|i| g[(i / c / group) * c + i % c] / *group as f64)
                        .collect();
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Reshape(a) => acc(&mut grads, &nodes, *a, g),
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if node.tracked && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn sigmoid_and_log_sigmoid_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -800.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let ls = t.log_sigmoid(x).unwrap();
        assert_eq!(t.value(s).data()[0], 0.5);
        let reference = -800.0 - f64::ln_1p(f64::exp(-800.0));
        assert_eq!(t.value(ls).data()[1], reference);
        assert!(t.value(ls).all_finite());
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![3.0]).unwrap().with_requires_grad(true));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.0]).unwrap().with_requires_grad(true));
        let one = t.constant(Tensor::vector(vec![1.0]).unwrap());
        let wx = t.mul(w, one).unwrap();
        let s = t.sigmoid(wx).unwrap();
        let loss = t.sum(s).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(w).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let s = t.square(w).unwrap();
        assert!(matches!(t.backward(s), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_trainable_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let used = t.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let unused = t.leaf(Tensor::scalar(5.0).with_requires_grad(true));
        let c = t.constant(Tensor::scalar(1.0));
        let loss = t.square(used).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1e4, 1e4, 0.0]).unwrap().with_requires_grad(true));
        let p = t.constant(Tensor::vector(vec![1.0, 0.0, 0.3]).unwrap());
        let loss = t.bce_with_soft_targets(x, p).unwrap();
        let v = t.value(loss).item();
        assert!(v.is_finite());
        assert!((v - (1e4 + 1e4 + std::f64::consts::LN_2) / 3.0).abs() < 1e-9);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.cross_entropy(x, &[0, 3]).is_err());
        let ce = t.cross_entropy(x, &[0, 2]).unwrap();
        assert!((t.value(ce).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn apply_checks_arity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.apply(&OpKind::MatMul, &[x]).is_err());
        assert!(t.apply(&OpKind::Relu, &[x]).is_ok());
    }

    #[test]
    fn batchnorm_floor_on_constant_input() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[4, 2], 3.0));
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let (y, stats) = t.batchnorm_train(x, g, b).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_and_gather_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        let p = t.pool_rows(x, 2).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 5.0, 6.0]);
        let g = t.gather_rows(x, &[3, 0, 3]).unwrap();
        assert_eq!(t.value(g).data(), &[6.0, 7.0, 0.0, 1.0, 6.0, 7.0]);
        assert!(t.pool_rows(x, 3).is_err());
    }
}
