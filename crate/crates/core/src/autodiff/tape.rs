use super::tensor::{matmul_raw, matmul_t_raw, t_matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Added under the square root of every ℓ2 norm so zero rows stay finite.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    L2NormalizeRows(Var),
    SoftmaxRows(Var, f64),
    /// Log-softmax of `scale·x` per row, restricted to entries where the mask
    /// is true. Masked entries output 0 and receive no gradient.
    LogSoftmaxRows {
        x: Var,
        scale: f64,
        mask: Option<Vec<bool>>,
    },
    Sum(Var),
    Mean(Var),
    /// Mean over rows, producing a single row.
    MeanRows(Var),
    Dot(Var, Var),
    /// `Σ w ⊙ x` for a constant weight tensor.
    WeightedSum(Var, Tensor),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::L2NormalizeRows(..) => "l2_normalize",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Dot(..) => "dot",
            Op::WeightedSum(..) => "weighted_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward values in topological order for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register an input. Parameters and constants are both leaves; callers
    /// pick which gradients to read after [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; both operands share their column count.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("{m}×{k} · ({n}×{k2})ᵀ")));
        }
        let out = matmul_t_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b))
    }

    /// Add row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "mul",
                format!("{:?} ⊙ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// Scale every row to unit ℓ2 norm, with [`NORM_EPS`] under the root.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Row-wise `softmax(scale · x)`, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        self.push(out, Op::SoftmaxRows(a, scale))
    }

    /// Row-wise `log_softmax(scale · x)`.
    pub fn log_softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.masked_log_softmax_rows(a, scale, None)
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked
    /// entries are excluded from the normalizer and output 0.
    pub fn masked_log_softmax_rows(
        &mut self,
        a: Var,
        scale: f64,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(Error::dim("log_softmax", "mask length differs from input"));
            }
        }
        let c = t.cols();
        let mut out = t.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let mx = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| keep(j))
                .map(|(_, &v)| scale * v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(
                    "log_softmax row has no unmasked entries".into(),
                ));
            }
            let lse = mx
                + row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| keep(j))
                    .map(|(_, &v)| (scale * v - mx).exp())
                    .sum::<f64>()
                    .ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { scale * *v - lse } else { 0.0 };
            }
        }
        self.push(out, Op::LogSoftmaxRows { x: a, scale, mask })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(Error::Contract("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a))
    }

    /// Inner product of two equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::dim("dot", format!("{} · {}", ta.len(), tb.len())));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// `Σ w ⊙ a` with `w` held constant.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != w.len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{:?} vs weights {:?}", ta.shape(), w.shape()),
            ));
        }
        let s = ta.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(a, w))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::dim("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(Tensor::matrix(rows.len(), c, out)?, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros_like(self.value(output));
        seed.data_mut()[0] = 1.0;
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = matmul_t_raw(g.data(), tb.data(), m, n, k);
                let db = t_matmul_raw(ta.data(), g.data(), m, k, n);
                acc(*a, reshape(ta, da));
                acc(*b, reshape(tb, db));
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = matmul_raw(g.data(), tb.data(), m, n, k);
                let db = t_matmul_raw(g.data(), ta.data(), m, n, k);
                acc(*a, reshape(ta, da));
                acc(*b, reshape(tb, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let tb = self.value(*b);
                let c = tb.len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, reshape(tb, db));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                acc(*a, reshape(ta, da));
                acc(*b, reshape(tb, db));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, reshape(ta, d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(y.data()).map(|(g, e)| g * e).collect();
                acc(*a, reshape(y, d));
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let d = g.data().iter().zip(ta.data()).map(|(g, x)| g / x).collect();
                acc(*a, reshape(ta, d));
            }
            Op::L2NormalizeRows(a) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    let xr = ta.row(r);
                    let n = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * yg) / n;
                    }
                }
                acc(*a, reshape(ta, d));
            }
            Op::SoftmaxRows(a, scale) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let pr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gp: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        d[r * c + j] = scale * pr[j] * (gr[j] - gp);
                    }
                }
                acc(*a, reshape(y, d));
            }
            Op::LogSoftmaxRows { x, scale, mask } => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        d[r * c + j] = scale * (gr[j] - yr[j].exp() * gsum);
                    }
                }
                acc(*x, reshape(y, d));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, ta.map(|_| g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let s = g.item() / ta.len() as f64;
                acc(*a, ta.map(|_| s));
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let r = ta.rows() as f64;
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for row in d.chunks_mut(c) {
                    for (o, gv) in row.iter_mut().zip(g.data()) {
                        *o = gv / r;
                    }
                }
                acc(*a, reshape(ta, d));
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = g.item();
                acc(*a, reshape(ta, tb.data().iter().map(|v| v * s).collect()));
                acc(*b, reshape(tb, ta.data().iter().map(|v| v * s).collect()));
            }
            Op::WeightedSum(a, w) => {
                let ta = self.value(*a);
                let s = g.item();
                acc(*a, reshape(ta, w.data().iter().map(|v| v * s).collect()));
            }
            Op::GatherRows(a, rows) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*a, reshape(ta, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    acc(p, reshape(tp, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
        }
    }
}

fn reshape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape follows its operand")
}

/// Stable in-place `softmax(scale · row)`.
pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let mut mx = f64::NEG_INFINITY;
    for v in row.iter_mut() {
        *v *= scale;
        mx = mx.max(*v);
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
