//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value
//! and enough context to compute vector-Jacobian products. [`Tape::backward`]
//! replays the nodes in reverse order from a scalar loss.
//!
//! Parameter values are shared with the tape through `Arc`, so binding a
//! model's parameters to a fresh tape is cheap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation implemented outside this module.
pub trait BackwardOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Ln,
    Silu,
    Sigmoid,
    Softplus,
    EluPlusOne,
    Tanh,
    Square,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    RowNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>, Tensor),
    Mse(Var, Tensor),
    SoftmaxKl(Var, Vec<f64>, Vec<f64>),
    Custom(Vec<Var>, Box<dyn BackwardOp>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. One tape belongs to one logical computation (for
/// example a single episode's forward and backward pass).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with a parameter store.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast-adds a vector (numel = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row).data())?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Broadcast-multiplies every row of `a` by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).mul_row(self.value(row).data())?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.numel() != av.rows() {
            return Err(Error::dim("mul_col", av.shape(), cv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, &s) in cv.data().iter().enumerate() {
            for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                *x *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Silu => tensor::silu,
            Unary::Sigmoid => tensor::sigmoid,
            Unary::Softplus => tensor::softplus,
            Unary::EluPlusOne => tensor::elu_plus_one,
            Unary::Tanh => f64::tanh,
            Unary::Square => |x| x * x,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary(a, u), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.unary(a, Unary::EluPlusOne)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Per-row standardization (zero mean, unit variance) without affine terms.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(av.shape());
        let mut rstd = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            rstd.push(tensor::normalize_row(av.row(i), &mut out.data_mut()[i * c..(i + 1) * c]));
        }
        self.push(out, Op::RowNorm(a, rstd), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(Error::dim("slice_cols", av.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(n, len, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(*p).shape(),
                ));
            }
        }
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::dim("slice_rows", av.shape(), &[start, len]));
        }
        let out = av.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= tv.rows() {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for table with {} rows",
                    tv.rows()
                )));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(av.shape());
        for i in 0..av.rows() {
            let s = tensor::softmax_unchecked(av.row(i), 1.0);
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&s);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean cross-entropy of `logits` rows against integer `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let c = lv.cols();
        let mut probs = Tensor::zeros(&[lv.rows(), c]);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Contract(format!("target {t} outside {c} classes")));
            }
            let row = lv.row(i);
            let lse = tensor::log_sum_exp(row);
            loss += lse - row[t];
            for (p, &x) in probs.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / targets.len() as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs), &[logits]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(Error::dim("mse", pv.shape(), target.shape()));
        }
        let n = pv.numel() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.clone()), &[pred]))
    }

    /// `KL(p ‖ softmax(scores))` for a single score vector.
    pub fn softmax_kl(&mut self, scores: Var, p: &[f64]) -> Result<Var> {
        let sv = self.value(scores);
        if sv.numel() != p.len() {
            return Err(Error::dim("softmax_kl", sv.shape(), &[p.len()]));
        }
        let q = tensor::softmax_unchecked(sv.data(), 1.0);
        let kl = tensor::kl_divergence(p, &q)?;
        Ok(self.push(Tensor::scalar(kl), Op::SoftmaxKl(scores, p.to_vec(), q), &[scores]))
    }

    /// Records an externally implemented operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn BackwardOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every leaf
    /// that was created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let target_shape = self.nodes[v.0].value.shape();
        let g = if g.shape() == target_shape {
            g
        } else {
            g.reshape(target_shape.to_vec())?
        };
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: ga = g b, gb = gᵀ a
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let gb = g.t_matmul(self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for r in g.data().chunks(c) {
                    for (s, &x) in gr.iter_mut().zip(r) {
                        *s += x;
                    }
                }
                let shape = self.shape(*row).to_vec();
                self.accumulate(grads, *row, Tensor::new(shape, gr)?)?;
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                self.accumulate(grads, *a, g.mul_row(rv)?)?;
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for (gr_row, a_row) in g.data().chunks(c).zip(self.value(*a).data().chunks(c)) {
                    for ((s, &x), &y) in gr.iter_mut().zip(gr_row).zip(a_row) {
                        *s += x * y;
                    }
                }
                let shape = self.shape(*row).to_vec();
                self.accumulate(grads, *row, Tensor::new(shape, gr)?)?;
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                let av = self.value(*a);
                let c = g.cols();
                let mut ga = g.clone();
                let mut gc = vec![0.0; cv.numel()];
                for (i, &s) in cv.data().iter().enumerate() {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    gc[i] = tensor::dot(grow, av.row(i));
                    for x in &mut ga.data_mut()[i * c..(i + 1) * c] {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *col, Tensor::new(cv.shape().to_vec(), gc)?)?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let local = match u {
                    Unary::Exp => g.mul(out)?,
                    Unary::Ln => g.zip_map(x, |g, x| g / x)?,
                    Unary::Silu => g.zip_map(x, |g, x| g * tensor::silu_grad(x))?,
                    Unary::Sigmoid => g.zip_map(out, |g, y| g * y * (1.0 - y))?,
                    Unary::Softplus => g.zip_map(x, |g, x| g * tensor::sigmoid(x))?,
                    Unary::EluPlusOne => g.zip_map(x, |g, x| g * tensor::elu_plus_one_grad(x))?,
                    Unary::Tanh => g.zip_map(out, |g, y| g * (1.0 - y * y))?,
                    Unary::Square => g.zip_map(x, |g, x| 2.0 * g * x)?,
                };
                self.accumulate(grads, *a, local)?;
            }
            Op::RowNorm(a, rstd) => {
                // y = (x - mean) * rstd; gx = rstd * (g - mean(g) - y * mean(g ⊙ y))
                let c = g.cols();
                let cf = c as f64;
                let mut gx = Tensor::zeros(g.shape());
                for (i, &r) in rstd.iter().enumerate() {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let yr = out.row(i);
                    let mg = gr.iter().sum::<f64>() / cf;
                    let mgy = tensor::dot(gr, yr) / cf;
                    for (k, d) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *d = r * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(grads, *a, gx)?;
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (n, c, len) = (av.rows(), av.cols(), g.cols());
                let mut ga = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    ga.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let n = g.rows();
                    let mut data = Vec::with_capacity(n * pc);
                    for i in 0..n {
                        data.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    self.accumulate(grads, p, Tensor::matrix(n, pc, data)?)?;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(&[av.rows(), c]);
                ga.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga)?;
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    self.accumulate(grads, p, g.slice_rows(row, r))?;
                    row += r;
                }
            }
            Op::GatherRows(table, indices) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut gt = Tensor::zeros(&[tv.rows(), c]);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &s) in gt.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()))?;
            }
            Op::SoftmaxRows(a) => {
                let c = g.cols();
                let mut ga = Tensor::zeros(g.shape());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let s = tensor::dot(gr, yr);
                    for (k, d) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *d = yr[k] * (gr[k] - s);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.item() / targets.len() as f64;
                let c = probs.cols();
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl.data_mut()[i * c + t] -= 1.0;
                }
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, gl.scale(scale).reshape(shape)?)?;
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.item() / pv.numel() as f64;
                let gp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), gp)?)?;
            }
            Op::SoftmaxKl(scores, p, q) => {
                let gs: Vec<f64> = q.iter().zip(p).map(|(qi, pi)| g.item() * (qi - pi)).collect();
                let shape = self.shape(*scores).to_vec();
                self.accumulate(grads, *scores, Tensor::new(shape, gs)?)?;
            }
            Op::Custom(inputs, op) => {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&in_vals, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}
