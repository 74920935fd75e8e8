use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels::{gelu, gelu_grad, gemm, log_softmax_row, softmax_row};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Layer-norm variance floor. Small enough that normalized rows keep unit
/// variance to well below 1e-8 for any row whose variance exceeds 1e-2.
pub const LN_EPS: f64 = 1e-10;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] · [k,n]`
    MatMul(Var, Var),
    /// `[m,k] · [n,k]ᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r,c] + [c]` broadcast over rows.
    AddRow(Var, Var),
    /// `[r,c] ⊙ [c]` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax { x: Var, causal: bool },
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Gather { x: Var, index: Vec<(usize, usize)> },
    Sum(Var),
    OverwriteRow { x: Var, row: usize, value: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::OverwriteRow { .. } => "overwrite_row",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Abs(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Gather { x, .. }
            | Op::OverwriteRow { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

/// Activations a backward rule needs beyond the node's inputs and output.
#[derive(Debug, Clone)]
enum Saved {
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    saved: Option<Saved>,
    requires_grad: bool,
    name: Option<String>,
}

/// Recorded compute graph with reverse-mode gradients.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller ids than the node itself and a reverse sweep is a valid
/// topological order for backpropagation. Leaves may borrow their value
/// (model parameters) to avoid copying weights for every forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl<'a> Tape<'a> {
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
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    /// Leaf that can be rebound by name in [`Tape::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn set_name(&mut self, v: Var, name: &str) {
        self.nodes[v.0].name = Some(name.to_string());
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, saved: None, requires_grad, name: None });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.compute(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value: Cow::Owned(value), saved, requires_grad, name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // Recording API
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` stored as `[out, in]` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by `row`. Used as the
    /// neuron scale hook.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    /// Elementwise absolute value; the subgradient at exactly 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Abs(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gain, bias })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax { x, causal: false })
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax { x, causal: true })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(x))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.record(Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.record(Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Picks individual `(row, col)` entries into a vector.
    pub fn gather(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        self.record(Op::Gather { x, index: index.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    /// Replaces one row with a constant; no gradient flows into that row.
    pub fn overwrite_row(&mut self, x: Var, row: usize, value: &[f64]) -> Result<Var> {
        self.record(Op::OverwriteRow { x, row, value: value.to_vec() })
    }

    // ---------------------------------------------------------------------
    // Forward rules
    // ---------------------------------------------------------------------

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.as_ref())
            .ok_or_else(|| Error::Graph(format!("variable {} is not on this tape", v.0)))
    }

    fn compute(&self, op: &Op) -> Result<(Tensor, Option<Saved>)> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                let (m, k) = mat_dims(a, "matmul")?;
                let (k2, n) = mat_dims(b, "matmul")?;
                if k != k2 {
                    return Err(shape_err("matmul", a, b));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
                Tensor::matrix(m, n, out)?
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                let (m, k) = mat_dims(a, "matmul_nt")?;
                let (n, k2) = mat_dims(b, "matmul_nt")?;
                if k != k2 {
                    return Err(shape_err("matmul_nt", a, b));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
                Tensor::matrix(m, n, out)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                if !a.same_shape(b) {
                    return Err(shape_err(op.name(), a, b));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (a, r) = (self.val(*a)?, self.val(*r)?);
                if r.shape().len() != 1 || r.numel() != a.cols() {
                    return Err(shape_err(op.name(), a, r));
                }
                let add = matches!(op, Op::AddRow(..));
                let mut data = a.data().to_vec();
                for row in data.chunks_exact_mut(r.numel()) {
                    for (x, &y) in row.iter_mut().zip(r.data()) {
                        if add {
                            *x += y;
                        } else {
                            *x *= y;
                        }
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => map(self.val(*a)?, |x| x * c)?,
            Op::Gelu(a) => map(self.val(*a)?, gelu)?,
            Op::Abs(a) => map(self.val(*a)?, f64::abs)?,
            Op::LayerNorm { x, gain, bias } => {
                let (x, g, b) = (self.val(*x)?, self.val(*gain)?, self.val(*bias)?);
                let c = x.cols();
                if g.shape() != [c] || b.shape() != [c] {
                    return Err(shape_err("layer_norm", x, g));
                }
                let rows = x.rows();
                let mut xhat = vec![0.0; rows * c];
                let mut rstd = vec![0.0; rows];
                let mut out = vec![0.0; rows * c];
                for r in 0..rows {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let rs = 1.0 / (var + LN_EPS).sqrt();
                    rstd[r] = rs;
                    for j in 0..c {
                        let h = (xr[j] - mean) * rs;
                        xhat[r * c + j] = h;
                        out[r * c + j] = h * g.data()[j] + b.data()[j];
                    }
                }
                let t = Tensor::new(x.shape().to_vec(), out)?;
                return Ok((t, Some(Saved::LayerNorm { xhat, rstd })));
            }
            Op::Softmax { x, causal } => {
                let x = self.val(*x)?;
                let mut t = x.clone();
                for r in 0..t.rows() {
                    softmax_row(t.row_mut(r), causal.then_some(r));
                }
                t
            }
            Op::LogSoftmax(x) => {
                let mut t = self.val(*x)?.clone();
                for r in 0..t.rows() {
                    log_softmax_row(t.row_mut(r));
                }
                t
            }
            Op::Embedding { table, ids } => {
                let table = self.val(*table)?;
                let (v, d) = mat_dims(table, "embedding")?;
                if ids.is_empty() {
                    return Err(Error::Shape("embedding of an empty id list".into()));
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Error::Shape(format!("token id {id} outside table of {v}")));
                    }
                    out.extend_from_slice(table.row(id));
                }
                Tensor::matrix(ids.len(), d, out)?
            }
            Op::SliceCols { x, start, len } => {
                let x = self.val(*x)?;
                let (rows, c) = mat_dims(x, "slice_cols")?;
                if *len == 0 || start + len > c {
                    return Err(Error::Shape(format!("slice {start}..{} of {c} columns", start + len)));
                }
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Tensor::matrix(rows, *len, out)?
            }
            Op::ConcatCols(parts) => {
                let vals = parts.iter().map(|p| self.val(*p)).collect::<Result<Vec<_>>>()?;
                let first = vals.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
                let rows = mat_dims(first, "concat_cols")?.0;
                let mut total = 0;
                for v in &vals {
                    let (r, c) = mat_dims(v, "concat_cols")?;
                    if r != rows {
                        return Err(shape_err("concat_cols", first, v));
                    }
                    total += c;
                }
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for v in &vals {
                        out.extend_from_slice(v.row(r));
                    }
                }
                Tensor::matrix(rows, total, out)?
            }
            Op::SelectRows { x, rows } => {
                let x = self.val(*x)?;
                let (n, c) = mat_dims(x, "select_rows")?;
                if rows.is_empty() || rows.iter().any(|&r| r >= n) {
                    return Err(Error::Shape(format!("row selection {rows:?} of {n} rows")));
                }
                let mut out = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    out.extend_from_slice(x.row(r));
                }
                Tensor::matrix(rows.len(), c, out)?
            }
            Op::Gather { x, index } => {
                let x = self.val(*x)?;
                let (n, c) = (x.rows(), x.cols());
                if index.is_empty() || index.iter().any(|&(r, j)| r >= n || j >= c) {
                    return Err(Error::Shape(format!("gather index out of [{n}, {c}]")));
                }
                Tensor::vector(index.iter().map(|&(r, j)| x.data()[r * c + j]).collect())
            }
            Op::Sum(x) => Tensor::scalar(self.val(*x)?.data().iter().sum()),
            Op::OverwriteRow { x, row, value } => {
                let x = self.val(*x)?;
                if *row >= x.rows() || value.len() != x.cols() {
                    return Err(Error::Shape(format!(
                        "overwrite row {row} (len {}) of {:?}",
                        value.len(),
                        x.shape()
                    )));
                }
                let mut t = x.clone();
                t.row_mut(*row).copy_from_slice(value);
                t
            }
        };
        Ok((out, None))
    }

    // ---------------------------------------------------------------------
    // Replay
    // ---------------------------------------------------------------------

    /// Rebinds named leaves and replays every recorded operation.
    ///
    /// Returns the values of all named non-leaf nodes. Any previously
    /// computed gradients are discarded.
    pub fn evaluate(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for (name, t) in inputs {
            let idx = self
                .nodes
                .iter()
                .position(|n| matches!(n.op, Op::Leaf) && n.name.as_deref() == Some(name.as_str()))
                .ok_or_else(|| Error::Graph(format!("no input named `{name}`")))?;
            if !self.nodes[idx].value.same_shape(t) {
                return Err(Error::Shape(format!(
                    "input `{name}` bound with shape {:?}, recorded {:?}",
                    t.shape(),
                    self.nodes[idx].value.shape()
                )));
            }
            self.nodes[idx].value = Cow::Owned(t.clone());
        }
        self.replay()?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .filter_map(|n| n.name.clone().map(|name| (name, n.value.clone().into_owned())))
            .collect())
    }

    /// Overwrites one coordinate of a leaf value; used by the gradient checker.
    pub(crate) fn perturb_leaf(&mut self, v: Var, coord: usize, value: f64) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Graph("only leaves can be perturbed".into()));
        }
        node.value.to_mut().data_mut()[coord] = value;
        Ok(())
    }

    pub(crate) fn replay(&mut self) -> Result<()> {
        self.grads.clear();
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, saved) = self.compute(&self.nodes[i].op)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(self.nodes[i].op.name().to_string()));
            }
            self.nodes[i].value = Cow::Owned(value);
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    pub(crate) fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| Var(i))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Backpropagates from a single-element output. Gradients of earlier
    /// calls are reset first, so repeated calls give identical results.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.val(output)?;
        if out.numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar output, got {:?}", out.shape())));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(Error::Detached(output.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.backward_rule(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<&Tensor> {
        let node = self.nodes.get(v.0).ok_or_else(|| Error::Graph(format!("variable {} is not on this tape", v.0)))?;
        if !node.requires_grad {
            return Err(Error::Detached(v.0));
        }
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Graph(format!("no gradient reached variable {}", v.0)))
    }

    /// Like [`Tape::grad`] but yields zeros for a tracked leaf that the
    /// output does not depend on.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Tensor> {
        match self.grad(v) {
            Ok(g) => Ok(g.clone()),
            Err(Error::Graph(_)) => Ok(Tensor::zeros(self.value(v).shape())),
            Err(e) => Err(e),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut da, false);
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, map(g, |v| -v)?));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                out.push((*a, zip(g, bv, |g, b| g * b)?));
                out.push((*b, zip(g, av, |g, a| g * a)?));
            }
            Op::AddRow(a, r) => {
                out.push((*a, g.clone()));
                if self.needs(*r) {
                    out.push((*r, col_sums(g)));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.val(*a)?, self.val(*r)?);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_exact_mut(rv.numel()) {
                        for (x, &s) in row.iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    out.push((*a, da));
                }
                if self.needs(*r) {
                    let prod = zip(g, av, |g, a| g * a)?;
                    out.push((*r, col_sums(&prod)));
                }
            }
            Op::Scale(a, c) => out.push((*a, map(g, |v| v * c)?)),
            Op::Gelu(a) => {
                let x = self.val(*a)?;
                out.push((*a, zip(g, x, |g, x| g * gelu_grad(x))?));
            }
            Op::Abs(a) => {
                let x = self.val(*a)?;
                out.push((*a, zip(g, x, |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })?));
            }
            Op::LayerNorm { x, gain, bias } => {
                let Some(Saved::LayerNorm { xhat, rstd }) = &node.saved else {
                    return Err(Error::Graph("layer norm lost its saved activations".into()));
                };
                let gv = self.val(*gain)?;
                let xv = self.val(*x)?;
                let c = xv.cols();
                let rows = xv.rows();
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * c];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g.row(r)[j] * xhat[r * c + j];
                        }
                    }
                    out.push((*gain, Tensor::vector(dg)));
                }
                if self.needs(*bias) {
                    out.push((*bias, col_sums(g)));
                }
            }
            Op::Softmax { x, .. } => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (d, &lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= lp.exp() * gsum;
                    }
                }
                out.push((*x, dx));
            }
            Op::Embedding { table, ids } => {
                let tv = self.val(*table)?;
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                out.push((*table, dt));
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x)?;
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p)?;
                    let c = pv.cols();
                    let mut dp = Vec::with_capacity(pv.numel());
                    for r in 0..pv.rows() {
                        dp.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    out.push((*p, Tensor::new(pv.shape().to_vec(), dp)?));
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.val(*x)?;
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                out.push((*x, dx));
            }
            Op::Gather { x, index } => {
                let xv = self.val(*x)?;
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &(r, j)) in index.iter().enumerate() {
                    dx.data_mut()[r * c + j] += g.data()[k];
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => {
                let xv = self.val(*x)?;
                out.push((*x, Tensor::full(xv.shape(), g.item())));
            }
            Op::OverwriteRow { x, row, .. } => {
                let mut dx = g.clone();
                dx.row_mut(*row).iter_mut().for_each(|v| *v = 0.0);
                out.push((*x, dx));
            }
        }
        Ok(out)
    }
}

fn mat_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn col_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut s = vec![0.0; c];
    for row in t.data().chunks_exact(c) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::vector(s)
}
