use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tag naming each differentiable operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    Offset,
    ScaleBy,
    MatMul,
    Transpose,
    ConcatCols,
    ConcatRows,
    SliceRows,
    SliceCols,
    Relu,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Mean,
    Sum,
    L1Distance,
    CrossEntropy,
    GatherCols,
    Cosine,
    Embedding,
    Conv1d,
    ConvTranspose1d,
    MeanPoolSegments,
    GatherRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::AddRow => "add-row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "mul-by-scalar",
            OpKind::Offset => "offset",
            OpKind::ScaleBy => "scale-by",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ConcatCols => "concat-last-dim",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRows => "slice-rows",
            OpKind::SliceCols => "slice-cols",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax-last-dim",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::L1Distance => "l1-distance",
            OpKind::CrossEntropy => "cross-entropy-with-logits",
            OpKind::GatherCols => "gather-cols",
            OpKind::Cosine => "cosine-similarity",
            OpKind::Embedding => "embedding-lookup",
            OpKind::Conv1d => "conv1d",
            OpKind::ConvTranspose1d => "transpose-conv1d",
            OpKind::MeanPoolSegments => "mean-pool-segments",
            OpKind::GatherRows => "gather-rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 30] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::ScaleBy,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::L1Distance,
        OpKind::CrossEntropy,
        OpKind::GatherCols,
        OpKind::Cosine,
        OpKind::Embedding,
        OpKind::Conv1d,
        OpKind::ConvTranspose1d,
        OpKind::MeanPoolSegments,
        OpKind::GatherRows,
    ];
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn transpose_out_len(&self, t: usize) -> usize {
        ((t.max(1) - 1) * self.stride + self.kernel).saturating_sub(2 * self.pad)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    L1Distance(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherCols(Var, Vec<usize>),
    Cosine {
        a: Var,
        b: Var,
        norms: Vec<(f64, f64)>,
    },
    Embedding(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    MeanPoolSegments(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::L1Distance(..) => OpKind::L1Distance,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::GatherCols(..) => OpKind::GatherCols,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::Embedding(..) => OpKind::Embedding,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::ConvTranspose1d { .. } => OpKind::ConvTranspose1d,
            Op::MeanPoolSegments(..) => OpKind::MeanPoolSegments,
            Op::GatherRows(..) => OpKind::GatherRows,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the append
/// order is a topological order and the graph is acyclic by construction.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    corrupt: Option<OpKind>,
    param_vars: HashMap<ParamId, Var>,
    bindings: Vec<(Var, ParamId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    bindings: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient of a node; zeros of the node's shape when it did not participate.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient has node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every trainable parameter bound into the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bindings
            .iter()
            .filter(|(v, _)| self.grads[v.0].is_some())
            .map(|&(v, id)| (id, self.get(v)))
            .collect()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            corrupt: None,
            param_vars: HashMap::new(),
            bindings: Vec::new(),
        }
    }

    /// Graph that records values only; no leaf requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test hook: scales the backward pass of `kind` by 1.5, producing a wrong gradient.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = self.grad_enabled
            && match &op {
                Op::Leaf => false,
                _ => self
                    .inputs(&op)
                    .iter()
                    .any(|v| self.nodes[v.0].requires_grad),
            };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy(a, b) | Op::MatMul(a, b) | Op::L1Distance(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::GatherCols(a, _)
            | Op::Embedding(a, _)
            | Op::MeanPoolSegments(a, _)
            | Op::GatherRows(a, _) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }

    /// Adds a leaf. `requires_grad` is ignored on inference graphs.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf",
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter into the graph once; repeated calls reuse the leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = store.is_trainable(id);
        let v = self
            .leaf(store.value(id).clone(), trainable)
            .expect("stored parameters are finite");
        self.param_vars.insert(id, v);
        if trainable && self.grad_enabled {
            self.bindings.push((v, id));
        }
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push(op, out)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + b` with `b` broadcast over rows (`b` has `cols(x)` elements).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(b).numel() != c {
            return Err(shape_err("add-row", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bd[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(Op::AddRow(x, b), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Offset(a), |v| v + c)
    }

    /// `x * s` where `s` is a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale-by", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        self.map(x, Op::ScaleBy(x, s), |v| v * sv)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), self.data(b), &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat-last-dim"));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(shape_err(
                    "concat-last-dim",
                    self.shape(first),
                    self.shape(p),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat-rows"));
        };
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat-rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > r {
            return Err(shape_err("slice-rows", self.shape(a), &[start, end]));
        }
        let t = Tensor::new(
            vec![end - start, c],
            self.data(a)[start * c..end * c].to_vec(),
        )?;
        self.push(Op::SliceRows(a, start), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(shape_err("slice-cols", self.shape(a), &[start, end]));
        }
        let w = end - start;
        let d = self.data(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        self.push(Op::SliceCols(a, start), t)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Softmax(a), t)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`.
    ///
    /// Masked entries get probability exactly zero; the mask is applied by
    /// substituting a large negative constant, keeping every value finite.
    pub fn masked_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut masked = self.data(a).to_vec();
        for i in 0..r {
            for j in (i + offset + 1).min(c)..c {
                masked[i * c + j] = -1e30;
            }
        }
        let mut out = masked;
        for row in out.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Softmax(a), t)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::LogSoftmax(a), t)
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer-norm", self.shape(x), self.shape(gamma)));
        }
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum::<f64>();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean absolute elementwise difference.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1-distance", a, b)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("l1-distance"));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n as f64;
        self.push(Op::L1Distance(a, b), Tensor::scalar(s))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || r == 0 {
            return Err(shape_err(
                "cross-entropy-with-logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TokenOutOfRange { id: bad, size: c });
        }
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite {
                op: "cross-entropy-with-logits",
                node: logits.0,
            });
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= r as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Picks `x[i][idx[i]]` per row, giving an `r x 1` column.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r {
            return Err(shape_err("gather-cols", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::TokenOutOfRange { id: bad, size: c });
        }
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let t = Tensor::new(vec![r, 1], out)?;
        self.push(Op::GatherCols(x, idx.to_vec()), t)
    }

    /// Row-wise cosine similarity, `r x 1`. A zero-norm row yields 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine-similarity", a, b)?;
        let (r, c) = self.dims(a);
        let (da, db) = (self.data(a), self.data(b));
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let x = &da[i * c..(i + 1) * c];
            let y = &db[i * c..(i + 1) * c];
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            if na == 0.0 || nb == 0.0 {
                log::debug!("cosine-similarity: zero-norm row {i}, defined as 0");
                out.push(0.0);
            } else {
                out.push(dot / (na * nb));
            }
            norms.push((na, nb));
        }
        let t = Tensor::new(vec![r, 1], out)?;
        self.push(Op::Cosine { a, b, norms }, t)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, size: v });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(Op::Embedding(table, ids.to_vec()), t)
    }

    /// 1-D convolution over time. `x` is `T x Cin`, `w` is `(K*Cin) x Cout`, `b` has `Cout` entries.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (t_in, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if wr != spec.kernel * cin || self.value(b).numel() != cout || spec.stride == 0 {
            return Err(shape_err("conv1d", self.shape(x), self.shape(w)));
        }
        if t_in + 2 * spec.pad < spec.kernel {
            return Err(shape_err("conv1d", self.shape(x), &[spec.kernel]));
        }
        let t_out = spec.out_len(t_in);
        let cols = im2col(self.data(x), t_in, cin, t_out, spec);
        let mut out = vec![0.0; t_out * cout];
        gemm(t_out, wr, cout, &cols, self.data(w), &mut out, 0.0);
        let bd = self.data(b);
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
        }
        let t = Tensor::new(vec![t_out, cout], out)?;
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols,
            },
            t,
        )
    }

    /// Transposed 1-D convolution. `x` is `T x Cin`, `w` is `Cin x (K*Cout)`, `b` has `Cout` entries.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (t_in, cin) = self.dims(x);
        let (wr, wc) = self.dims(w);
        let cout = self.value(b).numel();
        if wr != cin || wc != spec.kernel * cout || spec.stride == 0 || t_in == 0 {
            return Err(shape_err("transpose-conv1d", self.shape(x), self.shape(w)));
        }
        let t_out = spec.transpose_out_len(t_in);
        let mut z = vec![0.0; t_in * wc];
        gemm(t_in, cin, wc, self.data(x), self.data(w), &mut z, 0.0);
        let mut out = vec![0.0; t_out * cout];
        for t in 0..t_in {
            for k in 0..spec.kernel {
                let s = (t * spec.stride + k) as isize - spec.pad as isize;
                if s < 0 || s as usize >= t_out {
                    continue;
                }
                let s = s as usize;
                for o in 0..cout {
                    out[s * cout + o] += z[t * wc + k * cout + o];
                }
            }
        }
        let bd = self.data(b);
        for row in out.chunks_mut(cout.max(1)) {
            row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
        }
        let t = Tensor::new(vec![t_out, cout], out)?;
        self.push(Op::ConvTranspose1d { x, w, b, spec }, t)
    }

    /// Mean of consecutive row segments of the given sizes (sizes must sum to the row count).
    pub fn mean_pool_segments(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if sizes.iter().sum::<usize>() != r || sizes.contains(&0) {
            return Err(shape_err("mean-pool-segments", self.shape(x), sizes));
        }
        let d = self.data(x);
        let mut out = vec![0.0; sizes.len() * c];
        let mut start = 0;
        for (k, &s) in sizes.iter().enumerate() {
            for i in start..start + s {
                for j in 0..c {
                    out[k * c + j] += d[i * c + j];
                }
            }
            for j in 0..c {
                out[k * c + j] /= s as f64;
            }
            start += s;
        }
        let t = Tensor::new(vec![sizes.len(), c], out)?;
        self.push(Op::MeanPoolSegments(x, sizes.to_vec()), t)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::TokenOutOfRange { id: bad, size: r });
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        self.push(Op::GatherRows(x, idx.to_vec()), t)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.corrupt == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Leaves that require grad but received nothing get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            bindings: self.bindings.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, &d);
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g);
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(grads, *a, &d);
            }
            Op::Offset(a) => self.acc(grads, *a, g),
            Op::ScaleBy(x, s) => {
                let sv = self.data(*s)[0];
                if self.wants(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.acc(grads, *x, &d);
                }
                if self.wants(*s) {
                    let ds: f64 = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s, &[ds]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    // dA = G (m x n) * B^T (n x k)
                    let mut da = vec![0.0; m * k];
                    gemm_strided(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.data(*b),
                        (1, n as isize),
                        &mut da,
                        0.0,
                    );
                    self.acc(grads, *a, &da);
                }
                if self.wants(*b) {
                    // dB = A^T (k x m) * G (m x n)
                    let mut db = vec![0.0; k * n];
                    gemm_strided(
                        k,
                        m,
                        n,
                        self.data(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        &mut db,
                        0.0,
                    );
                    self.acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + off..i * total + off + c]);
                        }
                        self.acc(grads, p, &d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        self.acc(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *a, &d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let w = node.value.dims2().1;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.acc(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let c = node.value.dims2().1;
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::LogSoftmax(a) => {
                let c = node.value.dims2().1;
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims(*x);
                let gm = self.data(*gamma);
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let nf = c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.acc(grads, *gamma, &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *beta, &db);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, &vec![g[0]; n]);
            }
            Op::L1Distance(a, b) => {
                let n = self.value(*a).numel() as f64;
                let d: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| g[0] * sign(x - y) / n)
                    .collect();
                if self.wants(*a) {
                    self.acc(grads, *a, &d);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= scale;
                }
                self.acc(grads, *logits, &d);
            }
            Op::GatherCols(x, idx) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                self.acc(grads, *x, &d);
            }
            Op::Cosine { a, b, norms } => {
                let (r, c) = self.dims(*a);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    let (na, nb) = norms[i];
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let cos = y[i];
                    for j in 0..c {
                        let x = da[i * c + j];
                        let z = db[i * c + j];
                        ga[i * c + j] = g[i] * (z / (na * nb) - cos * x / (na * na));
                        gb[i * c + j] = g[i] * (x / (na * nb) - cos * z / (nb * nb));
                    }
                }
                if self.wants(*a) {
                    self.acc(grads, *a, &ga);
                }
                if self.wants(*b) {
                    self.acc(grads, *b, &gb);
                }
            }
            Op::Embedding(table, ids) => {
                let (v, d) = self.dims(*table);
                let mut dt = vec![0.0; v * d];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[k * d + j];
                    }
                }
                self.acc(grads, *table, &dt);
            }
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols,
            } => {
                let (t_in, cin) = self.dims(*x);
                let (wr, cout) = self.dims(*w);
                let t_out = node.value.dims2().0;
                if self.wants(*w) {
                    let mut dw = vec![0.0; wr * cout];
                    gemm_strided(
                        wr,
                        t_out,
                        cout,
                        cols,
                        (1, wr as isize),
                        g,
                        (cout as isize, 1),
                        &mut dw,
                        0.0,
                    );
                    self.acc(grads, *w, &dw);
                }
                if self.wants(*b) {
                    let mut dbias = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        dbias.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, &dbias);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; t_out * wr];
                    gemm_strided(
                        t_out,
                        cout,
                        wr,
                        g,
                        (cout as isize, 1),
                        self.data(*w),
                        (1, cout as isize),
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; t_in * cin];
                    for t in 0..t_out {
                        for k in 0..spec.kernel {
                            let s = (t * spec.stride + k) as isize - spec.pad as isize;
                            if s < 0 || s as usize >= t_in {
                                continue;
                            }
                            let s = s as usize;
                            for ch in 0..cin {
                                dx[s * cin + ch] += dcols[t * wr + k * cin + ch];
                            }
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
            }
            Op::ConvTranspose1d { x, w, b, spec } => {
                let (t_in, cin) = self.dims(*x);
                let wc = self.dims(*w).1;
                let cout = self.value(*b).numel();
                let t_out = node.value.dims2().0;
                if self.wants(*b) {
                    let mut dbias = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        dbias.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, &dbias);
                }
                let mut dz = vec![0.0; t_in * wc];
                for t in 0..t_in {
                    for k in 0..spec.kernel {
                        let s = (t * spec.stride + k) as isize - spec.pad as isize;
                        if s < 0 || s as usize >= t_out {
                            continue;
                        }
                        let s = s as usize;
                        for o in 0..cout {
                            dz[t * wc + k * cout + o] = g[s * cout + o];
                        }
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; cin * wc];
                    gemm_strided(
                        cin,
                        t_in,
                        wc,
                        self.data(*x),
                        (1, cin as isize),
                        &dz,
                        (wc as isize, 1),
                        &mut dw,
                        0.0,
                    );
                    self.acc(grads, *w, &dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; t_in * cin];
                    gemm_strided(
                        t_in,
                        wc,
                        cin,
                        &dz,
                        (wc as isize, 1),
                        self.data(*w),
                        (1, wc as isize),
                        &mut dx,
                        0.0,
                    );
                    self.acc(grads, *x, &dx);
                }
            }
            Op::MeanPoolSegments(x, sizes) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                let mut start = 0;
                for (k, &s) in sizes.iter().enumerate() {
                    for i in start..start + s {
                        for j in 0..c {
                            d[i * c + j] = g[k * c + j] / s as f64;
                        }
                    }
                    start += s;
                }
                self.acc(grads, *x, &d);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                self.acc(grads, *x, &d);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn im2col(x: &[f64], t_in: usize, cin: usize, t_out: usize, spec: ConvSpec) -> Vec<f64> {
    let wr = spec.kernel * cin;
    let mut cols = vec![0.0; t_out * wr];
    for t in 0..t_out {
        for k in 0..spec.kernel {
            let s = (t * spec.stride + k) as isize - spec.pad as isize;
            if s < 0 || s as usize >= t_in {
                continue;
            }
            let s = s as usize;
            cols[t * wr + k * cin..t * wr + (k + 1) * cin]
                .copy_from_slice(&x[s * cin..(s + 1) * cin]);
        }
    }
    cols
}
