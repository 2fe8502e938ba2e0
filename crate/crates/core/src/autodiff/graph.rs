//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Nodes are appended in construction order, which is automatically a
//! topological order: an operation can only reference nodes that already
//! exist. `forward` evaluates the ancestors of a root in id order and caches
//! every intermediate value; `backward` walks the same set in reverse,
//! accumulating vector-Jacobian products additively across fan-out.
//!
//! Shapes are inferred and checked when a node is built, so shape errors
//! surface at construction, before any arithmetic runs. Values are checked
//! for finiteness after every primitive evaluation.

use std::collections::BTreeMap;

use thiserror::Error;

use super::tensor::{dot_slices, matmul_raw, Tensor, TensorError};

/// Norm guard used by `l2_normalize`: added to the norm so the zero vector
/// maps to the zero vector instead of NaN.
pub const NORM_EPSILON: f64 = 1e-12;

/// Additive mask for causal attention scores; exp(-1e9) underflows to zero
/// after softmax.
const CAUSAL_MASK: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node {0} has no value; run forward first")]
    MissingValue(usize),
    #[error("embedding: id {id} out of range for a table with {rows} rows")]
    EmbeddingIndex { id: usize, rows: usize },
    #[error("softmax_cross_entropy: target {id} out of range for vocabulary {vocab}")]
    TargetIndex { id: usize, vocab: usize },
    #[error("softmax_cross_entropy: every position is padding")]
    AllPadded,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle into a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// Broadcast add of a row vector onto every row of a matrix.
    AddRow,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    /// Row-wise softmax (a vector counts as one row).
    Softmax,
    L2Normalize,
    Cosine,
    Dot,
    Mean,
    Sum,
    Concat,
    Reshape,
    SliceRows {
        start: usize,
        end: usize,
    },
    MeanRows,
    Embedding {
        ids: Vec<usize>,
    },
    /// Scaled dot-product attention scores with an upper-triangular causal
    /// mask: out[i][j] = q_i . k_j / sqrt(d) for j <= i, else a large
    /// negative constant.
    CausalScores,
    /// Sum over non-pad rows of -log softmax(logits)[target].
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
        pad: Option<usize>,
    },
    /// Tensor times a scalar node.
    MulScalar,
    /// Clamp a scalar to [0, 1]; zero gradient outside the open interval.
    ClampUnit,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::L2Normalize => "l2_normalize",
            Op::Cosine => "cosine",
            Op::Dot => "dot",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Concat => "concat",
            Op::Reshape => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::MeanRows => "mean_rows",
            Op::Embedding { .. } => "embedding",
            Op::CausalScores => "causal_scores",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MulScalar => "mul_scalar",
            Op::ClampUnit => "clamp_unit",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Computation graph arena. Single-threaded by construction; tensors are
/// immutable once forward has run and may be shared read-only.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in forward only.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf: `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: value.shape().to_vec(),
            value: Some(value),
            grad: None,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: None,
            grad: None,
            requires_grad,
        });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Replace a leaf's value (used by finite-difference probes).
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Leaf), "set_leaf_value on non-leaf");
        assert_eq!(node.shape, value.shape(), "leaf shape change");
        node.value = Some(value);
    }

    /// Drop cached values of all interior nodes so forward can re-run after
    /// a leaf update.
    pub fn invalidate(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = None;
            }
        }
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    fn want_vector(&self, op: &'static str, a: NodeId) -> Result<usize> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: s.clone(),
            });
        }
        Ok(s[0])
    }

    fn want_matrix(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── node builders ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.want_matrix("matmul", a)?;
        let (k2, n) = self.want_matrix("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div, vec![a, b], shape))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_matrix("add_row", a)?;
        let r = self.want_vector("add_row", row)?;
        if r != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: vec![r],
            });
        }
        Ok(self.push(Op::AddRow, vec![a, row], vec![m, n]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(c), vec![a], shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Exp, vec![a], shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Log, vec![a], shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Tanh, vec![a], shape)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.is_empty() || s.len() > 2 {
            return Err(AutodiffError::InvalidShape {
                op: "softmax",
                shape: s.clone(),
            });
        }
        let shape = s.clone();
        Ok(self.push(Op::Softmax, vec![a], shape))
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.want_vector("l2_normalize", a)?;
        Ok(self.push(Op::L2Normalize, vec![a], vec![n]))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.want_vector("cosine", a)?;
        let nb = self.want_vector("cosine", b)?;
        if na != nb {
            return Err(AutodiffError::ShapeMismatch {
                op: "cosine",
                lhs: vec![na],
                rhs: vec![nb],
            });
        }
        Ok(self.push(Op::Cosine, vec![a, b], vec![]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.want_vector("dot", a)?;
        let nb = self.want_vector("dot", b)?;
        if na != nb {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: vec![na],
                rhs: vec![nb],
            });
        }
        Ok(self.push(Op::Dot, vec![a, b], vec![]))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a], vec![])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a], vec![])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "concat",
                shape: vec![],
            });
        }
        let mut total = 0;
        for &p in parts {
            total += self.want_vector("concat", p)?;
        }
        Ok(self.push(Op::Concat, parts.to_vec(), vec![total]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = self.nodes[a.0].shape.iter().product();
        let target: usize = shape.iter().product();
        if numel != target {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        Ok(self.push(Op::Reshape, vec![a], shape))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.want_matrix("slice_rows", a)?;
        if start >= end || end > m {
            return Err(AutodiffError::InvalidShape {
                op: "slice_rows",
                shape: vec![start, end, m],
            });
        }
        Ok(self.push(Op::SliceRows { start, end }, vec![a], vec![end - start, n]))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_m, n) = self.want_matrix("mean_rows", a)?;
        Ok(self.push(Op::MeanRows, vec![a], vec![n]))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.want_matrix("embedding", table)?;
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::EmbeddingIndex { id, rows });
            }
        }
        Ok(self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![table],
            vec![ids.len(), d],
        ))
    }

    pub fn causal_scores(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let (m, d) = self.want_matrix("causal_scores", q)?;
        let (m2, d2) = self.want_matrix("causal_scores", k)?;
        if m != m2 || d != d2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_scores",
                lhs: vec![m, d],
                rhs: vec![m2, d2],
            });
        }
        Ok(self.push(Op::CausalScores, vec![q, k], vec![m, m]))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad: Option<usize>,
    ) -> Result<NodeId> {
        let (m, v) = self.want_matrix("softmax_cross_entropy", logits)?;
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        let mut live = 0;
        for &t in targets {
            if Some(t) == pad {
                continue;
            }
            if t >= v {
                return Err(AutodiffError::TargetIndex { id: t, vocab: v });
            }
            live += 1;
        }
        if live == 0 {
            return Err(AutodiffError::AllPadded);
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
                pad,
            },
            vec![logits],
            vec![],
        ))
    }

    pub fn mul_scalar(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        let s_shape = &self.nodes[s.0].shape;
        let numel: usize = s_shape.iter().product();
        if numel != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "mul_scalar",
                shape: s_shape.clone(),
            });
        }
        let shape = self.nodes[t.0].shape.clone();
        Ok(self.push(Op::MulScalar, vec![t, s], shape))
    }

    pub fn clamp_unit(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        let numel: usize = s.iter().product();
        if numel != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "clamp_unit",
                shape: s.clone(),
            });
        }
        let shape = s.clone();
        Ok(self.push(Op::ClampUnit, vec![a], shape))
    }

    // ── evaluation ───────────────────────────────────────────────────

    fn reachable(&self, root: NodeId) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            for inp in &self.nodes[i].inputs {
                if !seen[inp.0] {
                    stack.push(inp.0);
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| seen[i]).collect()
    }

    /// Evaluate every ancestor of `root` that does not yet have a cached
    /// value, in topological (id) order, and return the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor> {
        for i in self.reachable(root) {
            if self.nodes[i].value.is_some() {
                if matches!(self.nodes[i].op, Op::Leaf)
                    && !self.nodes[i].value.as_ref().unwrap().all_finite()
                {
                    return Err(AutodiffError::NonFinite { op: "leaf" });
                }
                continue;
            }
            let value = self.eval(i)?;
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        self.nodes[root.0]
            .value
            .clone()
            .ok_or(AutodiffError::MissingValue(root.0))
    }

    fn input_value(&self, node: usize, slot: usize) -> Result<&Tensor> {
        let id = self.nodes[node].inputs[slot];
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(AutodiffError::MissingValue(id.0))
    }

    fn eval(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => return Err(AutodiffError::MissingValue(i)),
            Op::MatMul => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                matmul_raw(a, b)
            }
            Op::Add => self.input_value(i, 0)?.zip_map(self.input_value(i, 1)?, |a, b| a + b),
            Op::Sub => self.input_value(i, 0)?.zip_map(self.input_value(i, 1)?, |a, b| a - b),
            Op::Mul => self.input_value(i, 0)?.zip_map(self.input_value(i, 1)?, |a, b| a * b),
            Op::Div => self.input_value(i, 0)?.zip_map(self.input_value(i, 1)?, |a, b| a / b),
            Op::AddRow => {
                let a = self.input_value(i, 0)?;
                let row = self.input_value(i, 1)?;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = a.data().to_vec();
                for r in 0..m {
                    for c in 0..n {
                        data[r * n + c] += row.data()[c];
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            Op::Scale(c) => self.input_value(i, 0)?.scaled(*c),
            Op::Exp => self.input_value(i, 0)?.map(f64::exp),
            Op::Log => self.input_value(i, 0)?.map(f64::ln),
            Op::Tanh => self.input_value(i, 0)?.map(f64::tanh),
            Op::Softmax => {
                let a = self.input_value(i, 0)?;
                let (rows, cols) = row_view(a);
                let mut data = vec![0.0; a.numel()];
                for r in 0..rows {
                    let src = &a.data()[r * cols..(r + 1) * cols];
                    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let dst = &mut data[r * cols..(r + 1) * cols];
                    let mut z = 0.0;
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = (s - m).exp();
                        z += *d;
                    }
                    for d in dst.iter_mut() {
                        *d /= z;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::L2Normalize => {
                let a = self.input_value(i, 0)?;
                let s = a.l2_norm() + NORM_EPSILON;
                a.scaled(1.0 / s)
            }
            Op::Cosine => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                let (na, nb) = (a.l2_norm(), b.l2_norm());
                if na == 0.0 || nb == 0.0 {
                    return Err(AutodiffError::ZeroNorm { op: "cosine" });
                }
                let c = dot_slices(a.data(), b.data()) / (na * nb);
                Tensor::scalar(c.clamp(-1.0, 1.0))
            }
            Op::Dot => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                Tensor::scalar(dot_slices(a.data(), b.data()))
            }
            Op::Mean => {
                let a = self.input_value(i, 0)?;
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            Op::Sum => Tensor::scalar(self.input_value(i, 0)?.data().iter().sum()),
            Op::Concat => {
                let mut data = Vec::new();
                for slot in 0..node.inputs.len() {
                    data.extend_from_slice(self.input_value(i, slot)?.data());
                }
                Tensor::vector(data)
            }
            Op::Reshape => {
                let a = self.input_value(i, 0)?;
                Tensor::new(node.shape.clone(), a.data().to_vec())?
            }
            Op::SliceRows { start, end } => {
                let a = self.input_value(i, 0)?;
                let n = a.shape()[1];
                Tensor::new(
                    vec![end - start, n],
                    a.data()[start * n..end * n].to_vec(),
                )?
            }
            Op::MeanRows => {
                let a = self.input_value(i, 0)?;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += a.data()[r * n + c];
                    }
                }
                for v in &mut out {
                    *v /= m as f64;
                }
                Tensor::vector(out)
            }
            Op::Embedding { ids } => {
                let table = self.input_value(i, 0)?;
                let d = table.shape()[1];
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    data.extend_from_slice(table.row(id));
                }
                Tensor::new(vec![ids.len(), d], data)?
            }
            Op::CausalScores => {
                let q = self.input_value(i, 0)?;
                let k = self.input_value(i, 1)?;
                let (m, d) = (q.shape()[0], q.shape()[1]);
                let scale = 1.0 / (d as f64).sqrt();
                let mut data = vec![CAUSAL_MASK; m * m];
                for r in 0..m {
                    for c in 0..=r {
                        data[r * m + c] = dot_slices(q.row(r), k.row(c)) * scale;
                    }
                }
                Tensor::new(vec![m, m], data)?
            }
            Op::SoftmaxCrossEntropy { targets, pad } => {
                let logits = self.input_value(i, 0)?;
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *pad {
                        continue;
                    }
                    let row = logits.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                    total += lse - row[t];
                }
                Tensor::scalar(total)
            }
            Op::MulScalar => {
                let t = self.input_value(i, 0)?;
                let s = self.input_value(i, 1)?.scalar_value();
                t.scaled(s)
            }
            Op::ClampUnit => {
                let x = self.input_value(i, 0)?.scalar_value();
                let mut out = Tensor::zeros(&node.shape);
                out.data_mut()[0] = x.clamp(0.0, 1.0);
                out
            }
        };
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients are zeroed first, then
    /// accumulated additively across fan-out. Returns the gradient of every
    /// `requires_grad` leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        let root_value = self.nodes[root.0]
            .value
            .as_ref()
            .ok_or(AutodiffError::MissingValue(root.0))?;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let order = self.reachable(root);
        for &i in &order {
            self.nodes[i].grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::filled(
            self.nodes[root.0].value.as_ref().unwrap().shape(),
            1.0,
        ));
        for &i in order.iter().rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contribs = self.vjp(i)?;
            for (input_id, contrib) in contribs {
                if !self.nodes[input_id.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[input_id.0].grad {
                    Some(g) => g.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = BTreeMap::new();
        for &i in &order {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                out.insert(NodeId(i), g);
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` with respect to each input.
    fn vjp(&self, i: usize) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let dy = node.grad.as_ref().expect("vjp without output grad");
        let inputs = node.inputs.clone();
        let out: Vec<(NodeId, Tensor)> = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                let da = matmul_raw(dy, &b.transposed()?);
                let db = matmul_raw(&a.transposed()?, dy);
                vec![(inputs[0], da), (inputs[1], db)]
            }
            Op::Add => vec![(inputs[0], dy.clone()), (inputs[1], dy.clone())],
            Op::Sub => vec![(inputs[0], dy.clone()), (inputs[1], dy.scaled(-1.0))],
            Op::Mul => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                vec![
                    (inputs[0], dy.zip_map(b, |g, bv| g * bv)),
                    (inputs[1], dy.zip_map(a, |g, av| g * av)),
                ]
            }
            Op::Div => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                let da = dy.zip_map(b, |g, bv| g / bv);
                let mut db = dy.zip_map(a, |g, av| g * av);
                db = db.zip_map(b, |x, bv| -x / (bv * bv));
                vec![(inputs[0], da), (inputs[1], db)]
            }
            Op::AddRow => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut drow = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        drow[c] += dy.data()[r * n + c];
                    }
                }
                vec![(inputs[0], dy.clone()), (inputs[1], Tensor::vector(drow))]
            }
            Op::Scale(c) => vec![(inputs[0], dy.scaled(*c))],
            Op::Exp => {
                let y = node.value.as_ref().unwrap();
                vec![(inputs[0], dy.zip_map(y, |g, yv| g * yv))]
            }
            Op::Log => {
                let x = self.input_value(i, 0)?;
                vec![(inputs[0], dy.zip_map(x, |g, xv| g / xv))]
            }
            Op::Tanh => {
                let y = node.value.as_ref().unwrap();
                vec![(inputs[0], dy.zip_map(y, |g, yv| g * (1.0 - yv * yv)))]
            }
            Op::Softmax => {
                let y = node.value.as_ref().unwrap();
                let (rows, cols) = row_view(y);
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &dy.data()[r * cols..(r + 1) * cols];
                    let inner: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - inner);
                    }
                }
                vec![(inputs[0], Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::L2Normalize => {
                let x = self.input_value(i, 0)?;
                let norm = x.l2_norm();
                let s = norm + NORM_EPSILON;
                let inner = dot_slices(x.data(), dy.data());
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(dy.data().iter())
                    .map(|(&xv, &gv)| {
                        let radial = if norm > 0.0 {
                            inner * xv / (norm * s * s)
                        } else {
                            0.0
                        };
                        gv / s - radial
                    })
                    .collect();
                vec![(inputs[0], Tensor::vector(dx))]
            }
            Op::Cosine => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                let g = dy.scalar_value();
                let (na, nb) = (a.l2_norm(), b.l2_norm());
                let c = node.value.as_ref().unwrap().scalar_value();
                let da: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&av, &bv)| g * (bv / (na * nb) - c * av / (na * na)))
                    .collect();
                let db: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&av, &bv)| g * (av / (na * nb) - c * bv / (nb * nb)))
                    .collect();
                vec![(inputs[0], Tensor::vector(da)), (inputs[1], Tensor::vector(db))]
            }
            Op::Dot => {
                let a = self.input_value(i, 0)?;
                let b = self.input_value(i, 1)?;
                let g = dy.scalar_value();
                vec![
                    (inputs[0], b.scaled(g)),
                    (inputs[1], a.scaled(g)),
                ]
            }
            Op::Mean => {
                let x = self.input_value(i, 0)?;
                let g = dy.scalar_value() / x.numel() as f64;
                vec![(inputs[0], Tensor::filled(x.shape(), g))]
            }
            Op::Sum => {
                let x = self.input_value(i, 0)?;
                vec![(inputs[0], Tensor::filled(x.shape(), dy.scalar_value()))]
            }
            Op::Concat => {
                let mut offset = 0;
                let mut outs = Vec::with_capacity(inputs.len());
                for (slot, &inp) in inputs.iter().enumerate() {
                    let len = self.input_value(i, slot)?.numel();
                    let seg = dy.data()[offset..offset + len].to_vec();
                    offset += len;
                    outs.push((inp, Tensor::vector(seg)));
                }
                outs
            }
            Op::Reshape => {
                let x = self.input_value(i, 0)?;
                vec![(
                    inputs[0],
                    Tensor::new(x.shape().to_vec(), dy.data().to_vec())?,
                )]
            }
            Op::SliceRows { start, end } => {
                let x = self.input_value(i, 0)?;
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(dy.data());
                vec![(inputs[0], Tensor::new(vec![m, n], dx)?)]
            }
            Op::MeanRows => {
                let x = self.input_value(i, 0)?;
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = dy.data()[c] / m as f64;
                    }
                }
                vec![(inputs[0], Tensor::new(vec![m, n], dx)?)]
            }
            Op::Embedding { ids } => {
                let table = self.input_value(i, 0)?;
                let (rows, d) = (table.shape()[0], table.shape()[1]);
                let mut dt = vec![0.0; rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += dy.data()[r * d + c];
                    }
                }
                vec![(inputs[0], Tensor::new(vec![rows, d], dt)?)]
            }
            Op::CausalScores => {
                let q = self.input_value(i, 0)?;
                let k = self.input_value(i, 1)?;
                let (m, d) = (q.shape()[0], q.shape()[1]);
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                for r in 0..m {
                    for c in 0..=r {
                        let g = dy.data()[r * m + c] * scale;
                        if g == 0.0 {
                            continue;
                        }
                        for x in 0..d {
                            dq[r * d + x] += g * k.data()[c * d + x];
                            dk[c * d + x] += g * q.data()[r * d + x];
                        }
                    }
                }
                vec![
                    (inputs[0], Tensor::new(vec![m, d], dq)?),
                    (inputs[1], Tensor::new(vec![m, d], dk)?),
                ]
            }
            Op::SoftmaxCrossEntropy { targets, pad } => {
                let logits = self.input_value(i, 0)?;
                let (m, v) = (logits.shape()[0], logits.shape()[1]);
                let g = dy.scalar_value();
                let mut dx = vec![0.0; m * v];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *pad {
                        continue;
                    }
                    let row = logits.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    for c in 0..v {
                        let p = (row[c] - mx).exp() / z;
                        dx[r * v + c] = g * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                vec![(inputs[0], Tensor::new(vec![m, v], dx)?)]
            }
            Op::MulScalar => {
                let t = self.input_value(i, 0)?;
                let s = self.input_value(i, 1)?.scalar_value();
                let dt = dy.scaled(s);
                let ds = dot_slices(dy.data(), t.data());
                let mut ds_t = Tensor::zeros(self.input_value(i, 1)?.shape());
                ds_t.data_mut()[0] = ds;
                vec![(inputs[0], dt), (inputs[1], ds_t)]
            }
            Op::ClampUnit => {
                let x = self.input_value(i, 0)?.scalar_value();
                let pass = if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 };
                vec![(inputs[0], dy.scaled(pass))]
            }
        };
        Ok(out)
    }
}

/// Interpret a rank-1 or rank-2 tensor as rows.
fn row_view(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        other => panic!("row_view on shape {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_oracle(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let es: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = es.iter().sum();
        es.iter().map(|&e| e / z).collect()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let x = g.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        let out = g.forward(y).unwrap();
        assert_eq!(out, *g.value(x).unwrap());
    }

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let out = g.forward(y).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x).unwrap();
        let out = g.forward(y).unwrap();
        let expect = softmax_oracle(&[1.0, 2.0, 3.0]);
        for (a, b) in out.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        // spec figures: 0.09003, 0.24473, 0.66524
        assert!((out.data()[0] - 0.09003057).abs() < 1e-7);
        assert!((out.data()[1] - 0.24472847).abs() < 1e-7);
        assert!((out.data()[2] - 0.66524096).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.leaf(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let y = g.dot(a, b).unwrap();
        g.forward(y).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[&a], *g.value(b).unwrap());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.1]).unwrap());
        let y = g.softmax_cross_entropy(logits, &[2], None).unwrap();
        g.forward(y).unwrap();
        let grads = g.backward(y).unwrap();
        let probs = softmax_oracle(&[0.3, -1.2, 2.0, 0.1]);
        let got = grads[&logits].data();
        for c in 0..4 {
            let expect = probs[c] - if c == 2 { 1.0 } else { 0.0 };
            assert!((got[c] - expect).abs() < 1e-12, "col {c}");
        }
    }

    #[test]
    fn cosine_gradient_matches_central_differences() {
        let a0 = vec![1.0, 0.0];
        let b0 = vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(a0.clone()));
        let b = g.leaf(Tensor::vector(b0.clone()));
        let y = g.cosine(a, b).unwrap();
        g.forward(y).unwrap();
        let grads = g.backward(y).unwrap();
        let analytic = grads[&a].data().to_vec();

        let h = 1e-5;
        let eval = |av: &[f64]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::vector(av.to_vec()));
            let b = g.leaf(Tensor::vector(b0.clone()));
            let y = g.cosine(a, b).unwrap();
            g.forward(y).unwrap().scalar_value()
        };
        for i in 0..a0.len() {
            let mut plus = a0.clone();
            plus[i] += h;
            let mut minus = a0.clone();
            minus[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (analytic[i] - numeric).abs() < 1e-6,
                "coord {i}: {} vs {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn forward_is_pure_bit_identical() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let data = vec![0.3, -1.7, 0.9, 2.2, -0.4, 0.05];
        for g in [&mut g1, &mut g2] {
            let x = g.leaf(Tensor::matrix(2, 3, data.clone()).unwrap());
            let e = g.exp(x);
            let s = g.softmax(e).unwrap();
            let m = g.mean(s);
            g.forward(m).unwrap();
        }
        let a = g1.value(NodeId(g1.len() - 1)).unwrap();
        let b = g2.value(NodeId(g2.len() - 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        // y = sum(x) + sum(x): dy/dx = 2.
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let y = g.add(s1, s2).unwrap();
        g.forward(y).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[&x].data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let xs = vec![0.5, -0.25, 1.75];
        let build = |g: &mut Graph, x: NodeId| {
            let e = g.exp(x);
            let s = g.sum(e);
            let t = g.tanh(x);
            let m = g.mean(t);
            (s, m)
        };
        // combined root s + m
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(xs.clone()));
        let (s, m) = build(&mut g, x);
        let y = g.add(s, m).unwrap();
        g.forward(y).unwrap();
        let combined = g.backward(y).unwrap()[&x].clone();
        // individual roots
        let mut ga = Graph::new();
        let xa = ga.param(Tensor::vector(xs.clone()));
        let (sa, _) = build(&mut ga, xa);
        ga.forward(sa).unwrap();
        let grad_a = ga.backward(sa).unwrap()[&xa].clone();
        let mut gb = Graph::new();
        let xb = gb.param(Tensor::vector(xs.clone()));
        let (_, mb) = build(&mut gb, xb);
        gb.forward(mb).unwrap();
        let grad_b = gb.backward(mb).unwrap()[&xb].clone();
        for i in 0..xs.len() {
            let lhs = combined.data()[i];
            let rhs = grad_a.data()[i] + grad_b.data()[i];
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(x);
        g.forward(y).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarRoot { .. }));
    }

    #[test]
    fn l2_normalize_guards_the_zero_vector() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.l2_normalize(x).unwrap();
        let out = g.forward(y).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        let y = g.cosine(a, b).unwrap();
        let err = g.forward(y).unwrap_err();
        assert!(matches!(err, AutodiffError::ZeroNorm { .. }));
    }

    #[test]
    fn causal_scores_mask_blocks_future_positions() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap());
        let k = g.leaf(Tensor::matrix(3, 2, vec![1., 1., 2., 0., 0., 3.]).unwrap());
        let s = g.causal_scores(q, k).unwrap();
        let out = g.forward(s).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                if c > r {
                    assert_eq!(out.at2(r, c), CAUSAL_MASK);
                }
            }
        }
        let scale = 1.0 / 2f64.sqrt();
        assert!((out.at2(1, 0) - 2.0 * scale).abs() < 1e-15);
    }

    #[test]
    fn embedding_gradient_accumulates_repeated_ids() {
        let mut g = Graph::new();
        let table = g.param(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let e = g.embedding(table, &[1, 1, 2]).unwrap();
        let s = g.sum(e);
        g.forward(s).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&table].data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
