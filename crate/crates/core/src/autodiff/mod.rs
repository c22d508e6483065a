//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive as it is applied. Values are computed
//! eagerly when a node is created, so node ids are already a topological
//! order and [`Graph::backward`] simply walks them in reverse.
//!
//! Leaves may borrow their values (`Graph::param`, `Graph::constant_ref`) so
//! model weights are not copied into every training step. Leaf gradients
//! accumulate across `backward` calls until [`Graph::zero_grad`] is called;
//! interior gradients are recomputed on every call.
//!
//! GELU uses the tanh approximation
//! `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, and layer norm uses
//! `ε = 1e-12` inside the square root.

mod gradcheck;

use std::borrow::Cow;
use std::fmt::{self, Write as _};

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Variance floor of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Value written into masked attention columns before the softmax.
pub const MASK_VALUE: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// The primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Scale,
    GradScale,
    Transpose,
    RowSoftmax,
    LayerNorm,
    Gelu,
    Relu,
    EmbeddingLookup,
    GatherFirstToken,
    SoftCrossEntropy,
    MeanSquaredError,
    Sum,
    ConcatRows,
    ConcatCols,
    Slice,
    MaskColumns,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::GradScale => "grad-scale",
            OpKind::Transpose => "transpose",
            OpKind::RowSoftmax => "row-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::EmbeddingLookup => "embedding-lookup",
            OpKind::GatherFirstToken => "gather-first-token",
            OpKind::SoftCrossEntropy => "soft-cross-entropy",
            OpKind::MeanSquaredError => "mean-squared-error",
            OpKind::Sum => "sum",
            OpKind::ConcatRows => "concat-rows",
            OpKind::ConcatCols => "concat-cols",
            OpKind::Slice => "slice",
            OpKind::MaskColumns => "mask-columns",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Scale(NodeId, f64),
    GradScale(NodeId, f64),
    Transpose(NodeId),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    GatherFirstToken { x: NodeId, seq_len: usize },
    SoftCrossEntropy {
        logits: NodeId,
        targets: Matrix,
        probs: Matrix,
    },
    MeanSquaredError(NodeId, NodeId),
    Sum(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Slice { x: NodeId, row0: usize, col0: usize },
    MaskColumns { x: NodeId, mask: Vec<bool> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::GradScale(..) => OpKind::GradScale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::RowSoftmax(..) => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::GatherFirstToken { .. } => OpKind::GatherFirstToken,
            Op::SoftCrossEntropy { .. } => OpKind::SoftCrossEntropy,
            Op::MeanSquaredError(..) => OpKind::MeanSquaredError,
            Op::Sum(..) => OpKind::Sum,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Slice { .. } => OpKind::Slice,
            Op::MaskColumns { .. } => OpKind::MaskColumns,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MeanSquaredError(a, b) => vec![*a, *b],
            Op::Add { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::GradScale(x, _)
            | Op::Transpose(x)
            | Op::RowSoftmax(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::EmbeddingLookup { table, .. } => vec![*table],
            Op::GatherFirstToken { x, .. }
            | Op::Slice { x, .. }
            | Op::MaskColumns { x, .. } => vec![*x],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph under construction.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn shapes(ms: &[&Matrix]) -> String {
    ms.iter()
        .map(|m| format!("{}x{}", m.rows(), m.cols()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, value: Matrix, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// An owned leaf.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// A trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Removes and returns the gradient of `id`, zeros if none was produced.
    pub fn take_grad(&mut self, id: NodeId) -> Matrix {
        let node = &mut self.nodes[id.0];
        node.grad
            .take()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Clears every gradient, leaves included.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// The first node whose value contains NaN or ±∞.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(NodeId)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(id) => Err(Error::NonFinite {
                node: id.0,
                op: self.kind(id).name(),
            }),
            None => Ok(()),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape("matmul", shapes(&[va, vb])));
        }
        let out = va.matmul(vb);
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may also be a `1 × cols` row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            true
        } else {
            return Err(Error::shape("add", shapes(&[va, vb])));
        };
        let mut out = va.clone();
        if broadcast {
            let brow = vb.row(0);
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(brow) {
                    *o += b;
                }
            }
        } else {
            out.add_assign(vb);
        }
        Ok(self.push_op(out, Op::Add { a, b, broadcast }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).scaled(factor);
        self.push_op(out, Op::Scale(x, factor))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).clone();
        self.push_op(out, Op::GradScale(x, factor))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        self.push_op(out, Op::Transpose(x))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            row_softmax_into(v.row(r), out.row_mut(r));
        }
        self.push_op(out, Op::RowSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.shape() != (1, c) || vb.shape() != (1, c) {
            return Err(Error::shape("layer-norm", shapes(&[vx, vg, vb])));
        }
        let mut xhat = Matrix::zeros(vx.rows(), c);
        let mut out = Matrix::zeros(vx.rows(), c);
        let mut inv_std = Vec::with_capacity(vx.rows());
        let (g, b) = (vg.row(0), vb.row(0));
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xhat[(r, j)] * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu);
        self.push_op(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x))
    }

    /// Row gather: output row `i` is row `ids[i]` of `table`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::shape(
                "embedding-lookup",
                format!("id {bad} out of range for table {}x{}", vt.rows(), vt.cols()),
            ));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding-lookup", "empty id list".into()));
        }
        let out = vt.select_rows(ids);
        Ok(self.push_op(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks row `b·seq_len` for every sequence `b` of a `(B·seq_len) × H` block.
    pub fn gather_first_token(&mut self, x: NodeId, seq_len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if seq_len == 0 || vx.rows() % seq_len != 0 {
            return Err(Error::shape(
                "gather-first-token",
                format!("{} with seq_len {seq_len}", shapes(&[vx])),
            ));
        }
        let ids: Vec<usize> = (0..vx.rows() / seq_len).map(|b| b * seq_len).collect();
        let out = vx.select_rows(&ids);
        Ok(self.push_op(out, Op::GatherFirstToken { x, seq_len }))
    }

    /// Batch-mean of `−Σ_c t_c · log softmax(z)_c` against constant targets.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: Matrix) -> Result<NodeId> {
        let vz = self.value(logits);
        if vz.shape() != targets.shape() {
            return Err(Error::shape("soft-cross-entropy", shapes(&[vz, &targets])));
        }
        let rows = vz.rows();
        let mut probs = Matrix::zeros(rows, vz.cols());
        let mut loss = 0.0;
        for r in 0..rows {
            let z = vz.row(r);
            let lse = crate::tensor::log_sum_exp(z);
            for (c, &zc) in z.iter().enumerate() {
                let t = targets[(r, c)];
                if t != 0.0 {
                    loss -= t * (zc - lse);
                }
                probs[(r, c)] = (zc - lse).exp();
            }
        }
        loss /= rows as f64;
        Ok(self.push_op(
            Matrix::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mean_squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mean-squared-error", shapes(&[va, vb])));
        }
        let n = va.len() as f64;
        let total: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push_op(Matrix::scalar(total / n), Op::MeanSquaredError(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push_op(Matrix::scalar(s), Op::Sum(x))
    }

    /// Adds scalar nodes; an empty list is rejected.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of no terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals.first().map(|m| m.cols()).unwrap_or(0);
        if vals.is_empty() || vals.iter().any(|m| m.cols() != cols) {
            return Err(Error::shape("concat-rows", shapes(&vals)));
        }
        let rows: usize = vals.iter().map(|m| m.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in &vals {
            data.extend_from_slice(m.as_slice());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals.first().map(|m| m.rows()).unwrap_or(0);
        if vals.is_empty() || vals.iter().any(|m| m.rows() != rows) {
            return Err(Error::shape("concat-cols", shapes(&vals)));
        }
        let cols: usize = vals.iter().map(|m| m.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            let dst = out.row_mut(r);
            for m in &vals {
                dst[c0..c0 + m.cols()].copy_from_slice(m.row(r));
                c0 += m.cols();
            }
        }
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        if rows == 0 || cols == 0 || row0 + rows > vx.rows() || col0 + cols > vx.cols() {
            return Err(Error::shape(
                "slice",
                format!(
                    "{} block rows {row0}+{rows} cols {col0}+{cols}",
                    shapes(&[vx])
                ),
            ));
        }
        let out = vx.block(row0, col0, rows, cols);
        Ok(self.push_op(out, Op::Slice { x, row0, col0 }))
    }

    /// Overwrites the columns where `mask` is false with [`MASK_VALUE`].
    pub fn mask_columns(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.cols() {
            return Err(Error::shape(
                "mask-columns",
                format!("{} with mask of {}", shapes(&[vx]), mask.len()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, &keep) in out.row_mut(r).iter_mut().zip(mask) {
                if !keep {
                    *o = MASK_VALUE;
                }
            }
        }
        Ok(self.push_op(
            out,
            Op::MaskColumns {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂loss/∂leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(
            &mut self.nodes[loss.0].grad,
            Contribution::Dense(Matrix::scalar(1.0)),
        );
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, c) in contributions {
                if self.nodes[p.0].requires_grad {
                    accumulate(&mut self.nodes[p.0].grad, c);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(NodeId, Contribution)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, Contribution::Dense(g.matmul_nt(self.value(*b)))));
                }
                if self.needs(*b) {
                    out.push((*b, Contribution::Dense(self.value(*a).matmul_tn(g))));
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.needs(*a) {
                    out.push((*a, Contribution::Dense(g.clone())));
                }
                if self.needs(*b) {
                    if *broadcast {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        out.push((*b, Contribution::Dense(db)));
                    } else {
                        out.push((*b, Contribution::Dense(g.clone())));
                    }
                }
            }
            Op::Scale(x, f) | Op::GradScale(x, f) => out.push((*x, Contribution::Dense(g.scaled(*f)))),
            Op::Transpose(x) => out.push((*x, Contribution::Dense(g.transpose()))),
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*x, Contribution::Dense(dx)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).row(0);
                let c = xhat.cols();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = Matrix::zeros(1, c);
                    let mut db = Matrix::zeros(1, c);
                    for r in 0..g.rows() {
                        for j in 0..c {
                            dg[(0, j)] += g[(r, j)] * xhat[(r, j)];
                            db[(0, j)] += g[(r, j)];
                        }
                    }
                    out.push((*gain, Contribution::Dense(dg)));
                    out.push((*bias, Contribution::Dense(db)));
                }
                if self.needs(*x) {
                    let n = c as f64;
                    let mut dx = Matrix::zeros(g.rows(), c);
                    let mut dxh = vec![0.0; c];
                    for r in 0..g.rows() {
                        let xh = xhat.row(r);
                        for j in 0..c {
                            dxh[j] = g[(r, j)] * gv[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv / n * (n * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    out.push((*x, Contribution::Dense(dx)));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let mut dx = vx.map(gelu_grad);
                for (d, &gv) in dx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d *= gv;
                }
                out.push((*x, Contribution::Dense(dx)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(vx.as_slice()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                out.push((*x, Contribution::Dense(dx)));
            }
            Op::EmbeddingLookup { table, ids } => {
                out.push((
                    *table,
                    Contribution::ScatterRows {
                        rows: self.value(*table).rows(),
                        targets: ids.clone(),
                        value: g.clone(),
                    },
                ));
            }
            Op::GatherFirstToken { x, seq_len } => {
                out.push((
                    *x,
                    Contribution::ScatterRows {
                        rows: self.value(*x).rows(),
                        targets: (0..g.rows()).map(|b| b * seq_len).collect(),
                        value: g.clone(),
                    },
                ));
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / probs.rows() as f64;
                let mut dz = Matrix::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let mass: f64 = targets.row(r).iter().sum();
                    for c in 0..probs.cols() {
                        dz[(r, c)] = scale * (probs[(r, c)] * mass - targets[(r, c)]);
                    }
                }
                out.push((*logits, Contribution::Dense(dz)));
            }
            Op::MeanSquaredError(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let diff = va.sub(vb).scaled(2.0 * g.item() / va.len() as f64);
                if self.needs(*b) {
                    out.push((*b, Contribution::Dense(diff.scaled(-1.0))));
                }
                if self.needs(*a) {
                    out.push((*a, Contribution::Dense(diff)));
                }
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                out.push((*x, Contribution::Dense(Matrix::filled(vx.rows(), vx.cols(), g.item()))));
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        out.push((p, Contribution::Dense(g.block(r0, 0, rows, g.cols()))));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        out.push((p, Contribution::Dense(g.block(0, c0, g.rows(), cols))));
                    }
                    c0 += cols;
                }
            }
            Op::Slice { x, row0, col0 } => {
                let (rows, cols) = self.value(*x).shape();
                out.push((
                    *x,
                    Contribution::Block {
                        rows,
                        cols,
                        row0: *row0,
                        col0: *col0,
                        value: g.clone(),
                    },
                ));
            }
            Op::MaskColumns { x, mask } => {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (d, &keep) in dx.row_mut(r).iter_mut().zip(mask) {
                        if !keep {
                            *d = 0.0;
                        }
                    }
                }
                out.push((*x, Contribution::Dense(dx)));
            }
        }
        out
    }

    /// One line per node: id, primitive, shape, parents, gradient flag.
    pub fn dump_topology(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# graph nodes={}", self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let parents: Vec<String> = n.op.parents().iter().map(|p| p.0.to_string()).collect();
            let _ = writeln!(
                s,
                "{i}\t{}\t{}x{}\tparents=[{}]\trequires_grad={}",
                n.op.kind(),
                n.value.rows(),
                n.value.cols(),
                parents.join(","),
                n.requires_grad
            );
        }
        s
    }
}

/// A parent's share of the gradient. Sparse variants avoid materializing a
/// mostly-zero matrix the size of the parent.
enum Contribution {
    Dense(Matrix),
    /// `value` lands at offset `(row0, col0)` of a `rows × cols` parent.
    Block {
        rows: usize,
        cols: usize,
        row0: usize,
        col0: usize,
        value: Matrix,
    },
    /// Row `i` of `value` is added to parent row `targets[i]`.
    ScatterRows {
        rows: usize,
        targets: Vec<usize>,
        value: Matrix,
    },
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Contribution) {
    match contribution {
        Contribution::Dense(c) => match slot {
            Some(g) => g.add_assign(&c),
            None => *slot = Some(c),
        },
        Contribution::Block {
            rows,
            cols,
            row0,
            col0,
            value,
        } => {
            let g = slot.get_or_insert_with(|| Matrix::zeros(rows, cols));
            for r in 0..value.rows() {
                let dst = &mut g.row_mut(row0 + r)[col0..col0 + value.cols()];
                for (d, &v) in dst.iter_mut().zip(value.row(r)) {
                    *d += v;
                }
            }
        }
        Contribution::ScatterRows {
            rows,
            targets,
            value,
        } => {
            let g = slot.get_or_insert_with(|| Matrix::zeros(rows, value.cols()));
            for (i, &t) in targets.iter().enumerate() {
                for (d, &v) in g.row_mut(t).iter_mut().zip(value.row(i)) {
                    *d += v;
                }
            }
        }
    }
}

fn row_softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests;
