//! Eagerly evaluated expression graph with reverse-mode differentiation.
//!
//! Every constructor computes its output immediately and appends a node, so
//! node ids are topologically ordered by construction. [`backward`] walks the
//! nodes in reverse and accumulates gradients for the requested leaves.

use std::collections::HashMap;

use crate::error::{shape_err, Result, SpurError};
use crate::matrix::{dot, matmul_nt_into, Matrix};

/// Index of a node inside an [`ExprGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is either the same shape as `a` or a `1 x cols` row broadcast over rows.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    /// Division by a 1x1 node; yields zeros when the divisor is exactly zero.
    DivScalar(NodeId, NodeId),
    SoftmaxRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    BlockMatmulNt {
        a: NodeId,
        b: NodeId,
        block: usize,
    },
    BlockMatmul {
        p: NodeId,
        v: NodeId,
        block: usize,
    },
    BlockMeanRows {
        x: NodeId,
        block: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only computation graph over [`Matrix`] values.
#[derive(Debug, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to requested leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Matrix> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Matrix> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached output of a node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Adds a leaf holding `value`. Leaves serve both as parameters and constants.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        let out = if av.shape() == bv.shape() {
            av.zip_map(bv, |x, y| x + y)
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            let mut out = av.clone();
            let c = av.cols();
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, b) in chunk.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        } else {
            return Err(shape_err("add", av.shape(), bv.shape()));
        };
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.val(a), self.val(b))?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.val(a), self.val(b))?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("div", self.val(a), self.val(b))?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.val(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.val(a).map(|v| v + c);
        self.push(Op::AddConst(a), out)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).abs();
        self.push(Op::Abs(a), out)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).map(|v| v * v);
        self.push(Op::Square(a), out)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    /// Row-wise sum, `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).row_sums();
        self.push(Op::SumRows(a), out)
    }

    /// Column-wise sum, `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let out = self.val(a).col_sums();
        self.push(Op::SumCols(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Matrix::scalar(self.val(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a);
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Divides every entry of `a` by the 1x1 node `s`. A zero divisor yields zeros.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.val(s);
        if sv.shape() != (1, 1) {
            return Err(shape_err("div_scalar", self.val(a).shape(), sv.shape()));
        }
        let d = sv.item();
        let out = if d == 0.0 {
            Matrix::zeros(self.val(a).rows(), self.val(a).cols())
        } else {
            self.val(a).map(|v| v / d)
        };
        Ok(self.push(Op::DivScalar(a, s), out))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows(self.val(x));
        self.push(Op::SoftmaxRows(x), out)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.val(logits);
        if labels.len() != lv.rows() {
            return Err(SpurError::Input(format!(
                "cross_entropy_mean: {} labels for {} logit rows",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(SpurError::Input(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let top = argmax(row);
            let max = row[top];
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, v)| (v - max).exp())
                .sum();
            total += (max - row[label]) + rest.ln_1p();
        }
        let out = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Row-wise layer normalization with population variance and eps 1e-5.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        let c = xv.cols();
        for (name, id) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            let s = self.val(id).shape();
            if s != (1, c) {
                return Err(shape_err(name, xv.shape(), s));
            }
        }
        if c < 2 {
            return Err(SpurError::Contract(
                "layer_norm_rows needs at least two columns".into(),
            ));
        }
        let (gv, bv) = (self.val(gain), self.val(bias));
        let mut normalized = Matrix::zeros(xv.rows(), c);
        let mut out = Matrix::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let nrow = normalized.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * inv;
            }
            for ((o, n), (gn, b)) in out
                .row_mut(r)
                .iter_mut()
                .zip(normalized.row(r))
                .zip(gv.data().iter().zip(bv.data()))
            {
                *o = n * gn + b;
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            out,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.val(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(SpurError::Input(format!(
                "row index {bad} out of range for table with {} rows",
                tv.rows()
            )));
        }
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Matrix::from_vec(ids.len(), c, data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Columns `start .. start + width` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if width == 0 || start + width > xv.cols() {
            return Err(shape_err("slice_cols", xv.shape(), (start, width)));
        }
        let out = Matrix::from_fn(xv.rows(), width, |r, c| xv.get(r, start + c));
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| SpurError::Contract("concat_cols of nothing".into()))?;
        let rows = self.val(first).rows();
        for &p in parts {
            if self.val(p).rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// For each group of `block` consecutive rows, computes `A_g * B_g^T`.
    /// Output is `(n*block) x block`.
    pub fn block_matmul_nt(&mut self, a: NodeId, b: NodeId, block: usize) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() || block == 0 || av.rows() % block != 0 {
            return Err(shape_err("block_matmul_nt", av.shape(), bv.shape()));
        }
        let k = av.cols();
        let mut out = Matrix::zeros(av.rows(), block);
        for g in 0..av.rows() / block {
            let span = g * block * k..(g + 1) * block * k;
            matmul_nt_into(
                &av.data()[span.clone()],
                &bv.data()[span],
                k,
                &mut out.data_mut()[g * block * block..(g + 1) * block * block],
            );
        }
        Ok(self.push(Op::BlockMatmulNt { a, b, block }, out))
    }

    /// For each group of `block` rows, computes `P_g * V_g` where `P_g` is
    /// `block x block`. Output has the shape of `v`.
    pub fn block_matmul(&mut self, p: NodeId, v: NodeId, block: usize) -> Result<NodeId> {
        let (pv, vv) = (self.val(p), self.val(v));
        if block == 0
            || pv.cols() != block
            || pv.rows() != vv.rows()
            || pv.rows() % block != 0
        {
            return Err(shape_err("block_matmul", pv.shape(), vv.shape()));
        }
        let m = vv.cols();
        let mut out = Matrix::zeros(vv.rows(), m);
        for g in 0..pv.rows() / block {
            for i in 0..block {
                let prow = pv.row(g * block + i);
                let orow = &mut out.data_mut()[(g * block + i) * m..(g * block + i + 1) * m];
                for (j, &w) in prow.iter().enumerate() {
                    let vrow = vv.row(g * block + j);
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        Ok(self.push(Op::BlockMatmul { p, v, block }, out))
    }

    /// Mean over each group of `block` consecutive rows, `(n*block) x c -> n x c`.
    pub fn block_mean_rows(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if block == 0 || xv.rows() % block != 0 {
            return Err(shape_err("block_mean_rows", xv.shape(), (block, 1)));
        }
        let n = xv.rows() / block;
        let c = xv.cols();
        let mut out = Matrix::zeros(n, c);
        for g in 0..n {
            let orow = out.row_mut(g);
            for i in 0..block {
                for (o, v) in orow.iter_mut().zip(xv.row(g * block + i)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= block as f64;
            }
        }
        Ok(self.push(Op::BlockMeanRows { x, block }, out))
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

/// Reverse-mode gradient of the scalar `loss` with respect to each leaf in `leaves`.
///
/// Leaves that `loss` does not depend on get an all-zero gradient.
pub fn backward(graph: &ExprGraph, loss: NodeId, leaves: &[NodeId]) -> Result<Gradients> {
    if graph.shape(loss) != (1, 1) {
        let (r, c) = graph.shape(loss);
        return Err(SpurError::Contract(format!(
            "backward needs a 1x1 loss, got {r}x{c}"
        )));
    }
    for &l in leaves {
        if l.0 >= graph.len() || !graph.is_leaf(l) {
            return Err(SpurError::Contract(format!(
                "node {} is not a leaf",
                l.0
            )));
        }
    }

    let end = loss.0 + 1;
    let mut wanted = vec![false; end];
    for &l in leaves {
        if l.0 < end {
            wanted[l.0] = true;
        }
    }
    let mut needs = vec![false; end];
    for i in 0..end {
        needs[i] = wanted[i] || inputs(&graph.nodes[i].op).iter().any(|p| needs[p.0]);
    }

    let mut grads: Vec<Option<Matrix>> = (0..end).map(|_| None).collect();
    grads[loss.0] = Some(Matrix::scalar(1.0));

    for i in (0..end).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let node = &graph.nodes[i];
        if matches!(node.op, Op::Leaf) {
            grads[i] = Some(g);
            continue;
        }
        propagate(graph, node, g, &needs, &mut grads);
    }

    let mut out = Gradients::default();
    for &l in leaves {
        let g = grads
            .get_mut(l.0)
            .and_then(Option::take)
            .unwrap_or_else(|| {
                let (r, c) = graph.shape(l);
                Matrix::zeros(r, c)
            });
        out.grads.insert(l, g);
    }
    Ok(out)
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::DivScalar(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Relu(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SoftmaxRows(a) => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Gather { table, .. } => vec![*table],
        Op::SliceCols { x, .. } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::BlockMatmulNt { a, b, .. } => vec![*a, *b],
        Op::BlockMatmul { p, v, .. } => vec![*p, *v],
        Op::BlockMeanRows { x, .. } => vec![*x],
    }
}

fn propagate(
    graph: &ExprGraph,
    node: &Node,
    mut g: Matrix,
    needs: &[bool],
    grads: &mut [Option<Matrix>],
) {
    let val = |id: NodeId| graph.val(id);
    let mut send = |id: NodeId, delta: Matrix| {
        if needs[id.0] {
            accumulate(&mut grads[id.0], delta);
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs[b.0] {
                if val(*b).shape() == g.shape() {
                    send(*b, g.clone());
                } else {
                    send(*b, g.col_sums());
                }
            }
            send(*a, g);
        }
        Op::Sub(a, b) => {
            if needs[b.0] {
                send(*b, g.scale(-1.0));
            }
            send(*a, g);
        }
        Op::Mul(a, b) => {
            if needs[a.0] {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
            }
            if needs[b.0] {
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if needs[a.0] {
                send(*a, g.zip_map(bv, |x, y| x / y));
            }
            if needs[b.0] {
                // d(a/b)/db = -(a/b)/b
                let q = &node.value;
                let mut d = g.zip_map(q, |x, y| -x * y);
                for (v, den) in d.data_mut().iter_mut().zip(bv.data()) {
                    *v /= den;
                }
                send(*b, d);
            }
        }
        Op::Scale(a, s) => {
            g.apply(|x| x * s);
            send(*a, g);
        }
        Op::AddConst(a) => send(*a, g),
        Op::Abs(a) => {
            g.zip_apply(val(*a), |x, v| {
                if v > 0.0 {
                    x
                } else if v < 0.0 {
                    -x
                } else {
                    0.0
                }
            });
            send(*a, g);
        }
        Op::Square(a) => {
            g.zip_apply(val(*a), |x, v| 2.0 * v * x);
            send(*a, g);
        }
        Op::Sqrt(a) => {
            g.zip_apply(&node.value, |x, s| x / (2.0 * s));
            send(*a, g);
        }
        Op::Relu(a) => {
            g.zip_apply(val(*a), |x, v| if v > 0.0 { x } else { 0.0 });
            send(*a, g);
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Matrix::from_fn(r, c, |i, _| g.data()[i]));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Matrix::from_fn(r, c, |_, j| g.data()[j]));
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Matrix::filled(r, c, g.item()));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::MatMul(a, b) => {
            if needs[a.0] {
                send(*a, g.matmul_nt(val(*b)));
            }
            if needs[b.0] {
                send(*b, val(*a).matmul_tn(&g));
            }
        }
        Op::DivScalar(a, s) => {
            let d = val(*s).item();
            if d == 0.0 {
                return;
            }
            if needs[s.0] {
                let num = dot(g.data(), val(*a).data());
                send(*s, Matrix::scalar(-num / (d * d)));
            }
            if needs[a.0] {
                let inv = 1.0 / d;
                g.apply(|x| x * inv);
                send(*a, g);
            }
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row_mut(r);
                let inner = dot(yr, gr);
                for (gv, yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - inner);
                }
            }
            send(*x, g);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let scale = g.item() / labels.len() as f64;
            let mut d = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                let row = d.row_mut(r);
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            send(*logits, d);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let gv = val(*gain);
            let c = normalized.cols();
            if needs[gain.0] {
                let mut dg = Matrix::zeros(1, c);
                for r in 0..g.rows() {
                    for ((o, gr), n) in dg.data_mut().iter_mut().zip(g.row(r)).zip(normalized.row(r)) {
                        *o += gr * n;
                    }
                }
                send(*gain, dg);
            }
            if needs[bias.0] {
                send(*bias, g.col_sums());
            }
            if needs[x.0] {
                let mut dx = Matrix::zeros(g.rows(), c);
                let cf = c as f64;
                let mut dn = vec![0.0; c];
                for r in 0..g.rows() {
                    for ((d, gr), gain_v) in dn.iter_mut().zip(g.row(r)).zip(gv.data()) {
                        *d = gr * gain_v;
                    }
                    let nrow = normalized.row(r);
                    let sum_dn: f64 = dn.iter().sum();
                    let sum_dn_n = dot(&dn, nrow);
                    let k = inv_std[r] / cf;
                    for ((o, d), n) in dx.row_mut(r).iter_mut().zip(&dn).zip(nrow) {
                        *o = k * (cf * d - sum_dn - n * sum_dn_n);
                    }
                }
                send(*x, dx);
            }
        }
        Op::Gather { table, ids } => {
            let (r, c) = val(*table).shape();
            let mut d = Matrix::zeros(r, c);
            for (i, &id) in ids.iter().enumerate() {
                for (o, v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            send(*table, d);
        }
        Op::SliceCols { x, start } => {
            let (r, c) = val(*x).shape();
            let w = g.cols();
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
            }
            send(*x, d);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, w) = val(p).shape();
                if needs[p.0] {
                    let d = Matrix::from_fn(r, w, |i, j| g.get(i, offset + j));
                    send(p, d);
                }
                offset += w;
            }
        }
        Op::BlockMatmulNt { a, b, block } => {
            let (av, bv) = (val(*a), val(*b));
            let k = av.cols();
            let groups = av.rows() / block;
            let mut da = Matrix::zeros(av.rows(), k);
            let mut db = Matrix::zeros(bv.rows(), k);
            for grp in 0..groups {
                let base = grp * block;
                for i in 0..*block {
                    let grow = g.row(base + i);
                    for (j, &w) in grow.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, x) in da.row_mut(base + i).iter_mut().zip(bv.row(base + j)) {
                            *o += w * x;
                        }
                        for (o, x) in db.row_mut(base + j).iter_mut().zip(av.row(base + i)) {
                            *o += w * x;
                        }
                    }
                }
            }
            send(*a, da);
            send(*b, db);
        }
        Op::BlockMatmul { p, v, block } => {
            let (pv, vv) = (val(*p), val(*v));
            let groups = pv.rows() / block;
            if needs[p.0] {
                let mut dp = Matrix::zeros(pv.rows(), *block);
                for grp in 0..groups {
                    let base = grp * block;
                    let m = vv.cols();
                    matmul_nt_into(
                        &g.data()[base * m..(base + block) * m],
                        &vv.data()[base * m..(base + block) * m],
                        m,
                        &mut dp.data_mut()[base * block..(base + block) * block],
                    );
                }
                send(*p, dp);
            }
            if needs[v.0] {
                let m = vv.cols();
                let mut dv = Matrix::zeros(vv.rows(), m);
                for grp in 0..groups {
                    let base = grp * block;
                    for i in 0..*block {
                        let grow = g.row(base + i);
                        for (j, &w) in pv.row(base + i).iter().enumerate() {
                            for (o, x) in dv.row_mut(base + j).iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                }
                send(*v, dv);
            }
        }
        Op::BlockMeanRows { x, block } => {
            let (r, c) = val(*x).shape();
            let inv = 1.0 / *block as f64;
            let d = Matrix::from_fn(r, c, |i, j| g.get(i / block, j) * inv);
            send(*x, d);
        }
    }
}

/// Central finite-difference gradient of `f` at `w` with step `h`.
pub fn finite_difference_gradient(f: impl Fn(&Matrix) -> f64, w: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = w.clone();
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for idx in 0..w.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
