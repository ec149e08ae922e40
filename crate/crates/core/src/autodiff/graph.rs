use std::collections::HashMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Named input; must be bound on every [`Graph::evaluate`] call.
    Input,
    /// Trainable value; gradients flow into it.
    Param,
    Constant,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf(LeafKind, Option<String>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    Norm(NodeId),
    Softmax(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    AddRow(NodeId, NodeId),
    Gather(NodeId, Arc<[usize]>),
    GatherRows(NodeId, Arc<[usize]>),
    ScatterAdd(NodeId, Arc<[usize]>, Vec<usize>),
    SegmentSoftmax(NodeId, Arc<[usize]>),
    SegmentAggregate(NodeId, Arc<Tensor>, Arc<[usize]>),
    Reshape(NodeId, Vec<usize>),
    StopGrad(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(..) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Norm(..) => "norm",
            Op::Softmax(..) => "softmax",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::AddRow(..) => "add_row",
            Op::Gather(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAdd(..) => "scatter_add",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentAggregate(..) => "segment_aggregate",
            Op::Reshape(..) => "reshape",
            Op::StopGrad(..) => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(..) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Norm(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, ..)
            | Op::Gather(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAdd(a, ..)
            | Op::SegmentSoftmax(a, _)
            | Op::SegmentAggregate(a, ..)
            | Op::Reshape(a, _)
            | Op::StopGrad(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph with reverse-mode differentiation.
///
/// Values are computed as nodes are appended, so callers can read
/// intermediate results while the graph is still being built. Node order is
/// a topological order by construction. The recorded operations can be
/// replayed with different leaf values via [`Graph::evaluate`]; anything the
/// caller derived from intermediate values and injected as a constant stays
/// frozen during replay.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn check_offsets(offsets: &[usize], len: usize) -> bool {
    !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == len
        && offsets.windows(2).all(|w| w[0] <= w[1])
}

/// Forward rule for one operation, given the values of its inputs.
fn compute<'a>(idx: usize, op: &Op, val: &dyn Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                idx,
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    };
    let mat = |t: &Tensor| -> Result<(usize, usize)> {
        t.dims2()
            .ok_or_else(|| shape_err(idx, op, format!("expected rank-2, got {:?}", t.shape())))
    };
    let map = |t: &Tensor, f: &dyn Fn(f64) -> f64| -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    };
    let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
        same_shape(a, b)?;
        Ok(Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .unwrap())
    };

    let out = match op {
        Op::Leaf(..) => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => zip(val(*a), val(*b), &|x, y| x + y)?,
        Op::Sub(a, b) => zip(val(*a), val(*b), &|x, y| x - y)?,
        Op::Mul(a, b) => zip(val(*a), val(*b), &|x, y| x * y)?,
        Op::Div(a, b) => zip(val(*a), val(*b), &|x, y| x / y)?,
        Op::Scale(a, c) => map(val(*a), &|x| c * x),
        Op::AddScalar(a, c) => map(val(*a), &|x| x + c),
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = mat(a)?;
            let (k2, n) = mat(b)?;
            if k != k2 {
                return Err(shape_err(idx, op, format!("[{m},{k}] x [{k2},{n}]")));
            }
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::Transpose(a) => {
            let a = val(*a);
            let (m, n) = mat(a)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)?
        }
        Op::Exp(a) => map(val(*a), &f64::exp),
        Op::Sigmoid(a) => map(val(*a), &sigmoid),
        Op::Silu(a) => map(val(*a), &|x| x * sigmoid(x)),
        Op::Abs(a) => map(val(*a), &f64::abs),
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::Mean(a) => {
            let a = val(*a);
            if a.is_empty() {
                return Err(shape_err(idx, op, "mean of empty tensor".into()));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::MeanRows(a) => {
            let a = val(*a);
            let (m, n) = mat(a)?;
            if m == 0 {
                return Err(shape_err(idx, op, "mean over zero rows".into()));
            }
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(a.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            Tensor::new(vec![1, n], out)?
        }
        Op::Norm(a) => Tensor::scalar(val(*a).norm()),
        Op::Softmax(a) => {
            let a = val(*a);
            let cols = match a.shape() {
                [n] => *n,
                [_, n] => *n,
                s => return Err(shape_err(idx, op, format!("rank {} input", s.len()))),
            };
            let mut out = a.data().to_vec();
            if cols > 0 {
                out.chunks_mut(cols).for_each(softmax_in_place);
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Op::SliceCols(a, start, len) => {
            let a = val(*a);
            let (m, n) = mat(a)?;
            if start + len > n {
                return Err(shape_err(idx, op, format!("cols {start}..{} of {n}", start + len)));
            }
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&a.row(i)[*start..start + len]);
            }
            Tensor::new(vec![m, *len], out)?
        }
        Op::ConcatCols(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(|x| val(*x)).collect();
            let dims = parts.iter().map(|t| mat(t)).collect::<Result<Vec<_>>>()?;
            let m = dims.first().map(|d| d.0).unwrap_or(0);
            if dims.iter().any(|d| d.0 != m) {
                return Err(shape_err(idx, op, format!("row counts {dims:?}")));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for p in &parts {
                    out.extend_from_slice(p.row(i));
                }
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::ConcatRows(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(|x| val(*x)).collect();
            let dims = parts.iter().map(|t| mat(t)).collect::<Result<Vec<_>>>()?;
            let n = dims.first().map(|d| d.1).unwrap_or(0);
            if dims.iter().any(|d| d.1 != n) {
                return Err(shape_err(idx, op, format!("column counts {dims:?}")));
            }
            let m: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(m * n);
            for p in &parts {
                out.extend_from_slice(p.data());
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::AddRow(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, n) = mat(a)?;
            if b.len() != n {
                return Err(shape_err(idx, op, format!("row of {} onto [{m},{n}]", b.len())));
            }
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::Gather(a, index) => {
            let a = val(*a);
            if let Some(&bad) = index.iter().find(|&&i| i >= a.len()) {
                return Err(shape_err(idx, op, format!("index {bad} of {}", a.len())));
            }
            Tensor::vector(index.iter().map(|&i| a.data()[i]).collect())
        }
        Op::GatherRows(a, index) => {
            let a = val(*a);
            let (m, n) = mat(a)?;
            if let Some(&bad) = index.iter().find(|&&i| i >= m) {
                return Err(shape_err(idx, op, format!("row {bad} of {m}")));
            }
            let mut out = Vec::with_capacity(index.len() * n);
            for &i in index.iter() {
                out.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![index.len(), n], out)?
        }
        Op::ScatterAdd(a, index, shape) => {
            let a = val(*a);
            let mut out = Tensor::zeros(shape);
            if index.len() != a.len() {
                return Err(shape_err(idx, op, format!("{} indices for {} values", index.len(), a.len())));
            }
            let n = out.len();
            for (&i, &v) in index.iter().zip(a.data()) {
                if i >= n {
                    return Err(shape_err(idx, op, format!("index {i} of {n}")));
                }
                out.data_mut()[i] += v;
            }
            out
        }
        Op::SegmentSoftmax(a, offsets) => {
            let a = val(*a);
            if a.rank() != 1 || !check_offsets(offsets, a.len()) {
                return Err(shape_err(idx, op, "segments do not partition the input".into()));
            }
            let mut out = a.data().to_vec();
            for w in offsets.windows(2) {
                if w[1] > w[0] {
                    softmax_in_place(&mut out[w[0]..w[1]]);
                }
            }
            Tensor::vector(out)
        }
        Op::SegmentAggregate(a, basis, offsets) => {
            let a = val(*a);
            let (e, d) = basis
                .dims2()
                .ok_or_else(|| shape_err(idx, op, "basis must be rank-2".into()))?;
            if a.rank() != 1 || a.len() != e || !check_offsets(offsets, e) {
                return Err(shape_err(
                    idx,
                    op,
                    format!("weights {:?} vs basis [{e},{d}]", a.shape()),
                ));
            }
            let segments = offsets.len() - 1;
            let mut out = vec![0.0; segments * d];
            for s in 0..segments {
                let orow = &mut out[s * d..(s + 1) * d];
                for k in offsets[s]..offsets[s + 1] {
                    let w = a.data()[k];
                    for (o, &b) in orow.iter_mut().zip(basis.row(k)) {
                        *o += w * b;
                    }
                }
            }
            Tensor::new(vec![segments, d], out)?
        }
        Op::Reshape(a, shape) => {
            let a = val(*a);
            a.reshaped(shape.clone())
                .map_err(|_| shape_err(idx, op, format!("{:?} -> {:?}", a.shape(), shape)))?
        }
        Op::StopGrad(a) => val(*a).clone(),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite {
            node: idx,
            op: op.name(),
        });
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn leaf(&mut self, kind: LeafKind, name: Option<String>, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf(kind, name),
            value,
            requires_grad: kind == LeafKind::Param,
        });
        Ok(NodeId(id))
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Input, Some(name.to_string()), value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Param, Some(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Constant, None, value)
    }

    /// Leaf nodes of kind [`LeafKind::Param`], in creation order.
    pub fn params(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf(LeafKind::Param, Some(name)) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            self.check(input)?;
        }
        let idx = self.nodes.len();
        let value = compute(idx, &op, &|n| &self.nodes[n.0].value)?;
        let requires_grad = match op {
            Op::StopGrad(_) => false,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(idx))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }
    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Silu(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    /// `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows(a))
    }
    /// Euclidean norm over all elements.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Norm(a))
    }
    /// Softmax along the last axis (rank 1 or 2).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, len))
    }
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }
    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }
    /// Flat-index gather into a rank-1 result.
    pub fn gather(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        self.push(Op::Gather(a, index))
    }
    pub fn gather_rows(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        self.push(Op::GatherRows(a, index))
    }
    /// Adds `a[k]` into flat position `index[k]` of a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: NodeId, index: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::ScatterAdd(a, index, shape.to_vec()))
    }
    /// Softmax over each contiguous segment `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, a: NodeId, offsets: Arc<[usize]>) -> Result<NodeId> {
        self.push(Op::SegmentSoftmax(a, offsets))
    }
    /// `out[s] = sum_{k in segment s} a[k] * basis[k]` for a constant `[E, D]` basis.
    pub fn segment_aggregate(
        &mut self,
        a: NodeId,
        basis: Arc<Tensor>,
        offsets: Arc<[usize]>,
    ) -> Result<NodeId> {
        self.push(Op::SegmentAggregate(a, basis, offsets))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    /// Identity forward; blocks every gradient flowing back through this edge.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGrad(a))
    }

    /// Reverse pass from `output`, seeded with ones (the gradient of the sum
    /// of its elements).
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        node: i,
                        op: "gradient",
                    });
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes[..=output.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let y = &node.value;
        macro_rules! slot {
            ($id:expr) => {
                accumulate(&mut grads[$id.0], self.nodes[$id.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf(..) => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        slot!(id).iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot!(a).iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
                }
                if wants(*b) {
                    slot!(b).iter_mut().zip(g).for_each(|(s, gv)| *s -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let s = slot!(a);
                    for k in 0..g.len() {
                        s[k] += g[k] * bv[k];
                    }
                }
                if wants(*b) {
                    let s = slot!(b);
                    for k in 0..g.len() {
                        s[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let s = slot!(a);
                    for k in 0..g.len() {
                        s[k] += g[k] / bv[k];
                    }
                }
                if wants(*b) {
                    let s = slot!(b);
                    for k in 0..g.len() {
                        s[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::Scale(a, c) => {
                slot!(a).iter_mut().zip(g).for_each(|(s, gv)| *s += c * gv);
            }
            Op::AddScalar(a, _) | Op::Reshape(a, _) => {
                slot!(a).iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.dims2().unwrap().1;
                if wants(*a) {
                    // dA = G B^T
                    let bd = bv.data();
                    let s = slot!(a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    // dB = A^T G
                    let ad = av.data();
                    let s = slot!(b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let srow = &mut s[p * n..(p + 1) * n];
                            for (sv, gv) in srow.iter_mut().zip(grow) {
                                *sv += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                let s = slot!(a);
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Exp(a) => {
                let s = slot!(a);
                for k in 0..g.len() {
                    s[k] += g[k] * y.data()[k];
                }
            }
            Op::Sigmoid(a) => {
                let s = slot!(a);
                for k in 0..g.len() {
                    let yk = y.data()[k];
                    s[k] += g[k] * yk * (1.0 - yk);
                }
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                let s = slot!(a);
                for k in 0..g.len() {
                    let sg = sigmoid(x[k]);
                    s[k] += g[k] * (sg + x[k] * sg * (1.0 - sg));
                }
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                let s = slot!(a);
                for k in 0..g.len() {
                    let sign = if x[k] > 0.0 {
                        1.0
                    } else if x[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s[k] += g[k] * sign;
                }
            }
            Op::Sum(a) => {
                slot!(a).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                slot!(a).iter_mut().for_each(|s| *s += g[0] / n);
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                let s = slot!(a);
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j] / m as f64;
                    }
                }
            }
            Op::Norm(a) => {
                let x = val(*a).data();
                let norm = y.data()[0];
                if norm > 0.0 {
                    let s = slot!(a);
                    for k in 0..x.len() {
                        s[k] += g[0] * x[k] / norm;
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = *y.shape().last().unwrap();
                let s = slot!(a);
                if cols > 0 {
                    for (r, yrow) in y.data().chunks(cols).enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            s[r * cols + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                let (m, n) = val(*a).dims2().unwrap();
                let s = slot!(a);
                for i in 0..m {
                    for j in 0..*len {
                        s[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = y.dims2().unwrap().1;
                let m = y.dims2().unwrap().0;
                let mut offset = 0;
                for x in xs {
                    let n = val(*x).dims2().unwrap().1;
                    if wants(*x) {
                        let s = slot!(x);
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = val(*x).len();
                    if wants(*x) {
                        let s = slot!(x);
                        for k in 0..len {
                            s[k] += g[offset + k];
                        }
                    }
                    offset += len;
                }
            }
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                if wants(*a) {
                    slot!(a).iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
                }
                if wants(*b) && n > 0 {
                    let s = slot!(b);
                    for row in g.chunks(n) {
                        for (sv, gv) in s.iter_mut().zip(row) {
                            *sv += gv;
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                let s = slot!(a);
                for (k, &i) in index.iter().enumerate() {
                    s[i] += g[k];
                }
            }
            Op::GatherRows(a, index) => {
                let n = val(*a).dims2().unwrap().1;
                let s = slot!(a);
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        s[i * n + j] += g[k * n + j];
                    }
                }
            }
            Op::ScatterAdd(a, index, _) => {
                let s = slot!(a);
                for (k, &i) in index.iter().enumerate() {
                    s[k] += g[i];
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                let s = slot!(a);
                for w in offsets.windows(2) {
                    let range = w[0]..w[1];
                    let dot: f64 = range.clone().map(|k| g[k] * y.data()[k]).sum();
                    for k in range {
                        s[k] += y.data()[k] * (g[k] - dot);
                    }
                }
            }
            Op::SegmentAggregate(a, basis, offsets) => {
                let d = basis.dims2().unwrap().1;
                let s = slot!(a);
                for (seg, w) in offsets.windows(2).enumerate() {
                    let grow = &g[seg * d..(seg + 1) * d];
                    for k in w[0]..w[1] {
                        s[k] += basis.row(k).iter().zip(grow).map(|(b, gv)| b * gv).sum::<f64>();
                    }
                }
            }
            Op::StopGrad(_) => {}
        }
    }

    /// Re-runs every recorded operation with the given leaf values replaced.
    /// Returns the value of every node.
    pub fn recompute(&self, overrides: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf(..) => match overrides.get(&NodeId(idx)) {
                    Some(t) if t.shape() != node.value.shape() => {
                        return Err(shape_err(
                            idx,
                            &node.op,
                            format!("override {:?} for {:?}", t.shape(), node.value.shape()),
                        ))
                    }
                    Some(t) => t.clone(),
                    None => node.value.clone(),
                },
                op => compute(idx, op, &|n| &values[n.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Replays the graph with named leaves rebound and returns the marked
    /// outputs. Every [`LeafKind::Input`] leaf must be bound; parameters keep
    /// their recorded values unless named.
    pub fn evaluate(&self, inputs: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        let mut overrides = HashMap::new();
        let mut used = 0;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(kind, Some(name)) = &node.op {
                match inputs.get(name) {
                    Some(t) => {
                        overrides.insert(NodeId(idx), t.clone());
                        used += 1;
                    }
                    None if *kind == LeafKind::Input => {
                        return Err(Error::UnboundInput(name.clone()))
                    }
                    None => {}
                }
            }
        }
        if used != inputs.len() {
            let unknown = inputs
                .keys()
                .find(|k| {
                    !self.nodes.iter().any(|n| matches!(&n.op, Op::Leaf(_, Some(name)) if name == *k))
                })
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(format!("graph has no leaf named `{unknown}`")));
        }
        let values = self.recompute(&overrides)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values[id.0].clone()))
            .collect())
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when no path reaches it. Fails if
    /// `id` was not part of the graph behind the differentiated output.
    pub fn wrt(&self, id: NodeId) -> Result<Tensor> {
        let shape = self.shapes.get(id.0).ok_or(Error::UnknownNode(id.0))?;
        let data = match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape.clone(), data)
    }
}
