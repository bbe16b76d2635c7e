//! Static computation graphs over a fixed operator set, with reverse-mode
//! gradients.
//!
//! A [`Graph`] is assembled once with [`GraphBuilder`] (shapes are checked
//! while building) and is immutable afterwards. Values for named inputs and
//! parameters are supplied per call through [`Bindings`]. Nodes are stored in
//! topological order, so the forward pass is a single sweep over the node
//! list and the backward pass is the reverse sweep.
//!
//! Row-wise operators use the matrix view of [`Tensor`]: the last dimension
//! holds the columns, leading dimensions are collapsed into rows.

use std::collections::BTreeMap;

use super::tensor::{dot, rows_cols, sum_sq, Tensor};
use crate::error::{Error, Result};

/// Rows whose norm is at or below this value cannot be normalized.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input {
        name: String,
    },
    Param {
        name: String,
    },
    /// `x W^T + b` with `W: [out, in]`, `b: [out]`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Each row divided by its L2 norm.
    L2Normalize(NodeId),
    /// Row-wise inner product of two equally shaped operands.
    Dot(NodeId, NodeId),
    /// All inner products between rows of `a` and rows of `b`: `a b^T`.
    PairwiseDot(NodeId, NodeId),
    /// Row-wise squared L2 norm.
    SquaredNorm(NodeId),
    /// Row-wise `log Σ exp`.
    LogSumExp(NodeId),
    /// Row-wise arithmetic mean.
    RowMean(NodeId),
    /// Flat-index gather into a new shape.
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    /// Row-wise minimum; lowest column index wins ties.
    MinSelect(NodeId),
    /// Row-wise maximum; lowest column index wins ties.
    MaxSelect(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// Identity in the forward pass, blocks gradient flow.
    StopGradient(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Dot(..) => "dot",
            Op::PairwiseDot(..) => "pairwise_dot",
            Op::SquaredNorm(_) => "squared_norm",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::RowMean(_) => "row_mean",
            Op::Gather { .. } => "gather",
            Op::MinSelect(_) => "min_select",
            Op::MaxSelect(_) => "max_select",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::PairwiseDot(a, b) => {
                vec![*a, *b]
            }
            Op::Tanh(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::L2Normalize(x)
            | Op::SquaredNorm(x)
            | Op::LogSumExp(x)
            | Op::RowMean(x)
            | Op::Gather { x, .. }
            | Op::MinSelect(x)
            | Op::MaxSelect(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::StopGradient(x) => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// An immutable, topologically ordered computation graph.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
}

/// Named tensor values supplied to a graph evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: BTreeMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.bind(name, value);
        self
    }

    pub fn extend<I, S>(&mut self, items: I) -> &mut Self
    where
        I: IntoIterator<Item = (S, &'a Tensor)>,
        S: Into<String>,
    {
        for (k, v) in items {
            self.values.insert(k.into(), v);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.values.get(name).copied()
    }
}

/// Incremental graph construction with shape checking.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
}

fn shape_err(node: usize, op: &'static str, reason: impl Into<String>) -> Error {
    Error::Shape {
        node,
        op,
        reason: reason.into(),
    }
}

fn reduced_shape(shape: &[usize]) -> Option<Vec<usize>> {
    match shape.len() {
        0 | 1 => Some(vec![]),
        2 => Some(vec![shape[0]]),
        _ => None,
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { .. } | Op::StopGradient(_) => false,
            other => other
                .operands()
                .iter()
                .any(|o| self.nodes[o.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(shape_err(
                self.next(),
                "input",
                format!("name `{name}` already declared"),
            ));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a parameter slot. Re-declaring a name with the same shape
    /// returns the existing node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.shape(id) != shape {
                return Err(shape_err(
                    id.0,
                    "param",
                    format!(
                        "`{name}` redeclared with shape {shape:?}, was {:?}",
                        self.shape(id)
                    ),
                ));
            }
            return Ok(id);
        }
        if self.inputs.contains_key(name) {
            return Err(shape_err(
                self.next(),
                "param",
                format!("name `{name}` already an input"),
            ));
        }
        let id = self.push(
            Op::Param {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let node = self.next();
        if ws.len() != 2 {
            return Err(shape_err(
                node,
                "affine",
                format!("weight must be rank 2, got {ws:?}"),
            ));
        }
        let (out, inp) = (ws[0], ws[1]);
        if bs != [out] {
            return Err(shape_err(
                node,
                "affine",
                format!("bias {bs:?} does not match weight {ws:?}"),
            ));
        }
        let shape = match xs.as_slice() {
            [k] if *k == inp => vec![out],
            [n, k] if *k == inp => vec![*n, out],
            _ => {
                return Err(shape_err(
                    node,
                    "affine",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        Ok(self.push(Op::Affine { x, w, b }, shape))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Tanh(x), s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                self.next(),
                op,
                format!(
                    "operands {:?} and {:?} differ",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), s)
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::L2Normalize(x), s)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "dot")?;
        let out = reduced_shape(&s).ok_or_else(|| shape_err(self.next(), "dot", "rank above 2"))?;
        Ok(self.push(Op::Dot(a, b), out))
    }

    pub fn pairwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([ra, ca], [rb, cb]) if ca == cb => {
                let shape = vec![*ra, *rb];
                Ok(self.push(Op::PairwiseDot(a, b), shape))
            }
            _ => Err(shape_err(
                self.next(),
                "pairwise_dot",
                format!("need [r1, c] and [r2, c], got {sa:?} and {sb:?}"),
            )),
        }
    }

    fn reduction(&mut self, x: NodeId, op: Op) -> Result<NodeId> {
        let name = op.name();
        let out = reduced_shape(self.shape(x))
            .ok_or_else(|| shape_err(self.next(), name, "rank above 2"))?;
        if self.shape(x).last() == Some(&0) {
            return Err(shape_err(self.next(), name, "empty rows"));
        }
        Ok(self.push(op, out))
    }

    pub fn squared_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduction(x, Op::SquaredNorm(x))
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduction(x, Op::LogSumExp(x))
    }

    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduction(x, Op::RowMean(x))
    }

    pub fn min_select(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduction(x, Op::MinSelect(x))
    }

    pub fn max_select(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduction(x, Op::MaxSelect(x))
    }

    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let len: usize = self.shape(x).iter().product();
        let node = self.next();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err(
                node,
                "gather",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(shape_err(
                node,
                "gather",
                format!("index {bad} out of range {len}"),
            ));
        }
        Ok(self.push(Op::Gather { x, indices }, shape.to_vec()))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![])
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::StopGradient(x), s)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        self.shape(id)
    }

    /// Seals the graph. Fails if a declared parameter is never consumed.
    pub fn finish(self) -> Result<Graph> {
        let mut used = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for o in n.op.operands() {
                used[o.0] = true;
            }
        }
        for (name, id) in &self.params {
            if !used[id.0] {
                return Err(shape_err(
                    id.0,
                    "param",
                    format!("parameter `{name}` is never used"),
                ));
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            params: self.params,
        })
    }
}

/// Values of every node after a forward sweep.
#[derive(Debug)]
pub struct Forward<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    selections: Vec<Option<Vec<usize>>>,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn evaluate(&self, bindings: &Bindings<'_>, output: NodeId) -> Result<Tensor> {
        let mut fwd = self.forward(bindings)?;
        Ok(std::mem::replace(
            &mut fwd.values[output.0],
            Tensor::zeros(&[0]),
        ))
    }

    /// Forward and backward in one call.
    pub fn gradient(&self, bindings: &Bindings<'_>, loss: NodeId) -> Result<Gradients> {
        self.forward(bindings)?.backward(loss)
    }

    pub fn forward(&self, bindings: &Bindings<'_>) -> Result<Forward<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut selections = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| &values[id.0];
            let out = match &node.op {
                Op::Input { name } | Op::Param { name } => {
                    let t = bindings.get(name).ok_or_else(|| Error::MissingBinding {
                        node: i,
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(shape_err(
                            i,
                            node.op.name(),
                            format!("`{name}` declared {:?}, bound {:?}", node.shape, t.shape()),
                        ));
                    }
                    t.clone()
                }
                Op::Affine { x, w, b } => affine_fwd(v(*x), v(*w), v(*b), &node.shape),
                Op::Tanh(x) => map(v(*x), f64::tanh),
                Op::Relu(x) => map(v(*x), |a| a.max(0.0)),
                Op::Add(a, b) => zip(v(*a), v(*b), |x, y| x + y),
                Op::Sub(a, b) => zip(v(*a), v(*b), |x, y| x - y),
                Op::Mul(a, b) => zip(v(*a), v(*b), |x, y| x * y),
                Op::Scale(x, c) => map(v(*x), |a| a * c),
                Op::L2Normalize(x) => l2_normalize(v(*x))?,
                Op::Dot(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (_, c) = ta.rows_cols();
                    let data = ta
                        .data()
                        .chunks(c)
                        .zip(tb.data().chunks(c))
                        .map(|(x, y)| dot(x, y))
                        .collect();
                    Tensor::from_parts(node.shape.clone(), data)
                }
                Op::PairwiseDot(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let mut data = Vec::with_capacity(node.shape[0] * node.shape[1]);
                    for ra in ta.rows() {
                        for rb in tb.rows() {
                            data.push(dot(ra, rb));
                        }
                    }
                    Tensor::from_parts(node.shape.clone(), data)
                }
                Op::SquaredNorm(x) => row_reduce(v(*x), &node.shape, sum_sq),
                Op::LogSumExp(x) => row_reduce(v(*x), &node.shape, log_sum_exp),
                Op::RowMean(x) => row_reduce(v(*x), &node.shape, |r| {
                    r.iter().fold(0.0, |acc, a| acc + a) / r.len() as f64
                }),
                Op::Gather { x, indices } => {
                    let src = v(*x).data();
                    Tensor::from_parts(
                        node.shape.clone(),
                        indices.iter().map(|&k| src[k]).collect(),
                    )
                }
                Op::MinSelect(x) | Op::MaxSelect(x) => {
                    let want_min = matches!(node.op, Op::MinSelect(_));
                    let t = v(*x);
                    let mut picks = Vec::new();
                    let mut data = Vec::new();
                    for row in t.rows() {
                        let k = select(row, want_min);
                        picks.push(k);
                        data.push(row[k]);
                    }
                    selections[i] = Some(picks);
                    Tensor::from_parts(node.shape.clone(), data)
                }
                Op::Mean(x) => {
                    let t = v(*x);
                    let s = t.data().iter().fold(0.0, |acc, a| acc + a);
                    Tensor::from_parts(vec![], vec![s / t.numel() as f64])
                }
                Op::Sum(x) => {
                    let s = v(*x).data().iter().fold(0.0, |acc, a| acc + a);
                    Tensor::from_parts(vec![], vec![s])
                }
                Op::StopGradient(x) => v(*x).clone(),
            };
            if out.data().iter().any(|a| !a.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values.push(out);
        }
        Ok(Forward {
            graph: self,
            values,
            selections,
        })
    }
}

impl<'g> Forward<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Column chosen per row by a min/max selection node.
    pub fn selection(&self, id: NodeId) -> Option<&[usize]> {
        self.selections[id.0].as_deref()
    }

    /// Every recorded selection, in node order.
    pub fn selections_snapshot(&self) -> Vec<Vec<usize>> {
        self.selections.iter().flatten().cloned().collect()
    }

    /// Reverse sweep from a scalar node. Every declared parameter gets an
    /// entry; parameters with no gradient path receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let nodes = &self.graph.nodes;
        let loss_shape = &nodes[loss.0].shape;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_shape.clone(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adj[loss.0] = Some(Tensor::from_parts(loss_shape.clone(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let val = |id: NodeId| &self.values[id.0];
            match &node.op {
                Op::Input { .. } | Op::StopGradient(_) => {}
                Op::Param { .. } => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (out, inp) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.numel() / inp;
                    let gd = g.data();
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; tx.numel()];
                        for r in 0..rows {
                            for o in 0..out {
                                let go = gd[r * out + o];
                                let wrow = &tw.data()[o * inp..(o + 1) * inp];
                                for k in 0..inp {
                                    gx[r * inp + k] += go * wrow[k];
                                }
                            }
                        }
                        accumulate(&mut adj, *x, tx.shape(), gx);
                    }
                    if nodes[w.0].requires_grad {
                        let mut gw = vec![0.0; out * inp];
                        for r in 0..rows {
                            let xrow = &tx.data()[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = gd[r * out + o];
                                for k in 0..inp {
                                    gw[o * inp + k] += go * xrow[k];
                                }
                            }
                        }
                        accumulate(&mut adj, *w, tw.shape(), gw);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; out];
                        for r in 0..rows {
                            for o in 0..out {
                                gb[o] += gd[r * out + o];
                            }
                        }
                        accumulate(&mut adj, *b, &[out], gb);
                    }
                }
                Op::Tanh(x) => {
                    let y = &self.values[i];
                    let gx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut adj, *x, y.shape(), gx);
                }
                Op::Relu(x) => {
                    let tx = val(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    if nodes[a.0].requires_grad {
                        accumulate(&mut adj, *a, &node.shape, g.data().to_vec());
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(
                            &mut adj,
                            *b,
                            &node.shape,
                            g.data().iter().map(|v| sign * v).collect(),
                        );
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        let ga = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut adj, *a, &node.shape, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut adj, *b, &node.shape, gb);
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(
                        &mut adj,
                        *x,
                        &node.shape,
                        g.data().iter().map(|v| v * c).collect(),
                    );
                }
                Op::L2Normalize(x) => {
                    let (tx, y) = (val(*x), &self.values[i]);
                    let (_, c) = tx.rows_cols();
                    let mut gx = Vec::with_capacity(tx.numel());
                    for ((xr, yr), gr) in tx
                        .data()
                        .chunks(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let norm = sum_sq(xr).sqrt();
                        let proj = dot(yr, gr);
                        gx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * proj) / norm));
                    }
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::Dot(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (_, c) = ta.rows_cols();
                    let gd = g.data();
                    for (target, other) in [(*a, tb), (*b, ta)] {
                        if nodes[target.0].requires_grad {
                            let gt = other
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(k, o)| gd[k / c] * o)
                                .collect();
                            accumulate(&mut adj, target, other.shape(), gt);
                        }
                    }
                }
                Op::PairwiseDot(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (ra, c) = ta.rows_cols();
                    let (rb, _) = tb.rows_cols();
                    let gd = g.data();
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; ra * c];
                        for p in 0..ra {
                            for q in 0..rb {
                                let gpq = gd[p * rb + q];
                                let brow = tb.row(q);
                                for k in 0..c {
                                    ga[p * c + k] += gpq * brow[k];
                                }
                            }
                        }
                        accumulate(&mut adj, *a, ta.shape(), ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; rb * c];
                        for p in 0..ra {
                            let arow = ta.row(p);
                            for q in 0..rb {
                                let gpq = gd[p * rb + q];
                                for k in 0..c {
                                    gb[q * c + k] += gpq * arow[k];
                                }
                            }
                        }
                        accumulate(&mut adj, *b, tb.shape(), gb);
                    }
                }
                Op::SquaredNorm(x) => {
                    let tx = val(*x);
                    let (_, c) = tx.rows_cols();
                    let gd = g.data();
                    let gx = tx
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, a)| 2.0 * a * gd[k / c])
                        .collect();
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::LogSumExp(x) => {
                    let (tx, y) = (val(*x), &self.values[i]);
                    let (_, c) = tx.rows_cols();
                    let (gd, yd) = (g.data(), y.data());
                    let gx = tx
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, a)| gd[k / c] * (a - yd[k / c]).exp())
                        .collect();
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::RowMean(x) => {
                    let tx = val(*x);
                    let (_, c) = tx.rows_cols();
                    let gd = g.data();
                    let gx = (0..tx.numel()).map(|k| gd[k / c] / c as f64).collect();
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::Gather { x, indices } => {
                    let tx = val(*x);
                    let mut gx = vec![0.0; tx.numel()];
                    for (k, &src) in indices.iter().enumerate() {
                        gx[src] += g.data()[k];
                    }
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::MinSelect(x) | Op::MaxSelect(x) => {
                    let tx = val(*x);
                    let (_, c) = tx.rows_cols();
                    let picks = self.selections[i]
                        .as_ref()
                        .expect("selection recorded in forward");
                    let mut gx = vec![0.0; tx.numel()];
                    for (r, &k) in picks.iter().enumerate() {
                        gx[r * c + k] = g.data()[r];
                    }
                    accumulate(&mut adj, *x, tx.shape(), gx);
                }
                Op::Mean(x) => {
                    let tx = val(*x);
                    let share = g.data()[0] / tx.numel() as f64;
                    accumulate(&mut adj, *x, tx.shape(), vec![share; tx.numel()]);
                }
                Op::Sum(x) => {
                    let tx = val(*x);
                    accumulate(&mut adj, *x, tx.shape(), vec![g.data()[0]; tx.numel()]);
                }
            }
        }

        let mut grads = Gradients::new();
        for (name, id) in &self.graph.params {
            let g = adj[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&nodes[id.0].shape));
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, shape: &[usize], g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&a| f(a)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn row_reduce(t: &Tensor, out_shape: &[usize], f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (_, c) = rows_cols(t.shape());
    Tensor::from_parts(out_shape.to_vec(), t.data().chunks(c).map(f).collect())
}

fn affine_fwd(x: &Tensor, w: &Tensor, b: &Tensor, out_shape: &[usize]) -> Tensor {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for xrow in x.data().chunks(inp) {
        for o in 0..out {
            data.push(dot(&w.data()[o * inp..(o + 1) * inp], xrow) + b.data()[o]);
        }
    }
    Tensor::from_parts(out_shape.to_vec(), data)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = row.iter().fold(0.0, |acc, a| acc + (a - m).exp());
    m + s.ln()
}

/// Index of the row minimum (or maximum); the lowest index wins ties.
pub fn select(row: &[f64], want_min: bool) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        let better = if want_min {
            v < row[best]
        } else {
            v > row[best]
        };
        if better {
            best = k;
        }
    }
    best
}

/// Normalizes every row to unit L2 norm.
///
/// Fails with [`Error::DegenerateEmbedding`] when a row norm is at or below
/// [`NORM_EPS`].
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let (_, c) = v.rows_cols();
    let mut data = Vec::with_capacity(v.numel());
    for (r, row) in v.data().chunks(c.max(1)).enumerate() {
        let norm = sum_sq(row).sqrt();
        if norm <= NORM_EPS {
            return Err(Error::DegenerateEmbedding { row: r, norm });
        }
        data.extend(row.iter().map(|a| a / norm));
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), data))
}
