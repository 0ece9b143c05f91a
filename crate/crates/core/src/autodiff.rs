//! Dense f64 tensors and a reverse-mode differentiation graph.
//!
//! The graph is a flat tape: nodes are appended in construction order, so
//! every node's inputs precede it and a single left-to-right sweep evaluates
//! the whole graph. All reductions use fixed left-to-right summation, which
//! makes repeated forward passes bit-identical. `backward` sweeps the tape in
//! reverse and accumulates adjoints for every parameter leaf.
//!
//! The op set is exactly what the substitution model and probe classifiers
//! need: matmul (plain and right-transposed), bias add over rows, elementwise
//! tanh/relu/exp/ln/x·ln(x)/clamp/product, row softmax, row l2-normalize,
//! row/total sum, total mean, dot product, scalar scale and scalar affine
//! combination. There is no broadcasting beyond the bias add.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

/// Guard added to l2 norms so cosine against a zero vector is ~0, not NaN.
pub const NORM_GUARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major f64 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(CoreError::Shape {
                node: "tensor".into(),
                detail: format!("unsupported shape {shape:?}"),
            });
        }
        if count != values.len() {
            return Err(CoreError::Shape {
                node: "tensor".into(),
                detail: format!("shape {shape:?} wants {count} values, got {}", values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty());
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; count] }
    }

    /// Row-major matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::Shape {
                    node: "tensor".into(),
                    detail: "ragged rows".into(),
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rank-1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.values.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar_shape());
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Node index within a graph.
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    /// Trainable leaf, bound by name at forward time, receives an adjoint.
    Param(String),
    /// Non-trainable leaf, bound by name at forward time.
    Input(String),
    /// Embedded constant.
    Const(Tensor),
    /// `a @ b`
    MatMul,
    /// `a @ bᵀ`
    MatMulT,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Matrix plus a bias vector broadcast over rows.
    AddBias,
    Tanh,
    Relu,
    Exp,
    Ln,
    /// `x · ln x` with `0 · ln 0 = 0`.
    XLogX,
    /// `max(x, c)` entrywise.
    ClampMin(f64),
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// Numerically stable softmax over each row.
    RowSoftmax,
    /// Each row divided by its l2 norm plus [`NORM_GUARD`].
    RowL2Norm,
    /// Multiply by a constant scalar.
    Scale(f64),
    /// Sum of each row: `[r, c] -> [r]`.
    RowSum,
    /// Sum of all entries: `-> [1]`.
    SumAll,
    /// Mean of all entries: `-> [1]`.
    MeanAll,
    /// Dot product of two equal-length vectors: `-> [1]`.
    Dot,
    /// `bias + Σ coeffs[k] · scalar_input[k]` over scalar inputs.
    Affine { coeffs: Vec<f64>, bias: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul => "matmul",
            Op::MatMulT => "matmul_t",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::XLogX => "xlogx",
            Op::ClampMin(_) => "clamp_min",
            Op::Mul => "mul",
            Op::RowSoftmax => "row_softmax",
            Op::RowL2Norm => "row_l2norm",
            Op::Scale(_) => "scale",
            Op::RowSum => "row_sum",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Dot => "dot",
            Op::Affine { .. } => "affine",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Option<Tensor>,
    adjoint: Option<Tensor>,
}

/// Reverse-mode differentiation tape.
///
/// Build with the `param`/`input`/`constant` leaves and op methods, mark the
/// scalar result with [`Graph::set_output`], then run [`Graph::forward`]
/// followed by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    output: Option<NodeId>,
    forward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), output: None, forward_done: false }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        let id = self.nodes.len();
        if matches!(op, Op::Param(_)) {
            self.params.push(id);
        }
        self.nodes.push(Node { op, inputs, value: None, adjoint: None });
        self.forward_done = false;
        id
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()), vec![])
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()), vec![])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias, vec![a, bias])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Ln, vec![a])
    }

    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        self.push(Op::XLogX, vec![a])
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::ClampMin(c), vec![a])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSoftmax, vec![a])
    }

    pub fn row_l2norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowL2Norm, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum, vec![a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll, vec![a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot, vec![a, b])
    }

    pub fn affine(&mut self, inputs: Vec<NodeId>, coeffs: Vec<f64>, bias: f64) -> NodeId {
        assert_eq!(inputs.len(), coeffs.len());
        self.push(Op::Affine { coeffs, bias }, inputs)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Param(n) => format!("node {id} (param {n})"),
            Op::Input(n) => format!("node {id} (input {n})"),
            op => format!("node {id} ({})", op.kind()),
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].value.as_ref()
    }

    /// Evaluates the tape with the given leaf bindings and returns the output
    /// value. All intermediates are cached for `backward`. Fails on unbound
    /// leaves, shape-incompatible inputs and non-finite intermediates.
    pub fn forward(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let output = self
            .output
            .ok_or_else(|| CoreError::State("graph has no output node".into()))?;
        for id in 0..self.nodes.len() {
            let value = self.eval_node(id, bindings)?;
            if !value.all_finite() {
                return Err(CoreError::Overflow { node: self.node_label(id) });
            }
            self.nodes[id].value = Some(value);
            self.nodes[id].adjoint = None;
        }
        self.forward_done = true;
        Ok(self.nodes[output].value.clone().unwrap())
    }

    fn shape_err(&self, id: NodeId, detail: String) -> CoreError {
        CoreError::Shape { node: self.node_label(id), detail }
    }

    fn in_val(&self, id: NodeId, k: usize) -> &Tensor {
        let input = self.nodes[id].inputs[k];
        self.nodes[input].value.as_ref().expect("inputs evaluated before node")
    }

    fn eval_node(&self, id: NodeId, bindings: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Param(name) | Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| CoreError::State(format!("unbound leaf '{name}'"))),
            Op::Const(t) => Ok(t.clone()),
            Op::MatMul => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                if a.cols() != b.rows() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?} @ {:?}", a.shape(), b.shape()),
                    ));
                }
                Ok(matmul(a, b))
            }
            Op::MatMulT => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                if a.cols() != b.cols() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?} @ transpose({:?})", a.shape(), b.shape()),
                    ));
                }
                Ok(matmul_t(a, b))
            }
            Op::Add => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut out = a.clone();
                for (v, w) in out.values.iter_mut().zip(&b.values) {
                    *v += w;
                }
                Ok(out)
            }
            Op::AddBias => {
                let (a, bias) = (self.in_val(id, 0), self.in_val(id, 1));
                if bias.len() != a.cols() {
                    return Err(self.shape_err(
                        id,
                        format!("bias len {} vs {} cols", bias.len(), a.cols()),
                    ));
                }
                let c = a.cols();
                let mut out = a.clone();
                for (i, v) in out.values.iter_mut().enumerate() {
                    *v += bias.values[i % c];
                }
                Ok(out)
            }
            Op::Tanh => Ok(map(self.in_val(id, 0), f64::tanh)),
            Op::Relu => Ok(map(self.in_val(id, 0), |x| if x > 0.0 { x } else { 0.0 })),
            Op::Exp => Ok(map(self.in_val(id, 0), f64::exp)),
            Op::Ln => Ok(map(self.in_val(id, 0), f64::ln)),
            Op::XLogX => Ok(map(self.in_val(id, 0), |x| if x > 0.0 { x * x.ln() } else { 0.0 })),
            Op::ClampMin(c) => {
                let c = *c;
                Ok(map(self.in_val(id, 0), move |x| x.max(c)))
            }
            Op::Mul => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut out = a.clone();
                for (v, w) in out.values.iter_mut().zip(&b.values) {
                    *v *= w;
                }
                Ok(out)
            }
            Op::RowSoftmax => {
                let a = self.in_val(id, 0);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let c = a.cols();
                    let row = &mut out.values[i * c..(i + 1) * c];
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
                Ok(out)
            }
            Op::RowL2Norm => {
                let a = self.in_val(id, 0);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let c = a.cols();
                    let row = &mut out.values[i * c..(i + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = norm + NORM_GUARD;
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                Ok(out)
            }
            Op::Scale(c) => {
                let c = *c;
                Ok(map(self.in_val(id, 0), move |x| c * x))
            }
            Op::RowSum => {
                let a = self.in_val(id, 0);
                let sums = (0..a.rows())
                    .map(|i| a.row(i).iter().sum::<f64>())
                    .collect();
                Ok(Tensor::vector(sums))
            }
            Op::SumAll => Ok(Tensor::scalar(self.in_val(id, 0).values.iter().sum())),
            Op::MeanAll => {
                let a = self.in_val(id, 0);
                Ok(Tensor::scalar(a.values.iter().sum::<f64>() / a.len() as f64))
            }
            Op::Dot => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                if a.len() != b.len() {
                    return Err(self.shape_err(
                        id,
                        format!("lengths {} vs {}", a.len(), b.len()),
                    ));
                }
                let v = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
                Ok(Tensor::scalar(v))
            }
            Op::Affine { coeffs, bias } => {
                let mut v = *bias;
                for (k, &c) in coeffs.iter().enumerate() {
                    let s = self.in_val(id, k);
                    if !s.is_scalar_shape() {
                        return Err(self.shape_err(id, "affine input is not a scalar".into()));
                    }
                    v += c * s.scalar_value();
                }
                Ok(Tensor::scalar(v))
            }
        }
    }

    /// Gradient of the scalar output with respect to every parameter leaf.
    /// Requires a prior `forward`; duplicate parameter names have their
    /// adjoints accumulated under the shared name.
    pub fn backward(&mut self) -> Result<BTreeMap<String, Tensor>> {
        if !self.forward_done {
            return Err(CoreError::State("backward called before forward".into()));
        }
        let output = self.output.unwrap();
        let out_val = self.nodes[output].value.as_ref().unwrap();
        if !out_val.is_scalar_shape() {
            return Err(CoreError::State(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[output].adjoint = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(upstream) = self.nodes[id].adjoint.clone() else {
                continue;
            };
            let contributions = self.backprop_node(id, &upstream);
            for (input, grad) in contributions {
                match &mut self.nodes[input].adjoint {
                    Some(acc) => {
                        for (a, g) in acc.values.iter_mut().zip(&grad.values) {
                            *a += g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for &pid in &self.params {
            let name = match &self.nodes[pid].op {
                Op::Param(n) => n.clone(),
                _ => unreachable!(),
            };
            let value = self.nodes[pid].value.as_ref().unwrap();
            let adj = self
                .nodes[pid]
                .adjoint
                .clone()
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, g) in acc.values.iter_mut().zip(&adj.values) {
                        *a += g;
                    }
                }
                None => {
                    grads.insert(name, adj);
                }
            }
        }
        Ok(grads)
    }

    /// Per-input gradient contributions for one node given its upstream adjoint.
    fn backprop_node(&self, id: NodeId, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => vec![],
            Op::MatMul => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                vec![(ins[0], matmul_t(up, b)), (ins[1], matmul_at(a, up))]
            }
            Op::MatMulT => {
                // c = a @ bᵀ  =>  da = up @ b, db = upᵀ @ a
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                vec![(ins[0], matmul(up, b)), (ins[1], matmul_at(up, a))]
            }
            Op::Add => {
                vec![(ins[0], up.clone()), (ins[1], up.clone())]
            }
            Op::AddBias => {
                let bias = self.in_val(id, 1);
                let c = bias.len();
                let mut db = vec![0.0; c];
                for (i, v) in up.values.iter().enumerate() {
                    db[i % c] += v;
                }
                vec![(ins[0], up.clone()), (ins[1], Tensor::vector(db))]
            }
            Op::Tanh => {
                let y = node.value.as_ref().unwrap();
                vec![(ins[0], zip_map(up, y, |u, y| u * (1.0 - y * y)))]
            }
            Op::Relu => {
                let x = self.in_val(id, 0);
                vec![(ins[0], zip_map(up, x, |u, x| if x > 0.0 { u } else { 0.0 }))]
            }
            Op::Exp => {
                let y = node.value.as_ref().unwrap();
                vec![(ins[0], zip_map(up, y, |u, y| u * y))]
            }
            Op::Ln => {
                let x = self.in_val(id, 0);
                vec![(ins[0], zip_map(up, x, |u, x| u / x))]
            }
            Op::XLogX => {
                let x = self.in_val(id, 0);
                vec![(ins[0], zip_map(up, x, |u, x| if x > 0.0 { u * (x.ln() + 1.0) } else { 0.0 }))]
            }
            Op::ClampMin(c) => {
                let c = *c;
                let x = self.in_val(id, 0);
                vec![(ins[0], zip_map(up, x, move |u, x| if x > c { u } else { 0.0 }))]
            }
            Op::Mul => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                vec![
                    (ins[0], zip_map(up, b, |u, b| u * b)),
                    (ins[1], zip_map(up, a, |u, a| u * a)),
                ]
            }
            Op::RowSoftmax => {
                // dx = y ⊙ (up − (up · y per row))
                let y = node.value.as_ref().unwrap();
                let mut dx = y.clone();
                let c = y.cols();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let ur = up.row(i);
                    let inner: f64 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                    let out = &mut dx.values[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] = yr[j] * (ur[j] - inner);
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::RowL2Norm => {
                let x = self.in_val(id, 0);
                let mut dx = x.clone();
                let c = x.cols();
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let ur = up.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = norm + NORM_GUARD;
                    let inner: f64 = xr.iter().zip(ur).map(|(x, u)| x * u).sum();
                    let out = &mut dx.values[i * c..(i + 1) * c];
                    for j in 0..c {
                        let correction =
                            if norm > 0.0 { inner * xr[j] / (s * s * norm) } else { 0.0 };
                        out[j] = ur[j] / s - correction;
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Scale(c) => {
                let c = *c;
                vec![(ins[0], map(up, move |u| c * u))]
            }
            Op::RowSum => {
                let x = self.in_val(id, 0);
                let c = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (i, v) in dx.values.iter_mut().enumerate() {
                    *v = up.values[i / c];
                }
                vec![(ins[0], dx)]
            }
            Op::SumAll => {
                let x = self.in_val(id, 0);
                let u = up.scalar_value();
                let mut dx = Tensor::zeros(x.shape());
                dx.values.fill(u);
                vec![(ins[0], dx)]
            }
            Op::MeanAll => {
                let x = self.in_val(id, 0);
                let u = up.scalar_value() / x.len() as f64;
                let mut dx = Tensor::zeros(x.shape());
                dx.values.fill(u);
                vec![(ins[0], dx)]
            }
            Op::Dot => {
                let (a, b) = (self.in_val(id, 0), self.in_val(id, 1));
                let u = up.scalar_value();
                vec![
                    (ins[0], map(b, move |bv| u * bv)),
                    (ins[1], map(a, move |av| u * av)),
                ]
            }
            Op::Affine { coeffs, .. } => {
                let u = up.scalar_value();
                ins.iter()
                    .zip(coeffs)
                    .map(|(&input, &c)| (input, Tensor::scalar(u * c)))
                    .collect()
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for v in out.values.iter_mut() {
        *v = f(*v);
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    let mut out = a.clone();
    for (v, w) in out.values.iter_mut().zip(&b.values) {
        *v = f(*v, *w);
    }
    out
}

/// `a @ b` with fixed i-k-j loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(n, b.rows());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for k in 0..n {
            let av = a.values[i * n + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.values[k * p..(k + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor { shape: vec![m, p], values: out }
}

/// `a @ bᵀ`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, p) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(n, b.cols());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.values[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b.values[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                acc += arow[k] * brow[k];
            }
            out[i * p + j] = acc;
        }
    }
    Tensor { shape: vec![m, p], values: out }
}

/// `aᵀ @ b`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, p) = (a.cols(), a.rows(), b.cols());
    debug_assert_eq!(n, b.rows());
    let mut out = vec![0.0; m * p];
    for k in 0..n {
        let arow = &a.values[k * m..(k + 1) * m];
        let brow = &b.values[k * p..(k + 1) * p];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor { shape: vec![m, p], values: out }
}

/// Central finite differences: entrywise `(f(x + h·e) − f(x − h·e)) / 2h`.
///
/// This is the gradient oracle `backward` is validated against; it only calls
/// the supplied function and shares no code with the tape.
pub fn finite_diff(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    point: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(CoreError::validation("finite_diff: step must be > 0"));
    }
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let up = f(&probe)?;
        probe.values[i] = orig - step;
        let down = f(&probe)?;
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identity_graph_returns_leaf() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.set_output(x);
        let out = g.forward(&bind(&[("x", Tensor::vector(vec![2.0]))])).unwrap();
        assert_eq!(out.values(), &[2.0]);
    }

    #[test]
    fn row_softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.row_softmax(x);
        g.set_output(y);
        let out = g.forward(&bind(&[("x", Tensor::vector(vec![0.0, 0.0]))])).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_matches_direct_evaluation() {
        // Direct scalar oracle evaluated with plain std calls.
        let expected = (1.0f64.exp() + 2.0f64.exp()).ln();
        assert!((expected - 2.313_261_687_518_222_8).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.input("x");
        let e = g.exp(x);
        let s = g.sum_all(e);
        let y = g.ln(s);
        g.set_output(y);
        let out = g.forward(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert!((out.scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_identity_and_square() {
        let mut g = Graph::new();
        let x = g.param("x");
        g.set_output(x);
        g.forward(&bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].values(), &[1.0]);

        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.mul(x, x);
        g.set_output(y);
        g.forward(&bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].values(), &[6.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.param("x");
        g.set_output(x);
        assert!(matches!(g.backward(), Err(CoreError::State(_))));
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.set_output(x);
        let err = g.forward(&BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("unbound leaf 'x'"));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        g.set_output(c);
        let err = g
            .forward(&bind(&[
                ("a", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()),
                ("b", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()),
            ]))
            .unwrap_err();
        match err {
            CoreError::Shape { node, .. } => assert!(node.contains("matmul")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let mut g = Graph::new();
        let x = g.input("x");
        let e = g.exp(x);
        g.set_output(e);
        let err = g.forward(&bind(&[("x", Tensor::scalar(800.0))])).unwrap_err();
        match err {
            CoreError::Overflow { node } => assert!(node.contains("exp")),
            other => panic!("expected overflow error, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_basics() {
        let mut square = |t: &Tensor| Ok(t.values()[0] * t.values()[0]);
        let g = finite_diff(&mut square, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-8);

        let mut sine = |t: &Tensor| Ok(t.values()[0].sin());
        let g = finite_diff(&mut sine, &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.values()[0] - 1.0).abs() < 1e-9);

        assert!(finite_diff(&mut square, &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let xi = g.input("x");
        let wi = g.input("w");
        let m = g.matmul(xi, wi);
        let t = g.tanh(m);
        let s = g.sum_all(t);
        g.set_output(s);
        let b = bind(&[("x", x), ("w", w)]);
        let v1 = g.forward(&b).unwrap();
        let v2 = g.forward(&b).unwrap();
        assert_eq!(v1.values()[0].to_bits(), v2.values()[0].to_bits());
    }

    /// Builds a tiny scalar-output graph exercising one op, then compares
    /// backward against central finite differences at the given point.
    fn gradcheck(build: impl Fn(&mut Graph, NodeId) -> NodeId, point: Tensor) {
        let mut g = Graph::new();
        let p = g.param("p");
        let out = build(&mut g, p);
        g.set_output(out);
        g.forward(&bind(&[("p", point.clone())])).unwrap();
        let grads = g.backward().unwrap();
        let analytic = &grads["p"];

        let mut eval = |t: &Tensor| -> Result<f64> {
            let mut g2 = Graph::new();
            let p2 = g2.param("p");
            let out2 = build(&mut g2, p2);
            g2.set_output(out2);
            Ok(g2.forward(&bind(&[("p", t.clone())]))?.scalar_value())
        };
        let numeric = finite_diff(&mut eval, &point, 1e-5).unwrap();

        for (a, n) in analytic.values().iter().zip(numeric.values()) {
            let denom = n.abs().max(a.abs());
            if denom < 1e-6 {
                assert!(
                    (a - n).abs() < 1e-7,
                    "tiny-gradient mismatch: analytic {a} vs numeric {n}"
                );
            } else {
                assert!(
                    ((a - n) / denom).abs() < 1e-4,
                    "gradient mismatch: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn every_op_kind_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
            let pos = random_matrix(&mut rng, 3, 4, 0.1, 2.0);
            // Keep relu/clamp arguments away from their kinks.
            let off_kink = map(&x, |v| if v.abs() < 0.05 { v + 0.1 } else { v });

            let w = random_matrix(&mut rng, 4, 2, -1.0, 1.0);
            gradcheck(
                |g, p| {
                    let c = g.constant(w.clone());
                    let m = g.matmul(p, c);
                    g.sum_all(m)
                },
                x.clone(),
            );

            let wt = random_matrix(&mut rng, 2, 4, -1.0, 1.0);
            gradcheck(
                |g, p| {
                    let c = g.constant(wt.clone());
                    let m = g.matmul_t(p, c);
                    g.sum_all(m)
                },
                x.clone(),
            );
            // Gradient w.r.t. the transposed side.
            let a3 = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
            gradcheck(
                |g, p| {
                    let c = g.constant(a3.clone());
                    let m = g.matmul_t(c, p);
                    g.sum_all(m)
                },
                random_matrix(&mut rng, 2, 4, -1.0, 1.0),
            );

            gradcheck(
                |g, p| {
                    let c = g.constant(x.clone());
                    let m = g.add_bias(c, p);
                    let t = g.tanh(m);
                    g.sum_all(t)
                },
                Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            );

            let other = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
            gradcheck(
                |g, p| {
                    let c = g.constant(other.clone());
                    let s = g.add(p, c);
                    let t = g.tanh(s);
                    g.sum_all(t)
                },
                x.clone(),
            );

            gradcheck(
                |g, p| {
                    let t = g.tanh(p);
                    g.sum_all(t)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let t = g.relu(p);
                    let m = g.mul(t, t);
                    g.sum_all(m)
                },
                off_kink.clone(),
            );
            gradcheck(
                |g, p| {
                    let t = g.exp(p);
                    g.sum_all(t)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let t = g.ln(p);
                    g.sum_all(t)
                },
                pos.clone(),
            );
            gradcheck(
                |g, p| {
                    let t = g.xlogx(p);
                    g.sum_all(t)
                },
                pos.clone(),
            );
            gradcheck(
                |g, p| {
                    let t = g.clamp_min(p, 0.05);
                    let l = g.ln(t);
                    g.sum_all(l)
                },
                map(&pos, |v| if (v - 0.05).abs() < 0.02 { v + 0.05 } else { v }),
            );
            gradcheck(
                |g, p| {
                    let c = g.constant(pos.clone());
                    let m = g.mul(p, c);
                    g.sum_all(m)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let s = g.row_softmax(p);
                    let l = g.xlogx(s);
                    g.sum_all(l)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let n = g.row_l2norm(p);
                    let t = g.tanh(n);
                    g.sum_all(t)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let s = g.scale(p, -1.7);
                    g.sum_all(s)
                },
                x.clone(),
            );
            gradcheck(
                |g, p| {
                    let r = g.row_sum(p);
                    let t = g.tanh(r);
                    g.sum_all(t)
                },
                x.clone(),
            );
            gradcheck(|g, p| g.mean_all(p), x.clone());
            let v = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            gradcheck(
                |g, p| {
                    let c = g.constant(v.clone());
                    g.dot(p, c)
                },
                Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            );
            gradcheck(
                |g, p| {
                    let s1 = g.sum_all(p);
                    let s2 = g.mean_all(p);
                    g.affine(vec![s1, s2], vec![2.0, -0.5], 0.3)
                },
                x.clone(),
            );
        }
    }

    proptest! {
        #[test]
        fn row_softmax_rows_are_stochastic(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::new();
            let x = g.input("x");
            let s = g.row_softmax(x);
            g.set_output(s);
            let out = g
                .forward(&bind(&[("x", Tensor::matrix(3, 4, vals).unwrap())]))
                .unwrap();
            for i in 0..3 {
                let row = out.row(i);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn row_softmax_survives_large_logits(scale in 1.0f64..200.0) {
            // cosine/τ at τ=0.01 produces logits up to ±100.
            let mut g = Graph::new();
            let x = g.input("x");
            let s = g.row_softmax(x);
            g.set_output(s);
            let out = g
                .forward(&bind(&[("x", Tensor::vector(vec![scale, -scale]))]))
                .unwrap();
            let sum: f64 = out.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
