//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the model needs: elementwise arithmetic with
//! numpy-style broadcasting (rank <= 3), 2-D matmul, shape ops, reductions,
//! the usual nonlinearities, a same-padded 1-D convolution, and a first-order
//! linear scan for state-space recurrences. Operations are recorded on a
//! dynamic tape ([`Graph`]) that is rebuilt every forward pass; [`Graph::backward`]
//! replays it in reverse topological order.
//!
//! A [`Graph`] and the tensors recorded on it are confined to one thread.
//! Independent graphs may run in parallel; they share no mutable state.

mod check;

pub use check::grad_check;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Handle into the tape of the graph that recorded a tensor.
pub type NodeId = usize;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum DtError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DtError>;

/// Dense row-major f64 array, optionally attached to a differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DtError::ShapeMismatch {
                op: "tensor-new",
                details: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), node: None }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; numel]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Detached copy with fresh storage and no graph handle.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.to_vec()), node: None }
    }

    /// Mutates the underlying values in place (clones shared storage first).
    pub fn map_values(&mut self, f: impl FnMut(&mut f64)) {
        Arc::make_mut(&mut self.data).iter_mut().for_each(f);
        self.node = None;
    }

    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Transpose,
    Reshape,
    Slice,
    Concat,
    Broadcast,
    SumReduce,
    MeanReduce,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Power,
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
    Conv1dSame,
    ScanLinear,
    SelectRows,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::Broadcast,
        OpKind::SumReduce,
        OpKind::MeanReduce,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Power,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Conv1dSame,
        OpKind::ScanLinear,
        OpKind::SelectRows,
    ];

    fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::Broadcast => "broadcast",
            OpKind::SumReduce => "sum-reduce",
            OpKind::MeanReduce => "mean-reduce",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Power => "power",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Conv1dSame => "conv1d-same",
            OpKind::ScanLinear => "scan-linear",
            OpKind::SelectRows => "select-rows",
        }
    }
}

/// Static attributes for ops that need them.
#[derive(Debug, Clone, PartialEq)]
pub enum Attr {
    None,
    /// Axis permutation for `Transpose`. Empty means "swap the last two axes".
    Perm(Vec<usize>),
    /// Target shape for `Reshape` / `Broadcast`.
    Shape(Vec<usize>),
    /// Contiguous range along one axis for `Slice`.
    Range { axis: usize, start: usize, len: usize },
    /// Concatenation / reduction axis. `None` reduces over all entries.
    Axis(Option<usize>),
    /// Exponent for `Power`.
    Exponent(f64),
    /// Row indices for `SelectRows` (gather along axis 0).
    Indices(Vec<usize>),
}

enum Payload {
    Leaf,
    Op { kind: OpKind, inputs: Vec<NodeId>, attr: Attr },
}

struct Node {
    payload: Payload,
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

/// Gradients produced by [`Graph::backward`], keyed by node id.
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient of `t`'s node; zeros when the node is unreachable from the loss.
    pub fn get(&self, t: &Tensor) -> Tensor {
        let id = t.node.expect("tensor was not recorded on this graph");
        match &self.grads[id] {
            Some(g) => Tensor { shape: self.shapes[id].clone(), data: Arc::new(g.clone()), node: None },
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }
}

/// Dynamic tape recording forward operations for reverse-mode differentiation.
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

    /// Registers a differentiation leaf (a parameter or input) on the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node { payload: Payload::Leaf, value: t.data.clone(), shape: t.shape.clone() });
        Tensor { shape: t.shape.clone(), data: t.data.clone(), node: Some(id) }
    }

    fn record(&mut self, kind: OpKind, inputs: &[&Tensor], attr: Attr, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node {
                Some(id) => ids.push(id),
                None => {
                    // Un-registered inputs are implicitly promoted to leaves.
                    let lt = self.leaf(t);
                    ids.push(lt.node.unwrap());
                }
            }
        }
        let value = Arc::new(data);
        let id = self.nodes.len();
        self.nodes.push(Node {
            payload: Payload::Op { kind, inputs: ids, attr },
            value: value.clone(),
            shape: shape.clone(),
        });
        Ok(Tensor { shape, data: value, node: Some(id) })
    }

    /// Applies `kind` to `inputs`, records the node, and returns the forward value.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor], attr: Attr) -> Result<Tensor> {
        let (shape, data) = forward(kind, inputs, &attr)?;
        self.record(kind, inputs, attr, shape, data)
    }

    /// Reverse sweep from a scalar loss. Every node at or below the loss gets
    /// a gradient entry; leaves not reachable from the loss read back as zero.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradMap> {
        let loss_id = loss
            .node
            .ok_or_else(|| DtError::Contract("backward: loss tensor is not recorded on this graph".into()))?;
        if loss.numel() != 1 {
            return Err(DtError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if let Payload::Op { kind, inputs, attr } = &self.nodes[id].payload {
                let kind = *kind;
                let inputs = inputs.clone();
                let attr = attr.clone();
                let out_shape = self.nodes[id].shape.clone();
                let out_value = self.nodes[id].value.clone();
                let in_views: Vec<(&[f64], &[usize])> = inputs
                    .iter()
                    .map(|&i| (self.nodes[i].value.as_slice(), self.nodes[i].shape.as_slice()))
                    .collect();
                let gins = backward_op(kind, &attr, &in_views, &out_value, &out_shape, &gout);
                for (slot, gin) in inputs.iter().zip(gins) {
                    match &mut grads[*slot] {
                        Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                        none => *none = Some(gin),
                    }
                }
                grads[id] = Some(gout);
            } else {
                grads[id] = Some(gout);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(GradMap { grads, shapes })
    }
}

// ── Convenience wrappers over apply ─────────────────────────────────────

macro_rules! unary_helper {
    ($name:ident, $kind:expr) => {
        pub fn $name(&mut self, x: &Tensor) -> Result<Tensor> {
            self.apply($kind, &[x], Attr::None)
        }
    };
}

macro_rules! binary_helper {
    ($name:ident, $kind:expr) => {
        pub fn $name(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.apply($kind, &[a, b], Attr::None)
        }
    };
}

impl Graph {
    binary_helper!(add, OpKind::Add);
    binary_helper!(sub, OpKind::Sub);
    binary_helper!(mul, OpKind::Mul);
    binary_helper!(div, OpKind::Div);
    binary_helper!(matmul, OpKind::Matmul);
    unary_helper!(abs, OpKind::Abs);
    unary_helper!(square, OpKind::Square);
    unary_helper!(sqrt, OpKind::Sqrt);
    unary_helper!(exp, OpKind::Exp);
    unary_helper!(log, OpKind::Log);
    unary_helper!(sigmoid, OpKind::Sigmoid);
    unary_helper!(softplus, OpKind::Softplus);
    unary_helper!(tanh, OpKind::Tanh);
    unary_helper!(relu, OpKind::Relu);

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Transpose, &[x], Attr::Perm(vec![]))
    }

    pub fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.apply(OpKind::Transpose, &[x], Attr::Perm(perm.to_vec()))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(OpKind::Reshape, &[x], Attr::Shape(shape.to_vec()))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(OpKind::Slice, &[x], Attr::Range { axis, start, len })
    }

    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(OpKind::Concat, xs, Attr::Axis(Some(axis)))
    }

    pub fn broadcast(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(OpKind::Broadcast, &[x], Attr::Shape(shape.to_vec()))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::SumReduce, &[x], Attr::Axis(None))
    }

    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(OpKind::SumReduce, &[x], Attr::Axis(Some(axis)))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::MeanReduce, &[x], Attr::Axis(None))
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(OpKind::MeanReduce, &[x], Attr::Axis(Some(axis)))
    }

    pub fn power(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        self.apply(OpKind::Power, &[x], Attr::Exponent(p))
    }

    /// Same-padded stride-1 conv over the second-to-last axis.
    /// `x`: `[T, C_in]` or `[N, T, C_in]`, `w`: `[C_out, C_in, K]` with odd `K`.
    pub fn conv1d_same(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Conv1dSame, &[x, w], Attr::None)
    }

    /// First-order linear recurrence `h_t = a_t * h_{t-1} + b_t` with `h_0 = 0`,
    /// scanned over the time axis of `[T, D]` or `[N, T, D]` inputs.
    pub fn scan_linear(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::ScanLinear, &[a, b], Attr::None)
    }

    pub fn select_rows(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        self.apply(OpKind::SelectRows, &[x], Attr::Indices(indices.to_vec()))
    }

    /// `x * s` for a plain scalar constant.
    pub fn scale(&mut self, x: &Tensor, s: f64) -> Result<Tensor> {
        let c = Tensor::scalar(s);
        self.mul(x, &c)
    }

    /// `x + s` for a plain scalar constant.
    pub fn shift(&mut self, x: &Tensor, s: f64) -> Result<Tensor> {
        let c = Tensor::scalar(s);
        self.add(x, &c)
    }
}

// ── Forward kernels ─────────────────────────────────────────────────────

fn shape_err(op: OpKind, details: String) -> DtError {
    DtError::ShapeMismatch { op: op.name(), details }
}

fn domain_err(op: OpKind, details: String) -> DtError {
    DtError::Domain { op: op.name(), details }
}

/// Right-aligned numpy-style broadcast of two shapes.
fn broadcast_shapes(op: OpKind, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(shape_err(op, format!("cannot broadcast {:?} with {:?} (dim {} vs {})", a, b, da, db)));
        };
    }
    Ok(out)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides for reading `shape` as if broadcast to `out_shape` (0 on expanded dims).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut out = vec![0; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = strides[i - offset];
        }
    }
    out
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let rank = shape.len();
    if rank == 0 || shape.iter().any(|&d| d == 0) {
        if rank == 0 {
            f(&[]);
        }
        return;
    }
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn binary_elementwise(
    op: OpKind,
    a: (&[f64], &[usize]),
    b: (&[f64], &[usize]),
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = broadcast_shapes(op, a.1, b.1)?;
    let sa = broadcast_strides(a.1, &shape);
    let sb = broadcast_strides(b.1, &shape);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    // Fast path: identical shapes.
    if a.1 == b.1 {
        out.extend(a.0.iter().zip(b.0).map(|(&x, &y)| f(x, y)));
        return Ok((shape, out));
    }
    for_each_index(&shape, |idx| {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        out.push(f(a.0[ia], b.0[ib]));
    });
    Ok((shape, out))
}

/// Sums `grad` (shaped `grad_shape`) down to `target_shape` (broadcast adjoint).
fn reduce_grad_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let mut pos = 0;
    for_each_index(grad_shape, |idx| {
        let it: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        out[it] += grad[pos];
        pos += 1;
    });
    out
}

fn check_unary_arity(op: OpKind, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != 1 {
        return Err(shape_err(op, format!("expected 1 input, got {}", inputs.len())));
    }
    Ok(())
}

fn check_binary_arity(op: OpKind, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != 2 {
        return Err(shape_err(op, format!("expected 2 inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_map(op: OpKind, x: &Tensor, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    let _ = op;
    (x.shape.to_vec(), x.data.iter().map(|&v| f(v)).collect())
}

fn resolve_perm(op: OpKind, shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    if perm.is_empty() {
        if shape.len() < 2 {
            return Err(shape_err(op, format!("default transpose needs rank >= 2, got {:?}", shape)));
        }
        let mut p: Vec<usize> = (0..shape.len()).collect();
        p.swap(shape.len() - 2, shape.len() - 1);
        return Ok(p);
    }
    if perm.len() != shape.len() {
        return Err(shape_err(op, format!("perm {:?} does not match rank of {:?}", perm, shape)));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(shape_err(op, format!("invalid permutation {:?}", perm)));
        }
        seen[p] = true;
    }
    Ok(perm.to_vec())
}

fn transpose_forward(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let mut out = Vec::with_capacity(x.len());
    for_each_index(&out_shape, |idx| {
        let mut src = 0;
        for (o, &p) in perm.iter().enumerate() {
            src += idx[o] * in_strides[p];
        }
        out.push(x[src]);
    });
    (out_shape, out)
}

fn conv1d_dims(op: OpKind, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, t, cin) = match x.shape.len() {
        2 => (1, x.shape[0], x.shape[1]),
        3 => (x.shape[0], x.shape[1], x.shape[2]),
        _ => return Err(shape_err(op, format!("input must be rank 2 or 3, got {:?}", x.shape))),
    };
    if w.shape.len() != 3 {
        return Err(shape_err(op, format!("weight must be [C_out, C_in, K], got {:?}", w.shape)));
    }
    let (cout, wcin, k) = (w.shape[0], w.shape[1], w.shape[2]);
    if wcin != cin {
        return Err(shape_err(op, format!("input channels {} != weight channels {}", cin, wcin)));
    }
    if k % 2 == 0 {
        return Err(shape_err(op, format!("kernel size must be odd for same padding, got {}", k)));
    }
    Ok((batch, t, cin, cout, k))
}

fn scan_dims(op: OpKind, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape != b.shape {
        return Err(shape_err(op, format!("coefficient shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    match a.shape.len() {
        2 => Ok((1, a.shape[0], a.shape[1])),
        3 => Ok((a.shape[0], a.shape[1], a.shape[2])),
        _ => Err(shape_err(op, format!("inputs must be rank 2 or 3, got {:?}", a.shape))),
    }
}

fn forward(kind: OpKind, inputs: &[&Tensor], attr: &Attr) -> Result<(Vec<usize>, Vec<f64>)> {
    match kind {
        OpKind::Add => {
            check_binary_arity(kind, inputs)?;
            binary_elementwise(kind, (inputs[0].data(), inputs[0].shape()), (inputs[1].data(), inputs[1].shape()), |a, b| a + b)
        }
        OpKind::Sub => {
            check_binary_arity(kind, inputs)?;
            binary_elementwise(kind, (inputs[0].data(), inputs[0].shape()), (inputs[1].data(), inputs[1].shape()), |a, b| a - b)
        }
        OpKind::Mul => {
            check_binary_arity(kind, inputs)?;
            binary_elementwise(kind, (inputs[0].data(), inputs[0].shape()), (inputs[1].data(), inputs[1].shape()), |a, b| a * b)
        }
        OpKind::Div => {
            check_binary_arity(kind, inputs)?;
            if inputs[1].data.iter().any(|&v| v == 0.0) {
                return Err(domain_err(kind, "division by zero".into()));
            }
            binary_elementwise(kind, (inputs[0].data(), inputs[0].shape()), (inputs[1].data(), inputs[1].shape()), |a, b| a / b)
        }
        OpKind::Matmul => {
            check_binary_arity(kind, inputs)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err(kind, format!("cannot contract {:?} with {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Ok((vec![m, n], out))
        }
        OpKind::Transpose => {
            check_unary_arity(kind, inputs)?;
            let Attr::Perm(perm) = attr else {
                return Err(shape_err(kind, "transpose requires a Perm attribute".into()));
            };
            let perm = resolve_perm(kind, &inputs[0].shape, perm)?;
            Ok(transpose_forward(inputs[0].data(), inputs[0].shape(), &perm))
        }
        OpKind::Reshape => {
            check_unary_arity(kind, inputs)?;
            let Attr::Shape(shape) = attr else {
                return Err(shape_err(kind, "reshape requires a Shape attribute".into()));
            };
            let numel: usize = shape.iter().product();
            if numel != inputs[0].numel() {
                return Err(shape_err(kind, format!("cannot reshape {:?} into {:?}", inputs[0].shape, shape)));
            }
            Ok((shape.clone(), inputs[0].data.to_vec()))
        }
        OpKind::Slice => {
            check_unary_arity(kind, inputs)?;
            let Attr::Range { axis, start, len } = attr else {
                return Err(shape_err(kind, "slice requires a Range attribute".into()));
            };
            let x = inputs[0];
            if *axis >= x.shape.len() || start + len > x.shape[*axis] {
                return Err(shape_err(kind, format!("range {}..{} on axis {} of {:?}", start, start + len, axis, x.shape)));
            }
            let mut shape = x.shape.to_vec();
            shape[*axis] = *len;
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[*axis + 1..].iter().product();
            let dim = x.shape[*axis];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&x.data[base..base + len * inner]);
            }
            Ok((shape, out))
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(shape_err(kind, "concat needs at least one input".into()));
            }
            let Attr::Axis(Some(axis)) = attr else {
                return Err(shape_err(kind, "concat requires an Axis attribute".into()));
            };
            let axis = *axis;
            let first = inputs[0];
            if axis >= first.shape.len() {
                return Err(shape_err(kind, format!("axis {} out of range for {:?}", axis, first.shape)));
            }
            let mut cat_dim = 0;
            for t in inputs {
                if t.shape.len() != first.shape.len() {
                    return Err(shape_err(kind, format!("rank mismatch: {:?} vs {:?}", t.shape, first.shape)));
                }
                for (ax, (&d, &d0)) in t.shape.iter().zip(&first.shape).enumerate() {
                    if ax != axis && d != d0 {
                        return Err(shape_err(kind, format!("dim {} mismatch: {:?} vs {:?}", ax, t.shape, first.shape)));
                    }
                }
                cat_dim += t.shape[axis];
            }
            let mut shape = first.shape.to_vec();
            shape[axis] = cat_dim;
            let outer: usize = first.shape[..axis].iter().product();
            let inner: usize = first.shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * cat_dim * inner);
            for o in 0..outer {
                for t in inputs {
                    let d = t.shape[axis];
                    let base = o * d * inner;
                    out.extend_from_slice(&t.data[base..base + d * inner]);
                }
            }
            Ok((shape, out))
        }
        OpKind::Broadcast => {
            check_unary_arity(kind, inputs)?;
            let Attr::Shape(shape) = attr else {
                return Err(shape_err(kind, "broadcast requires a Shape attribute".into()));
            };
            let merged = broadcast_shapes(kind, inputs[0].shape(), shape)?;
            if &merged != shape {
                return Err(shape_err(kind, format!("cannot broadcast {:?} to {:?}", inputs[0].shape, shape)));
            }
            let strides = broadcast_strides(inputs[0].shape(), shape);
            let numel: usize = shape.iter().product();
            let mut out = Vec::with_capacity(numel);
            let data = inputs[0].data();
            for_each_index(shape, |idx| {
                let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                out.push(data[src]);
            });
            Ok((shape.clone(), out))
        }
        OpKind::SumReduce | OpKind::MeanReduce => {
            check_unary_arity(kind, inputs)?;
            let Attr::Axis(axis) = attr else {
                return Err(shape_err(kind, "reduce requires an Axis attribute".into()));
            };
            let x = inputs[0];
            match axis {
                None => {
                    let s: f64 = x.data.iter().sum();
                    let v = if kind == OpKind::MeanReduce { s / x.numel() as f64 } else { s };
                    Ok((vec![1], vec![v]))
                }
                Some(axis) => {
                    let axis = *axis;
                    if axis >= x.shape.len() {
                        return Err(shape_err(kind, format!("axis {} out of range for {:?}", axis, x.shape)));
                    }
                    let mut shape = x.shape.to_vec();
                    let dim = shape[axis];
                    shape[axis] = 1;
                    let outer: usize = x.shape[..axis].iter().product();
                    let inner: usize = x.shape[axis + 1..].iter().product();
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += x.data[base + i];
                            }
                        }
                    }
                    if kind == OpKind::MeanReduce {
                        let inv = 1.0 / dim as f64;
                        out.iter_mut().for_each(|v| *v *= inv);
                    }
                    Ok((shape, out))
                }
            }
        }
        OpKind::Abs => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], f64::abs))
        }
        OpKind::Square => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], |v| v * v))
        }
        OpKind::Sqrt => {
            check_unary_arity(kind, inputs)?;
            if inputs[0].data.iter().any(|&v| v < 0.0) {
                return Err(domain_err(kind, "sqrt of a negative value".into()));
            }
            Ok(unary_map(kind, inputs[0], f64::sqrt))
        }
        OpKind::Exp => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], f64::exp))
        }
        OpKind::Log => {
            check_unary_arity(kind, inputs)?;
            if inputs[0].data.iter().any(|&v| v <= 0.0) {
                return Err(domain_err(kind, "log of a non-positive value".into()));
            }
            Ok(unary_map(kind, inputs[0], f64::ln))
        }
        OpKind::Power => {
            check_unary_arity(kind, inputs)?;
            let Attr::Exponent(p) = attr else {
                return Err(shape_err(kind, "power requires an Exponent attribute".into()));
            };
            let p = *p;
            let integral = p.fract() == 0.0;
            for &v in inputs[0].data.iter() {
                if v < 0.0 && !integral {
                    return Err(domain_err(kind, format!("negative base {} with non-integer exponent {}", v, p)));
                }
                if v == 0.0 && p < 0.0 {
                    return Err(domain_err(kind, format!("zero base with negative exponent {}", p)));
                }
            }
            Ok(unary_map(kind, inputs[0], |v| v.powf(p)))
        }
        OpKind::Sigmoid => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], stable_sigmoid))
        }
        OpKind::Softplus => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], stable_softplus))
        }
        OpKind::Tanh => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], f64::tanh))
        }
        OpKind::Relu => {
            check_unary_arity(kind, inputs)?;
            Ok(unary_map(kind, inputs[0], |v| v.max(0.0)))
        }
        OpKind::Conv1dSame => {
            check_binary_arity(kind, inputs)?;
            let (x, w) = (inputs[0], inputs[1]);
            let (batch, t, cin, cout, k) = conv1d_dims(kind, x, w)?;
            let half = (k / 2) as isize;
            let mut out = vec![0.0; batch * t * cout];
            for n in 0..batch {
                let xb = &x.data[n * t * cin..(n + 1) * t * cin];
                let ob = &mut out[n * t * cout..(n + 1) * t * cout];
                for ti in 0..t {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..cin {
                                acc += w.data[(co * cin + ci) * k + kk] * xb[src * cin + ci];
                            }
                        }
                        ob[ti * cout + co] = acc;
                    }
                }
            }
            let shape = if x.shape.len() == 2 { vec![t, cout] } else { vec![batch, t, cout] };
            Ok((shape, out))
        }
        OpKind::ScanLinear => {
            check_binary_arity(kind, inputs)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, t, d) = scan_dims(kind, a, b)?;
            let mut out = vec![0.0; batch * t * d];
            for n in 0..batch {
                let base = n * t * d;
                for ti in 0..t {
                    let row = base + ti * d;
                    if ti == 0 {
                        out[row..row + d].copy_from_slice(&b.data[row..row + d]);
                    } else {
                        let prev = row - d;
                        for j in 0..d {
                            out[row + j] = a.data[row + j] * out[prev + j] + b.data[row + j];
                        }
                    }
                }
            }
            Ok((a.shape.to_vec(), out))
        }
        OpKind::SelectRows => {
            check_unary_arity(kind, inputs)?;
            let Attr::Indices(indices) = attr else {
                return Err(shape_err(kind, "select-rows requires an Indices attribute".into()));
            };
            let x = inputs[0];
            if x.shape.is_empty() {
                return Err(shape_err(kind, "select-rows needs rank >= 1".into()));
            }
            let rows = x.shape[0];
            let inner: usize = x.shape[1..].iter().product();
            let mut out = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= rows {
                    return Err(shape_err(kind, format!("row index {} out of range 0..{}", i, rows)));
                }
                out.extend_from_slice(&x.data[i * inner..(i + 1) * inner]);
            }
            let mut shape = x.shape.to_vec();
            shape[0] = indices.len();
            Ok((shape, out))
        }
    }
}

// ── Backward kernels ────────────────────────────────────────────────────

/// Vector-Jacobian products for one node. `inputs` are (value, shape) views.
fn backward_op(
    kind: OpKind,
    attr: &Attr,
    inputs: &[(&[f64], &[usize])],
    out_value: &[f64],
    out_shape: &[usize],
    gout: &[f64],
) -> Vec<Vec<f64>> {
    match kind {
        OpKind::Add => {
            let ga = reduce_grad_to(gout, out_shape, inputs[0].1);
            let gb = reduce_grad_to(gout, out_shape, inputs[1].1);
            vec![ga, gb]
        }
        OpKind::Sub => {
            let ga = reduce_grad_to(gout, out_shape, inputs[0].1);
            let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
            let gb = reduce_grad_to(&neg, out_shape, inputs[1].1);
            vec![ga, gb]
        }
        OpKind::Mul => {
            let sa = broadcast_strides(inputs[0].1, out_shape);
            let sb = broadcast_strides(inputs[1].1, out_shape);
            let mut ga_full = Vec::with_capacity(gout.len());
            let mut gb_full = Vec::with_capacity(gout.len());
            let mut pos = 0;
            for_each_index(out_shape, |idx| {
                let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
                let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
                ga_full.push(gout[pos] * inputs[1].0[ib]);
                gb_full.push(gout[pos] * inputs[0].0[ia]);
                pos += 1;
            });
            vec![
                reduce_grad_to(&ga_full, out_shape, inputs[0].1),
                reduce_grad_to(&gb_full, out_shape, inputs[1].1),
            ]
        }
        OpKind::Div => {
            let sa = broadcast_strides(inputs[0].1, out_shape);
            let sb = broadcast_strides(inputs[1].1, out_shape);
            let mut ga_full = Vec::with_capacity(gout.len());
            let mut gb_full = Vec::with_capacity(gout.len());
            let mut pos = 0;
            for_each_index(out_shape, |idx| {
                let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
                let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
                let (a, b) = (inputs[0].0[ia], inputs[1].0[ib]);
                ga_full.push(gout[pos] / b);
                gb_full.push(-gout[pos] * a / (b * b));
                pos += 1;
            });
            vec![
                reduce_grad_to(&ga_full, out_shape, inputs[0].1),
                reduce_grad_to(&gb_full, out_shape, inputs[1].1),
            ]
        }
        OpKind::Matmul => {
            let (a, ashape) = inputs[0];
            let (b, bshape) = inputs[1];
            let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
            // dA = G * B^T
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += gout[i * n + j] * b[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            // dB = A^T * G
            let mut gb = vec![0.0; k * n];
            for p in 0..k {
                for i in 0..m {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * gout[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        }
        OpKind::Transpose => {
            let Attr::Perm(perm) = attr else { unreachable!() };
            let perm = resolve_perm(kind, inputs[0].1, perm).expect("perm validated at forward");
            let mut inverse = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, gin) = transpose_forward(gout, out_shape, &inverse);
            vec![gin]
        }
        OpKind::Reshape => vec![gout.to_vec()],
        OpKind::Slice => {
            let Attr::Range { axis, start, len } = attr else { unreachable!() };
            let shape = inputs[0].1;
            let mut gin = vec![0.0; inputs[0].0.len()];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let dim = shape[*axis];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * len * inner;
                gin[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
            }
            vec![gin]
        }
        OpKind::Concat => {
            let Attr::Axis(Some(axis)) = attr else { unreachable!() };
            let axis = *axis;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let cat_dim = out_shape[axis];
            let mut gins: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| vec![0.0; v.len()]).collect();
            for o in 0..outer {
                let mut offset = 0;
                for (gi, (_, shape)) in gins.iter_mut().zip(inputs) {
                    let d = shape[axis];
                    let src = o * cat_dim * inner + offset * inner;
                    let dst = o * d * inner;
                    gi[dst..dst + d * inner].copy_from_slice(&gout[src..src + d * inner]);
                    offset += d;
                }
            }
            gins
        }
        OpKind::Broadcast => vec![reduce_grad_to(gout, out_shape, inputs[0].1)],
        OpKind::SumReduce | OpKind::MeanReduce => {
            let Attr::Axis(axis) = attr else { unreachable!() };
            let shape = inputs[0].1;
            let numel: usize = shape.iter().product();
            match axis {
                None => {
                    let g = gout[0] * if kind == OpKind::MeanReduce { 1.0 / numel as f64 } else { 1.0 };
                    vec![vec![g; numel]]
                }
                Some(axis) => {
                    let axis = *axis;
                    let dim = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let scale = if kind == OpKind::MeanReduce { 1.0 / dim as f64 } else { 1.0 };
                    let mut gin = vec![0.0; numel];
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                gin[base + i] = gout[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![gin]
                }
            }
        }
        OpKind::Abs => {
            let gin = inputs[0]
                .0
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                .collect();
            vec![gin]
        }
        OpKind::Square => {
            let gin = inputs[0].0.iter().zip(gout).map(|(&x, &g)| 2.0 * x * g).collect();
            vec![gin]
        }
        OpKind::Sqrt => {
            let gin = out_value.iter().zip(gout).map(|(&y, &g)| g / (2.0 * y)).collect();
            vec![gin]
        }
        OpKind::Exp => {
            let gin = out_value.iter().zip(gout).map(|(&y, &g)| g * y).collect();
            vec![gin]
        }
        OpKind::Log => {
            let gin = inputs[0].0.iter().zip(gout).map(|(&x, &g)| g / x).collect();
            vec![gin]
        }
        OpKind::Power => {
            let Attr::Exponent(p) = attr else { unreachable!() };
            let p = *p;
            let gin = inputs[0]
                .0
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                .collect();
            vec![gin]
        }
        OpKind::Sigmoid => {
            let gin = out_value.iter().zip(gout).map(|(&y, &g)| g * y * (1.0 - y)).collect();
            vec![gin]
        }
        OpKind::Softplus => {
            let gin = inputs[0].0.iter().zip(gout).map(|(&x, &g)| g * stable_sigmoid(x)).collect();
            vec![gin]
        }
        OpKind::Tanh => {
            let gin = out_value.iter().zip(gout).map(|(&y, &g)| g * (1.0 - y * y)).collect();
            vec![gin]
        }
        OpKind::Relu => {
            let gin = inputs[0].0.iter().zip(gout).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
            vec![gin]
        }
        OpKind::Conv1dSame => {
            let (x, xshape) = inputs[0];
            let (w, wshape) = inputs[1];
            let (batch, t, cin) = if xshape.len() == 2 {
                (1, xshape[0], xshape[1])
            } else {
                (xshape[0], xshape[1], xshape[2])
            };
            let (cout, _, k) = (wshape[0], wshape[1], wshape[2]);
            let half = (k / 2) as isize;
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            for n in 0..batch {
                let xb = &x[n * t * cin..(n + 1) * t * cin];
                let gb = &gout[n * t * cout..(n + 1) * t * cout];
                let gxb = &mut gx[n * t * cin..(n + 1) * t * cin];
                for ti in 0..t {
                    for co in 0..cout {
                        let g = gb[ti * cout + co];
                        if g == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..cin {
                                gxb[src * cin + ci] += g * w[(co * cin + ci) * k + kk];
                                gw[(co * cin + ci) * k + kk] += g * xb[src * cin + ci];
                            }
                        }
                    }
                }
            }
            vec![gx, gw]
        }
        OpKind::ScanLinear => {
            let (a, ashape) = inputs[0];
            let (batch, t, d) = if ashape.len() == 2 {
                (1, ashape[0], ashape[1])
            } else {
                (ashape[0], ashape[1], ashape[2])
            };
            // Reverse recurrence: c_t = g_t + a_{t+1} (.) c_{t+1};
            // db_t = c_t, da_t = c_t (.) h_{t-1}.
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; a.len()];
            let mut carry = vec![0.0; d];
            for n in 0..batch {
                let base = n * t * d;
                carry.iter_mut().for_each(|v| *v = 0.0);
                for ti in (0..t).rev() {
                    let row = base + ti * d;
                    for j in 0..d {
                        let c = gout[row + j] + carry[j];
                        gb[row + j] = c;
                        ga[row + j] = if ti == 0 { 0.0 } else { c * out_value[row - d + j] };
                        carry[j] = c * a[row + j];
                    }
                }
            }
            vec![ga, gb]
        }
        OpKind::SelectRows => {
            let Attr::Indices(indices) = attr else { unreachable!() };
            let shape = inputs[0].1;
            let inner: usize = shape[1..].iter().product();
            let mut gin = vec![0.0; inputs[0].0.len()];
            for (o, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    gin[i * inner + j] += gout[o * inner + j];
                }
            }
            vec![gin]
        }
    }
}
