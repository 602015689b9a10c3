//! Dense tensors with a recorded computation graph and exact reverse-mode
//! gradients.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! immediately and stored on the node, so the graph is always evaluated.
//! [`Tape::backward`] walks the recording once in reverse topological order
//! and returns the exact gradient of a scalar output with respect to every
//! leaf, accumulating additively where nodes are shared. Gradients are taken
//! with respect to both parameters and inputs — whichever tensors were
//! registered as leaves.
//!
//! Every operation checks its result for NaN/Inf and fails loudly rather
//! than letting non-finite values propagate.

use thiserror::Error;

/// Errors from tensor construction and recorded operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("node is not part of this recording")]
    UnknownNode,
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major multi-dimensional array of doubles.
///
/// Rank 0 (empty shape) is a scalar. All entries are finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                what: "shape",
                msg: format!("zero extent in {shape:?}"),
            });
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data })
    }

    /// 0-dim scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// 1-dim tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-dim row-major tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-dim tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(self.shape.len() == 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Handle to a node in a [`Tape`] recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { tracked: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum { input: NodeId, axis: Option<usize> },
    Mean(NodeId),
    MaxReduce { input: NodeId, axis: Option<usize> },
    Broadcast { input: NodeId },
    Reshape { input: NodeId },
    Clamp { input: NodeId, lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar output with respect to the recording's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, if that leaf was reached by the backward pass.
    /// Leaves the output does not depend on get a zero tensor.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf that is known to be tracked.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("node is not a tracked leaf")
    }
}

/// An eager recording of tensor operations.
///
/// Single-threaded by design; distinct recordings are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { tracked: true }, value)
    }

    /// Register an input that is treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { tracked: false }, value)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode)
        }
    }

    fn finish(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(op, Tensor { shape, data }))
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let shape = ta.shape.clone();
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        self.finish(op, shape, data, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// 2-dim matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bad = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.nodes[a.0].value.shape.clone(),
            rhs: self.nodes[b.0].value.shape.clone(),
        };
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(bad());
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.finish(Op::Matmul(a, b), vec![m, n], data, "matmul")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape.clone();
        let data: Vec<f64> = ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.finish(Op::Relu(a), shape, data, "relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape.clone();
        let data: Vec<f64> = ta.data.iter().map(|&x| x.exp()).collect();
        self.finish(Op::Exp(a), shape, data, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape.clone();
        let data: Vec<f64> = ta.data.iter().map(|&x| x.ln()).collect();
        self.finish(Op::Log(a), shape, data, "log")
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.finish(Op::Sum { input: a, axis: None }, vec![], vec![total], "sum")
    }

    /// Sum along one axis, keeping it as extent 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = reduced_shape(&ta.shape, axis)?;
        let data = reduce_axis(&ta.data, &ta.shape, axis, |acc, v| *acc += v);
        self.finish(Op::Sum { input: a, axis: Some(axis) }, shape, data, "sum")
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.finish(Op::Mean(a), vec![], vec![m], "mean")
    }

    /// Maximum of all elements, producing a scalar. Ties route the gradient
    /// to the lowest index.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let m = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.finish(Op::MaxReduce { input: a, axis: None }, vec![], vec![m], "max")
    }

    /// Maximum along one axis, keeping it as extent 1.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = reduced_shape(&ta.shape, axis)?;
        let data = reduce_axis(&ta.data, &ta.shape, axis, |acc, v| {
            if v > *acc {
                *acc = v;
            }
        });
        self.finish(Op::MaxReduce { input: a, axis: Some(axis) }, shape, data, "max")
    }

    /// Expand a tensor to `target` shape, numpy-style: shapes are aligned on
    /// the right and extents of 1 repeat. The backward pass sums over the
    /// expanded positions.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let data = broadcast_data(&ta.data, &ta.shape, target).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: ta.shape.clone(),
                rhs: target.to_vec(),
            }
        })?;
        self.finish(Op::Broadcast { input: a }, target.to_vec(), data, "broadcast")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        if numel(shape) != ta.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: ta.data.len(),
            });
        }
        let data = ta.data.clone();
        self.finish(Op::Reshape { input: a }, shape.to_vec(), data, "reshape")
    }

    /// Elementwise clamp. The gradient is 1 strictly inside `(lo, hi)` and 0
    /// at or outside the bounds.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(TensorError::Invalid {
                what: "clamp bounds",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape.clone();
        let data: Vec<f64> = ta.data.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.finish(Op::Clamp { input: a, lo, hi }, shape, data, "clamp")
    }

    /// Multiply by a compile-time constant (a broadcast constant node).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.nodes[a.0].value.shape.clone();
        let k = self.constant(Tensor::scalar(c));
        let kb = self.broadcast(k, &shape)?;
        self.mul(a, kb)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// |x| composed as relu(x) + relu(-x); subgradient 0 at x = 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let pos = self.relu(a)?;
        let na = self.neg(a)?;
        let negpart = self.relu(na)?;
        self.add(pos, negpart)
    }

    /// Reverse pass: exact gradient of a scalar `output` with respect to
    /// every tracked leaf. The recording is unchanged; repeating the call
    /// yields bitwise-identical values.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: out.shape.clone(),
            });
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf { tracked } => {
                    if tracked {
                        adjoint[i] = Some(g); // keep for collection
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoint, a.0, &g, &self.nodes[a.0].value.shape);
                    accumulate(&mut adjoint, b.0, &g, &self.nodes[b.0].value.shape);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoint, a.0, &g, &self.nodes[a.0].value.shape);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adjoint, b.0, &neg, &self.nodes[b.0].value.shape);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut adjoint, a.0, &da, &self.nodes[a.0].value.shape);
                    accumulate(&mut adjoint, b.0, &db, &self.nodes[b.0].value.shape);
                }
                Op::Matmul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    // dA = g @ B^T, dB = A^T @ g
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * tb.data[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for r in 0..k {
                        for c in 0..n {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += ta.data[j * k + r] * g[j * n + c];
                            }
                            db[r * n + c] = s;
                        }
                    }
                    accumulate(&mut adjoint, a.0, &da, &ta.shape.clone());
                    accumulate(&mut adjoint, b.0, &db, &tb.shape.clone());
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoint, a.0, &da, &self.nodes[a.0].value.shape);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value.data)
                        .map(|(gv, ov)| gv * ov)
                        .collect();
                    accumulate(&mut adjoint, a.0, &da, &self.nodes[a.0].value.shape);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, av)| gv / av)
                        .collect();
                    accumulate(&mut adjoint, a.0, &da, &self.nodes[a.0].value.shape);
                }
                Op::Sum { input, axis } => {
                    let tin = &self.nodes[input.0].value;
                    let da = match axis {
                        None => vec![g[0]; tin.data.len()],
                        Some(ax) => expand_axis(&g, &tin.shape, ax),
                    };
                    accumulate(&mut adjoint, input.0, &da, &tin.shape.clone());
                }
                Op::Mean(input) => {
                    let tin = &self.nodes[input.0].value;
                    let scale = g[0] / tin.data.len() as f64;
                    let da = vec![scale; tin.data.len()];
                    accumulate(&mut adjoint, input.0, &da, &tin.shape.clone());
                }
                Op::MaxReduce { input, axis } => {
                    let tin = &self.nodes[input.0].value;
                    let mut da = vec![0.0; tin.data.len()];
                    match axis {
                        None => {
                            let arg = argmax(&tin.data);
                            da[arg] = g[0];
                        }
                        Some(ax) => route_max_grad(&g, &tin.data, &tin.shape, ax, &mut da),
                    }
                    accumulate(&mut adjoint, input.0, &da, &tin.shape.clone());
                }
                Op::Broadcast { input } => {
                    let tin = &self.nodes[input.0].value;
                    let da = reduce_to_shape(&g, &node.value.shape, &tin.shape);
                    accumulate(&mut adjoint, input.0, &da, &tin.shape.clone());
                }
                Op::Reshape { input } => {
                    accumulate(&mut adjoint, input.0, &g, &self.nodes[input.0].value.shape);
                }
                Op::Clamp { input, lo, hi } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[input.0].value.data)
                        .map(|(gv, av)| if *av > lo && *av < hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoint, input.0, &da, &self.nodes[input.0].value.shape);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf { tracked: true } => Some(match adjoint[i].take() {
                    Some(g) => Tensor {
                        shape: n.value.shape.clone(),
                        data: g,
                    },
                    // Leaf not reached by the output: gradient is zero.
                    None => Tensor::zeros(&n.value.shape),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adjoint: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], shape: &[usize]) {
    debug_assert_eq!(g.len(), numel(shape));
    match &mut adjoint[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > data[best] {
            best = i;
        }
    }
    best
}

fn reduced_shape(shape: &[usize], axis: usize) -> Result<Vec<usize>> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            what: "axis",
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let mut out = shape.to_vec();
    out[axis] = 1;
    Ok(out)
}

/// Reduce along `axis` with an accumulate callback; the result keeps the
/// axis as extent 1. The first element along the axis seeds the accumulator.
fn reduce_axis(data: &[f64], shape: &[usize], axis: usize, assign: fn(&mut f64, f64)) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = data[o * extent * inner + i];
            for e in 1..extent {
                assign(&mut acc, data[(o * extent + e) * inner + i]);
            }
            out[o * inner + i] = acc;
        }
    }
    out
}

/// Inverse of a keepdim axis reduction: repeat `g` along `axis` back to
/// `shape`.
fn expand_axis(g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; numel(shape)];
    for o in 0..outer {
        for e in 0..extent {
            for i in 0..inner {
                out[(o * extent + e) * inner + i] = g[o * inner + i];
            }
        }
    }
    out
}

/// Route the adjoint of a keepdim axis max to the first (lowest-index)
/// maximum along the axis.
fn route_max_grad(g: &[f64], data: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let mut best_e = 0;
            let mut best = data[o * extent * inner + i];
            for e in 1..extent {
                let v = data[(o * extent + e) * inner + i];
                if v > best {
                    best = v;
                    best_e = e;
                }
            }
            out[(o * extent + best_e) * inner + i] = g[o * inner + i];
        }
    }
}

/// Expand `data` of `shape` into `target` (right-aligned, extents of 1
/// repeat). Returns None on incompatible shapes.
fn broadcast_data(data: &[f64], shape: &[usize], target: &[usize]) -> Option<Vec<f64>> {
    if shape.len() > target.len() {
        return None;
    }
    let rank = target.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    for d in 0..rank {
        if padded[d] != target[d] && padded[d] != 1 {
            return None;
        }
    }
    // Row-major strides with 0 on repeated dims.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total = numel(target);
    let mut out = Vec::with_capacity(total);
    let mut coords = vec![0usize; rank];
    for _ in 0..total {
        let src: usize = coords.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < target[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Some(out)
}

/// Sum `g` (of `g_shape`) down to `src_shape`: the adjoint of `broadcast`.
fn reduce_to_shape(g: &[f64], g_shape: &[usize], src_shape: &[usize]) -> Vec<f64> {
    let rank = g_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - src_shape.len()..].copy_from_slice(src_shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let mut out = vec![0.0; numel(src_shape)];
    let mut coords = vec![0usize; rank];
    for &gv in g {
        let src: usize = coords.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out[src] += gv;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < g_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
