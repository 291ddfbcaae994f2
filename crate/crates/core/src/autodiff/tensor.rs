use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use super::error::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Operation record stored on a [`Graph`] node.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
    ClampMin(f64),
    Scale(f64),
    AddScalar,
    Transpose,
    Reshape,
    Sum(Vec<usize>),
    Expand(Vec<usize>),
    Max(Vec<usize>),
    ConcatRows,
    SliceRows { start: usize },
    PadRows { start: usize },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
}

struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only record of tensor operations.
///
/// Nodes are pushed after their parents, so node ids are a topological
/// order. Gradient computations with `create_graph` append to the same
/// graph, which is what makes second derivatives available.
#[derive(Clone)]
pub struct Graph {
    inner: Arc<Mutex<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Arc::new(Mutex::new(GraphInner { nodes: Vec::new() })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, GraphInner> {
        self.inner.lock().expect("graph mutex poisoned")
    }

    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Graph) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Records `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, Vec::new(), value.shape.clone(), value.data.clone());
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, op: Op, parents: Vec<usize>, shape: Arc<[usize]>, data: Arc<[f64]>) -> usize {
        let mut inner = self.lock();
        let id = inner.nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        inner.nodes.push(Node {
            op,
            parents,
            shape,
            data,
        });
        id
    }

    fn tensor_at(&self, inner: &GraphInner, id: usize, tracked: bool) -> Tensor {
        let node = &inner.nodes[id];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            node: tracked.then(|| NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    graph: Graph,
    id: usize,
}

/// Dense row-major `f64` array, optionally recorded on a [`Graph`].
///
/// Untracked tensors are plain immutable values. Every operation is pure:
/// it allocates a fresh result and never touches its inputs.
#[derive(Clone)]
pub struct Tensor {
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &&*self.shape);
        if self.data.len() <= 16 {
            s.field("data", &&*self.data);
        } else {
            s.field("numel", &self.data.len());
        }
        if let Some(n) = &self.node {
            s.field("node", &n.id);
        }
        s.finish()
    }
}

impl PartialEq for Tensor {
    /// Bitwise value comparison; graph tracking is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.value_eq(other)
    }
}

/// Element-wise operation tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
}

/// Reduction tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

/// Maps each flat index of `shape` to the flat index of the tensor obtained
/// by removing `axes`. Returns the reduced shape alongside.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect();
    let numel: usize = shape.iter().product();
    let mut map = vec![0usize; numel];
    let mut idx = vec![0usize; shape.len()];
    for m in map.iter_mut() {
        let mut o = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            if !axes.contains(&d) {
                o = o * shape[d] + i;
            }
        }
        *m = o;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn normalize_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if let Some(&bad) = out.iter().find(|&&a| a >= shape.len()) {
        return Err(TensorError::InvalidAxis {
            axis: bad,
            shape: shape.to_vec(),
        });
    }
    Ok(out)
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Invalid(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            shape: shape.into(),
            data: data.into(),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Vec::new(), vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], d)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::raw(vec![n], data)
    }

    /// Builds a `[rows, cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Value equality including shape; graph tracking is ignored.
    pub fn value_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn record(op: Op, name: &'static str, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let graph = match inputs.iter().find_map(|t| t.graph()) {
            Some(g) => g.clone(),
            None => return Ok(Self::raw(shape, data)),
        };
        let mut parents = Vec::with_capacity(inputs.len());
        for t in inputs {
            match &t.node {
                Some(n) if n.graph.same(&graph) => parents.push(n.id),
                Some(_) => return Err(TensorError::GraphMismatch),
                None => parents.push(graph.push(Op::Const, Vec::new(), t.shape.clone(), t.data.clone())),
            }
        }
        let shape: Arc<[usize]> = shape.into();
        let data: Arc<[f64]> = data.into();
        let id = graph.push(op, parents, shape.clone(), data.clone());
        Ok(Tensor {
            shape,
            data,
            node: Some(NodeRef { graph, id }),
        })
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Self::record(op, name, &[self], self.shape.to_vec(), data)
    }

    /// Brings a single-element operand up to `shape` so binary ops can run
    /// element by element.
    fn broadcast_pair(&self, other: &Tensor, name: &'static str) -> Result<(Tensor, Tensor)> {
        if self.shape == other.shape {
            return Ok((self.clone(), other.clone()));
        }
        if other.numel() == 1 {
            return Ok((self.clone(), other.broadcast_scalar(&self.shape)?));
        }
        if self.numel() == 1 {
            return Ok((self.broadcast_scalar(&other.shape)?, other.clone()));
        }
        Err(TensorError::ShapeMismatch {
            op: name,
            lhs: self.shape.to_vec(),
            rhs: other.shape.to_vec(),
        })
    }

    fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        let s = if self.shape.is_empty() {
            self.clone()
        } else {
            self.reshape(&[])?
        };
        let axes: Vec<usize> = (0..shape.len()).collect();
        s.expand(shape, &axes)
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, name)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        Self::record(op, name, &[&a, &b], a.shape.to_vec(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, "neg", |x| -x)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        self.unary(Op::Log, "log", f64::ln)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Op::Tanh, "tanh", f64::tanh)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Op::Softplus, "softplus", softplus)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", |x| x.max(0.0))
    }

    /// `max(x, floor)` element-wise; the gradient is zero where clamped.
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        self.unary(Op::ClampMin(floor), "clamp_min", move |x| x.max(floor))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), "scale", move |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, "add_scalar", move |x| x + c)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Dispatches an element-wise op by tag; unary tags ignore `other`.
    pub fn elementwise(op: Elementwise, a: &Tensor, other: Option<&Tensor>) -> Result<Tensor> {
        let rhs = || {
            other.ok_or_else(|| TensorError::Invalid(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => a.add(rhs()?),
            Elementwise::Sub => a.sub(rhs()?),
            Elementwise::Mul => a.mul(rhs()?),
            Elementwise::Div => a.div(rhs()?),
            Elementwise::Neg => a.neg(),
            Elementwise::Exp => a.exp(),
            Elementwise::Log => a.log(),
            Elementwise::Tanh => a.tanh(),
            Elementwise::Softplus => a.softplus(),
            Elementwise::Sigmoid => a.sigmoid(),
            Elementwise::Relu => a.relu(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.to_vec(),
            rhs: other.shape.to_vec(),
        };
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Self::record(Op::MatMul, "matmul", &[self, other], vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose needs a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::record(Op::Transpose, "transpose", &[self], vec![c, r], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Self::record(Op::Reshape, "reshape", &[self], shape.to_vec(), self.data.to_vec())
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = normalize_axes(&self.shape, axes)?;
        let (out_shape, map) = reduction_map(&self.shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.data.iter()) {
            out[o] += v;
        }
        Self::record(Op::Sum(axes), "sum", &[self], out_shape, out)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = normalize_axes(&self.shape, axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum_axes(&axes)?.scale(1.0 / count as f64)
    }

    /// Maximum over `axes`; ties send the gradient to the first maximiser.
    pub fn max_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = normalize_axes(&self.shape, axes)?;
        let (out_shape, map) = reduction_map(&self.shape, &axes);
        let mut out = vec![f64::NEG_INFINITY; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.data.iter()) {
            if v > out[o] {
                out[o] = v;
            }
        }
        Self::record(Op::Max(axes), "max", &[self], out_shape, out)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn max_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.max_axes(&axes)
    }

    pub fn reduce(op: Reduce, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        match op {
            Reduce::Sum => a.sum_axes(axes),
            Reduce::Mean => a.mean_axes(axes),
            Reduce::Max => a.max_axes(axes),
        }
    }

    /// Inverse of [`Tensor::sum_axes`]: repeats values along `axes` of `shape`.
    pub fn expand(&self, shape: &[usize], axes: &[usize]) -> Result<Tensor> {
        let axes = normalize_axes(shape, axes)?;
        let (reduced, map) = reduction_map(shape, &axes);
        if reduced.as_slice() != &*self.shape {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: self.shape.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = map.iter().map(|&o| self.data[o]).collect();
        Self::record(Op::Expand(axes), "expand", &[self], shape.to_vec(), out)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || row.shape.len() != 1 || row.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.to_vec(),
                rhs: row.shape.to_vec(),
            });
        }
        self.add(&row.expand(&self.shape, &[0])?)
    }

    /// Multiplies every row of an `[m, n]` matrix by a length-`n` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || row.shape.len() != 1 || row.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                lhs: self.shape.to_vec(),
                rhs: row.shape.to_vec(),
            });
        }
        self.mul(&row.expand(&self.shape, &[0])?)
    }

    /// Stacks tensors along axis 0; trailing extents must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        if first.shape.is_empty() {
            return Err(TensorError::Invalid("concat needs rank >= 1".into()));
        }
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.to_vec(),
                    rhs: p.shape.to_vec(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let refs: Vec<&Tensor> = parts.iter().collect();
        Self::record(Op::ConcatRows, "concat_rows", &refs, shape, data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape.is_empty() || len == 0 || start + len > self.shape[0] {
            return Err(TensorError::Invalid(format!(
                "rows {start}..{} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let data = self.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape.to_vec();
        shape[0] = len;
        Self::record(Op::SliceRows { start }, "slice_rows", &[self], shape, data)
    }

    /// Zero-pads along axis 0 so that this tensor occupies rows
    /// `start..start+rows` of a `total`-row result.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start + self.shape[0] > total {
            return Err(TensorError::Invalid(format!(
                "cannot pad shape {:?} at row {start} into {total} rows",
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut data = vec![0.0; total * stride];
        data[start * stride..start * stride + self.numel()].copy_from_slice(&self.data);
        let mut shape = self.shape.to_vec();
        shape[0] = total;
        Self::record(Op::PadRows { start }, "pad_rows", &[self], shape, data)
    }
}

/// Result of one reverse sweep.
pub(crate) struct Sweep {
    pub grads: Vec<Option<Tensor>>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub visits: usize,
}

fn mask(values: &[f64], shape: &[usize], mut keep: impl FnMut(usize, f64) -> bool) -> Tensor {
    let data = values
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep(i, v) { 1.0 } else { 0.0 })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Vector-Jacobian products of one node. Only parents flagged in `needs`
/// receive a contribution.
fn vjp(op: &Op, parents: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf | Op::Const => Ok(Vec::new()),
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.clone()),
            if want(1) { Some(g.neg()?) } else { None },
        ]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&parents[1])?) } else { None },
            if want(1) { Some(g.mul(&parents[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(g.div(&parents[1])?) } else { None },
            if want(1) {
                Some(g.mul(out)?.div(&parents[1])?.neg()?)
            } else {
                None
            },
        ]),
        Op::Neg => one(g.neg()),
        Op::Exp => one(g.mul(out)),
        Op::Log => one(g.div(&parents[0])),
        Op::Tanh => one(g.mul(&out.square()?.neg()?.add_scalar(1.0)?)),
        Op::Softplus => one(g.mul(&parents[0].sigmoid()?)),
        Op::Sigmoid => one(g.mul(&out.mul(&out.neg()?.add_scalar(1.0)?)?)),
        Op::Relu => one(g.mul(&mask(parents[0].data(), parents[0].shape(), |_, v| v > 0.0))),
        Op::ClampMin(floor) => {
            let floor = *floor;
            one(g.mul(&mask(parents[0].data(), parents[0].shape(), move |_, v| v > floor)))
        }
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar => one(Ok(g.clone())),
        Op::MatMul => Ok(vec![
            if want(0) {
                Some(g.matmul(&parents[1].transpose()?)?)
            } else {
                None
            },
            if want(1) {
                Some(parents[0].transpose()?.matmul(g)?)
            } else {
                None
            },
        ]),
        Op::Transpose => one(g.transpose()),
        Op::Reshape => one(g.reshape(parents[0].shape())),
        Op::Sum(axes) => one(g.expand(parents[0].shape(), axes)),
        Op::Expand(axes) => one(g.sum_axes(axes)),
        Op::Max(axes) => {
            let p = &parents[0];
            let (_, map) = reduction_map(p.shape(), axes);
            let mut taken = vec![false; out.numel()];
            let m = mask(p.data(), p.shape(), |i, v| {
                let o = map[i];
                if !taken[o] && v == out.data()[o] {
                    taken[o] = true;
                    true
                } else {
                    false
                }
            });
            one(g.expand(p.shape(), axes)?.mul(&m))
        }
        Op::ConcatRows => {
            let mut start = 0;
            let mut res = Vec::with_capacity(parents.len());
            for (i, p) in parents.iter().enumerate() {
                let rows = p.shape()[0];
                res.push(if want(i) { Some(g.slice_rows(start, rows)?) } else { None });
                start += rows;
            }
            Ok(res)
        }
        Op::SliceRows { start } => one(g.pad_rows(*start, parents[0].shape()[0])),
        Op::PadRows { start } => one(g.slice_rows(*start, parents[0].shape()[0])),
    }
}

/// Reverse sweep from `loss` to each of `wrt`.
///
/// `None` marks a target that is not recorded on the loss's graph. A target
/// on the graph that the loss does not depend on gets a zero tensor.
pub(crate) fn backward(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Sweep> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape.to_vec()));
    }
    let root = loss.node.as_ref().ok_or(TensorError::UntrackedLoss)?;
    let graph = root.graph.clone();
    let n = root.id + 1;

    let parents: Vec<Vec<usize>> = {
        let inner = graph.lock();
        inner.nodes[..n].iter().map(|nd| nd.parents.clone()).collect()
    };

    let mut target = vec![false; n];
    let mut slot = Vec::with_capacity(wrt.len());
    for t in wrt {
        match &t.node {
            Some(r) if r.graph.same(&graph) && r.id < n => {
                target[r.id] = true;
                slot.push(Some(r.id));
            }
            Some(r) if r.graph.same(&graph) => slot.push(Some(usize::MAX)),
            _ => slot.push(None),
        }
    }

    // Nodes that depend on some target, and nodes the loss depends on.
    let mut depends = target.clone();
    for i in 0..n {
        if !depends[i] && parents[i].iter().any(|&p| depends[p]) {
            depends[i] = true;
        }
    }
    let mut reach = vec![false; n];
    reach[root.id] = true;
    for i in (0..n).rev() {
        if reach[i] {
            for &p in &parents[i] {
                reach[p] = true;
            }
        }
    }

    let mut adj: Vec<Option<Tensor>> = vec![None; n];
    adj[root.id] = Some(Tensor::ones(&loss.shape));
    let mut found: Vec<Option<Tensor>> = vec![None; n];
    let mut visits = 0;

    for i in (0..n).rev() {
        if !(depends[i] && reach[i]) {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        visits += 1;
        if target[i] {
            found[i] = Some(g.clone());
        }
        let needs: Vec<bool> = parents[i].iter().map(|&p| depends[p] && reach[p]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let (op, ptensors, out) = {
            let inner = graph.lock();
            let op = inner.nodes[i].op.clone();
            let ptensors: Vec<Tensor> = parents[i]
                .iter()
                .map(|&p| graph.tensor_at(&inner, p, create_graph))
                .collect();
            let out = graph.tensor_at(&inner, i, create_graph);
            (op, ptensors, out)
        };
        let g = if create_graph { g } else { g.detach() };
        let contribs = vjp(&op, &ptensors, &out, &g, &needs)?;
        for (k, c) in contribs.into_iter().enumerate() {
            if let Some(c) = c {
                let p = parents[i][k];
                adj[p] = Some(match adj[p].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
    }

    let grads = wrt
        .iter()
        .zip(slot)
        .map(|(t, s)| {
            s.map(|id| {
                let g = if id < n { found[id].take() } else { None };
                g.unwrap_or_else(|| Tensor::zeros(&t.shape))
            })
        })
        .collect();
    Ok(Sweep { grads, visits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        assert!(Tensor::eye(2).matmul(&a).unwrap().value_eq(&a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[1.0, 0.0, -1.0]);
        assert!(a.add(&Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn log_domain_error() {
        let err = Tensor::vector(vec![1.0, 0.0]).log().unwrap_err();
        assert!(matches!(err, TensorError::Domain { op: "log", .. }));
    }

    #[test]
    fn unary_values() {
        let z = Tensor::scalar(0.0);
        assert!((z.softplus().unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(z.tanh().unwrap().item(), 0.0);
        assert_eq!(Tensor::scalar(800.0).softplus().unwrap().item(), 800.0);
        assert!(Tensor::scalar(-800.0).softplus().unwrap().item() >= 0.0);
        assert_eq!(Tensor::vector(vec![-1.0, 2.0]).relu().unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn reductions() {
        assert_eq!(Tensor::ones(&[2, 3]).sum_all().unwrap().item(), 6.0);
        let m = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap();
        assert_eq!(m.mean_axes(&[0]).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(m.sum_axes(&[1]).unwrap().data(), &[4.0, 12.0]);
        assert_eq!(m.max_axes(&[0, 1]).unwrap().item(), 7.0);
        assert!(matches!(m.sum_axes(&[2]), Err(TensorError::InvalidAxis { axis: 2, .. })));
    }

    #[test]
    fn expand_inverts_sum_shape() {
        let v = Tensor::vector(vec![1.0, 2.0]);
        let e = v.expand(&[3, 2], &[0]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let c = v.expand(&[2, 3], &[1]).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_slice_pad() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = Tensor::concat_rows(&[a.clone(), b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.slice_rows(0, 1).unwrap().value_eq(&a));
        let p = a.pad_rows(1, 3).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let err = Tensor::scalar(1000.0).exp().unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    #[test]
    fn tracking_propagates_and_consts_are_recorded() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let y = x.mul(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert!(y.is_tracked());
        // leaf, const, mul
        assert_eq!(g.len(), 3);
        let other = Graph::new().leaf(&Tensor::vector(vec![1.0, 1.0]));
        assert_eq!(x.add(&other).unwrap_err(), TensorError::GraphMismatch);
    }

    #[test]
    fn sweep_visits_each_relevant_node_once() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![0.5, -0.3]));
        // diamond: y = tanh(x), z = y*y + y, loss = sum(z)
        let y = x.tanh().unwrap();
        let z = y.mul(&y).unwrap().add(&y).unwrap();
        let loss = z.sum_all().unwrap();
        let nodes = g.len();
        let sweep = backward(&loss, &[&x], false).unwrap();
        assert_eq!(sweep.visits, nodes);
        // no recording without create_graph
        assert_eq!(g.len(), nodes);
    }
}
