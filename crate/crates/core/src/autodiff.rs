//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! The tape records a small fixed set of primitives (affine layers, ReLU,
//! elementwise arithmetic, reductions, row norms and row gathers) eagerly:
//! every call computes the forward value immediately and appends a node.
//! [`Tape::backward`] then walks the nodes in reverse creation order, which
//! is a valid reverse topological order because inputs always precede their
//! consumers.
//!
//! Gradients computed outside the tape (the persistence-diagram losses) are
//! fed back with [`Tape::inject_external_gradient`]; they are added to the
//! node's adjoint right before its backward rule runs.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Norms below this are treated as a vanishing direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("degenerate direction: row {row} has norm {norm:e}")]
    DegenerateDirection { row: usize, norm: f64 },
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Packs 3D points into an `n×3` matrix.
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Self {
            shape: vec![points.len(), 3],
            data: points.iter().flat_map(|p| p.iter().copied()).collect(),
        }
    }

    pub fn to_points(&self) -> Vec<[f64; 3]> {
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// `c = a·b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Stored as k×m when transposed.
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover m·k, k·n and m·n elements under the
    // strides above; callers check shapes before calling.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward kernel of an affine layer, shared with tape-free evaluation.
pub(crate) fn affine_kernel(
    input: &[f64],
    rows: usize,
    d_in: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let d_out = bias.len();
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(rows, d_in, d_out, input, false, weight, false, &mut out, true);
    out
}

pub(crate) fn relu_kernel(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// `a · wᵀ`
    MatMulT { a: NodeId, w: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Abs(NodeId),
    RowNorm(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
        end: usize,
    },
    ScaleRows { m: NodeId, s: NodeId },
    DivRows { m: NodeId, s: NodeId },
    Reshape(NodeId),
}

/// Recorded operation plus the forward value it produced.
#[derive(Clone, Debug)]
pub struct TapeNode {
    op: Op,
    value: Tensor,
}

impl TapeNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn op_name(&self) -> &'static str {
        match self.op {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMulT { .. } => "matmul_t",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Abs(_) => "abs",
            Op::RowNorm(_) => "row_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ScaleRows { .. } => "scale_rows",
            Op::DivRows { .. } => "div_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

/// Adjoints keyed by node. Nodes unreachable from the seed have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `node`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, node: NodeId, like: &Tensor) -> Tensor {
        self.get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape.clone()))
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(|g| g.take())
    }
}

#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    injected: BTreeMap<usize, Vec<(usize, f64)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&TapeNode> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.node(id).map(|n| &n.value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.check(input)?;
        let w = self.check(weight)?;
        let b = self.check(bias)?;
        if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] {
            return Err(AutodiffError::Shape {
                op: "affine",
                left: x.shape.clone(),
                right: w.shape.clone(),
            });
        }
        if b.shape != [w.shape[1]] {
            return Err(AutodiffError::Shape {
                op: "affine bias",
                left: w.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (n, d_in, d_out) = (x.shape[0], x.shape[1], w.shape[1]);
        let out = affine_kernel(&x.data, n, d_in, &w.data, &b.data);
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            Tensor {
                shape: vec![n, d_out],
                data: out,
            },
        ))
    }

    /// `a · wᵀ` for `a: n×d_out`, `w: d_in×d_out`; the transpose product of
    /// an affine layer, used to express input gradients on the tape.
    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let wv = self.check(w)?;
        if av.shape.len() != 2 || wv.shape.len() != 2 || av.shape[1] != wv.shape[1] {
            return Err(AutodiffError::Shape {
                op: "matmul_t",
                left: av.shape.clone(),
                right: wv.shape.clone(),
            });
        }
        let (n, d_out, d_in) = (av.shape[0], av.shape[1], wv.shape[0]);
        let mut out = vec![0.0; n * d_in];
        gemm(n, d_out, d_in, &av.data, false, &wv.data, true, &mut out, false);
        Ok(self.push(
            Op::MatMulT { a, w },
            Tensor {
                shape: vec![n, d_in],
                data: out,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let mut v = self.check(input)?.clone();
        relu_kernel(&mut v.data);
        Ok(self.push(Op::Relu(input), v))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape != bv.shape {
            return Err(AutodiffError::Shape {
                op: name,
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise product with a constant that carries no gradient.
    pub fn mul_const(&mut self, a: NodeId, constant: Tensor) -> Result<NodeId> {
        let av = self.check(a)?;
        if av.shape != constant.shape {
            return Err(AutodiffError::Shape {
                op: "mul_const",
                left: av.shape.clone(),
                right: constant.shape.clone(),
            });
        }
        let v = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&constant.data).map(|(x, c)| x * c).collect(),
        };
        Ok(self.push(Op::MulConst(a, constant), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = self.check(a)?;
        let v = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * factor).collect(),
        };
        Ok(self.push(Op::Scale(a, factor), v))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let v = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * x).collect(),
        };
        Ok(self.push(Op::Square(a), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.data.iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        if av.is_empty() {
            return Err(AutodiffError::Shape {
                op: "mean",
                left: av.shape.clone(),
                right: vec![],
            });
        }
        let m = av.data.iter().sum::<f64>() / av.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    /// Elementwise `|x|`; backward uses `sign(x)` with `sign(0) = 0`.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let v = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.abs()).collect(),
        };
        Ok(self.push(Op::Abs(a), v))
    }

    /// Euclidean norm of each row of an `n×d` matrix.
    pub fn row_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        if av.shape.len() != 2 {
            return Err(AutodiffError::Shape {
                op: "row_norm",
                left: av.shape.clone(),
                right: vec![],
            });
        }
        let d = av.shape[1];
        let mut out = Vec::with_capacity(av.shape[0]);
        for (row, chunk) in av.data.chunks_exact(d.max(1)).enumerate() {
            let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < DEGENERATE_NORM {
                return Err(AutodiffError::DegenerateDirection { row, norm });
            }
            out.push(norm);
        }
        Ok(self.push(Op::RowNorm(a), Tensor::vector(out)))
    }

    /// Selects rows (leading index) of `a`.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let av = self.check(a)?;
        let rows = av.rows();
        let cols = av.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            if i >= rows {
                return Err(AutodiffError::Index {
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&av.data[i * cols..(i + 1) * cols]);
        }
        let mut shape = av.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Ok(self.push(Op::GatherRows(a, indices), Tensor { shape, data }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[0] != bv.shape[0] {
            return Err(AutodiffError::Shape {
                op: "concat_cols",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let (n, ca, cb) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&av.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(
            Op::ConcatCols(a, b),
            Tensor {
                shape: vec![n, ca + cb],
                data,
            },
        ))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.check(input)?;
        if av.shape.len() != 2 || start > end || end > av.shape[1] {
            return Err(AutodiffError::Shape {
                op: "slice_cols",
                left: av.shape.clone(),
                right: vec![start, end],
            });
        }
        let (n, c) = (av.shape[0], av.shape[1]);
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&av.data[i * c + start..i * c + end]);
        }
        Ok(self.push(
            Op::SliceCols { input, start, end },
            Tensor {
                shape: vec![n, end - start],
                data,
            },
        ))
    }

    fn row_scaled(&self, m: NodeId, s: NodeId, name: &'static str) -> Result<(usize, usize)> {
        let mv = self.check(m)?;
        let sv = self.check(s)?;
        if mv.shape.len() != 2 || sv.shape != [mv.shape[0]] {
            return Err(AutodiffError::Shape {
                op: name,
                left: mv.shape.clone(),
                right: sv.shape.clone(),
            });
        }
        Ok((mv.shape[0], mv.shape[1]))
    }

    /// `out[i,j] = m[i,j] · s[i]`
    pub fn scale_rows(&mut self, m: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, c) = self.row_scaled(m, s, "scale_rows")?;
        let mv = &self.nodes[m.0].value;
        let sv = &self.nodes[s.0].value;
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend(mv.data[i * c..(i + 1) * c].iter().map(|x| x * sv.data[i]));
        }
        Ok(self.push(
            Op::ScaleRows { m, s },
            Tensor {
                shape: vec![n, c],
                data,
            },
        ))
    }

    /// `out[i,j] = m[i,j] / s[i]`
    pub fn div_rows(&mut self, m: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, c) = self.row_scaled(m, s, "div_rows")?;
        let mv = &self.nodes[m.0].value;
        let sv = &self.nodes[s.0].value;
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend(mv.data[i * c..(i + 1) * c].iter().map(|x| x / sv.data[i]));
        }
        Ok(self.push(
            Op::DivRows { m, s },
            Tensor {
                shape: vec![n, c],
                data,
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let av = self.check(a)?;
        let v = Tensor::new(shape, av.data.clone()).map_err(|_| AutodiffError::Shape {
            op: "reshape",
            left: av.shape.clone(),
            right: vec![av.len()],
        })?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Queues a sparse adjoint contribution for `node`; repeated calls
    /// accumulate. The values are added to the node's adjoint during the
    /// next [`Tape::backward`].
    pub fn inject_external_gradient(
        &mut self,
        node: NodeId,
        sparse_grad: &[(usize, f64)],
    ) -> Result<()> {
        let len = self.check(node)?.len();
        if let Some(&(index, _)) = sparse_grad.iter().find(|(i, _)| *i >= len) {
            return Err(AutodiffError::Index { index, len });
        }
        if sparse_grad.is_empty() {
            return Ok(());
        }
        self.injected
            .entry(node.0)
            .or_default()
            .extend_from_slice(sparse_grad);
        Ok(())
    }

    pub fn clear_injections(&mut self) {
        self.injected.clear();
    }

    /// Reverse-mode sweep from `seed` with adjoint `seed_gradient`, plus any
    /// injected sparse adjoints.
    pub fn backward(&self, seed: NodeId, seed_gradient: Tensor) -> Result<GradientMap> {
        let seed_value = self.check(seed)?;
        if seed_value.shape != seed_gradient.shape {
            return Err(AutodiffError::Shape {
                op: "backward seed",
                left: seed_value.shape.clone(),
                right: seed_gradient.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(seed_gradient);

        for id in (0..self.nodes.len()).rev() {
            if let Some(sparse) = self.injected.get(&id) {
                let g = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape.clone()));
                for &(i, v) in sparse {
                    g.data[i] += v;
                }
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut accumulate = |target: NodeId, contribution: Tensor| match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };
        let value = |n: NodeId| &self.nodes[n.0].value;
        let like = |n: NodeId, data: Vec<f64>| Tensor {
            shape: self.nodes[n.0].value.shape.clone(),
            data,
        };

        match &node.op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = value(*input);
                let w = value(*weight);
                let (n, d_in, d_out) = (x.shape[0], x.shape[1], w.shape[1]);
                let mut dx = vec![0.0; n * d_in];
                gemm(n, d_out, d_in, &g.data, false, &w.data, true, &mut dx, false);
                let mut dw = vec![0.0; d_in * d_out];
                gemm(d_in, n, d_out, &x.data, true, &g.data, false, &mut dw, false);
                let mut db = vec![0.0; d_out];
                for row in g.data.chunks_exact(d_out) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(*input, like(*input, dx));
                accumulate(*weight, like(*weight, dw));
                accumulate(*bias, like(*bias, db));
            }
            Op::MatMulT { a, w } => {
                let av = value(*a);
                let wv = value(*w);
                let (n, d_out, d_in) = (av.shape[0], av.shape[1], wv.shape[0]);
                let mut da = vec![0.0; n * d_out];
                gemm(n, d_in, d_out, &g.data, false, &wv.data, false, &mut da, false);
                let mut dw = vec![0.0; d_in * d_out];
                gemm(d_in, n, d_out, &g.data, true, &av.data, false, &mut dw, false);
                accumulate(*a, like(*a, da));
                accumulate(*w, like(*w, dw));
            }
            Op::Relu(a) => {
                let x = value(*a);
                let d = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(*a, like(*a, d));
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, like(*b, g.data.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let av = value(*a);
                let bv = value(*b);
                let da = g.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                let db = g.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                accumulate(*a, like(*a, da));
                accumulate(*b, like(*b, db));
            }
            Op::MulConst(a, c) => {
                let d = g.data.iter().zip(&c.data).map(|(g, c)| g * c).collect();
                accumulate(*a, like(*a, d));
            }
            Op::Scale(a, factor) => {
                accumulate(*a, like(*a, g.data.iter().map(|v| v * factor).collect()));
            }
            Op::Square(a) => {
                let x = value(*a);
                let d = g.data.iter().zip(&x.data).map(|(g, x)| 2.0 * x * g).collect();
                accumulate(*a, like(*a, d));
            }
            Op::Sum(a) => {
                let n = value(*a).len();
                accumulate(*a, like(*a, vec![g.data[0]; n]));
            }
            Op::Mean(a) => {
                let n = value(*a).len();
                accumulate(*a, like(*a, vec![g.data[0] / n as f64; n]));
            }
            Op::Abs(a) => {
                let x = value(*a);
                let d = g.data.iter().zip(&x.data).map(|(g, x)| g * sign(*x)).collect();
                accumulate(*a, like(*a, d));
            }
            Op::RowNorm(a) => {
                let x = value(*a);
                let d = x.shape[1];
                let mut dx = Vec::with_capacity(x.len());
                for (i, row) in x.data.chunks_exact(d).enumerate() {
                    let scale = g.data[i] / out.data[i];
                    dx.extend(row.iter().map(|v| v * scale));
                }
                accumulate(*a, like(*a, dx));
            }
            Op::GatherRows(a, indices) => {
                let cols = value(*a).cols();
                let mut d = vec![0.0; value(*a).len()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g.data[k * cols + j];
                    }
                }
                accumulate(*a, like(*a, d));
            }
            Op::ConcatCols(a, b) => {
                let ca = value(*a).shape[1];
                let cb = value(*b).shape[1];
                let mut da = Vec::with_capacity(value(*a).len());
                let mut db = Vec::with_capacity(value(*b).len());
                for row in g.data.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(*a, like(*a, da));
                accumulate(*b, like(*b, db));
            }
            Op::SliceCols { input, start, end } => {
                let c = value(*input).shape[1];
                let w = end - start;
                let mut d = vec![0.0; value(*input).len()];
                for (i, row) in g.data.chunks_exact(w.max(1)).enumerate().take(value(*input).shape[0]) {
                    d[i * c + start..i * c + end].copy_from_slice(&row[..w]);
                }
                accumulate(*input, like(*input, d));
            }
            Op::ScaleRows { m, s } => {
                let mv = value(*m);
                let sv = value(*s);
                let c = mv.shape[1];
                let mut dm = Vec::with_capacity(mv.len());
                let mut ds = vec![0.0; sv.len()];
                for i in 0..mv.shape[0] {
                    for j in 0..c {
                        let gij = g.data[i * c + j];
                        dm.push(gij * sv.data[i]);
                        ds[i] += gij * mv.data[i * c + j];
                    }
                }
                accumulate(*m, like(*m, dm));
                accumulate(*s, like(*s, ds));
            }
            Op::DivRows { m, s } => {
                let mv = value(*m);
                let sv = value(*s);
                let c = mv.shape[1];
                let mut dm = Vec::with_capacity(mv.len());
                let mut ds = vec![0.0; sv.len()];
                for i in 0..mv.shape[0] {
                    let inv = 1.0 / sv.data[i];
                    for j in 0..c {
                        let gij = g.data[i * c + j];
                        dm.push(gij * inv);
                        ds[i] -= gij * mv.data[i * c + j] * inv * inv;
                    }
                }
                accumulate(*m, like(*m, dm));
                accumulate(*s, like(*s, ds));
            }
            Op::Reshape(a) => {
                accumulate(*a, like(*a, g.data.clone()));
            }
        }
    }
}
