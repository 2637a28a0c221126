//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Every trainable computation in the crate is expressed through [`Graph`]:
//! forward calls append operation records to a tape, `backward` replays the
//! tape in reverse and accumulates gradients into every node that requires
//! them. All arithmetic is 64-bit; forward evaluation is deterministic.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor and
//! exact-shape; anything else is a dedicated op (`add_bias`, `expand_cols`).

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range ({len} entries)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice without reset_grads")]
    DoubleBackward,
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense 64-bit tensor. `grad`, when present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Max(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    Reshape(NodeId),
    SoftmaxRows(NodeId, Option<Vec<bool>>),
    LayerNorm(NodeId, NodeId, NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    AddBias(NodeId, NodeId),
    Diag(NodeId),
    ExpandCols(NodeId, usize),
    NormalizeRows(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; `backward` walks them once in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matrix kernels ──────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], row-major. ikj order so the inner loop runs
/// over contiguous rows of B and C.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[k×n] = Aᵀ[k×m] · G[m×n] without materializing the transpose.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// C[m×k] = G[m×n] · Bᵀ[n×k] without materializing the transpose.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut dot = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                dot += gv * bv;
            }
            c[i * k + p] = dot;
        }
    }
    c
}

fn accumulate(target: &mut Vec<f64>, src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        )
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push_derived(data, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push_derived(data, vec![n, m], Op::Transpose(a), &[a]))
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<usize>, bool, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            Ok((sa.to_vec(), false, false))
        } else if nb == 1 {
            Ok((sa.to_vec(), false, true))
        } else if na == 1 {
            Ok((sb.to_vec(), true, false))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_tag: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (shape, a_scalar, b_scalar) = self.binary_shapes(op_tag, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = if a_scalar { da[0] } else { da[i] };
            let y = if b_scalar { db[0] } else { db[i] };
            data.push(f(x, y));
        }
        Ok(self.push_derived(data, shape, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply by a compile-time constant (not a graph value).
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(data, shape, Op::Scale(a, c), &[a])
    }

    /// Add a constant to every element (sugar over a scalar leaf).
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(data, shape, op, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    fn reduce_check(&self, op: &'static str, a: NodeId, axis: Option<usize>) -> Result<()> {
        let s = self.shape(a);
        if let Some(ax) = axis {
            if ax >= s.len() {
                return Err(TensorError::AxisOutOfRange {
                    op,
                    axis: ax,
                    shape: s.to_vec(),
                });
            }
            if s[ax] == 0 {
                return Err(TensorError::InvalidShape {
                    op,
                    shape: s.to_vec(),
                    reason: "reduction over empty axis".into(),
                });
            }
        } else if self.value(a).numel() == 0 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "reduction over empty tensor".into(),
            });
        }
        Ok(())
    }

    /// Iterate a rank-1/2 tensor as groups along `axis`; calls `f(group_index, element_index)`.
    fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => vec![1],
            Some(ax) => {
                let mut out: Vec<usize> = shape.to_vec();
                out.remove(ax);
                if out.is_empty() {
                    out.push(1);
                }
                out
            }
        }
    }

    /// For each input flat index, the output flat index it reduces into.
    fn reduce_map(shape: &[usize], axis: Option<usize>, flat: usize) -> usize {
        match axis {
            None => 0,
            Some(ax) => {
                if shape.len() == 1 {
                    0
                } else if ax == 0 {
                    flat % shape[1]
                } else {
                    flat / shape[1]
                }
            }
        }
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_check("sum", a, axis)?;
        let shape = self.shape(a).to_vec();
        let out_shape = Self::reduced_shape(&shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, &x) in self.data(a).iter().enumerate() {
            data[Self::reduce_map(&shape, axis, i)] += x;
        }
        Ok(self.push_derived(data, out_shape, Op::Sum(a, axis), &[a]))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_check("mean", a, axis)?;
        let shape = self.shape(a).to_vec();
        let out_shape = Self::reduced_shape(&shape, axis);
        let count = match axis {
            None => self.value(a).numel(),
            Some(ax) => shape[ax],
        } as f64;
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, &x) in self.data(a).iter().enumerate() {
            data[Self::reduce_map(&shape, axis, i)] += x / count;
        }
        Ok(self.push_derived(data, out_shape, Op::Mean(a, axis), &[a]))
    }

    pub fn max(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_check("max", a, axis)?;
        let shape = self.shape(a).to_vec();
        let out_shape = Self::reduced_shape(&shape, axis);
        let out_n: usize = out_shape.iter().product();
        let mut data = vec![f64::NEG_INFINITY; out_n];
        // first argmax per group, for the backward route
        let mut arg = vec![usize::MAX; out_n];
        for (i, &x) in self.data(a).iter().enumerate() {
            let o = Self::reduce_map(&shape, axis, i);
            if x > data[o] {
                data[o] = x;
                arg[o] = i;
            }
        }
        Ok(self.push_derived(data, out_shape, Op::Max(a, arg), &[a]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no tensors".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let rank = first.len();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank
                || (0..rank).any(|d| d != axis && s[d] != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;

        let mut data = vec![0.0; out_shape.iter().product()];
        if rank == 1 || axis == 0 {
            let mut off = 0;
            for &p in parts {
                let d = self.data(p);
                data[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            // rank 2, axis 1
            let rows = first[0];
            let mut col_off = 0;
            for &p in parts {
                let cols = self.shape(p)[1];
                let d = self.data(p);
                for r in 0..rows {
                    data[r * total_axis + col_off..r * total_axis + col_off + cols]
                        .copy_from_slice(&d[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
        }
        Ok(self.push_derived(data, out_shape, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                shape: s,
            });
        }
        if start + len > s[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let src = self.data(a);
        let (data, out_shape) = if s.len() == 1 {
            (src[start..start + len].to_vec(), vec![len])
        } else if axis == 0 {
            let cols = s[1];
            (
                src[start * cols..(start + len) * cols].to_vec(),
                vec![len, cols],
            )
        } else {
            let (rows, cols) = (s[0], s[1]);
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
            (d, vec![rows, len])
        };
        Ok(self.push_derived(data, out_shape, Op::Slice(a, axis, start, len), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count differs from {:?}", self.shape(a)),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push_derived(data, shape.to_vec(), Op::Reshape(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_rows_inner(a, None)
    }

    /// Row softmax restricted to unmasked columns; masked columns get
    /// probability 0. Errors if every column is masked.
    pub fn softmax_rows_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.softmax_rows_inner(a, Some(mask.to_vec()))
    }

    fn softmax_rows_inner(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(m) = &mask {
            if m.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    left: s,
                    right: vec![m.len()],
                });
            }
            if !m.iter().any(|&v| v) {
                return Err(TensorError::Domain {
                    op: "softmax_rows",
                    reason: "all positions masked".into(),
                });
            }
        }
        let live = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
        let src = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if live(j) && x > mx {
                    mx = x;
                }
            }
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if live(j) {
                    let e = (x - mx).exp();
                    data[r * cols + j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                data[r * cols + j] /= denom;
            }
        }
        Ok(self.push_derived(data, s, Op::SoftmaxRows(a, mask), &[a]))
    }

    /// Layer normalization over the last axis of a rank-2 input, with
    /// per-feature gain `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        let d = s[1];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: s,
                right: self.shape(gamma).to_vec(),
            });
        }
        let rows = s[0];
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push_derived(data, s, Op::LayerNorm(x, gamma, beta, eps), &[x, gamma, beta]))
    }

    /// Select rows of `table` by index; used for token/position embeddings.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: s,
                reason: "empty index list".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Ok(self.push_derived(
            data,
            vec![ids.len(), cols],
            Op::GatherRows(table, ids.to_vec()),
            &[table],
        ))
    }

    /// `[m×n] + [n]`: add a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: sx,
                right: sb,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let (dx, db) = (self.data(x), self.data(b));
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for j in 0..cols {
                data.push(dx[r * cols + j] + db[j]);
            }
        }
        Ok(self.push_derived(data, sx, Op::AddBias(x, b), &[x, b]))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::InvalidShape {
                op: "diag",
                shape: s,
                reason: "square matrix required".into(),
            });
        }
        let n = s[0];
        let src = self.data(a);
        let data = (0..n).map(|i| src[i * n + i]).collect();
        Ok(self.push_derived(data, vec![n], Op::Diag(a), &[a]))
    }

    /// `[m] -> [m×n]`: every column is a copy of the input vector.
    pub fn expand_cols(&mut self, v: NodeId, n: usize) -> Result<NodeId> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 || n == 0 {
            return Err(TensorError::InvalidShape {
                op: "expand_cols",
                shape: s,
                reason: format!("rank-1 input and n > 0 required (n = {n})"),
            });
        }
        let m = s[0];
        let src = self.data(v);
        let mut data = Vec::with_capacity(m * n);
        for &x in src {
            data.extend(std::iter::repeat(x).take(n));
        }
        Ok(self.push_derived(data, vec![m, n], Op::ExpandCols(v, n), &[v]))
    }

    /// L2-normalize each row. Rows with norm below 1e-12 map to zero rows
    /// (and receive zero gradient), so downstream cosine similarities are 0
    /// instead of NaN.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "normalize_rows",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if norm >= ZERO_NORM_EPS {
                for j in 0..cols {
                    data[r * cols + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push_derived(data, s, Op::NormalizeRows(a), &[a]))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        self.backward_done = true;

        // Allocate grads only where needed.
        for node in self.nodes.iter_mut() {
            if node.value.requires_grad {
                node.value.grad = Some(vec![0.0; node.value.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].value.grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].value.grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].value.grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &op, &grad);
        }
        Ok(())
    }

    /// Clear all gradients so another backward pass can run.
    pub fn reset_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn add_to_grad(&mut self, id: NodeId, contribution: &[f64]) {
        if let Some(g) = self.nodes[id.0].value.grad.as_mut() {
            accumulate(g, contribution);
        }
    }

    fn apply_backward(&mut self, out_idx: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                if self.wants_grad(*a) {
                    let da = matmul_nt(grad, self.data(*b), m, k, n);
                    self.add_to_grad(*a, &da);
                }
                if self.wants_grad(*b) {
                    let db = matmul_tn(self.data(*a), grad, m, k, n);
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.wants_grad(*a) {
                    let s = self.shape(*a).to_vec();
                    let (m, n) = (s[0], s[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = grad[j * m + i];
                        }
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Add(a, b) => {
                self.binary_backward(*a, grad, |_, _, g| g, *a, *b, out_idx);
                self.binary_backward(*b, grad, |_, _, g| g, *a, *b, out_idx);
            }
            Op::Sub(a, b) => {
                self.binary_backward(*a, grad, |_, _, g| g, *a, *b, out_idx);
                self.binary_backward(*b, grad, |_, _, g| -g, *a, *b, out_idx);
            }
            Op::Mul(a, b) => {
                self.binary_backward(*a, grad, |_, y, g| g * y, *a, *b, out_idx);
                self.binary_backward(*b, grad, |x, _, g| g * x, *a, *b, out_idx);
            }
            Op::Scale(a, c) => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = self
                        .data(*a)
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Tanh(a) => {
                if self.wants_grad(*a) {
                    let out = &self.nodes[out_idx].value.data;
                    let da: Vec<f64> = out.iter().zip(grad).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Exp(a) => {
                if self.wants_grad(*a) {
                    let out = &self.nodes[out_idx].value.data;
                    let da: Vec<f64> = out.iter().zip(grad).map(|(&e, &g)| g * e).collect();
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Log(a) => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = self.data(*a).iter().zip(grad).map(|(&x, &g)| g / x).collect();
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Sum(a, axis) => {
                if self.wants_grad(*a) {
                    let shape = self.shape(*a).to_vec();
                    let n = shape.iter().product();
                    let mut da = vec![0.0; n];
                    for (i, slot) in da.iter_mut().enumerate() {
                        *slot = grad[Self::reduce_map(&shape, *axis, i)];
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Mean(a, axis) => {
                if self.wants_grad(*a) {
                    let shape = self.shape(*a).to_vec();
                    let count = match axis {
                        None => shape.iter().product::<usize>(),
                        Some(ax) => shape[*ax],
                    } as f64;
                    let n = shape.iter().product();
                    let mut da = vec![0.0; n];
                    for (i, slot) in da.iter_mut().enumerate() {
                        *slot = grad[Self::reduce_map(&shape, *axis, i)] / count;
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Max(a, arg) => {
                if self.wants_grad(*a) {
                    let n = self.value(*a).numel();
                    let mut da = vec![0.0; n];
                    for (o, &src) in arg.iter().enumerate() {
                        da[src] += grad[o];
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Concat(parts, axis) => {
                let rank = self.shape(parts[0]).len();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.wants_grad(p) {
                            let dp = grad[off..off + len].to_vec();
                            self.add_to_grad(p, &dp);
                        }
                        off += len;
                    }
                } else {
                    let rows = self.shape(parts[0])[0];
                    let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                    let mut col_off = 0;
                    for &p in parts {
                        let cols = self.shape(p)[1];
                        if self.wants_grad(p) {
                            let mut dp = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                dp.extend_from_slice(
                                    &grad[r * total + col_off..r * total + col_off + cols],
                                );
                            }
                            self.add_to_grad(p, &dp);
                        }
                        col_off += cols;
                    }
                }
            }
            Op::Slice(a, axis, start, len) => {
                if self.wants_grad(*a) {
                    let s = self.shape(*a).to_vec();
                    let n = s.iter().product();
                    let mut da = vec![0.0; n];
                    if s.len() == 1 {
                        da[*start..start + len].copy_from_slice(grad);
                    } else if *axis == 0 {
                        let cols = s[1];
                        da[start * cols..(start + len) * cols].copy_from_slice(grad);
                    } else {
                        let (rows, cols) = (s[0], s[1]);
                        for r in 0..rows {
                            da[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&grad[r * len..(r + 1) * len]);
                        }
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::Reshape(a) => {
                if self.wants_grad(*a) {
                    self.add_to_grad(*a, grad);
                }
            }
            Op::SoftmaxRows(a, mask) => {
                if self.wants_grad(*a) {
                    let out = self.nodes[out_idx].value.data.clone();
                    let s = self.shape(*a).to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let o = &out[r * cols..(r + 1) * cols];
                        let g = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = o.iter().zip(g).map(|(&s, &gv)| s * gv).sum();
                        for j in 0..cols {
                            if mask.as_ref().map_or(true, |m| m[j]) {
                                da[r * cols + j] = o[j] * (g[j] - dot);
                            }
                        }
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::LayerNorm(x, gamma, beta, eps) => {
                let s = self.shape(*x).to_vec();
                let (rows, d) = (s[0], s[1]);
                let src = self.data(*x).to_vec();
                let g_data = self.data(*gamma).to_vec();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(&g_data).map(|(&g, &gm)| g * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.wants_grad(*x) {
                    self.add_to_grad(*x, &dx);
                }
                if self.wants_grad(*gamma) {
                    self.add_to_grad(*gamma, &dgamma);
                }
                if self.wants_grad(*beta) {
                    self.add_to_grad(*beta, &dbeta);
                }
            }
            Op::GatherRows(table, ids) => {
                if self.wants_grad(*table) {
                    let s = self.shape(*table).to_vec();
                    let cols = s[1];
                    let mut dt = vec![0.0; s[0] * cols];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] += grad[r * cols + j];
                        }
                    }
                    self.add_to_grad(*table, &dt);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants_grad(*x) {
                    self.add_to_grad(*x, grad);
                }
                if self.wants_grad(*b) {
                    let cols = self.shape(*b)[0];
                    let rows = grad.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += grad[r * cols + j];
                        }
                    }
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Diag(a) => {
                if self.wants_grad(*a) {
                    let n = self.shape(*a)[0];
                    let mut da = vec![0.0; n * n];
                    for i in 0..n {
                        da[i * n + i] = grad[i];
                    }
                    self.add_to_grad(*a, &da);
                }
            }
            Op::ExpandCols(v, n) => {
                if self.wants_grad(*v) {
                    let m = self.shape(*v)[0];
                    let mut dv = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..*n {
                            dv[i] += grad[i * n + j];
                        }
                    }
                    self.add_to_grad(*v, &dv);
                }
            }
            Op::NormalizeRows(a) => {
                if self.wants_grad(*a) {
                    let s = self.shape(*a).to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let src = self.data(*a).to_vec();
                    let out = self.nodes[out_idx].value.data.clone();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &src[r * cols..(r + 1) * cols];
                        let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
                        if norm < ZERO_NORM_EPS {
                            continue; // zero row: zero gradient by convention
                        }
                        let y = &out[r * cols..(r + 1) * cols];
                        let g = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            da[r * cols + j] = (g[j] - y[j] * dot) / norm;
                        }
                    }
                    self.add_to_grad(*a, &da);
                }
            }
        }
    }

    /// Shared grad routing for add/sub/mul with optional scalar broadcast:
    /// `target` receives `combine(a_i, b_i, grad_i)` summed over broadcast.
    fn binary_backward(
        &mut self,
        target: NodeId,
        grad: &[f64],
        combine: impl Fn(f64, f64, f64) -> f64,
        a: NodeId,
        b: NodeId,
        _out_idx: usize,
    ) {
        if !self.wants_grad(target) {
            return;
        }
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let n = grad.len();
        let target_len = self.value(target).numel();
        let mut dt = vec![0.0; target_len];
        for i in 0..n {
            let x = if na == 1 { da[0] } else { da[i] };
            let y = if nb == 1 { db[0] } else { db[i] };
            let c = combine(x, y, grad[i]);
            let idx = if target_len == 1 { 0 } else { i };
            dt[idx] += c;
        }
        self.add_to_grad(target, &dt);
    }
}

/// Norms below this are treated as zero when normalizing rows; the row maps
/// to the zero vector so cosine similarities become 0 rather than NaN.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Conventional finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with step `h`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must build a scalar loss from the given leaf. Inputs should sit at
/// least `h` away from activation kinks (relu at 0, max ties); the
/// subgradient convention there makes the comparison meaningless.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(data.to_vec(), &x.shape)?);
        let out = f(&mut g, leaf)?;
        if !g.value(out).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: g.shape(out).to_vec(),
            });
        }
        Ok(g.data(out)[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::with_grad(x.data.clone(), &x.shape)?);
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.data.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(data, shape).unwrap()
    }

    /// Nudge values away from zero so relu kinks never sit within h.
    fn away_from_kinks(t: &mut Tensor, margin: f64) {
        for v in t.data.iter_mut() {
            if v.abs() < margin {
                *v = margin * if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])
            .unwrap();
        let x = g.constant(vec![3.0, -1.0, 2.0, 5.0], &[2, 2]).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.0; 4], &[2, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b_fixed = rand_tensor(&mut rng, &[4, 2]);
        let err = grad_check(
            |g, x| {
                let b = g.leaf(b_fixed.clone());
                let c = g.matmul(x, b)?;
                g.sum(c, None)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul grad err {err}");
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.tanh(x);
        assert_eq!(g.data(y), &[0.0]);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.5, 1.0, 2.0], &[3]).unwrap();
        let e = g.exp(x);
        let back = g.log(e).unwrap();
        for (a, b) in g.data(back).iter().zip(g.data(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -0.5], &[2]).unwrap();
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn mean_axis0() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 3.0, 5.0, 7.0], &[2, 2]).unwrap();
        let m = g.mean(x, Some(0)).unwrap();
        assert_eq!(g.shape(m), &[2]);
        assert_eq!(g.data(m), &[3.0, 5.0]);
    }

    #[test]
    fn sum_of_zeros() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let s = g.sum(x, None).unwrap();
        assert_eq!(g.data(s), &[0.0]);
    }

    #[test]
    fn reduce_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(vec![], &[0, 3]).unwrap();
        assert!(g.sum(x, Some(0)).is_err());
        assert!(g.mean(x, Some(0)).is_err());
    }

    #[test]
    fn mean_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 4]);
        for axis in [None, Some(0), Some(1)] {
            let err = grad_check(
                |g, x| {
                    let m = g.mean(x, axis)?;
                    let sq = g.mul(m, m)?;
                    g.sum(sq, None)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "mean axis {axis:?} grad err {err}");
        }
    }

    #[test]
    fn concat_basics() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = g.constant(vec![3.0], &[1]).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);

        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(g.data(single), g.data(a));
    }

    #[test]
    fn concat_backward_routes_one_hot() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::with_grad(vec![1.0, 2.0], &[2]).unwrap());
        let b = g.leaf(Tensor::with_grad(vec![3.0, 4.0], &[2]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        // one-hot on position 2 => gradient lands entirely in b[0]
        let mask = g.constant(vec![0.0, 0.0, 1.0, 0.0], &[4]).unwrap();
        let picked = g.mul(c, mask).unwrap();
        let loss = g.sum(picked, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_axis1_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = g.constant(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(c, 1, 0, 2).unwrap();
        assert_eq!(g.data(back), g.data(a));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = g.constant(vec![1000.0, 0.0], &[1, 2]).unwrap();
        let s2 = g.softmax_rows(big).unwrap();
        let d = g.data(s2);
        assert!(d[0].is_finite() && (d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let id = g.leaf(x);
        let s = g.softmax_rows(id).unwrap();
        for r in 0..4 {
            let sum: f64 = g.data(s)[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(
            |g, x| {
                let s = g.softmax_rows(x)?;
                let wid = g.leaf(w.clone());
                let p = g.mul(s, wid)?;
                g.sum(p, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax grad err {err}");
    }

    #[test]
    fn masked_softmax_excludes_positions() {
        let mut g = Graph::new();
        let x = g.constant(vec![5.0, 1.0, 1.0], &[1, 3]).unwrap();
        let s = g.softmax_rows_masked(x, &[false, true, true]).unwrap();
        let d = g.data(s);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.5).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);

        let all_masked = g.softmax_rows_masked(x, &[false, false, false]);
        assert!(all_masked.is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.0, 2.0, 3.0], &[3]).unwrap());
        let loss = g.sum(x, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_zero_scale_is_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.0, 2.0], &[2]).unwrap());
        let z = g.scale(x, 0.0);
        let loss = g.sum(z, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.0], &[1]).unwrap());
        let loss = g.scale(x, 2.0);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::DoubleBackward)));
        g.reset_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_non_scalar_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.0, 2.0], &[2]).unwrap());
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = rand_tensor(&mut rng, &[3, 4]);
        away_from_kinks(&mut x, 1e-3);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let err = grad_check(
            |g, x| {
                let wid = g.leaf(w.clone());
                let h = g.matmul(x, wid)?;
                let r = g.relu(h);
                g.mean(r, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "chain grad err {err}");
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::new(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sum of squares err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|g, _x| Ok(g.scalar(42.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gather_rows_and_backward() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::with_grad(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap());
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum(rows, None).unwrap();
        g.backward(loss).unwrap();
        // row 2 gathered twice: accumulated gradient
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let bad = g.gather_rows(table, &[3]);
        assert!(bad.is_err());
    }

    #[test]
    fn layer_norm_normalizes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[2, 5]);
        let gamma = Tensor::new(vec![1.0; 5], &[5]).unwrap();
        let beta = Tensor::new(vec![0.0; 5], &[5]).unwrap();
        {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone());
            let gid = g.leaf(gamma.clone());
            let bid = g.leaf(beta.clone());
            let y = g.layer_norm(xid, gid, bid, 1e-5).unwrap();
            for r in 0..2 {
                let row = &g.data(y)[r * 5..(r + 1) * 5];
                let mean: f64 = row.iter().sum::<f64>() / 5.0;
                assert!(mean.abs() < 1e-10);
            }
        }
        let err = grad_check(
            |g, x| {
                let gid = g.leaf(Tensor::new(vec![0.7, 1.3, 0.9, 1.1, 1.0], &[5]).unwrap());
                let bid = g.leaf(Tensor::new(vec![0.1; 5], &[5]).unwrap());
                let y = g.layer_norm(x, gid, bid, 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm dx err {err}");

        // gamma/beta side
        let g_t = Tensor::new(vec![0.7, 1.3, 0.9, 1.1, 1.0], &[5]).unwrap();
        let err = grad_check(
            |g, gamma| {
                let xid = g.leaf(x.clone());
                let bid = g.leaf(Tensor::new(vec![0.1; 5], &[5]).unwrap());
                let y = g.layer_norm(xid, gamma, bid, 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq, None)
            },
            &g_t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm dgamma err {err}");
    }

    #[test]
    fn normalize_rows_unit_and_zero_guard() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![3.0, 4.0, 0.0, 0.0], &[2, 2])
            .unwrap();
        let y = g.normalize_rows(x).unwrap();
        let d = g.data(y);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn normalize_rows_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(
            |g, x| {
                let y = g.normalize_rows(x)?;
                let wid = g.leaf(w.clone());
                let p = g.mul(y, wid)?;
                g.sum(p, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "normalize_rows grad err {err}");
    }

    #[test]
    fn diag_expand_slice_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let err = grad_check(
            |g, x| {
                let d = g.diag(x)?;
                let e = g.expand_cols(d, 3)?;
                let t = g.transpose(e)?;
                let s = g.slice(t, 1, 1, 2)?;
                let sq = g.mul(s, s)?;
                g.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "diag/expand/slice/transpose grad err {err}");
    }

    #[test]
    fn max_reduce_forward_and_grad_away_from_ties() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 5.0, 2.0, 4.0, 3.0, 0.0], &[2, 3]).unwrap();
        let m = g.max(x, Some(1)).unwrap();
        assert_eq!(g.data(m), &[5.0, 4.0]);

        let t = Tensor::new(vec![1.0, 5.0, 2.0, 4.0, 3.0, 0.0], &[2, 3]).unwrap();
        let err = grad_check(
            |g, x| {
                let m = g.max(x, Some(1))?;
                let sq = g.mul(m, m)?;
                g.sum(sq, None)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max grad err {err}");
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.0, 2.0, 3.0], &[3]).unwrap());
        let s = g.leaf(Tensor::with_grad(vec![2.0], &[1]).unwrap());
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.data(y), &[2.0, 4.0, 6.0]);
        let loss = g.sum(y, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(s).unwrap(), &[6.0]); // 1+2+3
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let run = |x: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let id = g.leaf(x.clone());
            let s = g.softmax_rows(id).unwrap();
            let t = g.tanh(s);
            let m = g.matmul(t, id).unwrap();
            g.data(m).to_vec()
        };
        let a = run(&x);
        let b = run(&x);
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn mul_grad_second_power_rule() {
        // loss = sum(x*x) => grad = 2x, both operands are the same node
        let mut g = Graph::new();
        let x = g.leaf(Tensor::with_grad(vec![1.5, -2.0], &[2]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0]);
    }
}
