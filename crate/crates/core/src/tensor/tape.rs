//! Define-by-run computation tape (Wengert list).
//!
//! A fresh tape is built per forward pass. Ops append nodes holding the
//! forward value; `backward` walks the list in reverse, applying each op's
//! backward rule exactly once. Node ids are indices into the list, so inputs
//! always precede their consumers.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// `[n x c] (op) [c]`, the vector applied to every row.
    AddRow,
    MulRow,
    Scale(f64),
    Gelu,
    Relu,
    Exp,
    Silu,
    Softplus,
    /// Per-channel normalization over the sequence (row) axis.
    SeqNorm { eps: f64 },
    /// Per-row RMS normalization over channels.
    RmsNorm { eps: f64 },
    Reduce {
        kind: ReduceKind,
        axis: usize,
        /// For Max: per output element, the winning in-axis index (first on ties).
        argmax: Vec<usize>,
    },
    SumAll,
    Transpose,
    Reshape,
    ConcatRows,
    ConcatCols,
    GatherRows { idx: Vec<usize> },
    RepeatRows { n: usize },
    SliceRows { start: usize },
    SliceCols { start: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires: bool,
}

/// Reverse-mode autodiff tape over dense f64 tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// -- activation scalars -------------------------------------------------------

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// -- matmul kernels (all accumulate into `out`) -------------------------------

pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] * b^T where b is [n x k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k x n] += a^T * b where a is [m x k], b is [m x n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ali * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let requires = match op {
            Op::Leaf => false, // overridden by leaf()
            _ => inputs.iter().any(|id| self.nodes[id.0].requires),
        };
        self.push_with_requires(op, inputs, shape, data, requires)
    }

    fn push_with_requires(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires: bool,
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires,
        });
        self.grads.push(None);
        id
    }

    /// Record a tensor as a leaf. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_with_requires(
            Op::Leaf,
            vec![],
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Record raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                msg: format!("shape holds {} elements", data.len()),
                shape,
            });
        }
        Ok(self.push_with_requires(Op::Leaf, vec![], shape, data, false))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Detached copy of a node's value.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone()).unwrap()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                msg: "expected a rank-2 tensor".into(),
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    // -- arithmetic -----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    fn binary(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<(bool, usize)> {
        // Returns (row_broadcast, ncols). Identical shapes, or b a vector
        // (rank 1, or 1 x c) applied across the rows of a.
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok((false, 0));
        }
        let cols_b = match sb.len() {
            1 => sb[0],
            2 if sb[0] == 1 => sb[1],
            _ => 0,
        };
        if sa.len() == 2 && cols_b == sa[1] {
            return Ok((true, cols_b));
        }
        Err(Error::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (row, _) = self.binary("add", a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        if row {
            let c = bv.len();
            let data = av
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % c])
                .collect();
            Ok(self.push(Op::AddRow, vec![a, b], shape, data))
        } else {
            let data = av.iter().zip(bv).map(|(x, y)| x + y).collect();
            Ok(self.push(Op::Add, vec![a, b], shape, data))
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (row, _) = self.binary("sub", a, b)?;
        if row {
            let neg = self.scale(b, -1.0);
            return self.add(a, neg);
        }
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub, vec![a, b], shape, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (row, _) = self.binary("mul", a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        if row {
            let c = bv.len();
            let data = av
                .iter()
                .enumerate()
                .map(|(i, x)| x * bv[i % c])
                .collect();
            Ok(self.push(Op::MulRow, vec![a, b], shape, data))
        } else {
            let data = av.iter().zip(bv).map(|(x, y)| x * y).collect();
            Ok(self.push(Op::Mul, vec![a, b], shape, data))
        }
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(c), vec![a], shape, data)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        self.push(op, vec![a], shape, data)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Gelu, a, gelu)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Silu, a, |x| x * sigmoid(x))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a, softplus)
    }

    // -- normalization ---------------------------------------------------------

    /// Normalize each channel (column) to zero mean, unit variance over the
    /// sequence (row) axis: `(x - mean_j) / sqrt(var_j + eps)`.
    pub fn seq_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "seq_norm")?;
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "seq_norm",
                msg: "needs at least one row".into(),
                shape: self.nodes[a.0].shape.clone(),
            });
        }
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * c];
        for j in 0..c {
            let mut mean = 0.0;
            for i in 0..n {
                mean += x[i * c + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = x[i * c + j] - mean;
                var += d * d;
            }
            var /= n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                out[i * c + j] = (x[i * c + j] - mean) * inv;
            }
        }
        Ok(self.push(Op::SeqNorm { eps }, vec![a], vec![n, c], out))
    }

    /// Normalize each row by its root-mean-square over channels.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "rms_norm")?;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        Ok(self.push(Op::RmsNorm { eps }, vec![a], vec![n, c], out))
    }

    // -- reductions -------------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::IndexOutOfRange {
                op: "reduce",
                index: axis,
                extent: shape.len(),
            });
        }
        let m = shape[axis];
        if m == 0 {
            return Err(Error::InvalidShape {
                op: "reduce",
                msg: "cannot reduce over an empty axis".into(),
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = x[o * m * inner + i];
                        let mut best_j = 0;
                        for j in 1..m {
                            let v = x[(o * m + j) * inner + i];
                            // ties break to the lowest index: strict >
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_j;
                    }
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += x[(o * m + j) * inner + i];
                        }
                        if kind == ReduceKind::Mean {
                            s /= m as f64;
                        }
                        out[o * inner + i] = s;
                    }
                }
            }
        }
        Ok(self.push(Op::Reduce { kind, axis, argmax }, vec![a], out_shape, out))
    }

    pub fn reduce_max(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    pub fn reduce_mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn reduce_sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(Op::SumAll, vec![a], vec![1], vec![s])
    }

    // -- shape ops ---------------------------------------------------------------

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "transpose")?;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[j * n + i] = x[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![a], vec![c, n], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {} elements", self.nodes[a.0].data.len()),
                shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(Op::Reshape, vec![a], shape, data))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, c0) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(Op::ConcatRows, parts.to_vec(), vec![rows, c0], data))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (n0, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (n, c) = self.dims2(p, "concat_cols")?;
            if n != n0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; n0 * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for i in 0..n0 {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![n0, total], data))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "gather_rows")?;
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
        }
        let x = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Op::GatherRows { idx: idx.to_vec() },
            vec![a],
            vec![idx.len(), c],
            data,
        ))
    }

    /// Tile a vector (`[c]` or `[1 x c]`) into `n` identical rows.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        let c = match s.len() {
            1 => s[0],
            2 if s[0] == 1 => s[1],
            _ => {
                return Err(Error::InvalidShape {
                    op: "repeat_rows",
                    msg: "expected a vector".into(),
                    shape: s.clone(),
                })
            }
        };
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        Ok(self.push(Op::RepeatRows { n }, vec![a], vec![n, c], data))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "slice_rows")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: n,
            });
        }
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { start }, vec![a], vec![len, c], data))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let x = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { start }, vec![a], vec![n, len], data))
    }

    // -- backward ----------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Every op is visited exactly
    /// once per call; leaf gradients accumulate across repeated calls while
    /// interior buffers are reset each time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        {
            let g = self.grads[loss.0].get_or_insert_with(|| vec![0.0; 1]);
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let len = self.nodes[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        let inputs = self.nodes[i].inputs.clone();
        let needs: Vec<bool> = inputs.iter().map(|id| self.nodes[id.0].requires).collect();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if needs[0] {
                    let bdat = self.nodes[b.0].data.clone();
                    mm_nt(gout, &bdat, m, n, k, self.grad_buf(a));
                }
                if needs[1] {
                    let adat = self.nodes[a.0].data.clone();
                    mm_tn(&adat, gout, m, k, n, self.grad_buf(b));
                }
            }
            Op::Add => {
                for (slot, &id) in inputs.iter().enumerate() {
                    if needs[slot] {
                        for (g, d) in self.grad_buf(id).iter_mut().zip(gout) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sub => {
                if needs[0] {
                    for (g, d) in self.grad_buf(inputs[0]).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs[1] {
                    for (g, d) in self.grad_buf(inputs[1]).iter_mut().zip(gout) {
                        *g -= d;
                    }
                }
            }
            Op::AddRow => {
                if needs[0] {
                    for (g, d) in self.grad_buf(inputs[0]).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs[1] {
                    let c = self.nodes[inputs[1].0].data.len();
                    let gb = self.grad_buf(inputs[1]);
                    for (i, d) in gout.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    let bdat = self.nodes[b.0].data.clone();
                    for ((g, d), x) in self.grad_buf(a).iter_mut().zip(gout).zip(&bdat) {
                        *g += d * x;
                    }
                }
                if needs[1] {
                    let adat = self.nodes[a.0].data.clone();
                    for ((g, d), x) in self.grad_buf(b).iter_mut().zip(gout).zip(&adat) {
                        *g += d * x;
                    }
                }
            }
            Op::MulRow => {
                let (a, b) = (inputs[0], inputs[1]);
                let c = self.nodes[b.0].data.len();
                if needs[0] {
                    let bdat = self.nodes[b.0].data.clone();
                    let gb = self.grad_buf(a);
                    for (i, d) in gout.iter().enumerate() {
                        gb[i] += d * bdat[i % c];
                    }
                }
                if needs[1] {
                    let adat = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(b);
                    for (i, d) in gout.iter().enumerate() {
                        gb[i % c] += d * adat[i];
                    }
                }
            }
            Op::Scale(s) => {
                let s = *s;
                if needs[0] {
                    for (g, d) in self.grad_buf(inputs[0]).iter_mut().zip(gout) {
                        *g += s * d;
                    }
                }
            }
            Op::Gelu | Op::Relu | Op::Silu | Op::Softplus => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].data.clone();
                    let deriv: fn(f64) -> f64 = match self.nodes[i].op {
                        Op::Gelu => gelu_deriv,
                        Op::Relu => |v| if v > 0.0 { 1.0 } else { 0.0 },
                        Op::Silu => |v| {
                            let s = sigmoid(v);
                            s * (1.0 + v * (1.0 - s))
                        },
                        Op::Softplus => sigmoid,
                        _ => unreachable!(),
                    };
                    for ((g, d), v) in self.grad_buf(inputs[0]).iter_mut().zip(gout).zip(&x) {
                        *g += d * deriv(*v);
                    }
                }
            }
            Op::Exp => {
                if needs[0] {
                    let y = self.nodes[i].data.clone();
                    for ((g, d), v) in self.grad_buf(inputs[0]).iter_mut().zip(gout).zip(&y) {
                        *g += d * v;
                    }
                }
            }
            Op::SeqNorm { eps } => {
                if needs[0] {
                    let eps = *eps;
                    let n = self.nodes[i].shape[0];
                    let c = self.nodes[i].shape[1];
                    let x = self.nodes[inputs[0].0].data.clone();
                    let y = self.nodes[i].data.clone();
                    let gb = self.grad_buf(inputs[0]);
                    for j in 0..c {
                        let mut mean = 0.0;
                        for r in 0..n {
                            mean += x[r * c + j];
                        }
                        mean /= n as f64;
                        let mut var = 0.0;
                        for r in 0..n {
                            let d = x[r * c + j] - mean;
                            var += d * d;
                        }
                        var /= n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_g = 0.0;
                        let mut sum_gy = 0.0;
                        for r in 0..n {
                            sum_g += gout[r * c + j];
                            sum_gy += gout[r * c + j] * y[r * c + j];
                        }
                        let mg = sum_g / n as f64;
                        let mgy = sum_gy / n as f64;
                        for r in 0..n {
                            gb[r * c + j] +=
                                inv * (gout[r * c + j] - mg - y[r * c + j] * mgy);
                        }
                    }
                }
            }
            Op::RmsNorm { eps } => {
                if needs[0] {
                    let eps = *eps;
                    let n = self.nodes[i].shape[0];
                    let c = self.nodes[i].shape[1];
                    let x = self.nodes[inputs[0].0].data.clone();
                    let gb = self.grad_buf(inputs[0]);
                    for r in 0..n {
                        let row = &x[r * c..(r + 1) * c];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let rms2 = ms + eps;
                        let inv = 1.0 / rms2.sqrt();
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gout[r * c + j] * row[j];
                        }
                        let coef = dot / (c as f64 * rms2);
                        for j in 0..c {
                            gb[r * c + j] += inv * (gout[r * c + j] - row[j] * coef);
                        }
                    }
                }
            }
            Op::Reduce { kind, axis, argmax } => {
                if needs[0] {
                    let kind = *kind;
                    let axis = *axis;
                    let argmax = argmax.clone();
                    let in_shape = self.nodes[inputs[0].0].shape.clone();
                    let m = in_shape[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let gb = self.grad_buf(inputs[0]);
                    match kind {
                        ReduceKind::Max => {
                            for o in 0..outer {
                                for i2 in 0..inner {
                                    let j = argmax[o * inner + i2];
                                    gb[(o * m + j) * inner + i2] += gout[o * inner + i2];
                                }
                            }
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let w = if kind == ReduceKind::Mean {
                                1.0 / m as f64
                            } else {
                                1.0
                            };
                            for o in 0..outer {
                                for i2 in 0..inner {
                                    let d = gout[o * inner + i2] * w;
                                    for j in 0..m {
                                        gb[(o * m + j) * inner + i2] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll => {
                if needs[0] {
                    let d = gout[0];
                    for g in self.grad_buf(inputs[0]).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::Transpose => {
                if needs[0] {
                    let c = self.nodes[i].shape[0]; // output rows = input cols
                    let n = self.nodes[i].shape[1];
                    let gb = self.grad_buf(inputs[0]);
                    for j in 0..c {
                        for r in 0..n {
                            gb[r * c + j] += gout[j * n + r];
                        }
                    }
                }
            }
            Op::Reshape => {
                if needs[0] {
                    for (g, d) in self.grad_buf(inputs[0]).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for (slot, &id) in inputs.iter().enumerate() {
                    let len = self.nodes[id.0].data.len();
                    if needs[slot] {
                        for (g, d) in self.grad_buf(id).iter_mut().zip(&gout[offset..offset + len])
                        {
                            *g += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols => {
                let total = self.nodes[i].shape[1];
                let nrows = self.nodes[i].shape[0];
                let mut offset = 0;
                for (slot, &id) in inputs.iter().enumerate() {
                    let w = self.nodes[id.0].shape[1];
                    if needs[slot] {
                        let gb = self.grad_buf(id);
                        for r in 0..nrows {
                            for j in 0..w {
                                gb[r * w + j] += gout[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { idx } => {
                if needs[0] {
                    let idx = idx.clone();
                    let c = self.nodes[i].shape[1];
                    let gb = self.grad_buf(inputs[0]);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gb[src * c + j] += gout[r * c + j];
                        }
                    }
                }
            }
            Op::RepeatRows { n } => {
                if needs[0] {
                    let n = *n;
                    let c = self.nodes[inputs[0].0].data.len();
                    let gb = self.grad_buf(inputs[0]);
                    for r in 0..n {
                        for j in 0..c {
                            gb[j] += gout[r * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { start } => {
                if needs[0] {
                    let start = *start;
                    let c = self.nodes[i].shape[1];
                    let gb = self.grad_buf(inputs[0]);
                    for (k, d) in gout.iter().enumerate() {
                        gb[start * c + k] += d;
                    }
                }
            }
            Op::SliceCols { start } => {
                if needs[0] {
                    let start = *start;
                    let len = self.nodes[i].shape[1];
                    let nrows = self.nodes[i].shape[0];
                    let c = self.nodes[inputs[0].0].shape[1];
                    let gb = self.grad_buf(inputs[0]);
                    for r in 0..nrows {
                        for j in 0..len {
                            gb[r * c + start + j] += gout[r * len + j];
                        }
                    }
                }
            }
        }
    }
}
