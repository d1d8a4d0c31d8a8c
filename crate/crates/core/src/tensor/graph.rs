//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is evaluated eagerly when it is recorded, so `value(id)` is
//! available immediately. `backward` walks the tape in reverse creation
//! order, which is a valid reverse topological order because inputs always
//! precede the nodes that consume them.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows belonging to one packed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    fn end(&self) -> usize {
        self.start + self.len
    }
}

enum Op<T: Scalar> {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<T>>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumOverRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        row_segment: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Nll {
        probs: NodeId,
        targets: Vec<usize>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::DivRows(..) => "div_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CausalAttention { .. } => "causal_attention",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumOverRows(_) => "sum_over_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Nll { .. } => "nll",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.by_name.insert(name.into(), grad);
    }

    /// Adds `other` into `self` (gradient accumulation).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_name.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(Tensor::all_finite)
    }
}

/// A recorded computation. Build it with the op methods, read values with
/// [`Graph::value`], and differentiate a scalar node with [`Graph::backward`].
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite() || matches!(op, Op::Log(_) | Op::Div(..) | Op::DivRows(..) | Op::Input | Op::Param(_)),
            "non-finite output from `{}`",
            op.name()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let v = self.value(id);
        match v.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(self.shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Named trainable leaf; its gradient is reported by `backward`.
    pub fn parameter(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(name.to_string()), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
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

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a row vector (bias) to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.cols();
        if vb.len() != c {
            return Err(self.shape_err("add_row", format!("{:?} + row {:?}", vx.shape(), vb.shape())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Divides row `i` of `x` by `s[i]`.
    pub fn div_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let vs = self.value(s);
        let (r, c) = (vx.rows(), vx.cols());
        if vs.len() != r {
            return Err(self.shape_err("div_rows", format!("{:?} / rows {:?}", vx.shape(), vs.shape())));
        }
        let mut data = vx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let d = vs.data()[i];
            for v in row {
                *v /= d;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::DivRows(x, s), rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = t::<T>(GELU_C);
        let a = t::<T>(GELU_A);
        let half = t::<T>(0.5);
        self.unary(
            x,
            |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row {
                *v -= lse;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Row-wise layer normalization (population variance) with affine
    /// parameters `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(self.shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    vx.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = t::<T>(c as f64);
        let eps = t::<T>(eps);
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (i, row) in vx.data().chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(self.shape_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.shape_err("embedding", format!("id {bad} out of range for table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, dim]`; heads split `dim` evenly. Attention
    /// never crosses a segment boundary and position `i` only sees `j <= i`
    /// within its own segment.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
    ) -> Result<NodeId> {
        let (n, d) = self.dims2("causal_attention", q)?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(self.shape_err("causal_attention", "q, k, v must share a shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(self.shape_err("causal_attention", format!("dim {d} not divisible by {heads} heads")));
        }
        check_segments(segments, n).map_err(|m| self.shape_err("causal_attention", m))?;
        let dh = d / heads;
        let scale = t::<T>(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let ld = d as isize;
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = seg.start * d + h * dh;
                let mut s = vec![T::zero(); l * l];
                T::gemm(l, dh, l, scale, &qd[off..], ld, 1, &kd[off..], 1, ld, T::zero(), &mut s, l as isize, 1);
                for i in 0..l {
                    let row = &mut s[i * l..(i + 1) * l];
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = T::zero();
                    }
                }
                T::gemm(l, l, dh, T::one(), &s, l as isize, 1, &vd[off..], ld, 1, T::zero(), &mut out[off..], ld, 1);
                probs.push(s);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        };
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(self.shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if len == 0 || start + len > c {
            return Err(self.shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / t::<T>(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column sums: `[n, m] -> [m]`.
    pub fn sum_over_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c], out).expect("non-empty"), Op::SumOverRows(x), rg)
    }

    /// Per-segment summed cross-entropy of `logits` rows against targets.
    ///
    /// Rows whose target is `None` contribute nothing. Output is `[segments]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        segments: &[Segment],
    ) -> Result<NodeId> {
        let (n, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(self.shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&x| x >= vocab) {
            return Err(self.shape_err("cross_entropy", format!("target {bad} >= vocab {vocab}")));
        }
        check_segments(segments, n).map_err(|m| self.shape_err("cross_entropy", m))?;
        let mut row_segment = vec![None; n];
        for (s, seg) in segments.iter().enumerate() {
            row_segment[seg.start..seg.end()].fill(Some(s));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = vec![T::zero(); segments.len()];
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let (Some(tgt), Some(s)) = (targets[i], row_segment[i]) else {
                continue;
            };
            let lse = log_sum_exp(row);
            out[s] += lse - row[tgt];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(vec![segments.len()], out)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_segment,
                probs,
            },
            rg,
        ))
    }

    /// `-Σ_i log probs[i, targets[i]]` over all rows.
    pub fn nll(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, vocab) = self.dims2("nll", probs)?;
        if targets.len() != n || targets.iter().any(|&x| x >= vocab) {
            return Err(self.shape_err("nll", format!("targets {targets:?} for [{n},{vocab}]")));
        }
        let p = self.value(probs).data();
        let s: T = targets.iter().enumerate().map(|(i, &tg)| -p[i * vocab + tg].ln()).sum();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients of every
    /// parameter leaf that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(name) => match out.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.by_name.insert(name.clone(), g);
                }
            },
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bd = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bd, 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    let ad = self.value(*a).data();
                    T::gemm(k, m, n, T::one(), ad, 1, k as isize, gd, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bd = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bd, k as isize, 1, T::zero(), &mut da, k as isize, 1);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    let ad = self.value(*a).data();
                    T::gemm(n, m, k, T::one(), gd, 1, n as isize, ad, k as isize, 1, T::zero(), &mut db, k as isize, 1);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims(self.value(*x));
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gd[j * r + i];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || gd.to_vec());
                self.acc_if(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || gd.to_vec());
                self.acc_if(grads, *b, || gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_if(grads, *a, || gd.iter().zip(bd).map(|(&g, &y)| g * y).collect());
                self.acc_if(grads, *b, || gd.iter().zip(ad).map(|(&g, &x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_if(grads, *a, || gd.iter().zip(bd).map(|(&g, &y)| g / y).collect());
                self.acc_if(grads, *b, || {
                    gd.iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                });
            }
            Op::AddRow(x, bias) => {
                self.acc_if(grads, *x, || gd.to_vec());
                if self.rg(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::DivRows(x, s) => {
                let vx = self.value(*x);
                let sd = self.value(*s).data();
                let c = vx.cols();
                if self.rg(*x) {
                    let mut dx = gd.to_vec();
                    for (i, row) in dx.chunks_mut(c).enumerate() {
                        for v in row {
                            *v /= sd[i];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*s) {
                    let ds = (0..sd.len())
                        .map(|i| {
                            let dot: T = gd[i * c..(i + 1) * c]
                                .iter()
                                .zip(vx.row(i))
                                .map(|(&g, &x)| g * x)
                                .sum();
                            -dot / (sd[i] * sd[i])
                        })
                        .collect();
                    self.acc(grads, *s, ds);
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, gd.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, gd.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect());
            }
            Op::Gelu(x) => {
                let c = t::<T>(GELU_C);
                let a = t::<T>(GELU_A);
                let half = t::<T>(0.5);
                let three = t::<T>(3.0);
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        g * d
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, gd.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, gd.iter().zip(xd).map(|(&g, &v)| g / v).collect());
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![T::zero(); c];
                    for grow in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    self.acc(grads, *beta, db);
                }
                if self.rg(*x) {
                    let n = t::<T>(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (i, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            dx[i * c + j] = k * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = dims(self.value(*table));
                let mut dt = vec![T::zero(); v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (n, d) = dims(self.value(*q));
                let dh = d / heads;
                let scale = t::<T>(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let ld = d as isize;
                let mut p_iter = probs.iter();
                for seg in segments {
                    let l = seg.len;
                    let li = l as isize;
                    for h in 0..*heads {
                        let p = p_iter.next().expect("one prob block per segment and head");
                        let off = seg.start * d + h * dh;
                        // dV += Pᵀ dO
                        T::gemm(l, l, dh, T::one(), p, 1, li, &gd[off..], ld, 1, T::one(), &mut dv[off..], ld, 1);
                        // dP = dO Vᵀ
                        let mut ds = vec![T::zero(); l * l];
                        T::gemm(l, dh, l, T::one(), &gd[off..], ld, 1, &vd[off..], 1, ld, T::zero(), &mut ds, li, 1);
                        for i in 0..l {
                            let pr = &p[i * l..(i + 1) * l];
                            let dr = &mut ds[i * l..(i + 1) * l];
                            let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                            for x in &mut dr[i + 1..] {
                                *x = T::zero();
                            }
                        }
                        // dQ += scale dS K ; dK += scale dSᵀ Q
                        T::gemm(l, l, dh, scale, &ds, li, 1, &kd[off..], ld, 1, T::one(), &mut dq[off..], ld, 1);
                        T::gemm(l, l, dh, scale, &ds, 1, li, &qd[off..], ld, 1, T::one(), &mut dk[off..], ld, 1);
                    }
                }
                self.acc_if(grads, *q, || dq);
                self.acc_if(grads, *k, || dk);
                self.acc_if(grads, *v, || dv);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * total + col..i * total + col + c]);
                        }
                        self.acc(grads, p, dp);
                    }
                    col += c;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let len = node.value.cols();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![gd[0] / t::<T>(n as f64); n]);
            }
            Op::SumOverRows(x) => {
                let vx = self.value(*x);
                let mut dx = Vec::with_capacity(vx.len());
                for _ in 0..vx.rows() {
                    dx.extend_from_slice(gd);
                }
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_segment,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let mut dx = vec![T::zero(); probs.len()];
                for (i, tgt) in targets.iter().enumerate() {
                    let (Some(tgt), Some(s)) = (*tgt, row_segment[i]) else {
                        continue;
                    };
                    let gs = gd[s];
                    let row = &mut dx[i * vocab..(i + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *d = gs * p;
                    }
                    row[tgt] -= gs;
                }
                self.acc(grads, *logits, dx);
            }
            Op::Nll { probs, targets } => {
                let vp = self.value(*probs);
                let vocab = vp.cols();
                let mut dx = vec![T::zero(); vp.len()];
                for (i, &tg) in targets.iter().enumerate() {
                    dx[i * vocab + tg] = -gd[0] / vp.data()[i * vocab + tg];
                }
                self.acc(grads, *probs, dx);
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce() -> Vec<T>) {
        if self.rg(id) {
            self.acc(grads, id, f());
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Vec<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(id).shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }
}

fn dims<T: Scalar>(v: &Tensor<T>) -> (usize, usize) {
    (v.rows(), v.cols())
}

fn check_segments(segments: &[Segment], rows: usize) -> std::result::Result<(), String> {
    let mut prev_end = 0;
    for s in segments {
        if s.len == 0 || s.start < prev_end || s.end() > rows {
            return Err(format!("bad segment {s:?} for {rows} rows"));
        }
        prev_end = s.end();
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 4]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn nll_of_certain_prediction_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let l = g.nll(p, &[0, 1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn layer_norm_of_one_two_three() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t2(&[vec![1.0, 2.0, 3.0]]));
        let gamma = g.input(Tensor::filled(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        // (x - 2) / sqrt(2/3)
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (v, e) in g.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-8, "{v} vs {e}");
        }
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.parameter("w", t2(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.5, 0.1]]));
        let s = g.softmax(w);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        for &v in grads.get("w").unwrap().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", node: 2, .. }), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let a = g.parameter("a", Tensor::zeros(&[2, 2]));
        let b = g.tanh(a);
        assert!(matches!(g.backward(b), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn attention_respects_segments() {
        // Changing the second segment must not move the first segment's output.
        let mut vals = vec![0.1f64; 4 * 4];
        let build = |vals: &[f64]| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(vec![4, 4], vals.to_vec()).unwrap());
            let y = g
                .causal_attention(x, x, x, 2, &[Segment::new(0, 2), Segment::new(2, 2)])
                .unwrap();
            g.value(y).data()[..8].to_vec()
        };
        vals[0] = 0.7;
        vals[5] = -0.3;
        let before = build(&vals);
        vals[12] = 5.0;
        vals[9] = -2.0;
        let after = build(&vals);
        assert_eq!(before, after);
    }

    #[test]
    fn cross_entropy_sums_per_segment() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 5]));
        let ce = g
            .cross_entropy(x, &[Some(1), None, Some(4)], &[Segment::new(0, 2), Segment::new(2, 1)])
            .unwrap();
        let v = g.value(ce).data();
        assert!((v[0] - 5f64.ln()).abs() < 1e-12);
        assert!((v[1] - 5f64.ln()).abs() < 1e-12);
    }
}
