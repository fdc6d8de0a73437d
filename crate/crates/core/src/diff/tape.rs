//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//! Parameters are bound lazily with [`Tape::param`]; binding the same
//! parameter twice returns the same node so gradient contributions from
//! every use accumulate in one place.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Scale(f64),
    AddConst(f64),
    Square,
    Sigmoid,
    Tanh,
    Exp,
    LeakyRelu(f64),
    /// `ln(max(x, floor))`; zero gradient where clamped.
    LogClamp(f64),
}

/// Geometry of a 2-D convolution over channel-major flattened images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_height() * self.out_width()
    }

    pub fn weight_cols(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMulT(Var, Var),
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    RepeatRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var, f64),
    RowNorm(Var),
    Cosine(Var, Var, f64),
    SimFeatures(Var, Vec<bool>),
    Conv2d(Var, Var, Var, ConvGeom),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMulT(..) => "matmul_t",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Binary(BinaryOp::Div, ..) => "div",
            Op::Unary(u, _) => match u {
                UnaryOp::Neg => "neg",
                UnaryOp::Scale(_) => "scale",
                UnaryOp::AddConst(_) => "add_const",
                UnaryOp::Square => "square",
                UnaryOp::Sigmoid => "sigmoid",
                UnaryOp::Tanh => "tanh",
                UnaryOp::Exp => "exp",
                UnaryOp::LeakyRelu(_) => "leaky_relu",
                UnaryOp::LogClamp(_) => "log",
            },
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::PickPerRow(..) => "pick_per_row",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Normalize(..) => "layer_norm",
            Op::RowNorm(_) => "row_norm",
            Op::Cosine(..) => "cosine",
            Op::SimFeatures(..) => "sim_features",
            Op::Conv2d(..) => "conv2d",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradients, aligned with the [`ParamStore`] that was bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Gradients for every node, for inspecting non-parameter inputs.
pub struct NodeGradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl NodeGradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recorded computation graph bound to a parameter snapshot.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    memo: HashMap<(ParamId, u8), Var>,
    fault: Option<(String, String)>,
}

fn bcast(n: usize, i: usize) -> usize {
    if n == 1 {
        0
    } else {
        i
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            bound: HashMap::new(),
            memo: HashMap::new(),
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First non-finite forward result, as `(op, detail)`.
    pub fn fault(&self) -> Option<&(String, String)> {
        self.fault.as_ref()
    }

    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some((op, detail)) => Err(Error::numeric(op, detail.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((op.name().to_string(), "non-finite forward value".into()));
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_fault(&mut self, op: &str, detail: String) {
        if self.fault.is_none() {
            self.fault = Some((op.to_string(), detail));
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(Op::Param(id), value);
        self.bound.insert(id, v);
        v
    }

    /// Cache for values derived from one parameter (e.g. a weight-normalized
    /// matrix), keyed by the parameter and a caller-chosen tag.
    pub fn memoized(&mut self, key: (ParamId, u8), build: impl FnOnce(&mut Self) -> Var) -> Var {
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let v = build(self);
        self.memo.insert(key, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `x · wᵀ` for `x: b×n`, `w: m×n`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (b, n) = self.dims(x);
        let (m, n2) = self.dims(w);
        assert_eq!(n, n2, "matmul_t inner dimension");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            let xr = &xv[i * n..(i + 1) * n];
            for j in 0..m {
                let wr = &wv[j * n..(j + 1) * n];
                out[i * m + j] = dot(xr, wr);
            }
        }
        self.push(Op::MatMulT(x, w), Tensor::matrix(b, m, out))
    }

    /// `a · c` for `a: b×k`, `c: k×m`.
    pub fn matmul(&mut self, a: Var, c: Var) -> Var {
        let (b, k) = self.dims(a);
        let (k2, m) = self.dims(c);
        assert_eq!(k, k2, "matmul inner dimension");
        let av = self.value(a).data();
        let cv = self.value(c).data();
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let cr = &cv[p * m..(p + 1) * m];
                let or = &mut out[i * m..(i + 1) * m];
                for (o, &cc) in or.iter_mut().zip(cr) {
                    *o += s * cc;
                }
            }
        }
        self.push(Op::MatMul(a, c), Tensor::matrix(b, m, out))
    }

    /// Elementwise binary op with row/column broadcasting of either side.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let r = ra.max(rb);
        let c = ca.max(cb);
        assert!(ra == r || ra == 1, "broadcast rows {ra} vs {rb}");
        assert!(rb == r || rb == 1, "broadcast rows {ra} vs {rb}");
        assert!(ca == c || ca == 1, "broadcast cols {ca} vs {cb}");
        assert!(cb == c || cb == 1, "broadcast cols {ca} vs {cb}");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[bcast(ra, i) * ca + bcast(ca, j)];
                let y = bv[bcast(rb, i) * cb + bcast(cb, j)];
                out.push(match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                });
            }
        }
        self.push(Op::Binary(op, a, b), Tensor::matrix(r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let f = |x: f64| match op {
            UnaryOp::Neg => -x,
            UnaryOp::Scale(s) => s * x,
            UnaryOp::AddConst(s) => s + x,
            UnaryOp::Square => x * x,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryOp::LogClamp(floor) => x.max(floor).ln(),
        };
        let data = src.data().iter().map(|&x| f(x)).collect();
        self.push(Op::Unary(op, a), Tensor::matrix(r, c, data))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(UnaryOp::Scale(s), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along each row: `r×c -> r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::matrix(r, 1, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.dims(p).0, r, "concat_cols row mismatch");
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows col mismatch");
            out.extend_from_slice(self.value(p).data());
            r += pr;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(r, c, out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a, start), Tensor::matrix(r, len, out))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (_, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Op::GatherRows(a, idx.to_vec()), Tensor::matrix(idx.len(), c, out))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                out.push(src[i * c + j]);
            }
        }
        self.push(Op::GatherCols(a, idx.to_vec()), Tensor::matrix(r, idx.len(), out))
    }

    /// Selects `a[i, idx[i]]` for each row: `r×c -> r×1`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r, idx.len(), "pick_per_row length");
        let src = self.value(a).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        self.push(Op::PickPerRow(a, idx.to_vec()), Tensor::matrix(r, 1, out))
    }

    /// Tiles a `1×c` row into `n×c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r, 1, "repeat_rows expects a single row");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        self.push(Op::RepeatRows(a), Tensor::matrix(n, c, out))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(Op::Softmax(a), Tensor::matrix(r, c, out))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmax(a), Tensor::matrix(r, c, out))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mu, inv) = moments(row, eps);
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv;
            }
        }
        self.push(Op::Normalize(a, eps), Tensor::matrix(r, c, out))
    }

    /// Euclidean norm of each row: `r×c -> r×1`. Norms below 1e-12 are a
    /// numeric fault since callers divide by them.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let out: Vec<f64> = (0..r)
            .map(|i| dot(&src[i * c..(i + 1) * c], &src[i * c..(i + 1) * c]).sqrt())
            .collect();
        if let Some((row, n)) = out.iter().enumerate().find(|(_, &n)| n < 1e-12) {
            self.record_fault("row_norm", format!("row {row} has norm {n:e} < 1e-12"));
        }
        self.push(Op::RowNorm(a), Tensor::matrix(r, 1, out))
    }

    /// Pairwise cosine similarity between rows of `x: n×d` and `y: m×d`,
    /// with norms floored at `eps`.
    pub fn cosine(&mut self, x: Var, y: Var, eps: f64) -> Var {
        let (n, d) = self.dims(x);
        let (m, d2) = self.dims(y);
        assert_eq!(d, d2, "cosine dimension");
        let xv = self.value(x).data();
        let yv = self.value(y).data();
        let nx: Vec<f64> = (0..n).map(|i| norm(&xv[i * d..(i + 1) * d]).max(eps)).collect();
        let ny: Vec<f64> = (0..m).map(|j| norm(&yv[j * d..(j + 1) * d]).max(eps)).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&xv[i * d..(i + 1) * d], &yv[j * d..(j + 1) * d]) / (nx[i] * ny[j]);
            }
        }
        self.push(Op::Cosine(x, y, eps), Tensor::matrix(n, m, out))
    }

    /// Six similarity statistics per row of a square similarity matrix:
    /// `[max, mean, min]` over known columns, then over unknown columns,
    /// never counting the diagonal. Empty groups yield zeros.
    pub fn sim_features(&mut self, sim: Var, known: &[bool]) -> Var {
        let (n, n2) = self.dims(sim);
        assert_eq!(n, n2, "sim_features expects a square matrix");
        assert_eq!(n, known.len(), "sim_features mask length");
        let s = self.value(sim).data();
        let mut out = vec![0.0; n * 6];
        for i in 0..n {
            for (group, flag) in [(0usize, true), (1, false)] {
                let stats = group_stats(&s[i * n..(i + 1) * n], i, known, flag);
                if let Some(st) = stats {
                    out[i * 6 + group * 3] = st.max;
                    out[i * 6 + group * 3 + 1] = st.mean;
                    out[i * 6 + group * 3 + 2] = st.min;
                }
            }
        }
        self.push(Op::SimFeatures(sim, known.to_vec()), Tensor::matrix(n, 6, out))
    }

    /// Convolution with per-channel bias over `b × (C·H·W)` inputs.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let (b, len) = self.dims(input);
        assert_eq!(len, geom.in_len(), "conv2d input length");
        assert_eq!(
            self.dims(weight),
            (geom.out_ch, geom.weight_cols()),
            "conv2d weight shape"
        );
        assert_eq!(self.value(bias).len(), geom.out_ch, "conv2d bias length");
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let out_len = geom.out_len();
        let mut out = vec![0.0; b * out_len];
        for n in 0..b {
            let xs = &x[n * len..(n + 1) * len];
            let os = &mut out[n * out_len..(n + 1) * out_len];
            for oc in 0..geom.out_ch {
                let wrow = &w[oc * geom.weight_cols()..(oc + 1) * geom.weight_cols()];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[oc];
                        conv_taps(&geom, oy, ox, |ic, ky, kx, src| {
                            acc += wrow[(ic * geom.kernel + ky) * geom.kernel + kx] * xs[src];
                        });
                        os[(oc * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(Op::Conv2d(input, weight, bias, geom), Tensor::matrix(b, out_len, out))
    }

    /// Gradients of a scalar node with respect to every bound parameter.
    /// Parameters that do not influence `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = Gradients::zeros_like(self.params);
        for (&id, &v) in &self.bound {
            if let Some(g) = &node_grads.grads[v.0] {
                out.grads[id.index()].data_mut().copy_from_slice(g);
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward_nodes(&self, loss: Var) -> Result<NodeGradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.check()?;
        // Nodes recorded after `loss` cannot influence it and keep `None`.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(self.nodes[idx].op.name(), "non-finite gradient"));
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(NodeGradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let (r, c) = (out.rows(), out.cols());
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMulT(x, w) => {
                let (b, n) = self.dims(*x);
                let m = self.dims(*w).0;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![0.0; b * n];
                let mut gw = vec![0.0; m * n];
                for i in 0..b {
                    for j in 0..m {
                        let s = g[i * m + j];
                        if s == 0.0 {
                            continue;
                        }
                        axpy(s, &wv[j * n..(j + 1) * n], &mut gx[i * n..(i + 1) * n]);
                        axpy(s, &xv[i * n..(i + 1) * n], &mut gw[j * n..(j + 1) * n]);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
            }
            Op::MatMul(a, cm) => {
                let (b, k) = self.dims(*a);
                let m = self.dims(*cm).1;
                let av = self.value(*a).data();
                let cv = self.value(*cm).data();
                let mut ga = vec![0.0; b * k];
                let mut gc = vec![0.0; k * m];
                for i in 0..b {
                    let gr = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        ga[i * k + p] = dot(gr, &cv[p * m..(p + 1) * m]);
                        axpy(av[i * k + p], gr, &mut gc[p * m..(p + 1) * m]);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *cm, gc);
            }
            Op::Binary(op, a, b) => {
                let (ra, ca) = self.dims(*a);
                let (rb, cb) = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![0.0; ra * ca];
                let mut gb = vec![0.0; rb * cb];
                for i in 0..r {
                    for j in 0..c {
                        let ia = bcast(ra, i) * ca + bcast(ca, j);
                        let ib = bcast(rb, i) * cb + bcast(cb, j);
                        let gij = g[i * c + j];
                        let (x, y) = (av[ia], bv[ib]);
                        let (da, db) = match op {
                            BinaryOp::Add => (gij, gij),
                            BinaryOp::Sub => (gij, -gij),
                            BinaryOp::Mul => (gij * y, gij * x),
                            BinaryOp::Div => (gij / y, -gij * x / (y * y)),
                        };
                        ga[ia] += da;
                        gb[ib] += db;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Unary(op, a) => {
                let xv = self.value(*a).data();
                let yv = out.data();
                let ga = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&x, &y))| {
                        gi * match op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Scale(s) => *s,
                            UnaryOp::AddConst(_) => 1.0,
                            UnaryOp::Square => 2.0 * x,
                            UnaryOp::Sigmoid => y * (1.0 - y),
                            UnaryOp::Tanh => 1.0 - y * y,
                            UnaryOp::Exp => y,
                            UnaryOp::LeakyRelu(slope) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    *slope
                                }
                            }
                            UnaryOp::LogClamp(floor) => {
                                if x > *floor {
                                    1.0 / x
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumCols(a) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![0.0; ar * ac];
                for i in 0..ar {
                    ga[i * ac..(i + 1) * ac].iter_mut().for_each(|v| *v = g[i]);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                    }
                    accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![0.0; ar * ac];
                for i in 0..ar {
                    ga[i * ac + start..i * ac + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx_list) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![0.0; ar * ac];
                for (k, &i) in idx_list.iter().enumerate() {
                    axpy(1.0, &g[k * c..(k + 1) * c], &mut ga[i * ac..(i + 1) * ac]);
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx_list) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![0.0; ar * ac];
                for i in 0..ar {
                    for (k, &j) in idx_list.iter().enumerate() {
                        ga[i * ac + j] += g[i * c + k];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, idx_list) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![0.0; ar * ac];
                for (i, &j) in idx_list.iter().enumerate() {
                    ga[i * ac + j] += g[i];
                }
                accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a) => {
                let mut ga = vec![0.0; c];
                for i in 0..r {
                    axpy(1.0, &g[i * c..(i + 1) * c], &mut ga);
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gr[j] - y[i * c + j].exp() * s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Normalize(a, eps) => {
                let xv = self.value(*a).data();
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let (_, inv) = moments(&xv[i * c..(i + 1) * c], *eps);
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = dot(gr, yr) / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = inv * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowNorm(a) => {
                let (ar, ac) = self.dims(*a);
                let xv = self.value(*a).data();
                let nv = out.data();
                let mut ga = vec![0.0; ar * ac];
                for i in 0..ar {
                    if nv[i] > 0.0 {
                        for j in 0..ac {
                            ga[i * ac + j] = g[i] * xv[i * ac + j] / nv[i];
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Cosine(x, y, eps) => {
                let (n, d) = self.dims(*x);
                let m = self.dims(*y).0;
                let xv = self.value(*x).data();
                let yv = self.value(*y).data();
                let cv = out.data();
                let rx: Vec<f64> = (0..n).map(|i| norm(&xv[i * d..(i + 1) * d])).collect();
                let ry: Vec<f64> = (0..m).map(|j| norm(&yv[j * d..(j + 1) * d])).collect();
                let mut gx = vec![0.0; n * d];
                let mut gy = vec![0.0; m * d];
                for i in 0..n {
                    let nx = rx[i].max(*eps);
                    let xi = &xv[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let ny = ry[j].max(*eps);
                        let yj = &yv[j * d..(j + 1) * d];
                        let cij = cv[i * m + j];
                        let inv = gij / (nx * ny);
                        // d cos / d x_i = y_j / (nx ny) - cos x_i / nx², the
                        // second term only while the norm is above the floor.
                        let kx = if rx[i] > *eps { gij * cij / (nx * nx) } else { 0.0 };
                        let ky = if ry[j] > *eps { gij * cij / (ny * ny) } else { 0.0 };
                        let gxi = &mut gx[i * d..(i + 1) * d];
                        for k in 0..d {
                            gxi[k] += inv * yj[k] - kx * xi[k];
                        }
                        let gyj = &mut gy[j * d..(j + 1) * d];
                        for k in 0..d {
                            gyj[k] += inv * xi[k] - ky * yj[k];
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *y, gy);
            }
            Op::SimFeatures(sim, known) => {
                let n = known.len();
                let s = self.value(*sim).data();
                let mut gs = vec![0.0; n * n];
                for i in 0..n {
                    for (group, flag) in [(0usize, true), (1, false)] {
                        let row = &s[i * n..(i + 1) * n];
                        if let Some(st) = group_stats(row, i, known, flag) {
                            gs[i * n + st.argmax] += g[i * 6 + group * 3];
                            let share = g[i * 6 + group * 3 + 1] / st.count as f64;
                            for j in 0..n {
                                if j != i && known[j] == flag {
                                    gs[i * n + j] += share;
                                }
                            }
                            gs[i * n + st.argmin] += g[i * 6 + group * 3 + 2];
                        }
                    }
                }
                accumulate(grads, *sim, gs);
            }
            Op::Conv2d(input, weight, bias, geom) => {
                let (b, len) = self.dims(*input);
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let wc = geom.weight_cols();
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let out_len = geom.out_len();
                let mut gx = vec![0.0; b * len];
                let mut gw = vec![0.0; geom.out_ch * wc];
                let mut gb = vec![0.0; geom.out_ch];
                for nidx in 0..b {
                    let xs = &x[nidx * len..(nidx + 1) * len];
                    let gxs = &mut gx[nidx * len..(nidx + 1) * len];
                    let gs = &g[nidx * out_len..(nidx + 1) * out_len];
                    for oc in 0..geom.out_ch {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = gs[(oc * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[oc] += go;
                                conv_taps(geom, oy, ox, |ic, ky, kx, src| {
                                    let wi = oc * wc + (ic * geom.kernel + ky) * geom.kernel + kx;
                                    gw[wi] += go * xs[src];
                                    gxs[src] += go * w[wi];
                                });
                            }
                        }
                    }
                }
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                accumulate(grads, *bias, gb);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => axpy(1.0, &g, existing),
        slot @ None => *slot = Some(g),
    }
}

fn conv_taps(geom: &ConvGeom, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ic in 0..geom.in_ch {
        for ky in 0..geom.kernel {
            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
            if iy < 0 || iy >= geom.height as isize {
                continue;
            }
            for kx in 0..geom.kernel {
                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                if ix < 0 || ix >= geom.width as isize {
                    continue;
                }
                f(ic, ky, kx, (ic * geom.height + iy as usize) * geom.width + ix as usize);
            }
        }
    }
}

struct GroupStats {
    max: f64,
    mean: f64,
    min: f64,
    argmax: usize,
    argmin: usize,
    count: usize,
}

fn group_stats(row: &[f64], skip: usize, known: &[bool], flag: bool) -> Option<GroupStats> {
    let mut st: Option<GroupStats> = None;
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if j == skip || known[j] != flag {
            continue;
        }
        total += v;
        match &mut st {
            None => {
                st = Some(GroupStats {
                    max: v,
                    mean: 0.0,
                    min: v,
                    argmax: j,
                    argmin: j,
                    count: 1,
                })
            }
            Some(s) => {
                if v > s.max {
                    s.max = v;
                    s.argmax = j;
                }
                if v < s.min {
                    s.min = v;
                    s.argmin = j;
                }
                s.count += 1;
            }
        }
    }
    st.map(|mut s| {
        s.mean = total / s.count as f64;
        s
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// The six `[max, mean, min]` statistics of one similarity row against known
/// and unknown columns, skipping `skip`; empty groups give zeros.
pub(crate) fn sim_row_features(row: &[f64], skip: usize, known: &[bool]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (group, flag) in [(0usize, true), (1, false)] {
        if let Some(st) = group_stats(row, skip, known, flag) {
            out[group * 3] = st.max;
            out[group * 3 + 1] = st.mean;
            out[group * 3 + 2] = st.min;
        }
    }
    out
}
