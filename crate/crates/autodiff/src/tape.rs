//! Define-by-run reverse-mode differentiation.
//!
//! Every forward call appends a node holding its output value and enough of
//! its inputs to replay the adjoint. [`Tape::backward`] walks the nodes once in
//! reverse record order. A tape is single-use: build a new one per forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    LeakyRelu { x: Var, slope: T },
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Scale { x: Var, c: T },
    RowSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<T> },
    CosineRows(Var, Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    GatherRows { x: Var, idx: Arc<[usize]> },
    ScatterAddRows { x: Var, idx: Arc<[usize]> },
    SegmentSoftmax { x: Var, seg: Arc<[usize]>, segments: usize },
    HeadDot { a: Var, b: Var, heads: usize },
    HeadScale { v: Var, w: Var, heads: usize },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Mode {
    Eval,
    Train(ChaCha8Rng),
}

/// Recorded computation for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    spent: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for one parameter; `None` when the parameter was never read
    /// during the forward pass.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.grad(*v))
    }

    /// One gradient per parameter in store order. Parameters the loss does
    /// not depend on get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, value)| {
                self.param_grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::eval()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape for inference: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode: Mode::Eval,
            spent: false,
        }
    }

    /// Tape for training; dropout masks come from a ChaCha stream seeded here.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode: Mode::Train(ChaCha8Rng::seed_from_u64(seed)),
            spent: false,
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a parameter as a differentiable leaf. Repeated reads of the
    /// same parameter share one node, so its gradient accumulates.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let v = self
            .leaf(store.get(id).clone(), true)
            .map_err(|_| AutodiffError::NonFinite { op: "param" })?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2()
            .ok_or_else(|| mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims("matmul", a)?;
        let (k2, m) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::zero(),
            &mut out,
            m as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg)
    }

    /// Adds a bias of shape `[m]` or `[1, m]` to every row of `[n, m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims("add_bias", x)?;
        let bias = self.value(b);
        let ok = matches!(bias.shape(), [w] if *w == m) || matches!(bias.shape(), [1, w] if *w == m);
        if !ok {
            return Err(mismatch("add_bias", format!("[{n}, {m}] + {:?}", bias.shape())));
        }
        let bias = bias.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("add_bias", Tensor::new(vec![n, m], out)?, Op::AddBias(x, b), rg)
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let out = src.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.map("leaky_relu", x, Op::LeakyRelu { x, slope }, |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(AutodiffError::Numeric {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        self.map("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map("scale", x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat_cols", "no inputs".into()))?;
        let (n, _) = self.dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != n {
                let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                return Err(mismatch("concat_cols", format!("row counts differ: {shapes:?}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat_cols", Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat_rows", "no inputs".into()))?;
        let (_, m) = self.dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != m {
                let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                return Err(mismatch("concat_rows", format!("column counts differ: {shapes:?}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat_rows", Tensor::new(vec![rows, m], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims("slice_cols", x)?;
        if start > end || end > m {
            return Err(mismatch("slice_cols", format!("[{n}, {m}] columns {start}..{end}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + end]);
        }
        let rg = self.rg(x);
        self.push("slice_cols", Tensor::new(vec![n, w], out)?, Op::SliceCols { x, start }, rg)
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims("row_softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)).take(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push("row_softmax", Tensor::new(vec![n, m], out)?, Op::RowSoftmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64_lossy(t.len() as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Inverted dropout; the identity on eval tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Numeric {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let len = self.value(x).len();
        let rng = match &mut self.mode {
            Mode::Train(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let out = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x, mask }, rg)
    }

    /// Cosine similarity between matching rows, shape `[n, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (n, d) = self.dims("cosine_rows", a)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]);
            let (dot, na, nb) = dot_norms(ra, rb);
            if na == T::zero() || nb == T::zero() {
                return Err(AutodiffError::Numeric {
                    op: "cosine_rows",
                    detail: format!("zero-norm embedding in row {i}"),
                });
            }
            out.push(dot / (na * nb));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("cosine_rows", Tensor::new(vec![n, 1], out)?, Op::CosineRows(a, b), rg)
    }

    /// Summed cross-entropy of row-softmax(logits) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims("softmax_cross_entropy", logits)?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits [{n}, {c}] with {} targets", targets.len()),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c.max(1)).take(n).enumerate() {
            let raw = &src[i * c..(i + 1) * c];
            let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + raw.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - raw[targets[i]];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let src = self.value(logits).data();
        if targets.len() != src.len() || src.is_empty() {
            return Err(mismatch(
                "bce_with_logits",
                format!("{} logits vs {} targets", src.len(), targets.len()),
            ));
        }
        let total: T = src
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_f64_lossy(src.len() as f64);
        let rg = self.rg(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, d) = self.dims("gather_rows", x)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(mismatch("gather_rows", format!("row {bad} out of range for [{n}, {d}]")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        let len = idx.len();
        self.push("gather_rows", Tensor::new(vec![len, d], out)?, Op::GatherRows { x, idx }, rg)
    }

    /// Sums row `e` of `x` into output row `idx[e]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        let (e, d) = self.dims("scatter_add_rows", x)?;
        if idx.len() != e || idx.iter().any(|&i| i >= rows) {
            return Err(mismatch(
                "scatter_add_rows",
                format!("[{e}, {d}] with {} indices into {rows} rows", idx.len()),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * d];
        for (k, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&src[k * d..(k + 1) * d]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push("scatter_add_rows", Tensor::new(vec![rows, d], out)?, Op::ScatterAddRows { x, idx }, rg)
    }

    /// Column-wise softmax within groups of rows sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, segments: usize) -> Result<Var> {
        let (e, h) = self.dims("segment_softmax", x)?;
        if seg.len() != e || seg.iter().any(|&s| s >= segments) {
            return Err(mismatch(
                "segment_softmax",
                format!("[{e}, {h}] with {} segment ids over {segments} segments", seg.len()),
            ));
        }
        let src = self.value(x).data();
        let mut max = vec![T::neg_infinity(); segments * h];
        for (k, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let m = &mut max[s * h + c];
                *m = m.max(src[k * h + c]);
            }
        }
        let mut out = vec![T::zero(); e * h];
        let mut denom = vec![T::zero(); segments * h];
        for (k, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let v = (src[k * h + c] - max[s * h + c]).exp();
                out[k * h + c] = v;
                denom[s * h + c] += v;
            }
        }
        for (k, &s) in seg.iter().enumerate() {
            for c in 0..h {
                out[k * h + c] /= denom[s * h + c];
            }
        }
        let rg = self.rg(x);
        self.push(
            "segment_softmax",
            Tensor::new(vec![e, h], out)?,
            Op::SegmentSoftmax { x, seg, segments },
            rg,
        )
    }

    /// Per-head dot products of matching rows: `[e, heads*dh] x2 -> [e, heads]`.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> Result<Var> {
        self.same_shape("head_dot", a, b)?;
        let (e, w) = self.dims("head_dot", a)?;
        if heads == 0 || w % heads != 0 {
            return Err(mismatch("head_dot", format!("width {w} not divisible by {heads} heads")));
        }
        let dh = w / heads;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(e * heads);
        for k in 0..e {
            for h in 0..heads {
                let off = k * w + h * dh;
                let s: T = ad[off..off + dh].iter().zip(&bd[off..off + dh]).map(|(&x, &y)| x * y).sum();
                out.push(s);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("head_dot", Tensor::new(vec![e, heads], out)?, Op::HeadDot { a, b, heads }, rg)
    }

    /// Scales each head block of `v` (`[e, heads*dh]`) by `w[e, head]`.
    pub fn head_scale(&mut self, v: Var, w: Var) -> Result<Var> {
        let (e, width) = self.dims("head_scale", v)?;
        let (e2, heads) = self.dims("head_scale", w)?;
        if e != e2 || heads == 0 || width % heads != 0 {
            return Err(mismatch("head_scale", format!("[{e}, {width}] by [{e2}, {heads}]")));
        }
        let dh = width / heads;
        let (vd, wd) = (self.value(v).data(), self.value(w).data());
        let mut out = Vec::with_capacity(e * width);
        for k in 0..e {
            for h in 0..heads {
                let s = wd[k * heads + h];
                let off = k * width + h * dh;
                out.extend(vd[off..off + dh].iter().map(|&x| x * s));
            }
        }
        let rg = self.rg(v) || self.rg(w);
        self.push("head_scale", Tensor::new(vec![e, width], out)?, Op::HeadScale { v, w, heads }, rg)
    }

    /// Runs reverse accumulation from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.spent {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulator for input `v`; `None` when `v` does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let node = &self.nodes[v.0];
                if node.requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).dims2().unwrap().1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = acc!(*a) {
                    // dA += dC B^T
                    T::gemm(n, m, k, T::one(), g, m as isize, 1, bd, 1, m as isize, T::one(), da, k as isize, 1);
                }
                if let Some(db) = acc!(*b) {
                    // dB += A^T dC
                    T::gemm(k, n, m, T::one(), ad, 1, k as isize, g, m as isize, 1, T::one(), db, m as isize, 1);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = acc!(*b) {
                    let m = db.len();
                    for row in g.chunks(m.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = acc!(*a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).dims2().unwrap().1;
                    if let Some(dp) = acc!(*p) {
                        for r in 0..n {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(dp) = acc!(*p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.value(*x).dims2().unwrap().1;
                let (n, w) = node.value.dims2().unwrap();
                if let Some(dx) = acc!(*x) {
                    for r in 0..n {
                        add_into(&mut dx[r * m + start..r * m + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(*x).data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += if xv > T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = acc!(*x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let m = node.value.dims2().unwrap().1.max(1);
                if let Some(dx) = acc!(*x) {
                    softmax_backward(dx, g, out, m);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = acc!(*x) {
                    let s = g[0] / T::from_f64_lossy(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let (n, d) = self.value(*a).dims2().unwrap();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); n * d];
                for r in 0..n {
                    let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                    let (_, na, nb) = dot_norms(ra, rb);
                    let (c, gr) = (out[r], g[r]);
                    for j in 0..d {
                        da[r * d + j] = gr * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[r * d + j] = gr * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                if let Some(dst) = acc!(*a) {
                    add_into(dst, &da);
                }
                if let Some(dst) = acc!(*b) {
                    add_into(dst, &db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if let Some(dx) = acc!(*logits) {
                    let c = probs.len() / targets.len().max(1);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { T::one() } else { T::zero() };
                            dx[r * c + j] += g[0] * (probs[r * c + j] - y);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xd = self.value(*logits).data();
                if let Some(dx) = acc!(*logits) {
                    let s = g[0] / T::from_f64_lossy(xd.len() as f64);
                    for ((d, &x), &t) in dx.iter_mut().zip(xd).zip(targets) {
                        let sig = T::one() / (T::one() + (-x).exp());
                        *d += s * (sig - t);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.dims2().unwrap().1;
                if let Some(dx) = acc!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let d = node.value.dims2().unwrap().1;
                if let Some(dx) = acc!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[k * d..(k + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SegmentSoftmax { x, seg, segments } => {
                let h = node.value.dims2().unwrap().1;
                if let Some(dx) = acc!(*x) {
                    let mut dots = vec![T::zero(); segments * h];
                    for (k, &s) in seg.iter().enumerate() {
                        for c in 0..h {
                            dots[s * h + c] += out[k * h + c] * g[k * h + c];
                        }
                    }
                    for (k, &s) in seg.iter().enumerate() {
                        for c in 0..h {
                            let y = out[k * h + c];
                            dx[k * h + c] += y * (g[k * h + c] - dots[s * h + c]);
                        }
                    }
                }
            }
            Op::HeadDot { a, b, heads } => {
                let (e, w) = self.value(*a).dims2().unwrap();
                let dh = w / heads;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                for (target, other) in [(*a, bd), (*b, ad)] {
                    if let Some(dt) = acc!(target) {
                        for k in 0..e {
                            for h in 0..*heads {
                                let gv = g[k * heads + h];
                                let off = k * w + h * dh;
                                for j in off..off + dh {
                                    dt[j] += gv * other[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadScale { v, w, heads } => {
                let (e, width) = self.value(*v).dims2().unwrap();
                let dh = width / heads;
                let (vd, wd) = (self.value(*v).data(), self.value(*w).data());
                if let Some(dv) = acc!(*v) {
                    for k in 0..e {
                        for h in 0..*heads {
                            let s = wd[k * heads + h];
                            let off = k * width + h * dh;
                            for j in off..off + dh {
                                dv[j] += g[j] * s;
                            }
                        }
                    }
                }
                if let Some(dw) = acc!(*w) {
                    for k in 0..e {
                        for h in 0..*heads {
                            let off = k * width + h * dh;
                            let s: T = (off..off + dh).map(|j| g[j] * vd[j]).sum();
                            dw[k * heads + h] += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward<T: Scalar>(dx: &mut [T], g: &[T], y: &[T], m: usize) {
    for ((dr, gr), yr) in dx.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
            *d += yv * (gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::eval();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn leaky_relu_uses_decided_slope() {
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[1, 2], &[-1.0, 2.0])).unwrap();
        let y = tape.leaky_relu(x, crate::LEAKY_RELU_SLOPE).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.row_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AutodiffError::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op_and_shapes() {
        let mut tape = Tape::eval();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_values_abort() {
        let mut tape = Tape::<f32>::eval();
        let err = tape.constant(Tensor::new(vec![1], vec![f32::NAN]).unwrap()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));

        let x = tape.constant(Tensor::new(vec![1], vec![1000.0]).unwrap()).unwrap();
        assert!(matches!(tape.exp(x), Err(AutodiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn unread_parameters_get_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0])).unwrap();
        store.add("unused", t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let mut tape = Tape::eval();
        let p = tape.param(&store, used).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap().param_grads(&store);
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_param_reads_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[1, 1], &[3.0])).unwrap();
        let mut tape = Tape::eval();
        let a = tape.param(&store, id).unwrap();
        let b = tape.param(&store, id).unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param_grad(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let y = tape.dropout(x, 0.3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn cosine_of_zero_row_errors() {
        let mut tape = Tape::<f64>::eval();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let b = tape.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!(matches!(tape.cosine_rows(a, b), Err(AutodiffError::Numeric { .. })));
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[4, 2], &[1.0, 0.0, 2.0, 0.0, 3.0, 5.0, -1.0, 2.0])).unwrap();
        let seg: Arc<[usize]> = vec![0, 0, 1, 1].into();
        let y = tape.segment_softmax(x, seg, 2).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
        assert!((v[4] + v[6] - 1.0).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
    }
}
