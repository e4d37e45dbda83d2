//! Dynamic reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Model
//! parameters are bound by reference (no copy), so a graph borrows the
//! [`ParamStore`] it reads for its whole lifetime. [`Graph::backward`] then
//! replays the record in reverse, adding adjoints into per-node buffers.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Relu(Var),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Im2col {
        x: Var,
        width: usize,
        stride: usize,
        pad: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    /// Scalar loss whose local gradient w.r.t. `x` was computed in the
    /// forward pass.
    Precomputed {
        x: Var,
        dx: Vec<R>,
    },
}

struct Node<'p, R: Clone> {
    value: Cow<'p, [R]>,
    rows: usize,
    cols: usize,
    op: Op<R>,
    needs_grad: bool,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Record of one forward pass.
pub struct Graph<'p, R: Real> {
    nodes: Vec<Node<'p, R>>,
    store: Option<&'p ParamStore<R>>,
    bound: Vec<Option<Var>>,
    params_need_grad: bool,
    grads: Vec<Option<Vec<R>>>,
    dropout: Option<Dropout>,
}

impl<'p, R: Real> Default for Graph<'p, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, R: Real> Graph<'p, R> {
    /// Graph without parameters, for standalone ops and tests.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            params_need_grad: false,
            grads: Vec::new(),
            dropout: None,
        }
    }

    /// Graph that differentiates w.r.t. the parameters of `store`.
    pub fn training(store: &'p ParamStore<R>) -> Self {
        Self {
            store: Some(store),
            bound: vec![None; store.len()],
            params_need_grad: true,
            ..Self::new()
        }
    }

    /// Graph over `store` with parameters treated as constants.
    pub fn inference(store: &'p ParamStore<R>) -> Self {
        Self {
            params_need_grad: false,
            ..Self::training(store)
        }
    }

    /// Enables inverted dropout with the given rate for [`Graph::dropout`].
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some(Dropout { rate, rng });
        }
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [R]>, rows: usize, cols: usize, op: Op<R>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Glu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Im2col { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum(x)
            | Op::Pick { x, .. }
            | Op::Precomputed { x, .. } => self.ng(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.ng(*x) || self.ng(*gain) || self.ng(*bias),
            Op::ConcatCols(xs) => xs.iter().any(|x| self.ng(*x)),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies `t` into the graph; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<R>) -> Var {
        let v = self.push(Cow::Owned(t.data().to_vec()), t.rows(), t.cols(), Op::Leaf);
        self.nodes[v.0].needs_grad = t.requires_grad();
        v
    }

    /// Non-differentiable `rows × cols` leaf.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<R>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "constant {rows}x{cols} given {} values",
                data.len()
            ));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf))
    }

    /// Binds a parameter of the graph's store, once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t: &'p Tensor<R> = store.get(id);
        let v = self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), Op::Leaf);
        self.nodes[v.0].needs_grad = self.params_need_grad;
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    /// `(rows, cols)` of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    /// Copies a node's value out as a `rows × cols` tensor.
    pub fn tensor(&self, v: Var) -> Tensor<R> {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> R {
        self.value(v)[0]
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(dim_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(dim_err!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(dim_err!("add {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let out = self.zip_values(a, b, |x, y| x + y);
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ((r, c), (rr, rc)) = (self.dims(x), self.dims(row));
        if rr != 1 || rc != c {
            return Err(dim_err!("add_row {r}x{c} with {rr}x{rc}"));
        }
        let bias = self.value(row);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|xr| xr.iter().zip(bias).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(x, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(dim_err!("mul {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let out = self.zip_values(a, b, |x, y| x * y);
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let (r, c) = self.dims(x);
        self.push(Cow::Owned(out), r, c, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        let (r, c) = self.dims(x);
        self.push(Cow::Owned(out), r, c, Op::Relu(x))
    }

    /// Gated linear unit: first half of each row times the sigmoid of the
    /// second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c % 2 != 0 {
            return Err(dim_err!("glu needs an even last extent, got {c}"));
        }
        let h = c / 2;
        let mut out = Vec::with_capacity(r * h);
        for row in self.value(x).chunks(c.max(1)) {
            let (a, b) = row.split_at(h);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        Ok(self.push(Cow::Owned(out), r, h, Op::Glu(x)))
    }

    /// Row-wise softmax. Where `allowed` is given (row-major, same shape),
    /// disallowed entries get exactly zero weight; a row with nothing
    /// allowed is all zeros.
    pub fn softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = allowed {
            if m.len() != r * c {
                return Err(dim_err!("softmax mask of {} for {r}x{c}", m.len()));
            }
        }
        let xs = self.value(x);
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.is_none_or(|m| m[i * c + j]);
            let mut max = R::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == R::neg_infinity() {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = R::zero();
            for j in 0..c {
                if ok(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            log_softmax_in_place(row);
        }
        self.push(Cow::Owned(out), r, c, Op::LogSoftmax(x))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(dim_err!(
                "layer_norm over {c} with gain {:?} and bias {:?}",
                self.dims(gain),
                self.dims(bias)
            ));
        }
        let eps = R::from_f64(LAYER_NORM_EPS);
        let n = R::from_f64(c as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c.max(1)) {
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let s = R::one() / (var + eps).sqrt();
            rstd.push(s);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Unfolds `x[T×c]` into rows of `width` consecutive frames (zero padded
    /// by `pad` on both ends), taking every `stride`-th window.
    pub fn im2col(&mut self, x: Var, width: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t, c) = self.dims(x);
        if width == 0 || stride == 0 || t + 2 * pad < width {
            return Err(dim_err!(
                "im2col width {width} stride {stride} over {t} frames"
            ));
        }
        let t_out = (t + 2 * pad - width) / stride + 1;
        let xs = self.value(x);
        let mut out = vec![R::zero(); t_out * width * c];
        for o in 0..t_out {
            for j in 0..width {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    out[(o * width + j) * c..(o * width + j + 1) * c]
                        .copy_from_slice(&xs[s * c..(s + 1) * c]);
                }
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            t_out,
            width * c,
            Op::Im2col {
                x,
                width,
                stride,
                pad,
            },
        ))
    }

    /// Selects rows of `x` (repeats allowed, empty allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange(alloc::format!("row {bad} of {r}")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Cow::Owned(out),
            idx.len(),
            c,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(dim_err!("columns {start}..{} of {c}", start + len));
        }
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = xs.first().map(|&x| self.rows(x)).unwrap_or(0);
        if xs.iter().any(|&x| self.rows(x) != r) {
            return Err(dim_err!("concat_cols over differing row counts"));
        }
        let c: usize = xs.iter().map(|&x| self.cols(x)).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &x in xs {
                let w = self.cols(x);
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::ConcatCols(xs.to_vec())))
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x))
    }

    /// `1 × n` row of the elements at the given flat indices.
    pub fn pick(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange(alloc::format!("element {bad} of {n}")));
        }
        let out = flat_idx.iter().map(|&i| self.value(x)[i]).collect();
        Ok(self.push(
            Cow::Owned(out),
            1,
            flat_idx.len(),
            Op::Pick {
                x,
                idx: flat_idx.to_vec(),
            },
        ))
    }

    /// Scalar node with value `loss` whose gradient w.r.t. `x` is `dx`.
    pub(crate) fn precomputed_loss(&mut self, x: Var, loss: R, dx: Vec<R>) -> Var {
        debug_assert_eq!(dx.len(), self.value(x).len());
        self.push(Cow::Owned(vec![loss]), 1, 1, Op::Precomputed { x, dx })
    }

    /// Inverted dropout; identity unless enabled by [`Graph::with_dropout`].
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let scale = R::from_f64(1.0 / keep);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<R> = (0..n)
            .map(|_| {
                if d.rng.random::<f64>() < keep {
                    scale
                } else {
                    R::zero()
                }
            })
            .collect();
        let (r, c) = self.dims(x);
        let m = self.constant(r, c, mask)?;
        self.mul(x, m)
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Vec<R> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ---- reverse pass ----

    /// Populates adjoints of every differentiable node reachable from the
    /// scalar `loss`, seeded with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter (zeros for parameters the loss
    /// does not depend on).
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<R>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .map(|(id, v)| {
                let g = self
                    .grad(v)
                    .map(<[R]>::to_vec)
                    .unwrap_or_else(|| vec![R::zero(); self.value(v).len()]);
                (id, g)
            })
            .collect()
    }

    fn propagate(&mut self, i: usize, gy: &[R]) {
        // Node values are read while gradient buffers are written.
        let nodes = core::mem::take(&mut self.nodes);
        let mut grads = core::mem::take(&mut self.grads);
        let node = &nodes[i];
        let val = |v: Var| -> &[R] { &nodes[v.0].value };
        let dims = |v: Var| (nodes[v.0].rows, nodes[v.0].cols);
        macro_rules! buf {
            ($v:expr) => {
                slot(&nodes, &mut grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (dims(*a), dims(*b));
                if let Some(ga) = buf!(*a) {
                    gemm_nt(m, n, k, gy, val(*b), ga);
                }
                if let Some(gb) = buf!(*b) {
                    gemm_tn(k, m, n, val(*a), gy, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let ((m, k), (n, _)) = (dims(*a), dims(*b));
                if let Some(ga) = buf!(*a) {
                    gemm_nn(m, n, k, gy, val(*b), ga);
                }
                if let Some(gb) = buf!(*b) {
                    gemm_tn(n, m, k, gy, val(*a), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = buf!(v) {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                let c = node.cols.max(1);
                if let Some(g) = buf!(*row) {
                    for r in gy.chunks(c) {
                        g.iter_mut().zip(r).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = buf!(*a) {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(val(*b)) {
                        *g += d * y;
                    }
                }
                if let Some(g) = buf!(*b) {
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(val(*a)) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *s);
                }
            }
            Op::Relu(x) => {
                if let Some(g) = buf!(*x) {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(*x)) {
                        if v > R::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Glu(x) => {
                let h = node.cols;
                let xs = val(*x);
                if let Some(g) = buf!(*x) {
                    for (r, d) in gy.chunks(h.max(1)).enumerate() {
                        let row = &xs[r * 2 * h..(r + 1) * 2 * h];
                        let grow = &mut g[r * 2 * h..(r + 1) * 2 * h];
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            grow[j] += d[j] * s;
                            grow[h + j] += d[j] * row[j] * s * (R::one() - s);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.cols.max(1);
                let y = &node.value;
                if let Some(g) = buf!(*x) {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let dot: R = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                        for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.cols.max(1);
                let y = &node.value;
                if let Some(g) = buf!(*x) {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let total: R = dr.iter().copied().sum();
                        for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += d - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.cols.max(1);
                let gv = val(*gain);
                if let Some(g) = buf!(*x) {
                    let n = R::from_f64(c as f64);
                    for (r, s) in rstd.iter().enumerate() {
                        let dr = &gy[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = R::zero();
                        let mut mean_dh_h = R::zero();
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let gr = &mut g[r * c..(r + 1) * c];
                        for j in 0..c {
                            gr[j] += *s * (dr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(g) = buf!(*gain) {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for ((g, &d), &h) in g.iter_mut().zip(dr).zip(hr) {
                            *g += d * h;
                        }
                    }
                }
                if let Some(g) = buf!(*bias) {
                    for dr in gy.chunks(c) {
                        g.iter_mut().zip(dr).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Im2col {
                x,
                width,
                stride,
                pad,
            } => {
                let (t, c) = dims(*x);
                if let Some(g) = buf!(*x) {
                    for o in 0..node.rows {
                        for j in 0..*width {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let d = &gy[(o * width + j) * c..(o * width + j + 1) * c];
                                g[s * c..(s + 1) * c]
                                    .iter_mut()
                                    .zip(d)
                                    .for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.cols;
                if let Some(g) = buf!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        g[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&gy[k * c..(k + 1) * c])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (_, c) = dims(*x);
                let w = node.cols;
                if let Some(g) = buf!(*x) {
                    for r in 0..node.rows {
                        g[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(&gy[r * w..(r + 1) * w])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let c = node.cols;
                let mut off = 0;
                for &x in xs {
                    let w = dims(x).1;
                    if let Some(g) = buf!(x) {
                        for r in 0..node.rows {
                            g[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&gy[r * c + off..r * c + off + w])
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Pick { x, idx } => {
                if let Some(g) = buf!(*x) {
                    for (&i, &d) in idx.iter().zip(gy) {
                        g[i] += d;
                    }
                }
            }
            Op::Precomputed { x, dx } => {
                if let Some(g) = buf!(*x) {
                    g.iter_mut().zip(dx).for_each(|(g, &d)| *g += d * gy[0]);
                }
            }
        }
        self.grads = grads;
        self.nodes = nodes;
    }
}

fn slot<'a, R: Real>(
    nodes: &[Node<'_, R>],
    grads: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Numerically stable in-place log-softmax of one row.
pub fn log_softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    if max == R::neg_infinity() {
        return;
    }
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}
