//! Transformer building blocks: scaled dot-product and multi-head attention,
//! the GLU feed-forward network, sinusoidal positions and the strided
//! convolutional front end.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `x·W + b`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub(crate) fn register<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        init: &mut Init<'_, G>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.push(format!("{name}.w"), init.glorot(d_in, d_out));
        let b = bias.then(|| store.push(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }
}

pub fn linear<R: Real>(g: &mut Graph<'_, R>, x: Var, p: &LinearParams) -> Result<Var> {
    let w = g.param(p.w);
    let y = g.matmul(x, w)?;
    match p.b {
        Some(b) => {
            let b = g.param(b);
            g.add_row(y, b)
        }
        None => Ok(y),
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub(crate) fn register<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Self {
        Self {
            gain: store.push(format!("{name}.gain"), Tensor::filled(&[d], R::one())),
            bias: store.push(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }
}

pub fn norm<R: Real>(g: &mut Graph<'_, R>, x: Var, p: &NormParams) -> Result<Var> {
    let (gain, bias) = (g.param(p.gain), g.param(p.bias));
    g.layer_norm(x, gain, bias)
}

/// Query/key/value/output projections of one multi-head attention layer.
/// Head `i` uses columns `i·d_k .. (i+1)·d_k` of the query, key and value
/// projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl AttentionParams {
    pub(crate) fn register<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        init: &mut Init<'_, G>,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(dim_err!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            ));
        }
        let mut proj =
            |suffix: &str| store.push(format!("{name}.{suffix}"), init.glorot(d_model, d_model));
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            n_heads,
        })
    }
}

/// Result of an attention layer, with the per-head weight matrices kept
/// for inspection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// `softmax(QKᵀ/√d_k)·V` with an optional `allowed` grid (`T_q × T_k`,
/// row-major); disallowed pairs get zero weight. Returns the output and the
/// weight matrix.
pub fn self_attention<R: Real>(
    g: &mut Graph<'_, R>,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    if g.rows(k) != g.rows(v) {
        return Err(dim_err!("{} keys but {} values", g.rows(k), g.rows(v)));
    }
    let d_k = g.cols(k);
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, R::from_f64(1.0 / (d_k as f64).sqrt()));
    let weights = g.softmax(scores, allowed)?;
    let dropped = g.dropout(weights)?;
    Ok((g.matmul(dropped, v)?, weights))
}

/// Multi-head attention of `x_q` over `x_kv`.
pub fn multi_head<R: Real>(
    g: &mut Graph<'_, R>,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams,
    allowed: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let d_model = g.cols(x_q);
    if g.cols(x_kv) != d_model || !d_model.is_multiple_of(p.n_heads) {
        return Err(dim_err!(
            "multi_head over widths {} and {} with {} heads",
            d_model,
            g.cols(x_kv),
            p.n_heads
        ));
    }
    let d_k = d_model / p.n_heads;
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = g.slice_cols(q, h * d_k, d_k)?;
        let kh = g.slice_cols(k, h * d_k, d_k)?;
        let vh = g.slice_cols(v, h * d_k, d_k)?;
        let (o, w) = self_attention(g, qh, kh, vh, allowed)?;
        heads.push(o);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(AttentionOutput {
        out: g.matmul(cat, wo)?,
        weights,
    })
}

/// `GLU(x·W₁ + b₁)·W₂ + b₂` with `W₁: d_m × 2·d_ff` and `W₂: d_ff × d_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub(crate) fn register<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        init: &mut Init<'_, G>,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        let l1 =
            LinearParams::register(store, init, &format!("{name}.l1"), d_model, 2 * d_ff, true);
        let l2 = LinearParams::register(store, init, &format!("{name}.l2"), d_ff, d_model, true);
        Self {
            w1: l1.w,
            b1: l1.b.expect("registered with bias"),
            w2: l2.w,
            b2: l2.b.expect("registered with bias"),
        }
    }
}

pub fn ffn<R: Real>(g: &mut Graph<'_, R>, x: Var, p: &FfnParams) -> Result<Var> {
    let h = linear(
        g,
        x,
        &LinearParams {
            w: p.w1,
            b: Some(p.b1),
        },
    )?;
    let h = g.glu(h)?;
    let h = g.dropout(h)?;
    linear(
        g,
        h,
        &LinearParams {
            w: p.w2,
            b: Some(p.b2),
        },
    )
}

/// Sinusoidal positions: entry `(t, 2k)` is `sin(t / 10000^(2k/d))` and
/// `(t, 2k+1)` the matching cosine.
pub fn positional_embedding<R: Real>(len: usize, d_model: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(len * d_model);
    for t in 0..len {
        for j in 0..d_model {
            let k2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(k2 / d_model as f64);
            data.push(R::from_f64(if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Tensor::matrix(len, d_model, data).expect("shape matches")
}

/// Adds sinusoidal positions 0..rows to `x`.
pub fn add_positions<R: Real>(g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
    let (r, c) = g.dims(x);
    let pe = positional_embedding::<R>(r, c).into_data();
    let pe = g.constant(r, c, pe)?;
    g.add(x, pe)
}

pub const CONV_WIDTH: usize = 3;
pub const CONV_STRIDE: usize = 2;

/// Kernel-3, stride-2 convolution over time with one frame of zero padding
/// on each side: `T×c_in → ⌈T/2⌉×c_out`. The kernel is stored as a
/// `(3·c_in) × c_out` matrix, frame-major.
pub fn conv_time<R: Real>(g: &mut Graph<'_, R>, x: Var, p: &LinearParams) -> Result<Var> {
    let cols = g.im2col(x, CONV_WIDTH, CONV_STRIDE, 1)?;
    linear(g, cols, p)
}

/// Time reduction of the convolutional front end.
pub const SUBSAMPLING: usize = 4;

/// Output frame count of two stacked stride-2 convolutions.
pub fn front_end_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontEndParams {
    pub conv1: LinearParams,
    pub conv2: LinearParams,
}

impl FrontEndParams {
    pub(crate) fn register<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        init: &mut Init<'_, G>,
        feat_dim: usize,
        d_model: usize,
    ) -> Self {
        Self {
            conv1: LinearParams::register(
                store,
                init,
                "front.conv1",
                CONV_WIDTH * feat_dim,
                d_model,
                true,
            ),
            conv2: LinearParams::register(
                store,
                init,
                "front.conv2",
                CONV_WIDTH * d_model,
                d_model,
                true,
            ),
        }
    }
}

/// Two ReLU convolutions (×4 time reduction) followed by positions.
pub fn conv_front_end<R: Real>(g: &mut Graph<'_, R>, feat: Var, p: &FrontEndParams) -> Result<Var> {
    let h = conv_time(g, feat, &p.conv1)?;
    let h = g.relu(h);
    let h = conv_time(g, h, &p.conv2)?;
    let h = g.relu(h);
    add_positions(g, h)
}

/// One pre-norm transformer block. Decoder blocks carry a source-attention
/// sublayer between self-attention and the feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub norm_self: NormParams,
    pub self_attn: AttentionParams,
    pub source: Option<(NormParams, AttentionParams)>,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub(crate) fn register<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        init: &mut Init<'_, G>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        with_source: bool,
    ) -> Result<Self> {
        let norm_self = NormParams::register(store, &format!("{name}.norm_self"), d_model);
        let self_attn =
            AttentionParams::register(store, init, &format!("{name}.self_attn"), d_model, n_heads)?;
        let source = if with_source {
            let n = NormParams::register(store, &format!("{name}.norm_src"), d_model);
            let a = AttentionParams::register(
                store,
                init,
                &format!("{name}.src_attn"),
                d_model,
                n_heads,
            )?;
            Some((n, a))
        } else {
            None
        };
        let norm_ffn = NormParams::register(store, &format!("{name}.norm_ffn"), d_model);
        let ffn = FfnParams::register(store, init, &format!("{name}.ffn"), d_model, d_ff);
        Ok(Self {
            norm_self,
            self_attn,
            source,
            norm_ffn,
            ffn,
        })
    }
}

/// Output of a block; `source_weights` is empty for encoder blocks.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub out: Var,
    pub source_weights: Vec<Var>,
}

/// Runs a block. `memory` is required iff the block has source attention.
pub fn block<R: Real>(
    g: &mut Graph<'_, R>,
    x: Var,
    memory: Option<Var>,
    p: &BlockParams,
    self_allowed: Option<&[bool]>,
) -> Result<BlockOutput> {
    let h = norm(g, x, &p.norm_self)?;
    let a = multi_head(g, h, h, &p.self_attn, self_allowed)?;
    let a = g.dropout(a.out)?;
    let mut x = g.add(x, a)?;

    let mut source_weights = Vec::new();
    match (&p.source, memory) {
        (Some((n, attn)), Some(mem)) => {
            let h = norm(g, x, n)?;
            let a = multi_head(g, h, mem, attn, None)?;
            source_weights = a.weights;
            let o = g.dropout(a.out)?;
            x = g.add(x, o)?;
        }
        (None, None) => {}
        (Some(_), None) => return Err(dim_err!("decoder block needs encoder memory")),
        (None, Some(_)) => return Err(dim_err!("encoder block given memory")),
    }

    let h = norm(g, x, &p.norm_ffn)?;
    let f = ffn(g, h, &p.ffn)?;
    let f = g.dropout(f)?;
    Ok(BlockOutput {
        out: g.add(x, f)?,
        source_weights,
    })
}

/// Lower-triangular `allowed` grid: query `i` sees keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len <= i / len).collect()
}
