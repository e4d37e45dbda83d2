//! The full model: convolutional front end and encoder stack, CTC head with
//! spike trigger, and a parallel (non-autoregressive) decoder stack.
//!
//! Two decoder input modes exist. In spike-triggered mode the decoder reads
//! the encoder states at triggered frames, so its length is the spike count.
//! In masked-fixed-length mode it reads a fixed number of copies of a
//! learned mask embedding, and there is no CTC head.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{self, PosteriorGrid, TriggerSet};
use crate::data::{FeatureMatrix, SpecialTokens};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    add_positions, block, conv_front_end, front_end_len, linear, norm, BlockParams, FrontEndParams,
    LinearParams, NormParams,
};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    SpikeTriggered,
    MaskedFixedLength,
}

impl DecoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SpikeTriggered => "spike-triggered",
            Self::MaskedFixedLength => "masked-fixed-length",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spike-triggered" => Some(Self::SpikeTriggered),
            "masked-fixed-length" => Some(Self::MaskedFixedLength),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Width after the GLU; the first FFN layer maps to `2·d_ff`.
    pub d_ff: usize,
    /// Vocabulary size including PAD, UNK and EOS.
    pub vocab_size: usize,
    /// CTC weight α of the joint loss.
    pub ctc_weight: f64,
    /// Trigger threshold β on the non-blank probability.
    pub trigger_threshold: f64,
    pub dropout: f64,
    pub mode: DecoderMode,
    pub fixed_mask_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 6 + 6 blocks, d_m = 320, 4 heads, α = 0.6, β = 0.3.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            feat_dim: crate::data::FEATURE_DIM,
            n_enc_blocks: 6,
            n_dec_blocks: 6,
            n_heads: 4,
            d_model: 320,
            d_ff: 640,
            vocab_size,
            ctc_weight: 0.6,
            trigger_threshold: 0.3,
            dropout: 0.1,
            mode: DecoderMode::SpikeTriggered,
            fixed_mask_len: 60,
            seed: 1,
        }
    }

    /// Desk-scale: 2 + 2 blocks, d_m = 64.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            d_model: 64,
            d_ff: 128,
            ..Self::paper(vocab_size)
        }
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens::for_vocab_size(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return bad(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if !(self.trigger_threshold > 0.0 && self.trigger_threshold < 1.0) {
            return bad(format!(
                "trigger_threshold {} outside (0, 1)",
                self.trigger_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 4 || self.feat_dim == 0 || self.d_ff == 0 {
            return bad("vocab_size ≥ 4, feat_dim ≥ 1 and d_ff ≥ 1 are required".into());
        }
        if self.mode == DecoderMode::MaskedFixedLength && self.fixed_mask_len == 0 {
            return bad("fixed_mask_len must be positive".into());
        }
        Ok(())
    }

    /// `key = value` pairs, the text form used by config and checkpoint files.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("feat_dim", self.feat_dim.to_string()),
            ("n_enc_blocks", self.n_enc_blocks.to_string()),
            ("n_dec_blocks", self.n_dec_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("ctc_weight", format!("{}", self.ctc_weight)),
            ("trigger_threshold", format!("{}", self.trigger_threshold)),
            ("dropout", format!("{}", self.dropout)),
            ("mode", self.mode.as_str().into()),
            ("fixed_mask_len", self.fixed_mask_len.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "feat_dim" => self.feat_dim = parse(key, value)?,
            "n_enc_blocks" => self.n_enc_blocks = parse(key, value)?,
            "n_dec_blocks" => self.n_dec_blocks = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "ctc_weight" | "alpha" => self.ctc_weight = parse(key, value)?,
            "trigger_threshold" | "beta" => self.trigger_threshold = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "mode" => {
                self.mode = DecoderMode::parse(value)
                    .ok_or_else(|| Error::Format(format!("unknown mode '{value}'")))?
            }
            "fixed_mask_len" => self.fixed_mask_len = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value '{value}' for '{key}'")))
}

/// Where each parameter group lives in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub front: FrontEndParams,
    pub encoder: Vec<BlockParams>,
    pub encoder_norm: NormParams,
    pub ctc: Option<LinearParams>,
    pub decoder: Vec<BlockParams>,
    pub decoder_norm: NormParams,
    pub output: LinearParams,
    pub mask_embedding: Option<ParamId>,
}

/// Parameters plus an instrumented decoder-pass counter.
#[derive(Debug)]
pub struct Model<R> {
    config: ModelConfig,
    params: ParamStore<R>,
    layout: ModelLayout,
    decoder_passes: AtomicUsize,
}

impl<R: Real> Clone for Model<R> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            decoder_passes: AtomicUsize::new(self.decoder_passes()),
        }
    }
}

/// Decoder result: `T′ × V` log-probabilities and, per decoder block, the
/// per-head source-attention weights (`T′ × T_enc`).
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub log_probs: Var,
    pub source_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct StNatOutput<R> {
    pub encoded: Var,
    /// CTC log-posteriors node, `T_enc × (V+1)`.
    pub grid: Var,
    pub posteriors: PosteriorGrid<R>,
    pub trigger: TriggerSet,
    /// `None` when nothing triggered.
    pub decoder: Option<DecoderOutput>,
}

impl<R: Real> Model<R> {
    /// Freshly initialized model (seeded by `config.seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let layout = Self::register(&config, &mut store, &mut init)?;
        Ok(Self {
            config,
            params: store,
            layout,
            decoder_passes: AtomicUsize::new(0),
        })
    }

    /// Model over existing parameters, which must match the layout implied
    /// by `config` exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<R>) -> Result<Self> {
        let template = Self::new(config)?;
        if !template.params.same_layout(&params) {
            return Err(Error::Format(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Self { params, ..template })
    }

    fn register(
        cfg: &ModelConfig,
        store: &mut ParamStore<R>,
        init: &mut Init<'_, ChaCha8Rng>,
    ) -> Result<ModelLayout> {
        let d = cfg.d_model;
        let front = FrontEndParams::register(store, init, cfg.feat_dim, d);
        let encoder = (0..cfg.n_enc_blocks)
            .map(|i| {
                BlockParams::register(
                    store,
                    init,
                    &format!("enc.{i}"),
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = NormParams::register(store, "enc.norm", d);
        let ctc = (cfg.mode == DecoderMode::SpikeTriggered)
            .then(|| LinearParams::register(store, init, "ctc", d, cfg.vocab_size + 1, true));
        let decoder = (0..cfg.n_dec_blocks)
            .map(|i| {
                BlockParams::register(
                    store,
                    init,
                    &format!("dec.{i}"),
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = NormParams::register(store, "dec.norm", d);
        let output = LinearParams::register(store, init, "output", d, cfg.vocab_size, true);
        let mask_embedding = (cfg.mode == DecoderMode::MaskedFixedLength).then(|| {
            store.push(
                "mask_embedding",
                init.normal(1, d, 1.0 / num_traits::Float::sqrt(d as f64)),
            )
        });
        Ok(ModelLayout {
            front,
            encoder,
            encoder_norm,
            ctc,
            decoder,
            decoder_norm,
            output,
            mask_embedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the trigger threshold used by [`Model::forward_st_nat`].
    pub fn set_trigger_threshold(&mut self, beta: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.trigger_threshold = beta;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Number of decoder forward passes run so far.
    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    /// Features as a graph leaf, cast to the model precision.
    pub fn feature_input(&self, g: &mut Graph<'_, R>, feat: &FeatureMatrix) -> Result<Var> {
        if feat.cols() != self.config.feat_dim {
            return Err(Error::Dimension(format!(
                "features have {} dims, model expects {}",
                feat.cols(),
                self.config.feat_dim
            )));
        }
        Ok(g.input(&feat.to_tensor()))
    }

    /// Front end plus encoder stack: `T × feat_dim → ⌈T/4⌉ × d_m`.
    pub fn encode(&self, g: &mut Graph<'_, R>, feat: Var) -> Result<Var> {
        if g.rows(feat) == 0 {
            return Err(Error::Contract(
                "cannot encode an empty feature matrix".into(),
            ));
        }
        let mut x = conv_front_end(g, feat, &self.layout.front)?;
        x = g.dropout(x)?;
        for b in &self.layout.encoder {
            x = block(g, x, None, b, None)?.out;
        }
        let out = norm(g, x, &self.layout.encoder_norm)?;
        debug_assert_eq!(g.rows(out), front_end_len(g.rows(feat)));
        Ok(out)
    }

    /// CTC log-posteriors over blank + vocabulary.
    pub fn ctc_head(&self, g: &mut Graph<'_, R>, enc: Var) -> Result<Var> {
        let p = self
            .layout
            .ctc
            .as_ref()
            .ok_or_else(|| Error::Usage("masked-fixed-length model has no CTC head".into()))?;
        ctc::ctc_head(g, enc, p)
    }

    /// One parallel decoder pass: unmasked self-attention over the inputs,
    /// source attention over `enc`, then the output projection.
    pub fn decode_parallel(
        &self,
        g: &mut Graph<'_, R>,
        dec_in: Var,
        enc: Var,
    ) -> Result<DecoderOutput> {
        if g.rows(dec_in) == 0 {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = dec_in;
        let mut source_weights = Vec::with_capacity(self.layout.decoder.len());
        for b in &self.layout.decoder {
            let out = block(g, x, Some(enc), b, None)?;
            x = out.out;
            source_weights.push(out.source_weights);
        }
        let h = norm(g, x, &self.layout.decoder_norm)?;
        let logits = linear(g, h, &self.layout.output)?;
        Ok(DecoderOutput {
            log_probs: g.log_softmax(logits),
            source_weights,
        })
    }

    /// encode → CTC head → trigger → gather (+ fresh positions) → decode.
    pub fn forward_st_nat(&self, g: &mut Graph<'_, R>, feat: Var) -> Result<StNatOutput<R>> {
        if self.config.mode != DecoderMode::SpikeTriggered {
            return Err(Error::Usage(
                "forward_st_nat needs a spike-triggered model".into(),
            ));
        }
        let encoded = self.encode(g, feat)?;
        let grid = self.ctc_head(g, encoded)?;
        let posteriors = PosteriorGrid::from_graph(g, grid)?;
        let trigger = ctc::trigger(&posteriors, self.config.trigger_threshold);
        let decoder = if trigger.is_empty() {
            None
        } else {
            let gathered = ctc::gather_triggered(g, encoded, &trigger)?;
            let dec_in = add_positions(g, gathered)?;
            Some(self.decode_parallel(g, dec_in, encoded)?)
        };
        Ok(StNatOutput {
            encoded,
            grid,
            posteriors,
            trigger,
            decoder,
        })
    }

    /// Baseline: the decoder reads `fixed_mask_len` copies of the mask
    /// embedding plus positions.
    pub fn forward_masked_nat(&self, g: &mut Graph<'_, R>, feat: Var) -> Result<DecoderOutput> {
        let mask = self.layout.mask_embedding.ok_or_else(|| {
            Error::Usage("forward_masked_nat needs a masked-fixed-length model".into())
        })?;
        let encoded = self.encode(g, feat)?;
        let m = g.param(mask);
        let copies = vec![0; self.config.fixed_mask_len];
        let dec_in = g.gather_rows(m, &copies)?;
        let dec_in = add_positions(g, dec_in)?;
        self.decode_parallel(g, dec_in, encoded)
    }
}
