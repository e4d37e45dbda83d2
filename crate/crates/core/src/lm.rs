//! Causal transformer language model over the shared character vocabulary,
//! used for shallow fusion during beam decoding.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::data::SpecialTokens;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    add_positions, block, causal_mask, linear, norm, BlockParams, LinearParams, NormParams,
};
use crate::network::parse;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Real;
use crate::train::{cross_entropy, lr_schedule, mix_seed, StepRecord, TrainConfig};
use crate::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum input length, begin-of-sequence slot included.
    pub context: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl LmConfig {
    /// 2 blocks, d_m = 64.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_blocks: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            context: 64,
            vocab_size,
            dropout: 0.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Usage(format!(
                "LM d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context < 2 || self.vocab_size < 4 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(
                "LM needs context ≥ 2, vocab_size ≥ 4, dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lm_n_blocks", self.n_blocks.to_string()),
            ("lm_d_model", self.d_model.to_string()),
            ("lm_n_heads", self.n_heads.to_string()),
            ("lm_d_ff", self.d_ff.to_string()),
            ("lm_context", self.context.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("lm_dropout", format!("{}", self.dropout)),
            ("lm_seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lm_n_blocks" => self.n_blocks = parse(key, value)?,
            "lm_d_model" => self.d_model = parse(key, value)?,
            "lm_n_heads" => self.n_heads = parse(key, value)?,
            "lm_d_ff" => self.d_ff = parse(key, value)?,
            "lm_context" => self.context = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "lm_dropout" => self.dropout = parse(key, value)?,
            "lm_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmLayout {
    /// `(V + 1) × d_m`; the last row embeds begin-of-sequence.
    pub embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: NormParams,
    pub output: LinearParams,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<R> {
    config: LmConfig,
    params: ParamStore<R>,
    layout: LmLayout,
}

impl<R: Real> LanguageModel<R> {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embedding = store.push(
            "lm.embedding",
            init.normal(
                config.vocab_size + 1,
                d,
                1.0 / num_traits::Float::sqrt(d as f64),
            ),
        );
        let blocks = (0..config.n_blocks)
            .map(|i| {
                BlockParams::register(
                    &mut store,
                    &mut init,
                    &format!("lm.{i}"),
                    d,
                    config.n_heads,
                    config.d_ff,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = NormParams::register(&mut store, "lm.norm", d);
        let output = LinearParams::register(
            &mut store,
            &mut init,
            "lm.output",
            d,
            config.vocab_size,
            true,
        );
        Ok(Self {
            config,
            params: store,
            layout: LmLayout {
                embedding,
                blocks,
                norm,
                output,
            },
        })
    }

    pub fn from_params(config: LmConfig, params: ParamStore<R>) -> Result<Self> {
        let template = Self::new(config)?;
        if !template.params.same_layout(&params) {
            return Err(Error::Format(
                "parameters do not match the LM configuration".into(),
            ));
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn bos(&self) -> usize {
        self.config.vocab_size
    }

    /// Next-token log-probabilities after each input position (`n × V`).
    /// `inputs` must start with BOS and fit in the context.
    pub fn forward(&self, g: &mut Graph<'_, R>, inputs: &[usize]) -> Result<Var> {
        let n = inputs.len();
        if n == 0 || n > self.config.context {
            return Err(Error::Usage(format!(
                "LM input of {n} tokens, context {}",
                self.config.context
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t > self.bos()) {
            return Err(Error::OutOfRange(format!(
                "token {bad} of {}",
                self.config.vocab_size
            )));
        }
        let emb = g.param(self.layout.embedding);
        let x = g.gather_rows(emb, inputs)?;
        let mut x = add_positions(g, x)?;
        x = g.dropout(x)?;
        let mask = causal_mask(n);
        for b in &self.layout.blocks {
            x = block(g, x, None, b, Some(&mask))?.out;
        }
        let h = norm(g, x, &self.layout.norm)?;
        let logits = linear(g, h, &self.layout.output)?;
        Ok(g.log_softmax(logits))
    }

    /// Log-distribution of the token following `prefix`. Prefixes longer
    /// than the context keep only their most recent tokens.
    pub fn score_step(&self, prefix: &[usize]) -> Result<Vec<R>> {
        let keep = prefix.len().min(self.config.context - 1);
        let mut inputs = Vec::with_capacity(keep + 1);
        inputs.push(self.bos());
        inputs.extend_from_slice(&prefix[prefix.len() - keep..]);
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, &inputs)?;
        let v = self.config.vocab_size;
        Ok(g.value(out)[(inputs.len() - 1) * v..].to_vec())
    }

    /// Teacher-forced `(negative log-likelihood sum, predicted tokens)` of a
    /// sentence followed by EOS.
    pub fn sentence_nll(&self, sentence: &[usize]) -> Result<(f64, usize)> {
        let (inputs, targets) = self.teacher_forcing(sentence);
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, &inputs)?;
        let ce = cross_entropy(&mut g, out, &targets)?;
        Ok((
            g.scalar_value(ce).as_f64() * targets.len() as f64,
            targets.len(),
        ))
    }

    /// `[BOS, y₁ … yₙ]` → `[y₁ … yₙ, EOS]`, cut to the context.
    pub fn teacher_forcing(&self, sentence: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let eos = SpecialTokens::for_vocab_size(self.config.vocab_size).eos;
        let mut inputs = vec![self.bos()];
        inputs.extend_from_slice(sentence);
        let mut targets = sentence.to_vec();
        targets.push(eos);
        inputs.truncate(self.config.context);
        targets.truncate(self.config.context);
        (inputs, targets)
    }
}

/// Next-token cross-entropy training with Adam and the warmup schedule.
/// Returns the model and one record per optimizer step.
pub fn lm_train<R: Real>(
    corpus: &[TokenSequence],
    config: LmConfig,
    schedule: &TrainConfig,
) -> Result<(LanguageModel<R>, Vec<StepRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Usage("LM corpus is empty".into()));
    }
    schedule.validate()?;
    let mut lm = LanguageModel::<R>::new(config)?;
    let mut adam = AdamState::new(lm.params());
    let mut records = Vec::new();
    let seed = lm.config.seed;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            seed,
            epoch as u64,
        ])));
        for chunk in order.chunks(schedule.batch_size) {
            let step = adam.step() + 1;
            let weight = R::from_f64(1.0 / chunk.len() as f64);
            let mut loss = 0.0;
            lm.params.zero_grads();
            for &i in chunk {
                let (inputs, targets) = lm.teacher_forcing(&corpus[i]);
                let grads = {
                    let mut g = Graph::training(&lm.params);
                    if lm.config.dropout > 0.0 {
                        let s = mix_seed(&[seed, step, i as u64]);
                        g = g.with_dropout(lm.config.dropout, ChaCha8Rng::seed_from_u64(s));
                    }
                    let out = lm.forward(&mut g, &inputs)?;
                    let ce = cross_entropy(&mut g, out, &targets)?;
                    loss += g.scalar_value(ce).as_f64();
                    let scaled = g.scale(ce, weight);
                    g.backward(scaled)?;
                    g.param_grads()
                };
                lm.params.accumulate_grads(&grads)?;
            }
            loss /= chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite("LM training loss".into()));
            }
            let lr = lr_schedule(
                step,
                schedule.warmup_steps,
                lm.config.d_model,
                schedule.lr_scale,
            );
            adam_step(&mut lm.params, &mut adam, lr)?;
            records.push(StepRecord {
                step,
                lr,
                loss,
                ctc: 0.0,
                ce: loss,
                joint_fraction: 0.0,
                skipped: 0,
            });
        }
    }
    Ok((lm, records))
}
