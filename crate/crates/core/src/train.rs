//! Training: the length-conditional joint CTC + cross-entropy objective,
//! EOS-padded decoder targets, the warmup schedule, time/frequency masking
//! and the mini-batch update loop.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::ctc::{self, TriggerSet};
use crate::data::{make_batches, Batch, FeatureMatrix, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{parse, DecoderMode, Model};
use crate::params::ParamId;
use crate::scalar::Real;
use crate::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    /// Multiplier `k` in `k · d_m^-0.5 · min(s^-0.5, s · w^-1.5)`.
    pub lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_time_masks: usize,
    /// Each time mask covers at most this fraction of the frames.
    pub time_mask_max_frac: f64,
    pub n_freq_masks: usize,
    pub freq_mask_max_width: usize,
    pub average_last_k: usize,
    pub sort_by_length: bool,
}

impl TrainConfig {
    /// Warmup 12000, 80 epochs, average of the last 20.
    pub fn paper() -> Self {
        Self {
            warmup_steps: 12000,
            lr_scale: 1.0,
            epochs: 80,
            batch_size: 16,
            n_time_masks: 2,
            time_mask_max_frac: 0.1,
            n_freq_masks: 1,
            freq_mask_max_width: 8,
            average_last_k: 20,
            sort_by_length: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            warmup_steps: 400,
            epochs: 60,
            batch_size: 8,
            average_last_k: 5,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0
            || self.average_last_k == 0
            || self.batch_size == 0
            || self.epochs == 0
        {
            return Err(Error::Usage(
                "warmup_steps, average_last_k, batch_size and epochs must be ≥ 1".into(),
            ));
        }
        if self.lr_scale.is_nan()
            || self.lr_scale <= 0.0
            || !(0.0..=1.0).contains(&self.time_mask_max_frac)
        {
            return Err(Error::Usage(
                "lr_scale > 0 and time_mask_max_frac in [0, 1] required".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_scale", format!("{}", self.lr_scale)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_time_masks", self.n_time_masks.to_string()),
            ("time_mask_max_frac", format!("{}", self.time_mask_max_frac)),
            ("n_freq_masks", self.n_freq_masks.to_string()),
            ("freq_mask_max_width", self.freq_mask_max_width.to_string()),
            ("average_last_k", self.average_last_k.to_string()),
            ("sort_by_length", self.sort_by_length.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "n_time_masks" => self.n_time_masks = parse(key, value)?,
            "time_mask_max_frac" => self.time_mask_max_frac = parse(key, value)?,
            "n_freq_masks" => self.n_freq_masks = parse(key, value)?,
            "freq_mask_max_width" => self.freq_mask_max_width = parse(key, value)?,
            "average_last_k" => self.average_last_k = parse(key, value)?,
            "sort_by_length" => self.sort_by_length = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Inverse-square-root schedule with linear warmup; peaks at `warmup`.
pub fn lr_schedule(step: u64, warmup: u64, d_model: usize, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Which arm of the joint objective an utterance took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `T′ ≥ T`: α·CTC + (1−α)·CE.
    Joint,
    /// `T′ < T`: CTC alone; the decoder gets no gradient.
    CtcOnly,
    /// Masked fixed-length baseline: CE alone.
    CeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// CTC negative log-likelihood divided by the target length.
    pub ctc: f64,
    /// Mean per-position cross-entropy, when the decoder was supervised.
    pub ce: Option<f64>,
    pub branch: Branch,
    pub predicted_len: usize,
    pub target_len: usize,
}

/// Decoder target of length `T′`: the reference followed by `T′ − T` EOS.
pub fn build_ce_target(
    reference: &[usize],
    predicted_len: usize,
    eos: usize,
) -> Result<TokenSequence> {
    if predicted_len < reference.len() {
        return Err(Error::Contract(format!(
            "predicted length {predicted_len} is shorter than the reference ({})",
            reference.len()
        )));
    }
    let mut t = reference.to_vec();
    t.resize(predicted_len, eos);
    Ok(t)
}

/// Mean negative log-likelihood of `target` under `log_probs` (`n × V`).
pub fn cross_entropy<R: Real>(
    g: &mut Graph<'_, R>,
    log_probs: Var,
    target: &[usize],
) -> Result<Var> {
    let (n, v) = g.dims(log_probs);
    if n != target.len() || n == 0 {
        return Err(Error::Dimension(format!(
            "{n} decoder rows for a target of {}",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= v) {
        return Err(Error::OutOfRange(format!("target token {bad} of {v}")));
    }
    let idx: Vec<usize> = target.iter().enumerate().map(|(i, &k)| i * v + k).collect();
    let picked = g.pick(log_probs, &idx)?;
    let s = g.sum(picked);
    Ok(g.scale(s, R::from_f64(-1.0 / n as f64)))
}

/// The joint objective for one utterance.
///
/// With `T′ ≥ T` the loss is `α·L_CTC + (1−α)·L_CE` against the EOS-padded
/// target; otherwise it is `L_CTC` alone and `decoder` is not used.
pub fn joint_loss<R: Real>(
    g: &mut Graph<'_, R>,
    grid: Var,
    trigger: &TriggerSet,
    decoder: Option<Var>,
    reference: &[usize],
    alpha: f64,
    eos: usize,
) -> Result<(Var, LossReport)> {
    if reference.is_empty() {
        return Err(Error::Contract("empty reference transcript".into()));
    }
    let t = reference.len();
    let t_pred = trigger.len();
    let raw = ctc::ctc_loss(g, grid, reference)?;
    let ctc_term = g.scale(raw, R::from_f64(1.0 / t as f64));
    let ctc_value = g.scalar_value(ctc_term).as_f64();

    if t_pred < t {
        return Ok((
            ctc_term,
            LossReport {
                total: ctc_value,
                ctc: ctc_value,
                ce: None,
                branch: Branch::CtcOnly,
                predicted_len: t_pred,
                target_len: t,
            },
        ));
    }
    let dec = decoder.ok_or_else(|| Error::Usage("joint branch needs decoder output".into()))?;
    let target = build_ce_target(reference, t_pred, eos)?;
    let ce = cross_entropy(g, dec, &target)?;
    let ce_value = g.scalar_value(ce).as_f64();
    let a = g.scale(ctc_term, R::from_f64(alpha));
    let b = g.scale(ce, R::from_f64(1.0 - alpha));
    let total = g.add(a, b)?;
    Ok((
        total,
        LossReport {
            total: g.scalar_value(total).as_f64(),
            ctc: ctc_value,
            ce: Some(ce_value),
            branch: Branch::Joint,
            predicted_len: t_pred,
            target_len: t,
        },
    ))
}

/// Baseline objective: CE against the reference padded (or cut) to the
/// fixed decoder length with EOS.
pub fn masked_loss<R: Real>(
    g: &mut Graph<'_, R>,
    decoder: Var,
    reference: &[usize],
    eos: usize,
) -> Result<(Var, LossReport)> {
    let n = g.rows(decoder);
    let mut target = reference.to_vec();
    target.resize(n, eos);
    let ce = cross_entropy(g, decoder, &target)?;
    let v = g.scalar_value(ce).as_f64();
    Ok((
        ce,
        LossReport {
            total: v,
            ctc: 0.0,
            ce: Some(v),
            branch: Branch::CeOnly,
            predicted_len: n,
            target_len: reference.len(),
        },
    ))
}

/// Zeroes random time bands and feature bands.
///
/// Each time band has width uniform in `0..=⌊frac·T⌋` and each feature band
/// width uniform in `0..=max_width`, each placed uniformly at random.
pub fn spec_mask<G: Rng>(feat: &FeatureMatrix, cfg: &TrainConfig, rng: &mut G) -> FeatureMatrix {
    let mut out = feat.clone();
    let (t, f) = (feat.rows(), feat.cols());
    let max_t = ((cfg.time_mask_max_frac * t as f64).floor() as usize).min(t);
    for _ in 0..cfg.n_time_masks {
        let w = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=t - w);
        for r in start..start + w {
            out.data_mut()[r * f..(r + 1) * f].fill(0.0);
        }
    }
    let max_f = cfg.freq_mask_max_width.min(f);
    for _ in 0..cfg.n_freq_masks {
        let w = rng.random_range(0..=max_f);
        let start = rng.random_range(0..=f - w);
        for r in 0..t {
            out.data_mut()[r * f + start..r * f + start + w].fill(0.0);
        }
    }
    out
}

/// Deterministic 64-bit seed derivation (SplitMix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Loss report and parameter gradients of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceGrad<R> {
    pub report: LossReport,
    pub grads: Vec<(ParamId, Vec<R>)>,
}

/// Forward and backward pass for one utterance, scaled by `weight`.
///
/// With `augment`, the features are masked and dropout is active, both
/// driven by `seed`.
pub fn utterance_grad<R: Real>(
    model: &Model<R>,
    feat: &FeatureMatrix,
    reference: &[usize],
    cfg: &TrainConfig,
    weight: f64,
    augment: bool,
    seed: u64,
) -> Result<UtteranceGrad<R>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = if augment {
        spec_mask(feat, cfg, &mut rng)
    } else {
        feat.clone()
    };
    let mut g = Graph::training(model.params());
    if augment {
        g = g.with_dropout(
            model.config().dropout,
            ChaCha8Rng::seed_from_u64(rng.random()),
        );
    }
    let x = model.feature_input(&mut g, &feat)?;
    let eos = model.config().special().eos;
    let (loss, report) = match model.config().mode {
        DecoderMode::SpikeTriggered => {
            let out = model.forward_st_nat(&mut g, x)?;
            let dec = out.decoder.as_ref().map(|d| d.log_probs);
            joint_loss(
                &mut g,
                out.grid,
                &out.trigger,
                dec,
                reference,
                model.config().ctc_weight,
                eos,
            )?
        }
        DecoderMode::MaskedFixedLength => {
            let out = model.forward_masked_nat(&mut g, x)?;
            masked_loss(&mut g, out.log_probs, reference, eos)?
        }
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let scaled = g.scale(loss, R::from_f64(weight));
    g.backward(scaled)?;
    Ok(UtteranceGrad {
        report,
        grads: g.param_grads(),
    })
}

/// One optimizer step's log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub ce: f64,
    /// Fraction of batch members that took the joint branch.
    pub joint_fraction: f64,
    /// Members skipped because CTC could not align them.
    pub skipped: usize,
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<R: Real> {
    pub model: Model<R>,
    pub adam: AdamState<R>,
    pub cfg: TrainConfig,
    pub seed: u64,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: Model<R>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(model.params()),
            model,
            cfg,
            seed,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step()
    }

    /// Updates on one batch. `grad_fn` computes member gradients; it is
    /// given (member index, features, reference, weight, seed) and lets the
    /// caller fan members out to worker threads. Gradients are summed in
    /// member order, so the result does not depend on scheduling.
    pub fn train_batch_with<F>(&mut self, batch: &Batch, grad_fn: F) -> Result<StepRecord>
    where
        F: FnOnce(
            &Model<R>,
            &[(FeatureMatrix, Vec<usize>, u64)],
            &TrainConfig,
            f64,
        ) -> Vec<Result<UtteranceGrad<R>>>,
    {
        let step = self.step() + 1;
        let weight = 1.0 / batch.len().max(1) as f64;
        let jobs: Vec<(FeatureMatrix, Vec<usize>, u64)> = (0..batch.len())
            .map(|i| {
                (
                    batch.member_features(i),
                    batch.member_target(i).to_vec(),
                    mix_seed(&[self.seed, step, batch.indices[i] as u64]),
                )
            })
            .collect();
        let results = grad_fn(&self.model, &jobs, &self.cfg, weight);

        let mut rec = StepRecord {
            step,
            lr: lr_schedule(
                step,
                self.cfg.warmup_steps,
                self.model.config().d_model,
                self.cfg.lr_scale,
            ),
            loss: 0.0,
            ctc: 0.0,
            ce: 0.0,
            joint_fraction: 0.0,
            skipped: 0,
        };
        let mut used = 0usize;
        let mut ce_count = 0usize;
        let params = self.model.params_mut();
        params.zero_grads();
        for r in results {
            match r {
                Ok(u) => {
                    params.accumulate_grads(&u.grads)?;
                    used += 1;
                    rec.loss += u.report.total;
                    rec.ctc += u.report.ctc;
                    if let Some(ce) = u.report.ce {
                        rec.ce += ce;
                        ce_count += 1;
                    }
                    if u.report.branch == Branch::Joint {
                        rec.joint_fraction += 1.0;
                    }
                }
                Err(Error::Infeasible { .. }) => rec.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            params.zero_grads();
            return Ok(rec);
        }
        for t in params.tensors_mut() {
            if !t.all_finite() {
                return Err(Error::NonFinite("gradients".into()));
            }
        }
        rec.loss /= used as f64;
        rec.ctc /= used as f64;
        rec.ce /= ce_count.max(1) as f64;
        rec.joint_fraction /= used as f64;
        adam_step(params, &mut self.adam, rec.lr)?;
        Ok(rec)
    }

    /// Sequential member evaluation.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.train_batch_with(batch, |model, jobs, cfg, weight| {
            jobs.iter()
                .map(|(f, r, s)| utterance_grad(model, f, r, cfg, weight, true, *s))
                .collect()
        })
    }

    /// Batches of one epoch, shuffled by (seed, epoch).
    pub fn epoch_batches(&self, utts: &[Utterance], epoch: usize) -> Vec<Batch> {
        make_batches(
            utts,
            self.cfg.batch_size,
            mix_seed(&[self.seed, epoch as u64]),
            self.cfg.sort_by_length,
            self.model.config().special().pad,
        )
    }
}
