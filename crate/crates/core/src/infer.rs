//! Decoding: greedy argmax over the single parallel decoder pass, and a
//! left-to-right beam search over the same log-probabilities with optional
//! language-model shallow fusion.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::ctc::TriggerSet;
use crate::data::{FeatureMatrix, SpecialTokens};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lm::LanguageModel;
use crate::network::{DecoderMode, Model};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::TokenSequence;

/// Decoder log-probabilities for one utterance (`T′ × V`; `T′` may be 0).
#[derive(Debug, Clone)]
pub struct NatOutput<R> {
    pub log_probs: Tensor<R>,
    /// Triggered encoder frames; `None` for the masked baseline.
    pub trigger: Option<TriggerSet>,
    pub encoder_frames: usize,
}

impl<R: Real> NatOutput<R> {
    pub fn predicted_len(&self) -> usize {
        self.log_probs.rows()
    }
}

/// Runs encoder, trigger and exactly one decoder pass (none if nothing fires).
pub fn nat_log_probs<R: Real>(model: &Model<R>, feat: &FeatureMatrix) -> Result<NatOutput<R>> {
    let mut g = Graph::inference(model.params());
    let x = model.feature_input(&mut g, feat)?;
    let v = model.config().vocab_size;
    match model.config().mode {
        DecoderMode::SpikeTriggered => {
            let out = model.forward_st_nat(&mut g, x)?;
            let encoder_frames = g.rows(out.encoded);
            let log_probs = match &out.decoder {
                Some(d) => g.tensor(d.log_probs),
                None => Tensor::zeros(&[0, v]),
            };
            Ok(NatOutput {
                log_probs,
                trigger: Some(out.trigger),
                encoder_frames,
            })
        }
        DecoderMode::MaskedFixedLength => {
            let out = model.forward_masked_nat(&mut g, x)?;
            let encoder_frames = crate::layers::front_end_len(feat.rows());
            Ok(NatOutput {
                log_probs: g.tensor(out.log_probs),
                trigger: None,
                encoder_frames,
            })
        }
    }
}

/// Best non-PAD token of a row; ties go to the lowest id.
fn best_token<R: Real>(row: &[R], pad: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &x) in row.iter().enumerate() {
        if k != pad && (best == usize::MAX || x > row[best]) {
            best = k;
        }
    }
    best
}

/// Position-wise argmax, truncated before the first EOS.
pub fn greedy_tokens<R: Real>(log_probs: &Tensor<R>, special: SpecialTokens) -> TokenSequence {
    let mut out = Vec::new();
    for i in 0..log_probs.rows() {
        let tok = best_token(log_probs.row(i), special.pad);
        if tok == special.eos {
            break;
        }
        out.push(tok);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: TokenSequence,
    pub predicted_len: usize,
    pub encoder_frames: usize,
    pub trigger: Option<TriggerSet>,
}

pub fn greedy_decode<R: Real>(model: &Model<R>, feat: &FeatureMatrix) -> Result<Decoded> {
    let nat = nat_log_probs(model, feat)?;
    let tokens = greedy_tokens(&nat.log_probs, model.config().special());
    Ok(Decoded {
        tokens,
        predicted_len: nat.predicted_len(),
        encoder_frames: nat.encoder_frames,
        trigger: nat.trigger,
    })
}

/// A beam entry. Scores are natural-log sums; `combined = nat + λ·lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, EOS excluded.
    pub tokens: TokenSequence,
    pub nat_logp: f64,
    pub lm_logp: f64,
    pub combined: f64,
    /// Whether the hypothesis ended by emitting EOS.
    pub finished: bool,
}

struct Candidate {
    hyp: Hypothesis,
    local: f64,
    token: usize,
}

fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.hyp
        .combined
        .total_cmp(&a.hyp.combined)
        .then(b.local.total_cmp(&a.local))
        .then(a.token.cmp(&b.token))
}

/// Beam search over a `T′ × V` matrix of decoder log-probabilities.
///
/// Position `i` extends every live hypothesis with its `beam` best tokens
/// under `nat[i][k] + λ·lm[k]`, then keeps the `beam` best by combined score.
/// EOS retires a hypothesis. The result is the best of the retired and the
/// still-live hypotheses. PAD is never emitted. With `λ = 0` the LM is not
/// queried.
pub fn beam_search<R: Real>(
    nat: &Tensor<R>,
    lm: Option<&LanguageModel<R>>,
    lambda: f64,
    beam: usize,
    special: SpecialTokens,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!(
            "LM weight {lambda} must be finite and non-negative"
        )));
    }
    let v = nat.cols();
    if special.eos >= v || special.pad >= v {
        return Err(Error::Dimension(format!("decoder output has {v} columns")));
    }
    let lm = if lambda > 0.0 { lm } else { None };
    if let Some(lm) = lm {
        if lm.config().vocab_size != v {
            return Err(Error::Dimension(format!(
                "LM vocabulary {} differs from decoder vocabulary {v}",
                lm.config().vocab_size
            )));
        }
    }
    let empty = Hypothesis {
        tokens: Vec::new(),
        nat_logp: 0.0,
        lm_logp: 0.0,
        combined: 0.0,
        finished: false,
    };
    let mut active = alloc::vec![empty];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for i in 0..nat.rows() {
        let row = nat.row(i);
        let mut cands = Vec::new();
        for h in &active {
            let lm_row: Option<Vec<R>> = match lm {
                Some(lm) => Some(lm.score_step(&h.tokens)?),
                None => None,
            };
            let mut local: Vec<Candidate> = (0..v)
                .filter(|&k| k != special.pad)
                .map(|k| {
                    let n = row[k].as_f64();
                    let l = lm_row.as_ref().map_or(0.0, |r| r[k].as_f64());
                    let s = n + lambda * l;
                    let mut hyp = h.clone();
                    hyp.nat_logp += n;
                    hyp.lm_logp += l;
                    hyp.combined = hyp.nat_logp + lambda * hyp.lm_logp;
                    if k == special.eos {
                        hyp.finished = true;
                    } else {
                        hyp.tokens.push(k);
                    }
                    Candidate {
                        hyp,
                        local: s,
                        token: k,
                    }
                })
                .collect();
            local.sort_by(|a, b| b.local.total_cmp(&a.local).then(a.token.cmp(&b.token)));
            local.truncate(beam);
            cands.extend(local);
        }
        cands.sort_by(by_score);
        cands.truncate(beam);
        active.clear();
        for c in cands {
            if c.hyp.finished {
                finished.push(c.hyp);
            } else {
                active.push(c.hyp);
            }
        }
        if active.is_empty() {
            break;
        }
    }
    let best = finished.into_iter().chain(active).reduce(|best, h| {
        if h.combined > best.combined {
            h
        } else {
            best
        }
    });
    Ok(best.expect("at least one hypothesis survives"))
}

pub fn beam_decode<R: Real>(
    model: &Model<R>,
    lm: Option<&LanguageModel<R>>,
    feat: &FeatureMatrix,
    lambda: f64,
    beam: usize,
) -> Result<(Decoded, Hypothesis)> {
    let nat = nat_log_probs(model, feat)?;
    let hyp = beam_search(&nat.log_probs, lm, lambda, beam, model.config().special())?;
    let decoded = Decoded {
        tokens: hyp.tokens.clone(),
        predicted_len: nat.predicted_len(),
        encoder_frames: nat.encoder_frames,
        trigger: nat.trigger,
    };
    Ok((decoded, hyp))
}
