//! CTC projection head, CTC loss (forward-backward in log space), and the
//! spike trigger that turns CTC posteriors into decoder input positions.
//!
//! Class layout of every CTC posterior row: column 0 is blank and column
//! `k + 1` is token id `k`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{linear, LinearParams};
use crate::scalar::{log_add, Real};
use crate::tensor::Tensor;
use crate::TokenSequence;

pub const BLANK: usize = 0;

/// Per-frame log-probabilities over blank plus the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid<R> {
    log_probs: Tensor<R>,
}

impl<R: Real> PosteriorGrid<R> {
    pub fn new(log_probs: Tensor<R>) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.cols() < 2 {
            return Err(Error::Dimension(alloc::format!(
                "posterior grid must be T×(V+1) with V ≥ 1, got {:?}",
                log_probs.shape()
            )));
        }
        Ok(Self { log_probs })
    }

    pub fn from_graph(g: &Graph<'_, R>, v: Var) -> Result<Self> {
        Self::new(g.tensor(v))
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    /// Vocabulary size excluding blank.
    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols() - 1
    }

    pub fn log_probs(&self) -> &Tensor<R> {
        &self.log_probs
    }

    pub fn row(&self, t: usize) -> &[R] {
        self.log_probs.row(t)
    }

    pub fn blank_prob(&self, t: usize) -> f64 {
        self.log_probs.get2(t, BLANK).as_f64().exp()
    }
}

/// Frames where the non-blank probability reached the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    positions: Vec<usize>,
    threshold: f64,
}

impl TriggerSet {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Predicted output length.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Linear projection to blank + vocabulary, then log-softmax per frame.
pub fn ctc_head<R: Real>(g: &mut Graph<'_, R>, enc: Var, proj: &LinearParams) -> Result<Var> {
    let logits = linear(g, enc, proj)?;
    Ok(g.log_softmax(logits))
}

/// Fires at every frame `t` with `1 − p_blank(t) ≥ β`.
pub fn trigger<R: Real>(grid: &PosteriorGrid<R>, beta: f64) -> TriggerSet {
    let positions = (0..grid.frames())
        .filter(|&t| 1.0 - grid.blank_prob(t) >= beta)
        .collect();
    TriggerSet {
        positions,
        threshold: beta,
    }
}

/// Encoder rows at the trigger positions, in order. Gradients scatter back
/// to the selected rows; the selection itself is not differentiated.
pub fn gather_triggered<R: Real>(g: &mut Graph<'_, R>, enc: Var, trig: &TriggerSet) -> Result<Var> {
    g.gather_rows(enc, trig.positions())
}

/// Number of adjacent equal labels; each needs a separating blank.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether some alignment of `target` fits into `frames` frames.
pub fn feasible(frames: usize, target: &[usize]) -> bool {
    frames >= target.len() + adjacent_repeats(target)
}

/// Negative log-likelihood of `target` under a `frames × classes` grid of
/// log-probabilities, and its gradient w.r.t. every grid entry.
///
/// Runs the forward and backward recursions over the blank-extended label
/// sequence entirely in log space.
pub fn ctc_nll<R: Real>(
    log_probs: &[R],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * classes {
        return Err(Error::Dimension(alloc::format!(
            "grid of {} values is not {frames}×{classes}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&k| k + 1 >= classes) {
        return Err(Error::OutOfRange(alloc::format!(
            "token {bad} outside a vocabulary of {}",
            classes - 1
        )));
    }
    if !feasible(frames, target) {
        return Err(Error::Infeasible {
            frames,
            label_len: target.len(),
            repeats: adjacent_repeats(target),
        });
    }
    let ninf = f64::NEG_INFINITY;
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] + 1 })
        .collect();
    let lp = |t: usize, k: usize| log_probs[t * classes + k].as_f64();
    // skip transition s-2 → s allowed for non-blank labels differing from s-2
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let via = |s2: usize| beta[next + s2] + lp(t + 1, ext[s2]);
            let mut b = via(s);
            if s + 1 < s_len {
                b = log_add(b, via(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, via(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::Infeasible {
            frames,
            label_len: target.len(),
            repeats: adjacent_repeats(target),
        });
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss `−log p(target | grid)` as a differentiable scalar node.
pub fn ctc_loss<R: Real>(g: &mut Graph<'_, R>, grid: Var, target: &[usize]) -> Result<Var> {
    let (frames, classes) = g.dims(grid);
    let (nll, grad) = ctc_nll(g.value(grid), frames, classes, target)?;
    let grad = grad.into_iter().map(R::from_f64).collect();
    Ok(g.precomputed_loss(grid, R::from_f64(nll), grad))
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-wise argmax, repeats collapsed, blanks removed.
pub fn ctc_greedy_path<R: Real>(grid: &PosteriorGrid<R>) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..grid.frames() {
        let k = argmax(grid.row(t));
        if k != BLANK && k != prev {
            out.push(k - 1);
        }
        prev = k;
    }
    out
}
