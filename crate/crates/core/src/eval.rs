//! Error rates, length diagnostics, real-time factor, spike alignment
//! analysis and attention export.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::SUBSAMPLING;
use crate::network::{DecoderMode, Model};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Levenshtein alignment counts between a hypothesis and a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Distance over reference length.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            return 0.0;
        }
        self.distance() as f64 / self.reference_len as f64
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Minimum edit distance with a breakdown; among equal-cost alignments the
/// backtrace prefers substitutions, then deletions.
pub fn edit_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = alloc::vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        reference_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0
            && j > 0
            && here == d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1])
        {
            if reference[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Character error rate of one pair. The reference must be non-empty.
pub fn cer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::Contract(
            "character error rate of an empty reference".into(),
        ));
    }
    Ok(edit_counts(hyp, reference))
}

/// Corpus CER: total edits over total reference length.
pub fn corpus_cer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (h, r) in pairs {
        total.merge(&cer(h, r)?);
    }
    Ok(total)
}

/// Histogram of `reference length − predicted length`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LengthHistogram {
    pub bins: BTreeMap<i64, usize>,
    pub total: usize,
}

impl LengthHistogram {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut h = Self::default();
        for (reference, predicted) in pairs {
            h.add(reference, predicted);
        }
        h
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        *self
            .bins
            .entry(reference as i64 - predicted as i64)
            .or_default() += 1;
        self.total += 1;
    }

    pub fn fraction(&self, pred: impl Fn(i64) -> bool) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n: usize = self
            .bins
            .iter()
            .filter(|(k, _)| pred(**k))
            .map(|(_, v)| v)
            .sum();
        n as f64 / self.total as f64
    }

    pub fn exact_fraction(&self) -> f64 {
        self.fraction(|d| d == 0)
    }

    /// Predicted length short of the reference.
    pub fn miss_fraction(&self) -> f64 {
        self.fraction(|d| d > 0)
    }

    pub fn surplus_fraction(&self) -> f64 {
        self.fraction(|d| d < 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub id: String,
    pub audio_seconds: f64,
    pub decode_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtfReport {
    pub utterances: usize,
    pub audio_seconds: f64,
    pub decode_seconds: f64,
    pub rtf: f64,
    pub median_decode_seconds: f64,
}

/// Real-time factor: total decode time over total audio time.
pub fn rtf(rows: &[TimingRow]) -> Result<RtfReport> {
    if rows.is_empty() {
        return Err(Error::Usage("no timing rows".into()));
    }
    if let Some(r) = rows.iter().find(|r| {
        !(r.audio_seconds >= 0.0 && r.decode_seconds >= 0.0) || !r.audio_seconds.is_finite()
    }) {
        return Err(Error::OutOfRange(format!("bad timing row for {}", r.id)));
    }
    let audio: f64 = rows.iter().map(|r| r.audio_seconds).sum();
    let decode: f64 = rows.iter().map(|r| r.decode_seconds).sum();
    if audio <= 0.0 {
        return Err(Error::OutOfRange("total audio duration is zero".into()));
    }
    Ok(RtfReport {
        utterances: rows.len(),
        audio_seconds: audio,
        decode_seconds: decode,
        rtf: decode / audio,
        median_decode_seconds: median(rows.iter().map(|r| r.decode_seconds).collect()),
    })
}

/// Median (mean of the middle two for even counts); 0 when empty.
pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Where one spike landed relative to the token intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikePlacement {
    /// Overlaps the interval of this token index.
    Token(usize),
    /// Inside a silence gap of the given length in feature frames.
    Silence { gap_frames: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeReport {
    pub placements: Vec<SpikePlacement>,
    /// Spikes overlapping some token interval.
    pub inside: usize,
    /// Spikes inside silence gaps longer than `SUBSAMPLING` frames.
    pub in_long_silence: usize,
    /// Tokens hit by at least one spike.
    pub tokens_covered: usize,
    pub tokens: usize,
}

impl SpikeReport {
    pub fn inside_fraction(&self) -> f64 {
        if self.placements.is_empty() {
            return 0.0;
        }
        self.inside as f64 / self.placements.len() as f64
    }

    pub fn merge(&mut self, other: &SpikeReport) {
        self.placements.extend_from_slice(&other.placements);
        self.inside += other.inside;
        self.in_long_silence += other.in_long_silence;
        self.tokens_covered += other.tokens_covered;
        self.tokens += other.tokens;
    }
}

/// Maps encoder frame `t` to feature frames `[4t, 4t + 4)` and classifies it
/// against half-open token intervals `[start, end)` over `frames` frames.
pub fn spike_boundary_report(
    spikes: &[usize],
    boundaries: &[(usize, usize)],
    frames: usize,
) -> Result<SpikeReport> {
    let mut prev_end = 0;
    for &(s, e) in boundaries {
        if s < prev_end || e <= s || e > frames {
            return Err(Error::Contract(format!(
                "token interval [{s}, {e}) is not ordered inside {frames} frames"
            )));
        }
        prev_end = e;
    }
    let mut covered = alloc::vec![false; boundaries.len()];
    let mut placements = Vec::with_capacity(spikes.len());
    let (mut inside, mut long) = (0, 0);
    for &t in spikes {
        let (lo, hi) = (t * SUBSAMPLING, (t + 1) * SUBSAMPLING);
        let hit = boundaries.iter().position(|&(s, e)| s < hi && lo < e);
        let place = match hit {
            Some(k) => {
                for (c, &(s, e)) in covered.iter_mut().zip(boundaries) {
                    if s < hi && lo < e {
                        *c = true;
                    }
                }
                inside += 1;
                SpikePlacement::Token(k)
            }
            None => {
                let gap_start = boundaries
                    .iter()
                    .map(|b| b.1)
                    .filter(|&e| e <= lo)
                    .max()
                    .unwrap_or(0);
                let gap_end = boundaries
                    .iter()
                    .map(|b| b.0)
                    .filter(|&s| s >= hi)
                    .min()
                    .unwrap_or(frames.max(hi));
                let gap_frames = gap_end - gap_start;
                if gap_frames > SUBSAMPLING {
                    long += 1;
                }
                SpikePlacement::Silence { gap_frames }
            }
        };
        placements.push(place);
    }
    Ok(SpikeReport {
        placements,
        inside,
        in_long_silence: long,
        tokens_covered: covered.iter().filter(|&&c| c).count(),
        tokens: boundaries.len(),
    })
}

/// Source-attention weights (`T′ × T_enc`) of one decoder block and head.
/// Returns a `0 × T_enc` tensor when nothing triggered.
pub fn export_attention<R: Real>(
    model: &Model<R>,
    feat: &FeatureMatrix,
    layer: usize,
    head: usize,
) -> Result<Tensor<R>> {
    let cfg = model.config();
    if layer >= cfg.n_dec_blocks || head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!(
            "layer {layer} / head {head} outside {} blocks × {} heads",
            cfg.n_dec_blocks, cfg.n_heads
        )));
    }
    let mut g = Graph::inference(model.params());
    let x = model.feature_input(&mut g, feat)?;
    let dec = match cfg.mode {
        DecoderMode::SpikeTriggered => model.forward_st_nat(&mut g, x)?.decoder,
        DecoderMode::MaskedFixedLength => Some(model.forward_masked_nat(&mut g, x)?),
    };
    match dec {
        Some(d) => Ok(g.tensor(d.source_weights[layer][head])),
        None => Ok(Tensor::zeros(&[
            0,
            crate::layers::front_end_len(feat.rows()),
        ])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_breakdown() {
        let c = cer(b"abxd".as_slice(), b"abcde".as_slice()).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 1, 0));
        assert!((c.rate() - 0.4).abs() < 1e-12);
        let c = cer(b"aabc".as_slice(), b"abc".as_slice()).unwrap();
        assert_eq!((c.distance(), c.insertions), (1, 1));
        assert!(cer::<u8>(b"a", b"").is_err());
    }

    #[test]
    fn histogram_fractions() {
        let h = LengthHistogram::from_pairs([(3, 3), (4, 3), (2, 3), (5, 5)]);
        assert_eq!(h.exact_fraction(), 0.5);
        assert_eq!(h.miss_fraction(), 0.25);
        assert_eq!(h.surplus_fraction(), 0.25);
    }

    #[test]
    fn rtf_is_a_ratio_of_sums() {
        let rows = [
            TimingRow {
                id: "a".into(),
                audio_seconds: 2.0,
                decode_seconds: 0.1,
            },
            TimingRow {
                id: "b".into(),
                audio_seconds: 3.0,
                decode_seconds: 0.4,
            },
        ];
        let r = rtf(&rows).unwrap();
        assert!((r.rtf - 0.1).abs() < 1e-12);
        assert!((r.median_decode_seconds - 0.25).abs() < 1e-12);
        assert!(rtf(&[]).is_err());
    }

    #[test]
    fn spikes_are_classified() {
        // tokens at frames [8,12) and [20,30); 40 frames total
        let r = spike_boundary_report(&[0, 2, 3, 4, 6], &[(8, 12), (20, 30)], 40).unwrap();
        assert_eq!(r.placements[0], SpikePlacement::Silence { gap_frames: 8 });
        assert_eq!(r.placements[1], SpikePlacement::Token(0));
        assert_eq!(r.placements[2], SpikePlacement::Silence { gap_frames: 8 });
        assert_eq!(r.placements[3], SpikePlacement::Silence { gap_frames: 8 });
        assert_eq!(r.placements[4], SpikePlacement::Token(1));
        assert_eq!((r.inside, r.in_long_silence, r.tokens_covered), (2, 3, 2));
        assert!(spike_boundary_report(&[0], &[(5, 3)], 10).is_err());
    }
}
