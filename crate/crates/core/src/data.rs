//! Features, vocabulary, utterances, batching, and a synthetic corpus with
//! known token boundaries.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::TokenSequence;

pub const FEATURE_DIM: usize = 40;
pub const FRAME_SHIFT_SECONDS: f64 = 0.010;

pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const EOS_TOKEN: &str = "<EOS>";

/// Frames × feature-dim matrix of single-precision features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{rows}×{cols} feature matrix given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// Audio duration implied by the 10 ms frame shift.
    pub fn duration_seconds(&self) -> f64 {
        self.rows as f64 * FRAME_SHIFT_SECONDS
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let data = self.data.iter().map(|&v| R::from_f32(v)).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("shape matches")
    }

    /// Copy of the first `rows` frames.
    pub fn truncated(&self, rows: usize) -> Self {
        let rows = rows.min(self.rows);
        Self {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }
}

/// Reserved ids, which always occupy the last three vocabulary slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: usize,
    pub unk: usize,
    pub eos: usize,
}

impl SpecialTokens {
    pub fn for_vocab_size(v: usize) -> Self {
        assert!(v >= 4, "vocabulary needs at least one ordinary token");
        Self {
            pad: v - 3,
            unk: v - 2,
            eos: v - 1,
        }
    }
}

/// Dense token ↔ id mapping. Ordinary tokens come first, then `<PAD>`,
/// `<UNK>` and `<EOS>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Ordinary tokens followed by the three reserved symbols.
    pub fn new<S: Into<String>>(ordinary: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = ordinary.into_iter().map(Into::into).collect();
        tokens.extend([PAD_TOKEN, UNK_TOKEN, EOS_TOKEN].map(String::from));
        Self::from_tokens(tokens)
    }

    /// Full token list in id order, as stored in a vocabulary file.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        if n < 4 {
            return Err(Error::Format(
                "vocabulary needs an ordinary token and the three reserved symbols".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Format(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("token '{t}' appears twice")));
            }
        }
        let sp = SpecialTokens::for_vocab_size(n);
        for (name, id) in [
            (PAD_TOKEN, sp.pad),
            (UNK_TOKEN, sp.unk),
            (EOS_TOKEN, sp.eos),
        ] {
            if index.get(name) != Some(&id) {
                return Err(Error::Format(format!("{name} must have id {id}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `n` single-character tokens: `a`..`z`, then CJK ideographs.
    pub fn synthetic(n: usize) -> Self {
        let chars = (0..n).map(|i| {
            let c = if i < 26 {
                char::from(b'a' + i as u8)
            } else {
                char::from_u32(0x4E00 + (i - 26) as u32).expect("valid ideograph")
            };
            c.to_string()
        });
        Self::new(chars).expect("distinct synthetic tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens::for_vocab_size(self.len())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Per-character tokenization; unknown characters become `<UNK>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                self.id(c.encode_utf8(&mut buf))
                    .unwrap_or(self.special().unk)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect()
    }
}

/// One training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: TokenSequence,
    /// Per-token feature-frame intervals `[start, end)`, synthetic data only.
    pub boundaries: Option<Vec<(usize, usize)>>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        let Some(b) = &self.boundaries else {
            return Ok(());
        };
        if b.len() != self.transcript.len() {
            return Err(Error::Contract(format!(
                "{}: {} boundaries for {} tokens",
                self.id,
                b.len(),
                self.transcript.len()
            )));
        }
        let mut prev_end = 0;
        for &(s, e) in b {
            if s < prev_end || e <= s || e > self.features.rows() {
                return Err(Error::Contract(format!(
                    "{}: bad boundary [{s}, {e})",
                    self.id
                )));
            }
            prev_end = e;
        }
        Ok(())
    }
}

/// Shape of the synthetic "speech".
///
/// Every ordinary token is spelled as a fixed sequence of sub-units drawn
/// from a small shared inventory, the way characters are made of phones.
/// Each unit owns a random template and is rendered as a run of
/// template-plus-noise frames. Tokens are separated by noisy silence.
/// With `units_per_token == 1` each token instead owns its own template.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub units_per_token: usize,
    /// Size of the shared unit inventory; unused with one unit per token.
    pub unit_inventory: usize,
    pub min_unit_frames: usize,
    pub max_unit_frames: usize,
    pub min_silence: usize,
    pub max_silence: usize,
    pub noise: f64,
    pub feat_dim: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_tokens: 2,
            max_tokens: 12,
            units_per_token: 3,
            unit_inventory: 8,
            min_unit_frames: 3,
            max_unit_frames: 6,
            min_silence: 4,
            max_silence: 8,
            noise: 0.1,
            feat_dim: FEATURE_DIM,
        }
    }
}

impl SynthParams {
    /// One constant template per token, segments of 4–10 frames separated by
    /// 0–6 frames of silence.
    pub fn token_templates() -> Self {
        Self {
            units_per_token: 1,
            unit_inventory: 0,
            min_unit_frames: 4,
            max_unit_frames: 10,
            min_silence: 0,
            max_silence: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if vocab_size < 2 {
            return Err(Error::Usage(format!(
                "synthetic vocabulary needs ≥ 2 tokens, got {vocab_size}"
            )));
        }
        if self.min_tokens == 0
            || self.min_tokens > self.max_tokens
            || self.units_per_token == 0
            || self.min_unit_frames == 0
            || self.min_unit_frames > self.max_unit_frames
            || self.min_silence > self.max_silence
            || self.feat_dim == 0
            || self.noise.is_nan()
            || self.noise < 0.0
        {
            return Err(Error::Usage(
                "inconsistent synthetic corpus parameters".into(),
            ));
        }
        if self.units_per_token > 1 {
            // Spellings without back-to-back repeats: n·(n−1)^(u−1).
            let n = self.unit_inventory as u64;
            let spellings = n
                .saturating_sub(1)
                .checked_pow(self.units_per_token as u32 - 1)
                .and_then(|x| x.checked_mul(n));
            if self.unit_inventory < 2 || spellings.is_some_and(|n| n < vocab_size as u64) {
                return Err(Error::Usage(format!(
                    "{} units spelled {} at a time cannot name {vocab_size} tokens",
                    self.unit_inventory, self.units_per_token
                )));
            }
        }
        Ok(())
    }
}

/// Spellings must differ in at least two positions and must not be
/// reorderings of one another.
fn spellings_distinct(a: &[usize], b: &[usize]) -> bool {
    let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
    if a.len() > 1 && differing < 2 {
        return false;
    }
    let (mut x, mut y) = (a.to_vec(), b.to_vec());
    x.sort_unstable();
    y.sort_unstable();
    a.len() == 1 || x != y
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    /// One `feat_dim` template per unit.
    pub templates: Vec<Vec<f32>>,
    /// Unit sequence of each ordinary token; all distinct.
    pub spellings: Vec<Vec<usize>>,
    pub utterances: Vec<Utterance>,
}

/// Deterministic synthetic corpus of `n_utts` utterances over `vocab_size`
/// ordinary tokens.
///
/// Each utterance is a uniformly random token sequence with silence
/// (min_silence..=max_silence frames) before, between and after its tokens.
pub fn synth_corpus(
    n_utts: usize,
    vocab_size: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<SyntheticCorpus> {
    params.validate(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.feat_dim;
    let gauss = |rng: &mut ChaCha8Rng| -> f32 {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    };
    let n_units = if params.units_per_token == 1 {
        vocab_size
    } else {
        params.unit_inventory
    };
    let templates: Vec<Vec<f32>> = (0..n_units)
        .map(|_| (0..d).map(|_| gauss(&mut rng)).collect())
        .collect();
    let spellings: Vec<Vec<usize>> = if params.units_per_token == 1 {
        (0..vocab_size).map(|k| alloc::vec![k]).collect()
    } else {
        let mut out: Vec<Vec<usize>> = Vec::with_capacity(vocab_size);
        let mut attempts = 0usize;
        while out.len() < vocab_size {
            attempts += 1;
            if attempts > 10_000 * vocab_size {
                return Err(Error::Usage(format!(
                    "could not find {vocab_size} mutually distinct spellings over {n_units} units"
                )));
            }
            let s: Vec<usize> = (0..params.units_per_token)
                .map(|_| rng.random_range(0..n_units))
                .collect();
            // Back-to-back repeats would render as one longer run.
            if s.windows(2).any(|w| w[0] == w[1]) {
                continue;
            }
            if out.iter().all(|o| spellings_distinct(o, &s)) {
                out.push(s);
            }
        }
        out
    };
    let sigma = params.noise as f32;
    let width = (n_utts.max(1) - 1).to_string().len().max(4);

    let mut utterances = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let len = rng.random_range(params.min_tokens..=params.max_tokens);
        let transcript: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        let mut data = Vec::new();
        let mut boundaries = Vec::with_capacity(len);
        let mut frames = 0;
        let silence = |rng: &mut ChaCha8Rng, data: &mut Vec<f32>, frames: &mut usize| {
            let n = rng.random_range(params.min_silence..=params.max_silence);
            for _ in 0..n * d {
                data.push(sigma * gauss(rng));
            }
            *frames += n;
        };
        silence(&mut rng, &mut data, &mut frames);
        for (i, &k) in transcript.iter().enumerate() {
            if i > 0 {
                silence(&mut rng, &mut data, &mut frames);
            }
            let start = frames;
            for &unit in &spellings[k] {
                let n = rng.random_range(params.min_unit_frames..=params.max_unit_frames);
                for _ in 0..n {
                    for &v in &templates[unit][..d] {
                        data.push(v + sigma * gauss(&mut rng));
                    }
                }
                frames += n;
            }
            boundaries.push((start, frames));
        }
        silence(&mut rng, &mut data, &mut frames);
        let utt = Utterance {
            id: format!("synth{u:0width$}"),
            features: FeatureMatrix::new(frames, d, data)?,
            transcript,
            boundaries: Some(boundaries),
        };
        utt.validate()?;
        utterances.push(utt);
    }
    Ok(SyntheticCorpus {
        vocab: Vocab::synthetic(vocab_size),
        templates,
        spellings,
        utterances,
    })
}

/// Zero-padded mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the members in the source utterance list.
    pub indices: Vec<usize>,
    pub max_frames: usize,
    pub feat_dim: usize,
    /// `len × max_frames × feat_dim`, zero beyond each member's length.
    pub features: Vec<f32>,
    pub frame_lens: Vec<usize>,
    /// True exactly on real frames, `len × max_frames`.
    pub frame_mask: Vec<bool>,
    pub max_target: usize,
    /// Padded with the PAD id, `len × max_target`.
    pub targets: Vec<usize>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn from_utterances(utts: &[Utterance], indices: Vec<usize>, pad_id: usize) -> Self {
        let members: Vec<&Utterance> = indices.iter().map(|&i| &utts[i]).collect();
        let feat_dim = members.first().map_or(FEATURE_DIM, |u| u.features.cols());
        let max_frames = members.iter().map(|u| u.features.rows()).max().unwrap_or(0);
        let max_target = members
            .iter()
            .map(|u| u.transcript.len())
            .max()
            .unwrap_or(0);
        let b = members.len();
        let mut features = vec![0.0; b * max_frames * feat_dim];
        let mut frame_mask = vec![false; b * max_frames];
        let mut targets = vec![pad_id; b * max_target];
        for (i, u) in members.iter().enumerate() {
            let n = u.features.rows();
            let off = i * max_frames * feat_dim;
            features[off..off + n * feat_dim].copy_from_slice(u.features.data());
            frame_mask[i * max_frames..i * max_frames + n].fill(true);
            targets[i * max_target..i * max_target + u.transcript.len()]
                .copy_from_slice(&u.transcript);
        }
        Self {
            frame_lens: members.iter().map(|u| u.features.rows()).collect(),
            target_lens: members.iter().map(|u| u.transcript.len()).collect(),
            indices,
            max_frames,
            feat_dim,
            features,
            frame_mask,
            max_target,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Real (unpadded) frames of member `i`.
    pub fn member_features(&self, i: usize) -> FeatureMatrix {
        let off = i * self.max_frames * self.feat_dim;
        let n = self.frame_lens[i];
        FeatureMatrix::new(
            n,
            self.feat_dim,
            self.features[off..off + n * self.feat_dim].to_vec(),
        )
        .expect("lengths are consistent")
    }

    pub fn member_target(&self, i: usize) -> &[usize] {
        &self.targets[i * self.max_target..i * self.max_target + self.target_lens[i]]
    }
}

/// Shuffles (seeded) and groups utterances into batches. With
/// `sort_by_length`, batches hold utterances of similar frame count and the
/// batch order is shuffled instead.
pub fn make_batches(
    utts: &[Utterance],
    batch_size: usize,
    seed: u64,
    sort_by_length: bool,
    pad_id: usize,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut rng);
    if sort_by_length {
        order.sort_by_key(|&i| utts[i].features.rows());
    }
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if sort_by_length {
        groups.shuffle(&mut rng);
    }
    groups
        .into_iter()
        .map(|idx| Batch::from_utterances(utts, idx, pad_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_last_three_ids() {
        let v = Vocab::synthetic(5);
        assert_eq!(v.len(), 8);
        let sp = v.special();
        assert_eq!((sp.pad, sp.unk, sp.eos), (5, 6, 7));
        assert_eq!(v.token(7), Some(EOS_TOKEN));
        assert_eq!(v.encode("abz"), vec![0, 1, sp.unk]);
        assert_eq!(v.decode(&v.encode("ecab")), "ecab");
    }

    #[test]
    fn vocab_file_validation() {
        let ok: Vec<String> = ["x", PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]
            .map(String::from)
            .to_vec();
        assert!(Vocab::from_tokens(ok).is_ok());
        let moved: Vec<String> = [PAD_TOKEN, "x", UNK_TOKEN, EOS_TOKEN]
            .map(String::from)
            .to_vec();
        assert!(Vocab::from_tokens(moved).is_err());
        let dup: Vec<String> = ["x", "x", PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]
            .map(String::from)
            .to_vec();
        assert!(Vocab::from_tokens(dup).is_err());
    }

    #[test]
    fn synthetic_frame_accounting() {
        for (params, seg, gap) in [
            (SynthParams::token_templates(), 4..=10, 0..=6),
            (SynthParams::default(), 9..=18, 4..=8),
        ] {
            let c = synth_corpus(20, 6, 3, &params).unwrap();
            for u in &c.utterances {
                let b = u.boundaries.as_ref().unwrap();
                assert!((2..=12).contains(&u.transcript.len()));
                let speech: usize = b.iter().map(|(s, e)| e - s).sum();
                assert!(b.iter().all(|(s, e)| seg.contains(&(e - s)) && s < e));
                // silences: before, between, after
                let mut gaps = vec![b[0].0];
                gaps.extend(b.windows(2).map(|w| w[1].0 - w[0].1));
                gaps.push(u.features.rows() - b.last().unwrap().1);
                assert!(gaps.iter().all(|g| gap.contains(g)), "{gaps:?}");
                assert_eq!(u.features.rows(), speech + gaps.iter().sum::<usize>());
            }
        }
    }

    #[test]
    fn spellings_are_distinct() {
        let c = synth_corpus(1, 20, 5, &SynthParams::default()).unwrap();
        assert_eq!(c.spellings.len(), 20);
        assert_eq!(c.templates.len(), 8);
        for (i, a) in c.spellings.iter().enumerate() {
            assert!(c.spellings[..i].iter().all(|b| b != a));
        }
        let tight = SynthParams {
            unit_inventory: 2,
            units_per_token: 2,
            ..SynthParams::default()
        };
        assert!(synth_corpus(1, 5, 5, &tight).is_err());
    }

    #[test]
    fn batches_cover_every_utterance_once() {
        let c = synth_corpus(11, 4, 9, &SynthParams::default()).unwrap();
        for sort in [false, true] {
            let batches = make_batches(&c.utterances, 4, 1, sort, 4);
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort();
            assert_eq!(seen, (0..11).collect::<Vec<_>>());
            for b in &batches {
                let real: usize = b.frame_lens.iter().sum();
                assert_eq!(b.frame_mask.iter().filter(|&&m| m).count(), real);
                for (k, &i) in b.indices.iter().enumerate() {
                    assert_eq!(b.member_features(k), c.utterances[i].features);
                    assert_eq!(b.member_target(k), &c.utterances[i].transcript[..]);
                }
            }
        }
    }
}
