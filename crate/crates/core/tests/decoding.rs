//! Beam search against exhaustive enumeration, the greedy reduction law and
//! the one-pass decoder property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stnat_core::data::SpecialTokens;
use stnat_core::infer::{beam_decode, beam_search, greedy_decode, greedy_tokens};
use stnat_core::{DecoderMode, FeatureMatrix, LanguageModel, LmConfig, Model, ModelConfig, Tensor};

fn log_rows(rng: &mut ChaCha8Rng, rows: usize, v: usize, spread: f64) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * v);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-spread..spread)).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|x| x - lse));
    }
    Tensor::matrix(rows, v, data).unwrap()
}

fn tiny_lm(v: usize, seed: u64) -> LanguageModel<f64> {
    LanguageModel::new(LmConfig {
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        context: 8,
        vocab_size: v,
        dropout: 0.0,
        seed,
    })
    .unwrap()
}

/// Best combined score over every token string the search space admits:
/// non-PAD tokens, ending either at EOS or after the last position.
fn exhaustive(
    nat: &Tensor<f64>,
    lm: &LanguageModel<f64>,
    lambda: f64,
    special: SpecialTokens,
) -> (f64, Vec<usize>) {
    let v = nat.cols();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    if nat.rows() == 0 {
        return (0.0, Vec::new());
    }
    while let Some((prefix, score)) = stack.pop() {
        let i = prefix.len();
        let lm_row = lm.score_step(&prefix).unwrap();
        for k in (0..v).filter(|&k| k != special.pad) {
            let s = score + nat.get2(i, k) + lambda * lm_row[k];
            if k == special.eos || i + 1 == nat.rows() {
                let mut tokens = prefix.clone();
                if k != special.eos {
                    tokens.push(k);
                }
                if s > best.0 {
                    best = (s, tokens);
                }
            } else {
                let mut next = prefix.clone();
                next.push(k);
                stack.push((next, s));
            }
        }
    }
    best
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0;
    for v in 4..=5 {
        let special = SpecialTokens::for_vocab_size(v);
        for t in 0..=3usize {
            for trial in 0..10 {
                let nat = log_rows(&mut rng, t, v, 3.0);
                let lm = tiny_lm(v, trial as u64 + 100 * v as u64);
                let lambda = [0.0, 0.3, 1.0, 2.5][trial % 4];
                let beam = v.pow(t as u32).max(1);
                let hyp = beam_search(&nat, Some(&lm), lambda, beam, special).unwrap();
                let (score, tokens) = exhaustive(&nat, &lm, lambda, special);
                assert!(
                    (hyp.combined - score).abs() < 1e-9,
                    "v={v} t={t}: beam {} vs exhaustive {score}",
                    hyp.combined
                );
                assert_eq!(hyp.tokens, tokens);
                assert!((hyp.combined - (hyp.nat_logp + lambda * hyp.lm_logp)).abs() < 1e-12);
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 80);
}

#[test]
fn beam_one_without_lm_is_greedy_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let v = rng.random_range(4..12);
        let rows = rng.random_range(0..10);
        let special = SpecialTokens::for_vocab_size(v);
        let nat = log_rows(&mut rng, rows, v, 4.0);
        let lm = tiny_lm(v, case);
        let hyp = beam_search(&nat, Some(&lm), 0.0, 1, special).unwrap();
        assert_eq!(hyp.tokens, greedy_tokens(&nat, special), "case {case}");
    }
}

fn tiny_model(seed: u64, mode: DecoderMode) -> Model<f32> {
    Model::new(ModelConfig {
        feat_dim: 10,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 16,
        vocab_size: 8,
        trigger_threshold: 0.5,
        fixed_mask_len: 12,
        mode,
        seed,
        ..ModelConfig::toy(8)
    })
    .unwrap()
}

fn features(rng: &mut ChaCha8Rng, frames: usize) -> FeatureMatrix {
    let data = (0..frames * 10)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    FeatureMatrix::new(frames, 10, data).unwrap()
}

#[test]
fn model_level_reduction_law_and_single_decoder_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for seed in 0..10 {
        let model = tiny_model(seed, DecoderMode::SpikeTriggered);
        let lm = LanguageModel::<f32>::new(LmConfig {
            vocab_size: 8,
            ..LmConfig::toy(8)
        })
        .unwrap();
        for _ in 0..10 {
            let n = rng.random_range(4..60);
            let feat = features(&mut rng, n);
            let before = model.decoder_passes();
            let g = greedy_decode(&model, &feat).unwrap();
            let fired = usize::from(g.predicted_len > 0);
            assert_eq!(model.decoder_passes() - before, fired);
            let before = model.decoder_passes();
            let (b, _) = beam_decode(&model, Some(&lm), &feat, 0.0, 1).unwrap();
            assert_eq!(model.decoder_passes() - before, fired);
            assert_eq!(b.tokens, g.tokens);
            let before = model.decoder_passes();
            beam_decode(&model, Some(&lm), &feat, 0.7, 5).unwrap();
            assert_eq!(model.decoder_passes() - before, fired);
            cases += 1;
        }
    }
    assert_eq!(cases, 100);
}

#[test]
fn masked_baseline_runs_one_pass_of_fixed_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = tiny_model(1, DecoderMode::MaskedFixedLength);
    for _ in 0..5 {
        let feat = features(&mut rng, 30);
        let before = model.decoder_passes();
        let d = greedy_decode(&model, &feat).unwrap();
        assert_eq!(model.decoder_passes() - before, 1);
        assert_eq!(d.predicted_len, 12);
        assert!(d.tokens.len() <= 12);
    }
}

#[test]
fn greedy_output_never_exceeds_trigger_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = tiny_model(2, DecoderMode::SpikeTriggered);
    for _ in 0..30 {
        let n = rng.random_range(4..80);
        let feat = features(&mut rng, n);
        let d = greedy_decode(&model, &feat).unwrap();
        assert!(d.tokens.len() <= d.predicted_len);
        assert_eq!(d.predicted_len, d.trigger.as_ref().unwrap().len());
    }
}
