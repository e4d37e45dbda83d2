//! Runs over whole corpora: the epoch loop with checkpointing and dev
//! scoring, timed batch decoding, analysis reports and the threshold sweep.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use stnat_core::eval::{
    corpus_cer, export_attention, rtf, spike_boundary_report, EditCounts, LengthHistogram,
    RtfReport, SpikePlacement, SpikeReport, TimingRow,
};
use stnat_core::infer::{beam_decode, greedy_decode};
use stnat_core::params::average_params;
use stnat_core::{LanguageModel, Model, TriggerSet, Utterance, Vocab};

use crate::checkpoint::save_model;
use crate::config::RunConfig;
use crate::error::{io_err, write, Error, Result};
use crate::fmat::write_features;
use crate::manifest::write_vocab;

/// The sweep grid for the trigger threshold.
pub const BETA_GRID: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// Records the resolved configuration, seed and inputs of a run as
/// `run.json` in `out`.
pub fn write_run_manifest(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    config: Option<&RunConfig>,
    inputs: &[(&str, String)],
) -> Result<()> {
    #[derive(Serialize)]
    struct RunManifest<'a> {
        command: &'a str,
        seed: Option<u64>,
        config: Option<String>,
        inputs: serde_json::Map<String, serde_json::Value>,
    }
    let m = RunManifest {
        command,
        seed,
        config: config.map(RunConfig::to_text),
        inputs: inputs
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&m).expect("plain data serializes");
    write(&out.join("run.json"), text + "\n")
}

pub fn create_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        return Err(Error::Usage(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Dev-set scores of a greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DevScore {
    pub errors: EditCounts,
    pub lengths: LengthHistogram,
}

impl DevScore {
    pub fn cer(&self) -> f64 {
        self.errors.rate()
    }
}

pub fn evaluate(model: &Model<f32>, utts: &[Utterance]) -> Result<DevScore> {
    let mut lengths = LengthHistogram::default();
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let d = greedy_decode(model, &u.features)?;
        lengths.add(u.transcript.len(), d.predicted_len);
        hyps.push(d.tokens);
    }
    let pairs: Vec<(&[usize], &[usize])> = hyps
        .iter()
        .zip(utts)
        .map(|(h, u)| (h.as_slice(), u.transcript.as_slice()))
        .collect();
    Ok(DevScore {
        errors: corpus_cer(&pairs)?,
        lengths,
    })
}

#[derive(Debug, Serialize)]
struct MetricsLine {
    epoch: usize,
    step: u64,
    lr: f64,
    loss: f64,
    ctc: f64,
    ce: f64,
    joint_fraction: f64,
    skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub seconds: f64,
    pub dev: Option<DevScore>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Model<f32>,
    pub averaged: Model<f32>,
    pub epochs: Vec<EpochRow>,
}

/// Trains for `cfg.train.epochs` epochs, writing into `out`:
///
/// ```text
/// metrics.jsonl              one JSON record per optimizer step
/// epochs.tsv                 per-epoch loss and dev scores
/// checkpoints/epoch-NNN.stnt parameters after each epoch
/// averaged.stnt              mean of the last `average_last_k` epochs
/// vocab.txt                  the vocabulary the model was trained with
/// ```
///
/// The model is initialized from `cfg.model.seed`; `seed` drives shuffling,
/// augmentation and dropout.
pub fn train_loop(
    cfg: &RunConfig,
    seed: u64,
    vocab: &Vocab,
    train: &[Utterance],
    dev: &[Utterance],
    out: &Path,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Usage(format!(
            "model vocab_size {} differs from the vocabulary ({})",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    write_vocab(&out.join("vocab.txt"), vocab)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics =
        std::io::BufWriter::new(fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut table = String::from("epoch\tsteps\tloss\tseconds\tdev_cer\tdev_exact\tdev_miss\n");

    let model = Model::<f32>::new(cfg.model.clone())?;
    let mut trainer = stnat_core::Trainer::new(model, cfg.train.clone(), seed)?;
    let k = cfg.train.average_last_k;
    let mut recent = VecDeque::with_capacity(k);
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.train.epochs {
        let mut loss = 0.0;
        let mut n = 0;
        for batch in trainer.epoch_batches(train, epoch) {
            let rec = trainer.train_batch(&batch)?;
            let line = MetricsLine {
                epoch: epoch + 1,
                step: rec.step,
                lr: rec.lr,
                loss: rec.loss,
                ctc: rec.ctc,
                ce: rec.ce,
                joint_fraction: rec.joint_fraction,
                skipped: rec.skipped,
            };
            serde_json::to_writer(&mut metrics, &line).expect("plain data serializes");
            metrics.write_all(b"\n").map_err(io_err(&metrics_path))?;
            loss += rec.loss;
            n += 1;
        }
        save_model(
            &ckpt_dir.join(format!("epoch-{:03}.stnt", epoch + 1)),
            &trainer.model,
        )?;
        if recent.len() == k {
            recent.pop_front();
        }
        recent.push_back(trainer.model.params().clone());
        let dev_score = if dev.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, dev)?)
        };
        let row = EpochRow {
            epoch: epoch + 1,
            steps: trainer.step(),
            mean_loss: loss / n.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
            dev: dev_score,
        };
        let _ = write!(
            table,
            "{}\t{}\t{:.6}\t{:.1}",
            row.epoch, row.steps, row.mean_loss, row.seconds
        );
        match &row.dev {
            Some(d) => {
                let _ = writeln!(
                    table,
                    "\t{:.4}\t{:.4}\t{:.4}",
                    d.cer(),
                    d.lengths.exact_fraction(),
                    d.lengths.miss_fraction()
                );
            }
            None => table.push_str("\t-\t-\t-\n"),
        }
        rows.push(row);
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    write(&out.join("epochs.tsv"), table)?;

    let stores: Vec<_> = recent.iter().collect();
    let averaged = Model::from_params(cfg.model.clone(), average_params(&stores)?)?;
    save_model(&out.join("averaged.stnt"), &averaged)?;
    Ok(TrainOutcome {
        last: trainer.model,
        averaged,
        epochs: rows,
    })
}

/// LM fusion settings for [`batch_decode`].
#[derive(Debug, Clone, Copy)]
pub struct Fusion<'a> {
    pub lm: &'a LanguageModel<f32>,
    pub lambda: f64,
    pub beam: usize,
}

/// One decoded utterance and its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub id: String,
    pub tokens: Vec<usize>,
    pub predicted_len: usize,
    pub trigger: Option<TriggerSet>,
    pub audio_seconds: f64,
    pub decode_seconds: f64,
    /// Decoder forward passes this utterance took.
    pub decoder_passes: usize,
    pub error: Option<String>,
}

impl DecodeRow {
    pub fn timing(&self) -> TimingRow {
        TimingRow {
            id: self.id.clone(),
            audio_seconds: self.audio_seconds,
            decode_seconds: self.decode_seconds,
        }
    }
}

/// Sequential decoding, greedy without `fusion` and LM-fused beam search
/// with it. Only the model calls are timed. Failures are recorded per row.
pub fn batch_decode(
    model: &Model<f32>,
    utts: &[Utterance],
    fusion: Option<Fusion<'_>>,
) -> Vec<DecodeRow> {
    utts.iter()
        .map(|u| {
            let before = model.decoder_passes();
            let start = Instant::now();
            let result = match fusion {
                None => greedy_decode(model, &u.features),
                Some(f) => {
                    beam_decode(model, Some(f.lm), &u.features, f.lambda, f.beam).map(|r| r.0)
                }
            };
            let decode_seconds = start.elapsed().as_secs_f64();
            let decoder_passes = model.decoder_passes() - before;
            let audio_seconds = u.features.duration_seconds();
            match result {
                Ok(d) => DecodeRow {
                    id: u.id.clone(),
                    tokens: d.tokens,
                    predicted_len: d.predicted_len,
                    trigger: d.trigger,
                    audio_seconds,
                    decode_seconds,
                    decoder_passes,
                    error: None,
                },
                Err(e) => DecodeRow {
                    id: u.id.clone(),
                    tokens: Vec::new(),
                    predicted_len: 0,
                    trigger: None,
                    audio_seconds,
                    decode_seconds,
                    decoder_passes,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// `id<TAB>audio-seconds<TAB>decode-seconds` lines.
pub fn ledger_text(rows: &[DecodeRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{}\t{:.3}\t{:.9}\n",
                r.id, r.audio_seconds, r.decode_seconds
            )
        })
        .collect()
}

pub fn hypothesis_rows(rows: &[DecodeRow], vocab: &Vocab) -> Vec<(String, String)> {
    rows.iter()
        .map(|r| (r.id.clone(), vocab.decode(&r.tokens)))
        .collect()
}

/// Files written by [`analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub lengths: LengthHistogram,
    /// `None` when the utterances carry no boundaries.
    pub spikes: Option<SpikeReport>,
    pub attention_files: Vec<PathBuf>,
}

/// Writes `length_histogram.tsv`, `spikes.tsv` (boundaries permitting) and
/// one `attention/<id>.fmat` per utterance into `out`.
pub fn analyze(
    model: &Model<f32>,
    utts: &[Utterance],
    layer: usize,
    head: usize,
    out: &Path,
) -> Result<AnalysisSummary> {
    let att_dir = out.join("attention");
    fs::create_dir_all(&att_dir).map_err(io_err(&att_dir))?;
    let mut lengths = LengthHistogram::default();
    let mut spikes: Option<SpikeReport> = None;
    let mut spike_text = String::from("id\tencoder_frame\tplacement\n");
    let mut attention_files = Vec::new();
    for u in utts {
        let d = greedy_decode(model, &u.features)?;
        lengths.add(u.transcript.len(), d.predicted_len);
        if let (Some(b), Some(trig)) = (&u.boundaries, &d.trigger) {
            let report = spike_boundary_report(trig.positions(), b, u.features.rows())?;
            for (&t, p) in trig.positions().iter().zip(&report.placements) {
                let place = match p {
                    SpikePlacement::Token(k) => format!("token:{k}"),
                    SpikePlacement::Silence { gap_frames } => format!("silence:{gap_frames}"),
                };
                let _ = writeln!(spike_text, "{}\t{t}\t{place}", u.id);
            }
            match &mut spikes {
                Some(s) => s.merge(&report),
                None => spikes = Some(report),
            }
        }
        let att = export_attention(model, &u.features, layer, head)?;
        let path = att_dir.join(format!("{}.fmat", u.id));
        write_features(
            &path,
            &stnat_core::FeatureMatrix::new(att.rows(), att.cols(), att.data().to_vec())?,
        )?;
        attention_files.push(path);
    }
    let mut hist = String::from("ref_minus_pred\tcount\n");
    for (d, c) in &lengths.bins {
        let _ = writeln!(hist, "{d}\t{c}");
    }
    let _ = writeln!(
        hist,
        "# total {} exact {:.4} miss {:.4} surplus {:.4}",
        lengths.total,
        lengths.exact_fraction(),
        lengths.miss_fraction(),
        lengths.surplus_fraction()
    );
    write(&out.join("length_histogram.tsv"), hist)?;
    if let Some(s) = &spikes {
        let _ = writeln!(
            spike_text,
            "# spikes {} inside {} ({:.4}) long_silence {} tokens_covered {}/{}",
            s.placements.len(),
            s.inside,
            s.inside_fraction(),
            s.in_long_silence,
            s.tokens_covered,
            s.tokens
        );
        write(&out.join("spikes.tsv"), spike_text)?;
    }
    Ok(AnalysisSummary {
        lengths,
        spikes,
        attention_files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub beta: f64,
    pub mean_predicted_len: f64,
    pub lengths: LengthHistogram,
    pub cer: f64,
    pub rtf: RtfReport,
}

/// Greedy decoding of `utts` at each threshold of [`BETA_GRID`].
pub fn bench(model: &Model<f32>, utts: &[Utterance]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(BETA_GRID.len());
    for beta in BETA_GRID {
        let mut m = model.clone();
        m.set_trigger_threshold(beta)?;
        let decoded = batch_decode(&m, utts, None);
        if let Some(r) = decoded.iter().find(|r| r.error.is_some()) {
            return Err(Error::Usage(format!(
                "{}: {}",
                r.id,
                r.error.as_deref().unwrap_or_default()
            )));
        }
        let lengths = LengthHistogram::from_pairs(
            utts.iter()
                .zip(&decoded)
                .map(|(u, r)| (u.transcript.len(), r.predicted_len)),
        );
        let pairs: Vec<(&[usize], &[usize])> = decoded
            .iter()
            .zip(utts)
            .map(|(r, u)| (r.tokens.as_slice(), u.transcript.as_slice()))
            .collect();
        let timing: Vec<TimingRow> = decoded.iter().map(DecodeRow::timing).collect();
        rows.push(BenchRow {
            beta,
            mean_predicted_len: decoded.iter().map(|r| r.predicted_len as f64).sum::<f64>()
                / decoded.len().max(1) as f64,
            lengths,
            cer: corpus_cer(&pairs)?.rate(),
            rtf: rtf(&timing)?,
        });
    }
    Ok(rows)
}

pub fn bench_text(rows: &[BenchRow]) -> String {
    let mut s = String::from("beta\tmean_pred_len\texact\tmiss\tcer\trtf\tmedian_decode_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.3}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{:.6}",
            r.beta,
            r.mean_predicted_len,
            r.lengths.exact_fraction(),
            r.lengths.miss_fraction(),
            r.cer,
            r.rtf.rtf,
            r.rtf.median_decode_seconds
        );
    }
    s
}
