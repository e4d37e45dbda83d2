use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stnat::checkpoint::{average_checkpoints, load_lm, load_model, save_lm, save_model};
use stnat::config::RunConfig;
use stnat::error::{Error, Result};
use stnat::fmat::write_features;
use stnat::manifest::{
    load_manifest, read_boundaries, read_hypotheses, read_references, read_vocab, write_boundaries,
    write_hypotheses, write_manifest, write_vocab,
};
use stnat::run::{
    analyze, batch_decode, bench, bench_text, create_out_dir, hypothesis_rows, ledger_text,
    train_loop, write_run_manifest, Fusion,
};
use stnat_core::data::{synth_corpus, SynthParams};
use stnat_core::eval::{corpus_cer, rtf, TimingRow};
use stnat_core::lm::lm_train;

#[derive(Parser)]
#[command(
    name = "stnat",
    version,
    about = "Spike-triggered non-autoregressive speech recognizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with token boundaries.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Total utterances.
        #[arg(long)]
        n: usize,
        /// Ordinary tokens (reserved symbols are added).
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Utterances held out (from the end) as dev.tsv.
        #[arg(long, default_value_t = 0)]
        dev: usize,
        /// One template per token instead of unit-composed tokens.
        #[arg(long)]
        token_templates: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train an ST-NAT model and average its last checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        dev_manifest: Option<PathBuf>,
        /// Defaults to vocab.txt next to the training manifest.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train the fusion language model on manifest transcripts.
    TrainLm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Decode a manifest, greedily or with LM fusion.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to vocab.txt next to the checkpoint, then the manifest.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Write the timing ledger and real-time factor.
        #[arg(long)]
        rtf: bool,
        #[arg(long)]
        force: bool,
    },
    /// Corpus CER of a hypotheses file against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        /// Manifest or `id<TAB>text` file.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Length histogram, spike/boundary report and attention export.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Defaults to boundaries.tsv next to the manifest, when present.
        #[arg(long)]
        boundaries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Decoder block; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        force: bool,
    },
    /// Sweep the trigger threshold over 0.1, 0.3, 0.5 and 0.7.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Average checkpoints parameter-wise.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

/// First existing candidate vocabulary file.
fn find_vocab(explicit: Option<PathBuf>, near: &[&Path]) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    near.iter()
        .map(|p| sibling(p, "vocab.txt"))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Usage("no vocab.txt found; pass --vocab".into()))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            n,
            vocab,
            seed,
            dev,
            token_templates,
            force,
        } => {
            if n == 0 {
                return Err(Error::Usage("--n must be at least 1".into()));
            }
            if dev > n {
                return Err(Error::Usage(format!("--dev {dev} exceeds --n {n}")));
            }
            create_out_dir(&out, force)?;
            let params = if token_templates {
                SynthParams::token_templates()
            } else {
                SynthParams::default()
            };
            let corpus = synth_corpus(n, vocab, seed, &params)?;
            let feats = out.join("feats");
            std::fs::create_dir_all(&feats).map_err(|source| Error::Io {
                path: feats.clone(),
                source,
            })?;
            let mut rows = Vec::with_capacity(n);
            for u in &corpus.utterances {
                write_features(&feats.join(format!("{}.fmat", u.id)), &u.features)?;
                rows.push((
                    u.id.clone(),
                    format!("feats/{}.fmat", u.id),
                    corpus.vocab.decode(&u.transcript),
                ));
            }
            let (train, held) = rows.split_at(n - dev);
            write_manifest(&out.join("train.tsv"), train)?;
            if dev > 0 {
                write_manifest(&out.join("dev.tsv"), held)?;
            }
            write_vocab(&out.join("vocab.txt"), &corpus.vocab)?;
            write_boundaries(&out.join("boundaries.tsv"), &corpus.utterances)?;
            write_run_manifest(
                &out,
                "synth",
                Some(seed),
                None,
                &[
                    ("n", n.to_string()),
                    ("vocab", vocab.to_string()),
                    ("dev", dev.to_string()),
                    ("token_templates", token_templates.to_string()),
                ],
            )?;
            println!(
                "wrote {} train + {dev} dev utterances to {}",
                n - dev,
                out.display()
            );
        }
        Command::Train {
            config,
            train_manifest,
            dev_manifest,
            vocab,
            out,
            seed,
            force,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            let vocab_path = find_vocab(vocab, &[&train_manifest])?;
            let vocab = read_vocab(&vocab_path)?;
            cfg.resolve_vocab(vocab.len())?;
            let train = load_manifest(&train_manifest, &vocab)?;
            let dev = match &dev_manifest {
                Some(p) => load_manifest(p, &vocab)?,
                None => Vec::new(),
            };
            create_out_dir(&out, force)?;
            let mut inputs = vec![
                ("config", display(&config)),
                ("train_manifest", display(&train_manifest)),
                ("vocab", display(&vocab_path)),
            ];
            if let Some(p) = &dev_manifest {
                inputs.push(("dev_manifest", display(p)));
            }
            write_run_manifest(&out, "train", Some(seed), Some(&cfg), &inputs)?;
            let outcome = train_loop(&cfg, seed, &vocab, &train, &dev, &out)?;
            for row in &outcome.epochs {
                match &row.dev {
                    Some(d) => println!(
                        "epoch {} loss {:.4} dev_cer {:.4} exact {:.3} miss {:.3}",
                        row.epoch,
                        row.mean_loss,
                        d.cer(),
                        d.lengths.exact_fraction(),
                        d.lengths.miss_fraction()
                    ),
                    None => println!("epoch {} loss {:.4}", row.epoch, row.mean_loss),
                }
            }
            println!(
                "averaged checkpoint: {}",
                out.join("averaged.stnt").display()
            );
        }
        Command::TrainLm {
            config,
            manifest,
            vocab,
            out,
            force,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            let vocab_path = find_vocab(vocab, &[&manifest])?;
            let vocab = read_vocab(&vocab_path)?;
            cfg.resolve_vocab(vocab.len())?;
            let corpus: Vec<_> = read_references(&manifest)?
                .into_iter()
                .map(|(_, t)| vocab.encode(&t))
                .collect();
            create_out_dir(&out, force)?;
            write_run_manifest(
                &out,
                "train-lm",
                Some(cfg.lm.seed),
                Some(&cfg),
                &[
                    ("config", display(&config)),
                    ("manifest", display(&manifest)),
                ],
            )?;
            let (lm, records) = lm_train::<f32>(&corpus, cfg.lm.clone(), &cfg.train)?;
            save_lm(&out.join("lm.stlm"), &lm)?;
            write_vocab(&out.join("vocab.txt"), &vocab)?;
            if let Some(r) = records.last() {
                println!("{} steps, final loss {:.4}", r.step, r.loss);
            }
        }
        Command::Decode {
            ckpt,
            manifest,
            vocab,
            out,
            lm,
            lambda,
            beam,
            rtf: want_rtf,
            force,
        } => {
            let model = load_model(&ckpt)?;
            let vocab_path = find_vocab(vocab, &[&ckpt, &manifest])?;
            let vocab = read_vocab(&vocab_path)?;
            if vocab.len() != model.config().vocab_size {
                return Err(Error::Usage(format!(
                    "{} has {} entries but the model expects {}",
                    vocab_path.display(),
                    vocab.len(),
                    model.config().vocab_size
                )));
            }
            let utts = load_manifest(&manifest, &vocab)?;
            let lm_model = lm.as_deref().map(load_lm).transpose()?;
            create_out_dir(&out, force)?;
            let mut inputs = vec![
                ("ckpt", display(&ckpt)),
                ("manifest", display(&manifest)),
                ("vocab", display(&vocab_path)),
            ];
            if let Some(p) = &lm {
                inputs.push(("lm", display(p)));
                inputs.push(("lambda", lambda.to_string()));
                inputs.push(("beam", beam.to_string()));
            }
            write_run_manifest(&out, "decode", None, None, &inputs)?;
            let fusion = lm_model.as_ref().map(|lm| Fusion { lm, lambda, beam });
            let rows = batch_decode(&model, &utts, fusion);
            write_hypotheses(&out.join("hyp.txt"), &hypothesis_rows(&rows, &vocab))?;
            let failures: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
            for r in &failures {
                eprintln!("{}: {}", r.id, r.error.as_deref().unwrap_or_default());
            }
            if want_rtf {
                stnat::error::write(&out.join("ledger.tsv"), ledger_text(&rows))?;
                let timing: Vec<TimingRow> = rows.iter().map(|r| r.timing()).collect();
                let report = rtf(&timing)?;
                let text = format!(
                    "utterances\t{}\naudio_seconds\t{:.3}\ndecode_seconds\t{:.6}\nrtf\t{:.6}\nmedian_decode_seconds\t{:.6}\n",
                    report.utterances,
                    report.audio_seconds,
                    report.decode_seconds,
                    report.rtf,
                    report.median_decode_seconds
                );
                stnat::error::write(&out.join("rtf.tsv"), &text)?;
                print!("{text}");
            }
            println!(
                "decoded {} utterances, {} failed",
                rows.len(),
                failures.len()
            );
            return Ok(failures.is_empty());
        }
        Command::Eval {
            hyp,
            reference,
            vocab,
        } => {
            let hyps = read_hypotheses(&hyp)?;
            let refs = read_references(&reference)?;
            let hyp_ids: std::collections::BTreeSet<_> = hyps.iter().map(|h| &h.0).collect();
            let ref_ids: std::collections::BTreeSet<_> = refs.iter().map(|r| &r.0).collect();
            if hyp_ids != ref_ids {
                let only_hyp: Vec<_> = hyp_ids.difference(&ref_ids).map(|s| s.as_str()).collect();
                let only_ref: Vec<_> = ref_ids.difference(&hyp_ids).map(|s| s.as_str()).collect();
                return Err(Error::Usage(format!(
                    "utterance ids differ; only in hypotheses: [{}]; only in references: [{}]",
                    only_hyp.join(", "),
                    only_ref.join(", ")
                )));
            }
            let vocab = match find_vocab(vocab, &[&reference, &hyp]) {
                Ok(p) => Some(read_vocab(&p)?),
                Err(_) => None,
            };
            let tokenize = |s: &str| -> Vec<String> {
                match &vocab {
                    Some(v) => v.encode(s).into_iter().map(|i| i.to_string()).collect(),
                    None => s.chars().map(String::from).collect(),
                }
            };
            let by_id: std::collections::BTreeMap<_, _> =
                hyps.iter().map(|(id, t)| (id, tokenize(t))).collect();
            let pairs: Vec<(Vec<String>, Vec<String>)> = refs
                .iter()
                .map(|(id, t)| (by_id[id].clone(), tokenize(t)))
                .collect();
            let slices: Vec<(&[String], &[String])> = pairs
                .iter()
                .map(|(h, r)| (h.as_slice(), r.as_slice()))
                .collect();
            let c = corpus_cer(&slices)?;
            println!(
                "CER {:.4} ({} errors: {} sub, {} del, {} ins over {} tokens, {} utterances)",
                c.rate(),
                c.distance(),
                c.substitutions,
                c.deletions,
                c.insertions,
                c.reference_len,
                pairs.len()
            );
        }
        Command::Analyze {
            ckpt,
            manifest,
            vocab,
            boundaries,
            out,
            layer,
            head,
            force,
        } => {
            let model = load_model(&ckpt)?;
            let vocab_path = find_vocab(vocab, &[&ckpt, &manifest])?;
            let vocab = read_vocab(&vocab_path)?;
            let mut utts = load_manifest(&manifest, &vocab)?;
            let bpath = boundaries.or_else(|| {
                let p = sibling(&manifest, "boundaries.tsv");
                p.exists().then_some(p)
            });
            if let Some(p) = &bpath {
                let b = read_boundaries(p)?;
                for u in &mut utts {
                    u.boundaries = b.get(&u.id).cloned();
                }
            }
            create_out_dir(&out, force)?;
            let layer = layer.unwrap_or(model.config().n_dec_blocks.saturating_sub(1));
            let mut inputs = vec![
                ("ckpt", display(&ckpt)),
                ("manifest", display(&manifest)),
                ("layer", layer.to_string()),
                ("head", head.to_string()),
            ];
            if let Some(p) = &bpath {
                inputs.push(("boundaries", display(p)));
            }
            write_run_manifest(&out, "analyze", None, None, &inputs)?;
            let s = analyze(&model, &utts, layer, head, &out)?;
            println!(
                "length: exact {:.3} miss {:.3} surplus {:.3} over {} utterances",
                s.lengths.exact_fraction(),
                s.lengths.miss_fraction(),
                s.lengths.surplus_fraction(),
                s.lengths.total
            );
            if let Some(sp) = &s.spikes {
                println!(
                    "spikes: {} total, {:.3} inside token boundaries, {} in long silences",
                    sp.placements.len(),
                    sp.inside_fraction(),
                    sp.in_long_silence
                );
            }
            println!("attention maps: {}", s.attention_files.len());
        }
        Command::Bench {
            ckpt,
            manifest,
            vocab,
            out,
            force,
        } => {
            let model = load_model(&ckpt)?;
            let vocab = read_vocab(&find_vocab(vocab, &[&ckpt, &manifest])?)?;
            let utts = load_manifest(&manifest, &vocab)?;
            let text = bench_text(&bench(&model, &utts)?);
            if let Some(out) = &out {
                create_out_dir(out, force)?;
                write_run_manifest(
                    out,
                    "bench",
                    None,
                    None,
                    &[("ckpt", display(&ckpt)), ("manifest", display(&manifest))],
                )?;
                stnat::error::write(&out.join("bench.tsv"), &text)?;
            }
            print!("{text}");
        }
        Command::Average { out, ckpts } => {
            let model = average_checkpoints(&ckpts)?;
            save_model(&out, &model)?;
            println!(
                "averaged {} checkpoints into {}",
                ckpts.len(),
                out.display()
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
