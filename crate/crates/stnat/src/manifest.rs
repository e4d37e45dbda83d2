//! Text files: manifests (`id<TAB>feature-path<TAB>transcript`), vocabularies
//! (one token per line, line number = id), hypotheses (`id<TAB>text`) and
//! synthetic token boundaries (`id<TAB>start-end start-end …`).
//!
//! Relative feature paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use stnat_core::{Utterance, Vocab};

use crate::error::{read_text, write, Error, Result};
use crate::fmat::read_features;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub transcript: String,
    pub line: usize,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in content_lines(&text) {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(
                path,
                line,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (id, feat, transcript) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
        if id.is_empty() {
            return Err(parse_err(path, line, "empty utterance id"));
        }
        if transcript.is_empty() {
            return Err(parse_err(
                path,
                line,
                format!("utterance {id} has an empty transcript"),
            ));
        }
        if !seen.insert(id.to_string()) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate utterance id {id}"),
            ));
        }
        out.push(ManifestEntry {
            id: id.into(),
            features: base.join(feat),
            transcript: transcript.into(),
            line,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, rows: &[(String, String, String)]) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|(id, f, t)| format!("{id}\t{f}\t{t}\n"))
        .collect();
    write(path, text)
}

/// Manifest rows with their features loaded and transcripts tokenized per
/// character (unknown characters become UNK).
pub fn load_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: read_features(&e.features)?,
                transcript: vocab.encode(&e.transcript),
                id: e.id,
                boundaries: None,
            })
        })
        .collect()
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    let tokens: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let text: String = vocab.tokens().iter().map(|t| format!("{t}\n")).collect();
    write(path, text)
}

/// Two-column `id<TAB>text` file; the text may be empty.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
    {
        if row.is_empty() {
            continue;
        }
        let (id, hyp) = row.split_once('\t').unwrap_or((row, ""));
        if !seen.insert(id.to_string()) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate utterance id {id}"),
            ));
        }
        out.push((id.to_string(), hyp.to_string()));
    }
    Ok(out)
}

pub fn write_hypotheses(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect();
    write(path, text)
}

/// Reference texts from either a manifest (3 columns) or a hypotheses-style
/// file (2 columns).
pub fn read_references(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    let three = content_lines(&text)
        .next()
        .is_some_and(|(_, l)| l.split('\t').count() == 3);
    if three {
        Ok(read_manifest(path)?
            .into_iter()
            .map(|e| (e.id, e.transcript))
            .collect())
    } else {
        read_hypotheses(path)
    }
}

pub type Boundaries = BTreeMap<String, Vec<(usize, usize)>>;

pub fn write_boundaries(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut text = String::new();
    for u in utts {
        let spans: Vec<String> = u
            .boundaries
            .iter()
            .flatten()
            .map(|(s, e)| format!("{s}-{e}"))
            .collect();
        text.push_str(&format!("{}\t{}\n", u.id, spans.join(" ")));
    }
    write(path, text)
}

pub fn read_boundaries(path: &Path) -> Result<Boundaries> {
    let text = read_text(path)?;
    let mut out = Boundaries::new();
    for (line, row) in content_lines(&text) {
        let (id, spans) = row
            .split_once('\t')
            .ok_or_else(|| parse_err(path, line, "expected id<TAB>spans"))?;
        let mut b = Vec::new();
        for span in spans.split_whitespace() {
            let parsed = span
                .split_once('-')
                .and_then(|(s, e)| Some((s.parse().ok()?, e.parse().ok()?)));
            b.push(parsed.ok_or_else(|| parse_err(path, line, format!("bad span {span:?}")))?);
        }
        out.insert(id.to_string(), b);
    }
    Ok(out)
}
