//! Flat `key = value` run configuration covering the model, its training
//! schedule and the fusion language model. `#` starts a comment. An optional
//! leading `preset = toy|paper` selects the defaults the remaining keys
//! override; without it the toy preset applies.

use std::path::Path;

use stnat_core::{LmConfig, ModelConfig, TrainConfig};

use crate::error::{read_text, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lm: LmConfig,
    /// Whether `vocab_size` was given explicitly.
    pub vocab_fixed: bool,
}

impl RunConfig {
    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        let (model, train) = match name {
            "toy" => (ModelConfig::toy(vocab_size), TrainConfig::toy()),
            "paper" => (ModelConfig::paper(vocab_size), TrainConfig::paper()),
            _ => return None,
        };
        Some(Self {
            preset: name.into(),
            model,
            train,
            lm: LmConfig::toy(vocab_size),
            vocab_fixed: false,
        })
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        let mut cfg = Self::preset("toy", 4).expect("toy preset");
        let mut first = true;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key = value, found {body:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if !first {
                    return Err(err(line, "preset must be the first key".into()));
                }
                cfg =
                    Self::preset(v, 4).ok_or_else(|| err(line, format!("unknown preset {v:?}")))?;
                first = false;
                continue;
            }
            first = false;
            let mut known = false;
            for set in [
                cfg.model.set(k, v).map_err(|e| err(line, e.to_string()))?,
                cfg.train.set(k, v).map_err(|e| err(line, e.to_string()))?,
                cfg.lm.set(k, v).map_err(|e| err(line, e.to_string()))?,
            ] {
                known |= set;
            }
            if !known {
                return Err(err(line, format!("unknown key {k:?}")));
            }
            cfg.vocab_fixed |= k == "vocab_size";
        }
        cfg.train.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    /// Adopts the vocabulary size of the data, refusing a conflicting
    /// explicit value.
    pub fn resolve_vocab(&mut self, vocab_size: usize) -> Result<()> {
        if self.vocab_fixed && self.model.vocab_size != vocab_size {
            return Err(Error::Usage(format!(
                "config sets vocab_size = {} but the vocabulary has {vocab_size} entries",
                self.model.vocab_size
            )));
        }
        self.model.vocab_size = vocab_size;
        self.lm.vocab_size = vocab_size;
        self.model.validate()?;
        self.lm.validate()?;
        Ok(())
    }

    /// Every resolved key, one `key = value` per line. `vocab_size` is
    /// written only when it was fixed, so the text stays reusable across
    /// vocabularies.
    pub fn to_text(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        let mut seen = std::collections::HashSet::new();
        let pairs = self
            .model
            .to_pairs()
            .into_iter()
            .chain(self.train.to_pairs())
            .chain(self.lm.to_pairs());
        for (k, v) in pairs {
            if (k != "vocab_size" || self.vocab_fixed) && seen.insert(k) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset("paper", 30).unwrap();
        c.model.trigger_threshold = 0.5;
        c.train.epochs = 3;
        c.vocab_fixed = true;
        let back = RunConfig::parse(&c.to_text(), Path::new("x.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("d_model = 64\n\nbogus = 1\n", Path::new("a.cfg")).unwrap_err();
        assert_eq!(e.to_string(), "a.cfg:3: unknown key \"bogus\"");
        let e = RunConfig::parse("epochs = 2\npreset = toy\n", Path::new("a.cfg")).unwrap_err();
        assert!(e.to_string().starts_with("a.cfg:2:"));
        assert!(RunConfig::parse("epochs = many\n", Path::new("a.cfg")).is_err());
    }
}
