//! Checkpoint container.
//!
//! ```text
//! magic      4 bytes   "STNT" (ST-NAT model) or "STLM" (language model)
//! version    u32       1
//! config     u32 byte length, then UTF-8 `key=value` lines
//! tensors    u32 count, then per tensor:
//!              u32 name length, UTF-8 name,
//!              u32 ndim, ndim × u32 extents,
//!              product(extents) × f32
//! ```
//!
//! Integers and floats are little-endian. Tensors appear in registration
//! order, which the loader checks against a freshly built model.

use std::path::{Path, PathBuf};

use stnat_core::params::average_params;
use stnat_core::{LanguageModel, LmConfig, Model, ModelConfig, ParamStore, Tensor};

use crate::error::{read, write, Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"STNT";
pub const LM_MAGIC: &[u8; 4] = b"STLM";
pub const VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub config: Vec<(String, String)>,
    pub params: ParamStore<f32>,
}

pub fn encode(magic: &[u8; 4], config: &[(&str, String)], params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(magic);
    put(&mut out, VERSION);
    let text: String = config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    put(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, n: usize) -> std::result::Result<&'a str, String> {
        std::str::from_utf8(self.take(n)?).map_err(|e| format!("invalid UTF-8: {e}"))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Container, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if &magic != MODEL_MAGIC && &magic != LM_MAGIC {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(&magic)));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = c.u32()?;
    let mut config = Vec::new();
    for line in c.text(len)?.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {line:?} has no '='"))?;
        config.push((k.to_string(), v.to_string()));
    }
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = c.u32()?;
        let name = c.text(n)?.to_string();
        let ndim = c.u32()?;
        let shape = (0..ndim)
            .map(|_| c.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format!("tensor {name} extents {shape:?} overflow"))?;
        let data = c
            .take(numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.push(name, t);
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(Container {
        magic,
        config,
        params,
    })
}

fn format_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |message| Error::Format {
        path: path.into(),
        message,
    }
}

fn load(path: &Path, magic: &[u8; 4]) -> Result<Container> {
    let c = decode(&read(path)?).map_err(format_err(path))?;
    if &c.magic != magic {
        return Err(format_err(path)(format!(
            "expected a {} checkpoint, found {}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&c.magic)
        )));
    }
    Ok(c)
}

pub fn model_config_from_pairs(pairs: &[(String, String)]) -> stnat_core::Result<ModelConfig> {
    let mut cfg = ModelConfig::toy(4);
    for (k, v) in pairs {
        if !cfg.set(k, v)? {
            return Err(stnat_core::Error::Format(format!(
                "unknown model key {k:?}"
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn lm_config_from_pairs(pairs: &[(String, String)]) -> stnat_core::Result<LmConfig> {
    let mut cfg = LmConfig::toy(4);
    for (k, v) in pairs {
        if !cfg.set(k, v)? {
            return Err(stnat_core::Error::Format(format!("unknown LM key {k:?}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    write(
        path,
        encode(MODEL_MAGIC, &model.config().to_pairs(), model.params()),
    )
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let c = load(path, MODEL_MAGIC)?;
    let cfg = model_config_from_pairs(&c.config).map_err(|e| format_err(path)(e.to_string()))?;
    Model::from_params(cfg, c.params).map_err(|e| format_err(path)(e.to_string()))
}

pub fn save_lm(path: &Path, lm: &LanguageModel<f32>) -> Result<()> {
    write(path, encode(LM_MAGIC, &lm.config().to_pairs(), lm.params()))
}

pub fn load_lm(path: &Path) -> Result<LanguageModel<f32>> {
    let c = load(path, LM_MAGIC)?;
    let cfg = lm_config_from_pairs(&c.config).map_err(|e| format_err(path)(e.to_string()))?;
    LanguageModel::from_params(cfg, c.params).map_err(|e| format_err(path)(e.to_string()))
}

/// Element-wise mean of model checkpoints that share one configuration.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Model<f32>> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Usage("no checkpoints to average".into()))?;
    let models = paths
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    let cfg = models[0].config().clone();
    if let Some((p, _)) = paths.iter().zip(&models).find(|(_, m)| m.config() != &cfg) {
        return Err(Error::Format {
            path: p.clone(),
            message: format!("configuration differs from {}", first.display()),
        });
    }
    let stores: Vec<&ParamStore<f32>> = models.iter().map(|m| m.params()).collect();
    let avg = average_params(&stores)?;
    Ok(Model::from_params(cfg, avg)?)
}
