//! FMAT feature matrices: `"FMAT"`, u32 version (1), u32 rows, u32 cols,
//! then `rows · cols` little-endian f32 values, row-major. All integers are
//! little-endian.

use std::path::Path;

use stnat_core::FeatureMatrix;

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;

pub fn encode(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FeatureMatrix, String> {
    if bytes.len() < 16 {
        return Err(format!(
            "{} bytes is shorter than the FMAT header",
            bytes.len()
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(format!("unsupported FMAT version {version}"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format!("{rows}×{cols} overflows"))?;
    let body = &bytes[16..];
    if body.len() != payload {
        return Err(format!(
            "{rows}×{cols} needs {payload} payload bytes, found {}",
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureMatrix::new(rows, cols, data).map_err(|e| e.to_string())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode(&read(path)?).map_err(|message| Error::Format {
        path: path.into(),
        message,
    })
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write(path, encode(m))
}
