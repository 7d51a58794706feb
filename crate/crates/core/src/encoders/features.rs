//! `STARFEAT` feature files: an 8-byte magic, then little-endian `u32`
//! version, count and dim, `count × dim` `f32` values and `count` `u32` labels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"STARFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 3;

pub fn write_feature_file(
    path: impl AsRef<Path>,
    features: &Tensor<f32>,
    labels: &[u32],
) -> Result<()> {
    let path = path.as_ref();
    let (count, dim) = features.dims2();
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{} labels for {count} rows",
            labels.len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * count * (dim + 1));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a feature file held in memory. When `num_classes` is given every
/// label must be below it.
pub fn parse_feature_bytes(
    bytes: &[u8],
    num_classes: Option<usize>,
) -> Result<(Tensor<f32>, Vec<u32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Format("bad magic, expected STARFEAT".into()));
    }
    let version = read_u32(bytes, 8);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 12) as usize;
    let dim = read_u32(bytes, 16) as usize;
    if count == 0 || dim == 0 {
        return Err(Error::Format(format!(
            "count {count} and dim {dim} must both be positive"
        )));
    }
    let expected = HEADER_LEN + 4 * count * dim + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "length mismatch: header declares {count} x {dim} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + 4 * count * dim];
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value in row {}",
            i / dim
        )));
    }
    let labels: Vec<u32> = bytes[HEADER_LEN + 4 * count * dim..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(n) = num_classes {
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
    }
    Ok((Tensor::new(&[count, dim], data)?, labels))
}

pub fn load_feature_file(
    path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<(Tensor<f32>, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_feature_bytes(&bytes, num_classes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
