//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 8                | magic `CLMCKPT\0`                        |
//! | 4                | format version (`u32`)                   |
//! | 8                | header length `n` (`u64`)                |
//! | n                | UTF-8 JSON header                        |
//! | 4 × total        | tensor values as `f32`, in header order  |
//!
//! The header holds the detector config, the build seed, training metadata
//! and an index of `{name, shape, offset}` entries (offsets in values).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{build, DetectorConfig, DetectorState, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    seed: u64,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &DetectorState, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for t in state.params().iter().chain(state.buffers()) {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
            offset,
        });
        offset += t.value.len();
    }
    let header = serde_json::to_vec(&Header {
        config: state.config().clone(),
        seed: state.seed(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in state.params().iter().chain(state.buffers()) {
        for v in t.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<(DetectorState, TrainingMeta)> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {}",
            bytes.len(),
            4 * total
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' out of range", entry.name)))?;
        named.push(NamedTensor {
            name: entry.name.clone(),
            value: Tensor::from_vec(&entry.shape, data.to_vec())?,
        });
    }
    let mut state = build(&header.config, header.seed)?;
    state.load_named(&named)?;
    if !state.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((state, header.meta))
}

pub fn save(path: &Path, state: &DetectorState, meta: &TrainingMeta) -> Result<()> {
    let bytes = to_bytes(state, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<(DetectorState, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_bytes(&bytes)
}

/// `state` with every value rounded to `f32`, i.e. what a save/load cycle
/// yields.
pub fn round_trip_precision(state: &DetectorState) -> DetectorState {
    let mut s = state.clone();
    for t in s.params_mut() {
        t.value = t.value.map(|v| v as f32 as f64);
    }
    for t in s.buffers_mut() {
        t.value = t.value.map(|v| v as f32 as f64);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let state = build(&DetectorConfig::tiny(), 3).unwrap();
        let meta = TrainingMeta {
            epoch: 7,
            validation_loss: 0.125,
        };
        let bytes = to_bytes(&state, &meta).unwrap();
        let (loaded, m) = from_bytes(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(loaded, round_trip_precision(&state));
        assert_eq!(to_bytes(&loaded, &meta).unwrap(), bytes);
    }

    #[test]
    fn header_is_little_endian_and_self_describing() {
        let state = build(&DetectorConfig::tiny(), 0).unwrap();
        let bytes = to_bytes(&state, &TrainingMeta::default()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
        assert_eq!(header["seed"], 0);
        assert_eq!(header["config"]["stages"], 2);
        let first = &header["tensors"][0];
        assert_eq!(first["name"], "stem.conv.weight");
        let w0 = f32::from_le_bytes(bytes[20 + len..24 + len].try_into().unwrap());
        assert_eq!(w0, state.params()[0].value.data()[0] as f32);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let state = build(&DetectorConfig::tiny(), 0).unwrap();
        let bytes = to_bytes(&state, &TrainingMeta::default()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"garbage").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(from_bytes(&nan).is_err());
    }
}
