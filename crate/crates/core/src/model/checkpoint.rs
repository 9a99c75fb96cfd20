//! Binary checkpoint container: an 8-byte magic, a little-endian `u32`
//! header length, a JSON header (config, vocabulary digest, provenance,
//! tensor names and shapes) and the raw little-endian tensor data in header
//! order. The shared embedding is stored exactly once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Scalar};
use crate::artifact::{write_atomic, CODE_VERSION};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPCGENCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub phase: String,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    code_version: String,
    dtype: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        code_version: CODE_VERSION.to_string(),
        dtype: T::DTYPE.to_string(),
        config: params.config.clone(),
        meta: meta.clone(),
        tensors: tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + params.parameter_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &tensors {
        for &x in t.data {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Decode a checkpoint. When `vocab_digest` is given it must match the one
/// recorded at save time.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8], vocab_digest: Option<&str>) -> Result<Checkpoint<T>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {} but {} requested", header.dtype, T::DTYPE)));
    }
    if let Some(expected) = vocab_digest {
        if header.meta.vocab_digest != expected {
            return Err(bad(format!(
                "vocabulary digest mismatch: checkpoint {} vs vocabulary {}",
                header.meta.vocab_digest, expected
            )));
        }
    }
    let mut params = ModelParams::<T>::init(&header.config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor names or shapes do not match the configuration".into()));
    }
    let mut data = &bytes[12 + hlen..];
    for t in params.tensors_mut() {
        let need = t.len() * T::BYTES;
        if data.len() < need {
            return Err(bad("truncated tensor data".into()));
        }
        for (x, chunk) in t.iter_mut().zip(data[..need].chunks_exact(T::BYTES)) {
            *x = T::read_le(chunk);
        }
        data = &data[need..];
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &write_checkpoint(params, meta)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, vocab_digest: Option<&str>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, vocab_digest)
}
