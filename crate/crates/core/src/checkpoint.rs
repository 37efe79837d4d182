//! Checkpoint file: a UTF-8 JSON header, one `\0` byte, then every tensor's
//! data as little-endian f64, concatenated in header order.
//!
//! The header is `{"config", "vocab", "tensors": {name: {"shape", "dtype",
//! "byte_offset"}}}` with tensors in name order, so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{Transformer, TransformerConfig};

const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    vocab: Option<Vocabulary>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer,
    pub vocab: Option<Vocabulary>,
}

pub fn to_bytes(model: &Transformer, vocab: Option<&Vocabulary>) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                byte_offset: offset,
            },
        );
        offset += t.numel() * 8;
    }
    let header = Header {
        config: model.config().clone(),
        vocab: vocab.cloned(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(0);
    out.reserve(offset);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    let payload = &bytes[split + 1..];
    let mut params = ParamStore::default();
    let mut expected_offset = 0;
    for (name, entry) in &header.tensors {
        if entry.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {}", entry.dtype)));
        }
        if entry.byte_offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` starts at byte {} instead of {expected_offset}",
                entry.byte_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let end = expected_offset + numel * 8;
        let raw = payload
            .get(expected_offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload ends inside tensor `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    if let Some(v) = &header.vocab {
        if v.len() != header.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                v.len(),
                header.config.vocab_size
            )));
        }
    }
    let model = Transformer::from_parts(header.config, params)?;
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
    })
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted save never leaves a truncated checkpoint at `path`.
pub fn save(path: impl AsRef<Path>, model: &Transformer, vocab: Option<&Vocabulary>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, vocab)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
