//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, SHA-256
//! of the payload, then the payload. The payload is a `u64` header length, a
//! JSON header (model config, quantizer state, vocabulary, parameter names and
//! shapes) and the parameter blocks as little-endian `f64` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Tensor};
use crate::bottleneck::QuantizerState;
use crate::model::{Model, ModelConfig};
use crate::synth::CodeVocabulary;

pub const MAGIC: &[u8; 8] = b"PCBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    quantizer: QuantizerState,
    vocabulary: String,
    params: Vec<(String, Vec<usize>)>,
}

/// A restored model together with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: CodeVocabulary,
}

pub fn encode_checkpoint(model: &Model, vocab: &CodeVocabulary) -> crate::Result<Vec<u8>> {
    let mut v = Vec::new();
    vocab.write_to(&mut v)?;
    let header = Header {
        model: model.config.clone(),
        quantizer: model.quantizer,
        vocabulary: String::from_utf8(v).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        params: model
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut payload = Vec::with_capacity(8 + json.len() + 8 * model.params.scalar_count());
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> crate::Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[PREAMBLE..];
    if (payload.len() as u64) < len {
        return Err(CheckpointError::Truncated.into());
    }
    if payload.len() as u64 > len {
        return Err(CheckpointError::Corrupt("trailing bytes after payload".into()).into());
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(CheckpointError::ChecksumMismatch.into());
    }
    let corrupt = |m: String| crate::Error::from(CheckpointError::Corrupt(m));
    if payload.len() < 8 {
        return Err(corrupt("missing header length".into()));
    }
    let hlen = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let body = &payload[8..];
    if hlen > body.len() {
        return Err(corrupt("header length exceeds payload".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(e.to_string()))?;
    let vocab = CodeVocabulary::read_from(header.vocabulary.as_bytes()).map_err(|e| corrupt(e.to_string()))?;
    let mut data = &body[hlen..];
    let mut params = ParamStore::new();
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        if data.len() < 8 * n {
            return Err(corrupt(format!("parameter block `{name}` is short")));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        let t = Tensor::new(shape, values).map_err(|e| corrupt(e.to_string()))?;
        params.add(name, t).map_err(|e| corrupt(e.to_string()))?;
    }
    if !data.is_empty() {
        return Err(corrupt("unused parameter bytes".into()));
    }
    let model = Model::from_parts(header.model, params, header.quantizer).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint { model, vocab })
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save_checkpoint(model: &Model, vocab: &CodeVocabulary, path: &Path) -> crate::Result<()> {
    let bytes = encode_checkpoint(model, vocab)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> crate::Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
