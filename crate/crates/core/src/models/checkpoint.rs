//! Checkpoint container: a magic line, the byte length of a JSON header, the
//! header itself (format version, dtype, model config, vocabulary and its
//! hash, step, frozen groups, tensor directory, data hash) and then the raw
//! little-endian tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::diffcore::{DType, Real};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, NUM_RESERVED};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"FMTASR-CKPT\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    step: u64,
    config: ModelConfig,
    vocab_hash: String,
    vocab: Vec<String>,
    frozen: Vec<String>,
    data_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// A model together with the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub vocab: Vocabulary,
    pub step: u64,
}

/// Serializes a model, its vocabulary and a step counter.
pub fn checkpoint_bytes<F: Real>(model: &Model<F>, vocab: &Vocabulary, step: u64) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (_, name, t) in model.store.iter() {
        let offset = data.len();
        F::write_le(&t.data, &mut data);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
            bytes: data.len() - offset,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE,
        step,
        config: model.config.clone(),
        vocab_hash: vocab.hash(),
        vocab: vocab.tokens()[NUM_RESERVED..].to_vec(),
        frozen: model.frozen.clone(),
        data_sha256: hex::encode(Sha256::digest(&data)),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + data.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(&json);
    out.push(b'\n');
    out.extend_from_slice(&data);
    out
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(&self.model, &self.vocab, self.step)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Checkpoint(msg);
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| corrupt("not a checkpoint file (bad magic line)".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("truncated checkpoint header".into()))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("unreadable header length".into()))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len + 1 {
            return Err(corrupt(format!(
                "truncated checkpoint: header needs {len} bytes, {} present",
                rest.len()
            )));
        }
        let raw: serde_json::Value = serde_json::from_slice(&rest[..len])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(corrupt(format!(
                "unsupported checkpoint version {} (this build reads version {CHECKPOINT_VERSION})",
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| corrupt(format!("invalid version {CHECKPOINT_VERSION} header: {e}")))?;
        let data = &rest[len + 1..];
        let digest = hex::encode(Sha256::digest(data));
        if digest != header.data_sha256 {
            return Err(corrupt(format!(
                "tensor data hash mismatch (version {}, header sha256 {}, computed {digest})",
                header.format_version, header.data_sha256
            )));
        }
        let vocab = Vocabulary::from_tokens(header.vocab.clone())?;
        if vocab.hash() != header.vocab_hash {
            return Err(corrupt(format!(
                "vocabulary hash mismatch (version {}, header {}, computed {})",
                header.format_version,
                header.vocab_hash,
                vocab.hash()
            )));
        }
        let mut model = Model::<F>::new(header.config.clone(), 0)?;
        if model.store.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "config implies {} tensors, directory lists {}",
                model.store.len(),
                header.tensors.len()
            )));
        }
        let width = header.dtype.size();
        for entry in &header.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| corrupt(format!("unexpected tensor {}", entry.name)))?;
            let t = model.store.get_mut(id);
            let n: usize = entry.shape.iter().product();
            if t.shape != entry.shape
                || entry.bytes != n * width
                || entry.offset + entry.bytes > data.len()
            {
                return Err(corrupt(format!(
                    "tensor {} has an inconsistent directory entry",
                    entry.name
                )));
            }
            let chunk = &data[entry.offset..entry.offset + entry.bytes];
            t.data = match header.dtype {
                DType::F32 => f32::read_le(chunk)
                    .into_iter()
                    .map(|x| F::lit(x as f64))
                    .collect(),
                DType::F64 => f64::read_le(chunk).into_iter().map(F::lit).collect(),
            };
        }
        model.store.set_requires_grad("", true);
        model.frozen = header.frozen;
        model.apply_frozen();
        Ok(Checkpoint {
            model,
            vocab,
            step: header.step,
        })
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    vocab: &Vocabulary,
    step: u64,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, vocab, step))?;
    Ok(())
}

pub fn read_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads just the model and vocabulary.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Model<F>, Vocabulary)> {
    let c = read_checkpoint(path)?;
    Ok((c.model, c.vocab))
}
