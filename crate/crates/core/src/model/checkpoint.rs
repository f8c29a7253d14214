//! Binary checkpoint format.
//!
//! ```text
//! "GMLTCKPT"            8 bytes magic
//! version               u32 LE
//! header_len            u32 LE
//! header                JSON: config, optional vocab, tensor index
//! payload               raw little-endian tensor data
//! crc32(payload)        u32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ModelConfig, ModelParams};
use super::tensor::Mat;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"GMLTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::ChecksumMismatch { .. } => "ChecksumMismatch",
            CheckpointError::VersionMismatch { .. } => "VersionMismatch",
            CheckpointError::Format(_) => "Format",
            CheckpointError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: DType,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Option<Vocab>,
}

pub fn to_bytes(params: &ModelParams, vocab: Option<&Vocab>, dtype: DType) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in params.named() {
        let offset = payload.len();
        for &v in m.data() {
            match dtype {
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            dtype,
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let header = Header {
        config: params.config,
        vocab: vocab.cloned(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, CheckpointError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CheckpointError::Format("truncated".into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let header_len = read_u32(bytes, 12)? as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(CheckpointError::Format("truncated".into()));
    }
    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored = read_u32(bytes, bytes.len() - 4)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;

    let mut params = ModelParams::zeros(header.config);
    if header.tensors.iter().any(|t| t.name == "lm_head") {
        params.lm_head = Some(params.token_embedding.clone());
    }
    let mut slots = params.named_mut();
    if slots.len() != header.tensors.len() {
        return Err(CheckpointError::Format(format!(
            "expected {} tensors, found {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != (entry.shape[0], entry.shape[1]) {
            return Err(CheckpointError::Format(format!("unexpected tensor {}", entry.name)));
        }
        let w = entry.dtype.width();
        let count = entry.shape[0] * entry.shape[1];
        let raw = payload
            .get(entry.offset..entry.offset + entry.nbytes)
            .filter(|r| r.len() == count * w)
            .ok_or_else(|| CheckpointError::Format(format!("tensor {} out of bounds", entry.name)))?;
        let data = raw
            .chunks_exact(w)
            .map(|c| match entry.dtype {
                DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                DType::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
            })
            .collect();
        **slot = Mat::from_vec(entry.shape[0], entry.shape[1], data);
    }
    drop(slots);
    Ok(Checkpoint {
        params,
        vocab: header.vocab,
    })
}

pub fn save(path: &Path, params: &ModelParams, vocab: Option<&Vocab>, dtype: DType) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params, vocab, dtype))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    save(path, params, None, DType::F64)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    load(path).map(|c| c.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> ModelParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut cfg = ModelConfig::small(30);
        cfg.d_model = 8;
        cfg.d_kv = 4;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        let mut p = ModelParams::init(cfg, &mut rng);
        p.randomize_bias_tables(0.5, &mut rng);
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gmlt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for ((na, a), (nb, b)) in p.named().into_iter().zip(q.named()) {
            assert_eq!(na, nb);
            let bits = |m: &Mat| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        assert_eq!(p, q);
    }

    #[test]
    fn lm_head_and_vocab_survive() {
        let mut p = params();
        p.lm_head = Some(p.token_embedding.clone());
        let v = Vocab::build(&["is there a ring"]).unwrap();
        let c = from_bytes(&to_bytes(&p, Some(&v), DType::F64)).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.vocab, Some(v));
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut bytes = to_bytes(&params(), None, DType::F64);
        let i = bytes.len() - 10;
        bytes[i] ^= 0x40;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = to_bytes(&params(), None, DType::F64);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::VersionMismatch { found: 7 })
        ));
    }

    #[test]
    fn f32_payload_rounds() {
        let p = params();
        let c = from_bytes(&to_bytes(&p, None, DType::F32)).unwrap();
        let a = p.token_embedding.data()[0];
        assert_eq!(c.params.token_embedding.data()[0], f64::from(a as f32));
    }
}
