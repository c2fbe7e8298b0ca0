//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   b"SKMCKPT\0"
//! version     u32
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON (`CheckpointHeader`)
//! params      param_count × f64, block order of `ModelParams::blocks`
//! velocity    param_count × f64, present iff header.has_velocity
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SKMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingProgress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    param_count: usize,
    config_hash: String,
    progress: Option<TrainingProgress>,
    has_velocity: bool,
}

/// Model weights plus optional optimizer state for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub velocity: Option<ModelParams>,
    pub progress: Option<TrainingProgress>,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            velocity: None,
            progress: None,
            config_hash: String::new(),
        }
    }
}

fn write_floats(buf: &mut Vec<u8>, params: &ModelParams) {
    for block in params.blocks() {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_floats(bytes: &[u8], params: &mut ModelParams) {
    let mut chunks = bytes.chunks_exact(8);
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            let c = chunks.next().expect("length checked by caller");
            *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: ckpt.params.config.clone(),
        param_count: ckpt.params.num_params(),
        config_hash: ckpt.config_hash.clone(),
        progress: ckpt.progress,
        has_velocity: ckpt.velocity.is_some(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + 16 * header.param_count);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    write_floats(&mut buf, &ckpt.params);
    if let Some(v) = &ckpt.velocity {
        if v.config != ckpt.params.config {
            return Err(Error::Incompatible("velocity shape differs from parameters".into()));
        }
        write_floats(&mut buf, v);
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Incompatible(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Incompatible(format!("unreadable header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| Error::Incompatible(format!("header config invalid: {e}")))?;
    let mut params = ModelParams::zeros(&header.model);
    let n = params.num_params();
    if n != header.param_count {
        return Err(Error::Incompatible(format!(
            "header declares {} parameters, configuration implies {n}",
            header.param_count
        )));
    }
    let blocks = if header.has_velocity { 2 } else { 1 };
    let body = &bytes[header_end..];
    if body.len() != blocks * n * 8 {
        return Err(Error::Incompatible(format!(
            "payload is {} bytes, expected {}",
            body.len(),
            blocks * n * 8
        )));
    }
    read_floats(&body[..n * 8], &mut params);
    let velocity = header.has_velocity.then(|| {
        let mut v = ModelParams::zeros(&header.model);
        read_floats(&body[n * 8..], &mut v);
        v
    });
    Ok(Checkpoint {
        params,
        velocity,
        progress: header.progress,
        config_hash: header.config_hash,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and verifies it was built for `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.params.config != expected {
        return Err(Error::Incompatible(format!(
            "{} was built for a different model configuration",
            path.display()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, forward_photo, ModelConfig};
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = build_model(&ModelConfig::desk(12), 9).unwrap();
        let mut ck = Checkpoint::new(p.clone());
        ck.velocity = Some(p.zeros_like());
        ck.progress = Some(TrainingProgress { epoch: 3, step: 12 });
        ck.config_hash = "abc".into();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let x = Tensor::from_fn(3, 32, 32, |c, y, x| ((c + y * x) % 9) as f64 / 8.0);
        assert_eq!(forward_photo(&p, &x).unwrap(), forward_photo(&back.params, &x).unwrap());
    }

    #[test]
    fn wrong_version_rejected() {
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        let mut bytes = encode_checkpoint(&Checkpoint::new(p)).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::Incompatible(m)) => assert!(m.contains("version 99")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::new(p)).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 8]),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn config_verified_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        save_checkpoint(&Checkpoint::new(p), &path).unwrap();
        assert!(load_checkpoint_expecting(&path, &ModelConfig::tiny(12)).is_ok());
        assert!(matches!(
            load_checkpoint_expecting(&path, &ModelConfig::desk(12)),
            Err(Error::Incompatible(_))
        ));
    }
}
