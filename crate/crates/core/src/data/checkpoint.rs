//! Checkpoint files: the 8-byte magic `AURESCKP`, a little-endian u32 header
//! length, a JSON header, then every tensor as little-endian f32 in header
//! order. The header carries a SHA-256 of the blob section.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::model::{Model, ModelConfig, Precision};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AURESCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Enough to resume a `ChaCha8Rng` exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub rng: Option<RngState>,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

fn f32_exact(v: f64) -> bool {
    v.is_nan() || (v as f32) as f64 == v
}

/// Serializes `model` (parameters and buffers) to bytes.
pub fn checkpoint_bytes(model: &Model, step: usize, rng: Option<&ChaCha8Rng>) -> Result<Vec<u8>> {
    if model.config.precision != Precision::F32 {
        return Err(Error::Checkpoint(
            "only f32-precision models can be saved without loss; set precision to f32".into(),
        ));
    }
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for id in model.params.ids() {
        let t = model.params.get(id);
        let name = model.params.name(id);
        if let Some(v) = t.data().iter().find(|v| !f32_exact(**v)) {
            return Err(Error::Checkpoint(format!(
                "{name}: value {v} is not representable in f32"
            )));
        }
        for &v in t.data() {
            blobs.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        step,
        rng: rng.map(RngState::capture),
        tensors,
        sha256: hex::encode(Sha256::digest(&blobs)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

/// Atomic write of [`checkpoint_bytes`].
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    step: usize,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    super::write_atomic(path, &checkpoint_bytes(model, step, rng)?)
}

/// Parses a checkpoint. With `expected`, the stored config must match it.
pub fn parse_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(Model, CheckpointHeader)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    // Read the version before the rest so a newer layout fails with a clear
    // message instead of a field error.
    let raw: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(bad(format!(
            "format version {} is not supported (this build reads version {CHECKPOINT_VERSION})",
            version.map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(Error::Config(
                "checkpoint model config differs from the requested config".into(),
            ));
        }
    }
    let blobs = &bytes[12 + hlen..];
    if hex::encode(Sha256::digest(blobs)) != header.sha256 {
        return Err(bad("parameter data hash mismatch (file corrupted)".into()));
    }
    let mut model = Model::build(&header.config, 0)?;
    let mut offset = 0;
    let mut seen = 0;
    for entry in &header.tensors {
        let id = model.params.find(&entry.name).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint tensor `{}` does not exist in the model",
                entry.name
            ))
        })?;
        let target = model.params.get(id);
        if target.shape() != entry.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let chunk = blobs
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(format!("tensor `{}` is truncated", entry.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let requires = target.requires_grad();
        *model.params.get_mut(id) =
            Tensor::new(entry.shape.clone(), data)?.with_requires_grad(requires);
        offset += 4 * n;
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {seen} tensors, model has {}",
            model.params.len()
        )));
    }
    if offset != blobs.len() {
        return Err(bad(format!(
            "{} trailing bytes after the last tensor",
            blobs.len() - offset
        )));
    }
    Ok((model, header))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_checkpoint(&bytes, expected)
}
