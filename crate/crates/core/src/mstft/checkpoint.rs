//! Checkpoint container: magic, little-endian `u64` manifest length, JSON
//! manifest, then raw little-endian `f64` payloads in manifest order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hyperparams, MstftModel};
use crate::nn::{NnError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"H2MCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch (truncated or corrupt payload)")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: TensorGroup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub hyperparams: Hyperparams,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the payload bytes, hex.
    pub checksum: String,
    pub rng: RngState,
}

fn entries(store: &ParamStore, group: TensorGroup) -> impl Iterator<Item = (TensorEntry, &Tensor)> {
    store.iter().map(move |(name, t)| {
        (
            TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                group: group.clone(),
            },
            t,
        )
    })
}

/// Serialize a model to bytes.
pub fn encode(model: &MstftModel) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * (model.params.scalar_count() + model.buffers.scalar_count()));
    let mut tensors = Vec::new();
    for (entry, t) in entries(&model.params, TensorGroup::Param).chain(entries(&model.buffers, TensorGroup::Buffer)) {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        hyperparams: model.hyper.clone(),
        tensors,
        checksum: hex::encode(Sha256::digest(&payload)),
        rng: RngState {
            seed: hex::encode(model.rng.get_seed()),
            stream: model.rng.get_stream(),
            word_pos: model.rng.get_word_pos().to_string(),
        },
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parse only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Checksum);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() - 16 < len {
        return Err(CheckpointError::Checksum);
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok((manifest, &bytes[16 + len..]))
}

pub fn decode(bytes: &[u8]) -> Result<MstftModel, CheckpointError> {
    let (manifest, payload) = read_manifest(bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if hex::encode(Sha256::digest(payload)) != manifest.checksum {
        return Err(CheckpointError::Checksum);
    }
    // Start from a fresh model so the parameter set is validated against the hyperparameters.
    let mut model = MstftModel::new(manifest.hyperparams.clone(), 0)?;
    let mut offset = 0;
    let expected = model.params.len() + model.buffers.len();
    if manifest.tensors.len() != expected {
        return Err(CheckpointError::Corrupt(format!(
            "manifest lists {} tensors, model has {expected}",
            manifest.tensors.len()
        )));
    }
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = payload
            .get(offset..offset + 8 * n)
            .ok_or_else(|| CheckpointError::Corrupt(format!("payload too short for `{}`", entry.name)))?;
        offset += 8 * n;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let store = match entry.group {
            TensorGroup::Param => &mut model.params,
            TensorGroup::Buffer => &mut model.buffers,
        };
        let slot = store
            .get_mut(&entry.name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor `{}`", entry.name)))?;
        if slot.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!("shape mismatch for `{}`", entry.name)));
        }
        *slot = Tensor::new(&entry.shape, data)?;
    }
    if offset != payload.len() {
        return Err(CheckpointError::Corrupt("trailing payload bytes".into()));
    }
    let seed: [u8; 32] = hex::decode(&manifest.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CheckpointError::Corrupt("bad rng seed".into()))?;
    let word_pos: u128 = manifest.rng.word_pos.parse().map_err(|_| CheckpointError::Corrupt("bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    model.rng = rng;
    Ok(model)
}

pub fn save_checkpoint(model: &MstftModel, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<MstftModel, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}

/// SHA-256 of a checkpoint's parameter payload, as recorded in its manifest.
pub fn model_checksum(model: &MstftModel) -> String {
    let bytes = encode(model);
    read_manifest(&bytes).map(|(m, _)| m.checksum).unwrap_or_default()
}
