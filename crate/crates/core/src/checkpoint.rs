//! Binary checkpoint persistence.
//!
//! A checkpoint is a JSON manifest (schema version, model config, parameter
//! name/shape/offset index, training step, rng state, blob checksum) plus a
//! blob of little-endian f32 parameter values concatenated in manifest
//! order. In-memory masters are f64; the f32 on-disk precision is the
//! documented boundary, and training loops round live state through f32 at
//! checkpoint boundaries so save/resume is bit-exact.
//!
//! Step-based loops also write a sidecar (optimizer moments + rng position)
//! that makes mid-run resumption possible.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::train::AdamW;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal string (u128).
    pub word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model_config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Total blob length in f32 elements.
    pub blob_len: usize,
    pub blob_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.manifest.json"))
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.params.bin"))
}

/// Serialize model parameters as little-endian f32 in manifest order and
/// write manifest + blob.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    model: &EncoderModel,
    step: u64,
    rng: Option<RngState>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in model.params() {
        params.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        for &v in tensor.values() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += tensor.numel();
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_config: model.config().clone(),
        params,
        step,
        rng,
        blob_len: offset,
        blob_sha256: sha256_hex(&blob),
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization failed: {e}")))?;
    write_file(&manifest_path(dir, stem), &manifest_json)?;
    write_file(&blob_path(dir, stem), &blob)
}

/// A loaded checkpoint: the rebuilt model plus manifest metadata.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: EncoderModel,
    pub step: u64,
    pub rng: Option<RngState>,
}

/// Read and verify a checkpoint (blob length and checksum, then shapes).
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<LoadedCheckpoint> {
    let manifest_bytes = read_file(&manifest_path(dir, stem))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    let blob = read_file(&blob_path(dir, stem))?;
    if blob.len() != manifest.blob_len * 4 {
        return Err(Error::Checkpoint(format!(
            "blob length {} bytes does not match manifest ({} f32 values)",
            blob.len(),
            manifest.blob_len
        )));
    }
    let checksum = sha256_hex(&blob);
    if checksum != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch for {stem}: manifest {} vs blob {checksum}",
            manifest.blob_sha256
        )));
    }
    let mut params = IndexMap::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if entry.offset + numel > manifest.blob_len {
            return Err(Error::Checkpoint(format!(
                "parameter {} overruns the blob",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (entry.offset + i) * 4;
            let raw: [u8; 4] = blob[at..at + 4].try_into().expect("length checked");
            values.push(f32::from_le_bytes(raw) as f64);
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
    }
    let model = EncoderModel::from_parts(manifest.model_config, params)?;
    Ok(LoadedCheckpoint {
        model,
        step: manifest.step,
        rng: manifest.rng,
    })
}

/// Locate a checkpoint from a path that may be a manifest file, a blob
/// file, or a directory holding `step_*` checkpoints (latest wins).
pub fn resolve_checkpoint_path(path: &Path) -> Result<(PathBuf, String)> {
    if path.is_dir() {
        let stem = latest_stem(path)?.ok_or_else(|| {
            Error::Checkpoint(format!("no checkpoints found in {}", path.display()))
        })?;
        return Ok((path.to_path_buf(), stem));
    }
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for suffix in [".manifest.json", ".params.bin"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return Ok((dir, stem.to_string()));
        }
    }
    Err(Error::Checkpoint(format!(
        "checkpoint path {} is neither a directory nor a manifest/blob file",
        path.display()
    )))
}

/// Highest-step `step_*` stem in a directory, if any.
pub fn latest_stem(dir: &Path) -> Result<Option<String>> {
    let mut best: Option<(u64, String)> = None;
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        let name = match name.to_str() {
            Some(n) => n,
            None => continue,
        };
        if let Some(stem) = name.strip_suffix(".manifest.json") {
            if let Some(step_str) = stem.strip_prefix("step_") {
                if let Ok(step) = step_str.parse::<u64>() {
                    if best.as_ref().map_or(true, |(b, _)| step > *b) {
                        best = Some((step, stem.to_string()));
                    }
                }
            }
        }
    }
    Ok(best.map(|(_, stem)| stem))
}

pub fn step_stem(step: u64) -> String {
    format!("step_{step:08}")
}

// ── optimizer sidecar ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    /// Element count of one moment buffer (m and v each have this many).
    pub len: usize,
    /// Offset into the moments blob, in f32 elements, where m starts;
    /// v follows immediately.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStateFile {
    pub schema_version: u32,
    pub step: u64,
    pub weight_decay: f64,
    pub optimizer_step_count: u64,
    pub rng: RngState,
    pub moments: Vec<MomentEntry>,
    pub moments_len: usize,
    pub moments_sha256: String,
}

pub fn trainstate_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.trainstate.json"))
}

pub fn moments_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.moments.bin"))
}

/// Persist optimizer moments and rng position next to a checkpoint.
pub fn save_train_state(
    dir: &Path,
    stem: &str,
    step: u64,
    weight_decay: f64,
    optimizer: &AdamW,
    rng: RngState,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, (m, v)) in optimizer.moments() {
        entries.push(MomentEntry {
            name: name.clone(),
            len: m.len(),
            offset,
        });
        for &x in m.iter().chain(v.iter()) {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
        offset += 2 * m.len();
    }
    let state = TrainStateFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        step,
        weight_decay,
        optimizer_step_count: optimizer.step_count(),
        rng,
        moments: entries,
        moments_len: offset,
        moments_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec_pretty(&state)
        .map_err(|e| Error::Internal(format!("train state serialization failed: {e}")))?;
    write_file(&trainstate_path(dir, stem), &json)?;
    write_file(&moments_path(dir, stem), &blob)
}

/// Load the optimizer sidecar; returns the rebuilt optimizer and rng state.
pub fn load_train_state(dir: &Path, stem: &str) -> Result<(AdamW, RngState, u64)> {
    let state_bytes = read_file(&trainstate_path(dir, stem))?;
    let state: TrainStateFile = serde_json::from_slice(&state_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed train state: {e}")))?;
    if state.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported train state schema version {}",
            state.schema_version
        )));
    }
    let blob = read_file(&moments_path(dir, stem))?;
    if blob.len() != state.moments_len * 4 {
        return Err(Error::Checkpoint(format!(
            "moments blob length {} bytes does not match manifest ({} f32 values)",
            blob.len(),
            state.moments_len
        )));
    }
    let checksum = sha256_hex(&blob);
    if checksum != state.moments_sha256 {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch for {stem} moments: {} vs {checksum}",
            state.moments_sha256
        )));
    }
    let mut moments = IndexMap::new();
    for entry in &state.moments {
        let read_slice = |start: usize| -> Vec<f64> {
            (0..entry.len)
                .map(|i| {
                    let at = (start + i) * 4;
                    let raw: [u8; 4] = blob[at..at + 4].try_into().expect("length checked");
                    f32::from_le_bytes(raw) as f64
                })
                .collect()
        };
        if (entry.offset + 2 * entry.len) > state.moments_len {
            return Err(Error::Checkpoint(format!(
                "moment buffer {} overruns the blob",
                entry.name
            )));
        }
        let m = read_slice(entry.offset);
        let v = read_slice(entry.offset + entry.len);
        moments.insert(entry.name.clone(), (m, v));
    }
    let optimizer = AdamW::from_parts(state.weight_decay, state.optimizer_step_count, moments);
    Ok((optimizer, state.rng, state.step))
}

#[cfg(test)]
#[path = "checkpoint_tests.rs"]
mod tests;
