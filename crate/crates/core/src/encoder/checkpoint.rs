//! Portable checkpoints: `<stem>.manifest.json` describing named entries
//! plus `<stem>.blob` holding their little-endian `f32` values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::numerics::{DType, ParamSet, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// What the checkpoint holds, e.g. `"dual_encoder"`.
    pub kind: String,
    pub entries: Vec<ManifestEntry>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub blob_bytes: u64,
    /// Hex SHA-256 of the blob.
    pub digest: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet<f32>,
    /// False when the blob no longer matches the stored digest.
    pub digest_ok: bool,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

/// Manifest and blob paths for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".manifest.json"), with_suffix(stem, ".blob"))
}

pub fn checkpoint_exists(stem: &Path) -> bool {
    let (m, b) = checkpoint_paths(stem);
    m.is_file() && b.is_file()
}

pub fn save_checkpoint<T: Real>(
    stem: &Path,
    kind: &str,
    params: &ParamSet<T>,
    config: serde_json::Value,
    seed: Option<u64>,
) -> Result<CheckpointManifest> {
    let (manifest_path, blob_path) = checkpoint_paths(stem);
    if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DType::F32,
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        entries,
        config,
        seed,
        blob_bytes: blob.len() as u64,
        digest: hex::encode(Sha256::digest(&blob)),
    };
    std::fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn load_checkpoint(stem: &Path, kind: &str) -> Result<LoadedCheckpoint> {
    let (manifest_path, blob_path) = checkpoint_paths(stem);
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            manifest_path.display(),
            manifest.kind
        )));
    }
    let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob {} has {} bytes, manifest records {}",
            blob_path.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        if e.dtype != DType::F32 || e.length != numel as u64 * 4 {
            return Err(Error::Checkpoint(format!("entry {:?} has inconsistent length or dtype", e.name)));
        }
        if e.offset != expected_offset || e.offset + e.length > blob.len() as u64 {
            return Err(Error::Checkpoint(format!("entry {:?} overlaps or exceeds the blob", e.name)));
        }
        if params.index_of(&e.name).is_some() {
            return Err(Error::Checkpoint(format!("entry {:?} appears twice", e.name)));
        }
        expected_offset = e.offset + e.length;
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(&e.shape, data)
            .map_err(|err| Error::Checkpoint(format!("entry {:?}: {err}", e.name)))?;
        params.push(e.name.clone(), tensor);
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Checkpoint("blob holds bytes not described by the manifest".into()));
    }
    let digest_ok = hex::encode(Sha256::digest(&blob)) == manifest.digest;
    if !digest_ok {
        log::warn!("content digest mismatch for checkpoint {}", blob_path.display());
    }
    Ok(LoadedCheckpoint {
        manifest,
        params,
        digest_ok,
    })
}

/// Checks that a loaded parameter set has exactly the expected entry names.
pub fn expect_entries(params: &ParamSet<f32>, names: &[&str]) -> Result<()> {
    if let Some(unknown) = params.names().iter().find(|n| !names.contains(&n.as_str())) {
        return Err(Error::Checkpoint(format!("unknown entry {unknown:?}")));
    }
    if let Some(missing) = names.iter().find(|n| params.index_of(n).is_none()) {
        return Err(Error::Checkpoint(format!("missing entry {missing:?}")));
    }
    Ok(())
}
