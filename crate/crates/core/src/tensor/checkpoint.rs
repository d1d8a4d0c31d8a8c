//! Checkpoints: a JSON manifest next to a little-endian flat `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub entries: Vec<CheckpointEntry>,
    pub payload_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("manifest.json"), dir.join("weights.bin"))
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, metadata: serde_json::Value) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut payload = Vec::with_capacity(params.num_elements() * 4);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
        metadata,
    };
    let (mpath, wpath) = paths(dir);
    fs::write(&wpath, &payload).map_err(|e| Error::file(&wpath, e))?;
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&mpath, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, CheckpointManifest)> {
    let (mpath, wpath) = paths(dir);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::file(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f32" {
        return Err(Error::Malformed(format!(
            "unsupported checkpoint format {} / {}",
            manifest.format_version, manifest.dtype
        )));
    }
    let bytes = fs::read(&wpath).map_err(|e| Error::file(&wpath, e))?;
    if hex(&Sha256::digest(&bytes)) != manifest.payload_sha256 {
        return Err(Error::Malformed(format!("{} does not match its manifest checksum", wpath.display())));
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Malformed("payload length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamSet::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let slice = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Malformed(format!("entry `{}` runs past the payload", e.name)))?;
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
    }
    Ok((params, manifest))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
