//! Checkpoint container: a JSON header (config, quantization ranges,
//! version, tensor table) followed by raw little-endian f64 payloads, with
//! a SHA-256 content hash trailer. Round-tripping restores bit-identical
//! forward passes.

use crate::audio::QuantRanges;
use crate::data::config::RunConfig;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MVCP";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config: RunConfig,
    ranges: QuantRanges,
    opt_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything a run persists: model and optimizer tensors by name, the
/// config snapshot, and the frozen quantization ranges.
pub struct CheckpointData {
    pub step: u64,
    pub config: RunConfig,
    pub ranges: QuantRanges,
    pub opt_steps: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut entries = Vec::with_capacity(data.tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &data.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        step: data.step,
        config: data.config.clone(),
        ranges: data.ranges,
        opt_steps: data.opt_steps.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    let mut hasher = Sha256::new();
    hasher.update(&header_json);
    hasher.update(&payload);
    f.write_all(&hasher.finalize())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    if !path.exists() {
        return Err(Error::CheckpointMissing(path.display().to_string()));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < 16 + 32 || &buf[..4] != MAGIC {
        return Err(Error::CorruptFile("missing or short header".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body_end = buf.len() - 32;
    if 16 + header_len > body_end {
        return Err(Error::CorruptFile("truncated header".into()));
    }
    let header_json = &buf[16..16 + header_len];
    let payload = &buf[16 + header_len..body_end];
    let stored_hash = &buf[body_end..];

    let mut hasher = Sha256::new();
    hasher.update(header_json);
    hasher.update(payload);
    if hasher.finalize().as_slice() != stored_hash {
        return Err(Error::CorruptFile("content hash mismatch".into()));
    }

    let header: Header = serde_json::from_slice(header_json)?;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::CorruptFile(format!(
                "tensor {} out of payload bounds",
                entry.name
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(
            entry.name,
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::CorruptFile(e.to_string()))?,
        );
    }
    Ok(CheckpointData {
        step: header.step,
        config: header.config,
        ranges: header.ranges,
        opt_steps: header.opt_steps,
        tensors,
    })
}

/// Hex digest of the stored content hash.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::CheckpointMissing(path.display().to_string()));
    }
    let buf = std::fs::read(path)?;
    if buf.len() < 32 {
        return Err(Error::CorruptFile("too short for a hash".into()));
    }
    Ok(buf[buf.len() - 32..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
