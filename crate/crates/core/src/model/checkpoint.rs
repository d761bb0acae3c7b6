//! Checkpoints: a JSON descriptor with the parameter segment table plus a
//! raw little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Segment, VelocityModel};
use crate::error::{Result, SpfError};

pub const DESCRIPTOR_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.f32";
const FORMAT: &str = "spf-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub param_count: usize,
    pub blob: String,
    pub segments: Vec<Segment>,
    /// Optimizer steps taken before this checkpoint.
    #[serde(default)]
    pub step: u64,
}

/// Write `model` into `dir`. Parameters are stored as f32.
pub fn save_checkpoint(model: &VelocityModel, dir: &Path, step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let desc = CheckpointDescriptor {
        format: FORMAT.into(),
        version: 1,
        config: model.config().clone(),
        param_count: model.num_params(),
        blob: BLOB_FILE.into(),
        segments: model.segments().to_vec(),
        step,
    };
    let mut bytes = Vec::with_capacity(model.num_params() * 4);
    for &p in model.params() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(dir.join(BLOB_FILE), bytes)?;
    let mut text = serde_json::to_string_pretty(&desc)?;
    text.push('\n');
    fs::write(dir.join(DESCRIPTOR_FILE), text)?;
    Ok(())
}

fn format_err(path: PathBuf, reason: impl Into<String>) -> SpfError {
    SpfError::Format {
        path,
        reason: reason.into(),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(VelocityModel, CheckpointDescriptor)> {
    let desc_path = dir.join(DESCRIPTOR_FILE);
    let desc: CheckpointDescriptor = serde_json::from_slice(&fs::read(&desc_path)?)?;
    if desc.format != FORMAT || desc.version != 1 {
        return Err(format_err(desc_path, format!("unsupported format {} v{}", desc.format, desc.version)));
    }
    let blob_path = dir.join(&desc.blob);
    let bytes = fs::read(&blob_path)?;
    let expected = desc.param_count as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(SpfError::BlobLength {
            path: blob_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = VelocityModel::from_parts(desc.config.clone(), params)?;
    if model.segments() != desc.segments.as_slice() {
        return Err(format_err(desc_path, "segment table does not match the configuration"));
    }
    Ok((model, desc))
}
