//! Checkpoint directories: `meta.json` and `params.bin` (f64 LE, parameters
//! concatenated in declaration order).

use std::fs;
use std::path::Path;

use cleargcd_core::model::{Model, ModelDims};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dims: ModelDims,
    pub num_classes: usize,
    pub param_count: usize,
    pub train_seed: u64,
    pub data_seed: u64,
    pub tau_s: f64,
    /// SHA-256 of the resolved run config that produced the checkpoint.
    pub config_sha256: String,
}

pub fn write_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut json = serde_json::to_string_pretty(meta).expect("meta serializes");
    json.push('\n');
    let path = dir.join("meta.json");
    fs::write(&path, json).map_err(CliError::io(&path))?;
    let bytes: Vec<u8> = model
        .flat_params()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let path = dir.join("params.bin");
    fs::write(&path, bytes).map_err(CliError::io(&path))
}

pub fn read_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta), CliError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CliError::format(
            &path,
            format!("unsupported format version {}", meta.format_version),
        ));
    }
    meta.dims
        .validate()
        .map_err(|e| CliError::format(&path, e))?;
    if meta.dims.num_classes != meta.num_classes || meta.dims.param_count() != meta.param_count {
        return Err(CliError::format(
            &path,
            "dims disagree with num_classes or param_count",
        ));
    }
    let path = dir.join("params.bin");
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    if bytes.len() != meta.param_count * 8 {
        return Err(CliError::format(
            &path,
            format!(
                "expected {} bytes, found {}",
                meta.param_count * 8,
                bytes.len()
            ),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(CliError::format(
            &path,
            format!("parameter {i} is not finite"),
        ));
    }
    let model = Model::from_flat(meta.dims, &flat).map_err(|e| CliError::format(&path, e))?;
    Ok((model, meta))
}
