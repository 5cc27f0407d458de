//! Dataset directories: `meta.json`, `images.bin` (f32 LE, `C×H×W` per
//! sample) and `labels.bin` (i32 LE per sample).

use std::fs;
use std::path::Path;

use cleargcd_core::datagen::{Dataset, GcdSplit, Sample, ShortcutSpec};
use cleargcd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub spec: ShortcutSpec,
    pub num_samples: usize,
    pub classes: Vec<usize>,
    pub known_classes: Vec<usize>,
    pub labeled_indices: Vec<usize>,
    pub background_ids: Vec<usize>,
}

/// Writes `split` of `dataset` to `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset, split: &GcdSplit) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        spec: dataset.spec.clone(),
        num_samples: dataset.len(),
        classes: (0..dataset.spec.num_classes()).collect(),
        known_classes: split.known_classes.clone(),
        labeled_indices: split.labeled_indices.clone(),
        background_ids: dataset.samples.iter().map(|s| s.background_id).collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    let path = dir.join("meta.json");
    fs::write(&path, json).map_err(CliError::io(&path))?;

    let mut images = Vec::with_capacity(dataset.len() * dataset.spec.image_len() * 4);
    let mut labels = Vec::with_capacity(dataset.len() * 4);
    for s in &dataset.samples {
        for &v in s.image.data() {
            images.extend_from_slice(&(v as f32).to_le_bytes());
        }
        labels.extend_from_slice(&(s.label as i32).to_le_bytes());
    }
    let path = dir.join("images.bin");
    fs::write(&path, images).map_err(CliError::io(&path))?;
    let path = dir.join("labels.bin");
    fs::write(&path, labels).map_err(CliError::io(&path))?;
    Ok(())
}

/// Reads a dataset directory back into the dataset and its split.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, GcdSplit), CliError> {
    if !dir.is_dir() {
        return Err(CliError::format(dir, "dataset directory does not exist"));
    }
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let version: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(CliError::format(
                &path,
                format!("unsupported format version {v}"),
            ))
        }
        None => return Err(CliError::format(&path, "missing format_version")),
    }
    let meta: DatasetMeta =
        serde_json::from_value(version).map_err(|e| CliError::format(&path, e))?;
    let spec = &meta.spec;
    spec.validate()?;
    let n = meta.num_samples;
    let len = spec.image_len();
    if meta.background_ids.len() != n {
        return Err(CliError::format(
            &path,
            "background_ids length differs from num_samples",
        ));
    }

    let path = dir.join("images.bin");
    let images = fs::read(&path).map_err(CliError::io(&path))?;
    if images.len() != n * len * 4 {
        return Err(CliError::format(
            &path,
            format!("expected {} bytes, found {}", n * len * 4, images.len()),
        ));
    }
    let path = dir.join("labels.bin");
    let labels = fs::read(&path).map_err(CliError::io(&path))?;
    if labels.len() != n * 4 {
        return Err(CliError::format(
            &path,
            format!("expected {} bytes, found {}", n * 4, labels.len()),
        ));
    }

    let shape = vec![spec.channels, spec.height(), spec.width()];
    let k = spec.num_classes();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let bytes = &images[i * len * 4..(i + 1) * len * 4];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let b = &labels[i * 4..i * 4 + 4];
        let label = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if label < 0 || label as usize >= k {
            return Err(CliError::format(
                &path,
                format!("label {label} of sample {i} not below K = {k}"),
            ));
        }
        samples.push(Sample {
            image: Tensor::new(shape.clone(), data)?,
            label: label as usize,
            background_id: meta.background_ids[i],
            is_labeled: false,
        });
    }
    let dataset = Dataset {
        spec: meta.spec.clone(),
        samples,
    };
    let split = GcdSplit::from_membership(&dataset, meta.known_classes, &meta.labeled_indices)?;
    Ok((dataset, split))
}
