//! The run configuration file.

use std::path::Path;

use cleargcd_core::datagen::ShortcutSpec;
use cleargcd_core::losses::LossWeights;
use cleargcd_core::model::ModelDims;
use cleargcd_core::prototype_bank::SsrConfig;
use cleargcd_core::trainer::{SvaConfig, TrainConfig, TrainSettings};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Dataset generation and the labeled/unlabeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: [usize; 2],
    pub channels: usize,
    pub num_known_classes: usize,
    pub num_novel_classes: usize,
    pub samples_per_class: usize,
    pub shortcut_strength: f64,
    pub glyph_noise: f64,
    pub seed: u64,
    /// Share of classes that are known. Defaults to the shortcut-linked share.
    pub known_fraction: Option<f64>,
    /// Share of each known class that carries labels.
    pub labeled_fraction: f64,
    /// Defaults to `seed`, which makes the known classes the linked ones.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = ShortcutSpec::default();
        Self {
            image_size: s.image_size,
            channels: s.channels,
            num_known_classes: s.num_known_classes,
            num_novel_classes: s.num_novel_classes,
            samples_per_class: s.samples_per_class,
            shortcut_strength: s.shortcut_strength,
            glyph_noise: s.glyph_noise,
            seed: s.seed,
            known_fraction: None,
            labeled_fraction: 0.5,
            split_seed: None,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> ShortcutSpec {
        ShortcutSpec {
            image_size: self.image_size,
            channels: self.channels,
            num_known_classes: self.num_known_classes,
            num_novel_classes: self.num_novel_classes,
            samples_per_class: self.samples_per_class,
            shortcut_strength: self.shortcut_strength,
            glyph_noise: self.glyph_noise,
            seed: self.seed,
        }
    }

    pub fn known_fraction(&self) -> f64 {
        self.known_fraction.unwrap_or_else(|| {
            self.num_known_classes as f64
                / (self.num_known_classes + self.num_novel_classes).max(1) as f64
        })
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }
}

/// Layer widths; input size and class count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: [usize; 2],
    pub feature: usize,
    pub projection: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            hidden: d.hidden,
            feature: d.feature,
            projection: d.projection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Unlabeled samples scored after every epoch; 0 means all of them.
    pub probe_size: usize,
    /// Seed of the probe subset and its background swap.
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_size: 512,
            probe_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub sva: SvaConfig,
    pub ssr: SsrConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn prefixed(e: cleargcd_core::Error, section: &str) -> CliError {
    match e {
        cleargcd_core::Error::Invalid { field, detail } if !field.contains('.') => {
            CliError::Config {
                path: format!("{section}.{field}"),
                detail,
            }
        }
        cleargcd_core::Error::Invalid { field, detail } => CliError::Config {
            path: field.to_string(),
            detail,
        },
        other => CliError::Config {
            path: section.to_string(),
            detail: other.to_string(),
        },
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.data.spec();
        spec.validate().map_err(|e| prefixed(e, "data"))?;
        for (field, f) in [
            ("data.known_fraction", self.data.known_fraction()),
            ("data.labeled_fraction", self.data.labeled_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config {
                    path: field.into(),
                    detail: format!("{f} is outside (0, 1)"),
                });
            }
        }
        self.sva
            .mask
            .validate_for(&spec)
            .map_err(|e| prefixed(e, "sva.mask"))?;
        self.settings(spec.num_classes(), spec.image_len())
            .validate()
            .map_err(|e| prefixed(e, "config"))
    }

    /// Trainer settings for data with `num_classes` classes and images of
    /// `input` values.
    pub fn settings(&self, num_classes: usize, input: usize) -> TrainSettings {
        TrainSettings {
            model: ModelDims {
                input,
                hidden: self.model.hidden,
                feature: self.model.feature,
                projection: self.model.projection,
                num_classes,
            },
            loss: self.loss,
            sva: self.sva.clone(),
            ssr: self.ssr,
            train: self.train,
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.data.known_fraction(), 0.5);
        let again = RunConfig::parse(&c.resolved_json()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::parse(r#"{"sva": {"mask": {"gird": 4}}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "sva.mask.gird"),
            other => panic!("{other:?}"),
        }
        let err = RunConfig::parse(r#"{"trian": {}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { .. }));
    }

    #[test]
    fn out_of_range_values_name_the_field() {
        let path = |text: &str| match RunConfig::parse(text).unwrap_err() {
            CliError::Config { path, .. } => path,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            path(r#"{"data": {"shortcut_strength": 1.5}}"#),
            "data.shortcut_strength"
        );
        assert_eq!(path(r#"{"train": {"batch_size": 7}}"#), "train.batch_size");
        assert_eq!(path(r#"{"loss": {"lambda": 2.0}}"#), "loss.lambda");
        assert_eq!(
            path(r#"{"data": {"labeled_fraction": 0.0}}"#),
            "data.labeled_fraction"
        );
        assert_eq!(
            path(r#"{"sva": {"mask": {"replace_count": 99}}}"#),
            "sva.mask.replace_count"
        );
        assert_eq!(path(r#"{"train": {"epochs": "x"}}"#), "train.epochs");
    }
}
