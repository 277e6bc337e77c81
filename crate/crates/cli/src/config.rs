//! Experiment configuration files (JSON) and their provenance hash.

use std::path::{Path, PathBuf};

use mvcnet::augment::AugmentationSpec;
use mvcnet::losses::LossConfig;
use mvcnet::models::{BackboneKind, Precision};
use mvcnet::trainer::{default_pool, default_views, EaConfig, Method, SingleAugMode, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Training settings shared by every method of an experiment. The method
/// and the alignment flags are filled in per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Overrides every method's default batch size when set.
    pub batch_size: Option<usize>,
    pub single_aug_mode: SingleAugMode,
    pub loss: LossConfig,
    pub views: [AugmentationSpec; 3],
    pub augmentation_pool: Vec<AugmentationSpec>,
    pub seed: u64,
    pub repeats: usize,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(Method::Baseline);
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: None,
            single_aug_mode: t.single_aug_mode,
            loss: t.loss,
            views: default_views(),
            augmentation_pool: default_pool(),
            seed: t.seed,
            repeats: t.repeats,
            precision: t.precision,
        }
    }
}

/// Parameter values for the λ and γ sweeps; the other weight stays at the
/// configured loss value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityGrid {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for SensitivityGrid {
    fn default() -> Self {
        let values = vec![0.05, 0.1, 0.2, 0.5];
        Self {
            lambda: values.clone(),
            gamma: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Archive directory, relative to the config file.
    pub dataset_path: PathBuf,
    /// One backbone name or a list of them.
    #[serde(default = "default_backbones", deserialize_with = "one_or_many")]
    pub backbone_kind: Vec<BackboneKind>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ea: EaConfig,
    /// Results directory, relative to the config file; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Also write SVG figures next to the CSV data.
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub sensitivity: SensitivityGrid,
}

fn default_backbones() -> Vec<BackboneKind> {
    vec![BackboneKind::EEGNet]
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BackboneKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(BackboneKind),
        Many(Vec<BackboneKind>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(b) => vec![b],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    /// Full training configuration for one method.
    pub fn train_config(&self, method: Method) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            single_aug_mode: t.single_aug_mode,
            loss: t.loss,
            views: t.views,
            augmentation_pool: t.augmentation_pool.clone(),
            seed: t.seed,
            repeats: t.repeats,
            ea: self.ea,
            precision: t.precision,
        }
    }

    /// SHA-256 of the canonical JSON form without the output directory, so
    /// identical experiments written to different places share a hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    /// `dataset_path` resolved against the config file's directory.
    pub dataset_dir: PathBuf,
    text: String,
}

impl LoadedConfig {
    /// Default output directory from the config, resolved like the dataset.
    pub fn output_dir(&self) -> Option<PathBuf> {
        self.config.output_dir.as_ref().map(|p| self.resolve(p))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    fn invalid(&self, key: &str, message: impl std::fmt::Display) -> CliError {
        let line = key_line(&self.text, key)
            .map(|l| format!("{l}:"))
            .unwrap_or_default();
        CliError::Config(format!("{}:{line} {message}", self.path.display()))
    }
}

/// 1-based line of the first occurrence of `"key"` in the file text.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

/// Reads, parses and validates a config file. `seed` replaces `train.seed`.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        let full = e.to_string();
        let message = full.split(" at line ").next().unwrap_or(&full);
        CliError::Config(format!(
            "{}:{}:{}: {message}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let mut loaded = LoadedConfig {
        dataset_dir: PathBuf::new(),
        config,
        path: path.to_path_buf(),
        text,
    };
    loaded.dataset_dir = loaded.resolve(&loaded.config.dataset_path);
    validate(&loaded)?;
    Ok(loaded)
}

fn validate(loaded: &LoadedConfig) -> Result<(), CliError> {
    let c = &loaded.config;
    if !loaded.dataset_dir.join("manifest.json").is_file() {
        return Err(loaded.invalid(
            "dataset_path",
            format!("no archive manifest under {}", loaded.dataset_dir.display()),
        ));
    }
    if c.methods.is_empty() {
        return Err(loaded.invalid("methods", "methods must not be empty"));
    }
    if c.backbone_kind.is_empty() {
        return Err(loaded.invalid("backbone_kind", "backbone_kind must not be empty"));
    }
    for &method in &c.methods {
        loaded
            .config
            .train_config(method)
            .validate()
            .map_err(|e| loaded.invalid("train", format!("{method}: {e}")))?;
    }
    let grid = &c.sensitivity;
    if grid
        .lambda
        .iter()
        .chain(&grid.gamma)
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(loaded.invalid(
            "sensitivity",
            "sweep values must be finite and non-negative",
        ));
    }
    Ok(())
}
