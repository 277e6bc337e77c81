use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augment::{AugmentationKind, AugmentationSpec};
use crate::dataio::OnlineOrder;
use crate::losses::LossConfig;
use crate::models::Precision;

use super::TrainError;

/// Compared training approaches. Single-augmentation methods are named after
/// their augmentation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    SingleAug(AugmentationKind),
    SimCLR2View,
    InfoNCE2View,
    MVCNet,
}

impl Method {
    /// Baseline, the seven single augmentations, SimCLR, InfoNCE, MVCNet.
    pub fn all() -> Vec<Method> {
        let mut out = vec![Method::Baseline];
        out.extend(AugmentationKind::ALL.iter().map(|&k| Method::SingleAug(k)));
        out.extend([Method::SimCLR2View, Method::InfoNCE2View, Method::MVCNet]);
        out
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Method::Baseline => 32,
            Method::SingleAug(_) => 64,
            Method::SimCLR2View | Method::InfoNCE2View | Method::MVCNet => 256,
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(
            self,
            Method::SimCLR2View | Method::InfoNCE2View | Method::MVCNet
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline => f.write_str("Baseline"),
            Method::SingleAug(k) => f.write_str(k.name()),
            Method::SimCLR2View => f.write_str("SimCLR"),
            Method::InfoNCE2View => f.write_str("InfoNCE"),
            Method::MVCNet => f.write_str("MVCNet"),
        }
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Baseline" => Ok(Method::Baseline),
            "SimCLR" => Ok(Method::SimCLR2View),
            "InfoNCE" => Ok(Method::InfoNCE2View),
            "MVCNet" => Ok(Method::MVCNet),
            other => other.parse::<AugmentationKind>().map(Method::SingleAug).map_err(|_| {
                TrainError::Usage(format!(
                    "unknown method {other:?}; expected Baseline, Flip, Noise, Scale, Shift, Surr, CR, HS, SimCLR, InfoNCE or MVCNet"
                ))
            }),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How single-augmentation batches use the augmented copies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleAugMode {
    /// Originals and their augmented copies in one batch.
    #[default]
    Combined,
    /// Augmented copies only.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub online_order: OnlineOrder,
    /// One reference for all training subjects instead of one per subject.
    #[serde(default)]
    pub pooled_training: bool,
}

fn yes() -> bool {
    true
}

impl Default for EaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            online_order: OnlineOrder::UpdateThenAlign,
            pooled_training: false,
        }
    }
}

/// Scale (time), HS (space) and Shift (frequency), in anchor order.
pub fn default_views() -> [AugmentationSpec; 3] {
    [
        AugmentationKind::Scale.default_spec(),
        AugmentationKind::HS.default_spec(),
        AugmentationKind::Shift.default_spec(),
    ]
}

pub fn default_pool() -> Vec<AugmentationSpec> {
    AugmentationKind::ALL
        .iter()
        .map(|k| k.default_spec())
        .collect()
}

fn default_epochs() -> usize {
    100
}

fn default_lr() -> f64 {
    1e-3
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Rows per batch seen by the classifier; `None` uses the method default.
    /// Single-augmentation batches sample half as many originals.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub single_aug_mode: SingleAugMode,
    #[serde(default)]
    pub loss: LossConfig,
    /// Time, space and frequency views for MVCNet, in anchor order.
    #[serde(default = "default_views")]
    pub views: [AugmentationSpec; 3],
    /// Pool for two-view methods; single-augmentation methods take their
    /// parameters from here when the kind is present.
    #[serde(default = "default_pool")]
    pub augmentation_pool: Vec<AugmentationSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub ea: EaConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: None,
            single_aug_mode: SingleAugMode::Combined,
            loss: LossConfig::default(),
            views: default_views(),
            augmentation_pool: default_pool(),
            seed: 0,
            repeats: default_repeats(),
            ea: EaConfig::default(),
            precision: Precision::F32,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or_else(|| self.method.default_batch_size())
    }

    /// Configured parameters of `kind`: its pool entry, else the defaults.
    pub fn spec_for(&self, kind: AugmentationKind) -> AugmentationSpec {
        self.augmentation_pool
            .iter()
            .find(|s| s.kind() == kind)
            .copied()
            .unwrap_or_else(|| kind.default_spec())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Usage("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let b = self.batch_size();
        if b < 2 {
            return Err(TrainError::Usage(format!(
                "batch_size must be at least 2, got {b}"
            )));
        }
        if matches!(self.method, Method::SingleAug(_))
            && self.single_aug_mode == SingleAugMode::Combined
            && b < 4
        {
            return Err(TrainError::Usage(format!(
                "single-augmentation batch_size {b} leaves fewer than 2 originals"
            )));
        }
        if self.repeats == 0 {
            return Err(TrainError::Usage("repeats must be at least 1".into()));
        }
        self.loss.validate()?;
        for spec in self.views.iter().chain(&self.augmentation_pool) {
            spec.validate()?;
        }
        if matches!(self.method, Method::SimCLR2View | Method::InfoNCE2View)
            && self.augmentation_pool.len() < 2
        {
            return Err(TrainError::Usage(format!(
                "two-view methods need an augmentation pool of at least 2 entries, got {}",
                self.augmentation_pool.len()
            )));
        }
        Ok(())
    }
}
