use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AugmentError;

/// Noise amplitude as a fraction of each channel's standard deviation.
/// Invented default; not given by the method description.
pub const DEFAULT_NOISE_ALPHA: f64 = 0.1;
/// Invented default scale range.
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Invented default frequency-shift range in Hz.
pub const DEFAULT_SHIFT_RANGE_HZ: (f64, f64) = (-0.2, 0.2);

/// Domain an augmentation perturbs; also tags materialized views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewTag {
    T,
    S,
    F,
    #[serde(rename = "none")]
    None,
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewTag::T => "T",
            ViewTag::S => "S",
            ViewTag::F => "F",
            ViewTag::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugmentationKind {
    Flip,
    Noise,
    Scale,
    Shift,
    Surr,
    CR,
    HS,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 7] = [
        AugmentationKind::Flip,
        AugmentationKind::Noise,
        AugmentationKind::Scale,
        AugmentationKind::Shift,
        AugmentationKind::Surr,
        AugmentationKind::CR,
        AugmentationKind::HS,
    ];

    pub fn domain(self) -> ViewTag {
        match self {
            AugmentationKind::Flip | AugmentationKind::Noise | AugmentationKind::Scale => {
                ViewTag::T
            }
            AugmentationKind::Shift | AugmentationKind::Surr => ViewTag::F,
            AugmentationKind::CR | AugmentationKind::HS => ViewTag::S,
        }
    }

    /// The spec with default parameters for this kind.
    pub fn default_spec(self) -> AugmentationSpec {
        match self {
            AugmentationKind::Flip => AugmentationSpec::Flip,
            AugmentationKind::Noise => AugmentationSpec::Noise {
                noise_alpha: DEFAULT_NOISE_ALPHA,
            },
            AugmentationKind::Scale => AugmentationSpec::Scale {
                scale_low: DEFAULT_SCALE_RANGE.0,
                scale_high: DEFAULT_SCALE_RANGE.1,
            },
            AugmentationKind::Shift => AugmentationSpec::Shift {
                shift_low_hz: DEFAULT_SHIFT_RANGE_HZ.0,
                shift_high_hz: DEFAULT_SHIFT_RANGE_HZ.1,
            },
            AugmentationKind::Surr => AugmentationSpec::Surr,
            AugmentationKind::CR => AugmentationSpec::CR,
            AugmentationKind::HS => AugmentationSpec::HS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::Flip => "Flip",
            AugmentationKind::Noise => "Noise",
            AugmentationKind::Scale => "Scale",
            AugmentationKind::Shift => "Shift",
            AugmentationKind::Surr => "Surr",
            AugmentationKind::CR => "CR",
            AugmentationKind::HS => "HS",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AugmentError::Usage(format!("unknown augmentation kind {s:?}")))
    }
}

/// A named augmentation with its parameters.
///
/// Serialized with an inline `kind` tag, e.g.
/// `{"kind": "Shift", "shift_low_hz": -0.2, "shift_high_hz": 0.2}`; omitted
/// parameters take the defaults above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AugmentationSpec {
    Flip,
    Noise {
        #[serde(default = "default_noise_alpha")]
        noise_alpha: f64,
    },
    Scale {
        #[serde(default = "default_scale_low")]
        scale_low: f64,
        #[serde(default = "default_scale_high")]
        scale_high: f64,
    },
    Shift {
        #[serde(default = "default_shift_low")]
        shift_low_hz: f64,
        #[serde(default = "default_shift_high")]
        shift_high_hz: f64,
    },
    Surr,
    CR,
    HS,
}

fn default_noise_alpha() -> f64 {
    DEFAULT_NOISE_ALPHA
}
fn default_scale_low() -> f64 {
    DEFAULT_SCALE_RANGE.0
}
fn default_scale_high() -> f64 {
    DEFAULT_SCALE_RANGE.1
}
fn default_shift_low() -> f64 {
    DEFAULT_SHIFT_RANGE_HZ.0
}
fn default_shift_high() -> f64 {
    DEFAULT_SHIFT_RANGE_HZ.1
}

impl AugmentationSpec {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            AugmentationSpec::Flip => AugmentationKind::Flip,
            AugmentationSpec::Noise { .. } => AugmentationKind::Noise,
            AugmentationSpec::Scale { .. } => AugmentationKind::Scale,
            AugmentationSpec::Shift { .. } => AugmentationKind::Shift,
            AugmentationSpec::Surr => AugmentationKind::Surr,
            AugmentationSpec::CR => AugmentationKind::CR,
            AugmentationSpec::HS => AugmentationKind::HS,
        }
    }

    pub fn domain(&self) -> ViewTag {
        self.kind().domain()
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        match *self {
            AugmentationSpec::Noise { noise_alpha }
                if !(noise_alpha >= 0.0 && noise_alpha.is_finite()) =>
            {
                Err(AugmentError::Usage(format!(
                    "noise_alpha must be non-negative, got {noise_alpha}"
                )))
            }
            AugmentationSpec::Scale {
                scale_low,
                scale_high,
            } => {
                if !(scale_low > 0.0 && scale_low <= scale_high && scale_high.is_finite()) {
                    Err(AugmentError::Usage(format!(
                        "scale range must satisfy 0 < low <= high, got [{scale_low}, {scale_high}]"
                    )))
                } else {
                    Ok(())
                }
            }
            AugmentationSpec::Shift {
                shift_low_hz,
                shift_high_hz,
            } if !(shift_low_hz <= shift_high_hz
                && shift_low_hz.is_finite()
                && shift_high_hz.is_finite()) =>
            {
                Err(AugmentError::Usage(format!(
                    "shift range must satisfy low <= high, got [{shift_low_hz}, {shift_high_hz}]"
                )))
            }
            _ => Ok(()),
        }
    }
}
