//! Knowledge-guided EEG augmentations from three domains.
//!
//! | kind  | domain | effect                                                  |
//! |-------|--------|---------------------------------------------------------|
//! | Flip  | T      | negates every sample                                    |
//! | Noise | T      | adds uniform noise scaled by each channel's std         |
//! | Scale | T      | multiplies the trial by one coefficient around 1        |
//! | Shift | F      | shifts the spectrum with the analytic signal            |
//! | Surr  | F      | randomizes Fourier phases, keeps magnitudes             |
//! | CR    | S      | swaps mirrored channels (and left/right labels)         |
//! | HS    | S      | left hemisphere of one trial, right of another          |
//!
//! The Noise, Scale and Shift default parameters are invented defaults exposed
//! for configuration: alpha 0.1, scale range [0.9, 1.1], shift range
//! [-0.2, 0.2] Hz.

mod spec;
mod spectral;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::dataio::{reflection_label_map, DatasetManifest};

pub use spec::{
    AugmentationKind, AugmentationSpec, ViewTag, DEFAULT_NOISE_ALPHA, DEFAULT_SCALE_RANGE,
    DEFAULT_SHIFT_RANGE_HZ,
};
pub use spectral::{amplitude_spectrum, analytic_signal, freq_shift, surrogate};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("{0}")]
    Usage(String),
}

/// A batch of trials, optionally tagged with the view that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub data: Array3<f64>,
    pub labels: Vec<usize>,
    pub view_tag: ViewTag,
}

impl AugmentedBatch {
    pub fn new(data: Array3<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(data.len_of(Axis(0)), labels.len());
        Self {
            data,
            labels,
            view_tag: ViewTag::None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn flip(trial: ArrayView2<'_, f64>) -> Array2<f64> {
    trial.mapv(|v| -v)
}

/// Adds `Uniform(-alpha·σ_c, alpha·σ_c)` noise, i.i.d. per sample.
pub fn add_noise<R: Rng + ?Sized>(
    trial: ArrayView2<'_, f64>,
    alpha: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = trial.to_owned();
    for mut row in out.outer_iter_mut() {
        let bound = alpha * row.std(0.0);
        for v in row.iter_mut() {
            *v += bound * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    out
}

pub fn scale(trial: ArrayView2<'_, f64>, coeff: f64) -> Result<Array2<f64>, AugmentError> {
    if !(coeff > 0.0 && coeff.is_finite()) {
        return Err(AugmentError::Usage(format!(
            "scale coefficient must be positive, got {coeff}"
        )));
    }
    Ok(trial.mapv(|v| v * coeff))
}

/// Uniform draw on `[low, high)`; returns `low` exactly for a degenerate range.
pub fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    if low == high {
        low
    } else {
        low + (high - low) * rng.random::<f64>()
    }
}

/// Mirrors the channel layout across the midline.
///
/// The label passes through the manifest's left/right swap when
/// `label_swap_on_reflection` is set and is returned unchanged otherwise.
pub fn channel_reflect(
    trial: ArrayView2<'_, f64>,
    label: usize,
    manifest: &DatasetManifest,
) -> Result<(Array2<f64>, usize), AugmentError> {
    check_coverage(manifest)?;
    let mut out = trial.to_owned();
    for &(l, r) in &manifest.symmetric_pairs {
        out.row_mut(l).assign(&trial.row(r));
        out.row_mut(r).assign(&trial.row(l));
    }
    let label = if manifest.label_swap_on_reflection {
        let map = reflection_label_map(&manifest.label_names).ok_or_else(|| {
            AugmentError::Usage("label names do not encode a left/right task".into())
        })?;
        *map.get(label)
            .ok_or_else(|| AugmentError::Usage(format!("label {label} out of range")))?
    } else {
        label
    };
    Ok((out, label))
}

/// Recombines the left hemisphere (left pair members plus midline) of
/// `trial_a` with the right hemisphere of `trial_b`. Both must share a label.
pub fn half_sample(
    trial_a: ArrayView2<'_, f64>,
    label_a: usize,
    trial_b: ArrayView2<'_, f64>,
    label_b: usize,
    manifest: &DatasetManifest,
) -> Result<(Array2<f64>, usize), AugmentError> {
    check_coverage(manifest)?;
    if trial_a.dim() != trial_b.dim() {
        return Err(AugmentError::Usage(
            "half-sample trials differ in shape".into(),
        ));
    }
    if label_a != label_b {
        return Err(AugmentError::Usage(format!(
            "half-sample pairs must share a class, got {label_a} and {label_b}"
        )));
    }
    let mut out = trial_a.to_owned();
    for r in manifest.right_hemisphere() {
        out.row_mut(r).assign(&trial_b.row(r));
    }
    Ok((out, label_a))
}

fn check_coverage(manifest: &DatasetManifest) -> Result<(), AugmentError> {
    match manifest.uncovered_channel() {
        Some(k) => Err(AugmentError::Usage(format!(
            "channel {k} has no reflection rule"
        ))),
        None => Ok(()),
    }
}

/// Applies `spec` trial-wise and tags the result with the spec's domain.
///
/// HS pairs each trial with a different same-class trial of the batch drawn
/// uniformly (itself when it is the only member of its class).
pub fn apply_view<R: Rng + ?Sized>(
    batch: &AugmentedBatch,
    spec: &AugmentationSpec,
    manifest: &DatasetManifest,
    rng: &mut R,
) -> Result<AugmentedBatch, AugmentError> {
    spec.validate()?;
    let mut data = Array3::zeros(batch.data.dim());
    let mut labels = batch.labels.clone();
    for (i, trial) in batch.data.outer_iter().enumerate() {
        let out = match *spec {
            AugmentationSpec::Flip => flip(trial),
            AugmentationSpec::Noise { noise_alpha } => add_noise(trial, noise_alpha, rng),
            AugmentationSpec::Scale {
                scale_low,
                scale_high,
            } => scale(trial, draw_uniform(rng, scale_low, scale_high))?,
            AugmentationSpec::Shift {
                shift_low_hz,
                shift_high_hz,
            } => freq_shift(
                trial,
                draw_uniform(rng, shift_low_hz, shift_high_hz),
                manifest.fs_hz,
            )?,
            AugmentationSpec::Surr => surrogate(trial, rng),
            AugmentationSpec::CR => {
                let (out, label) = channel_reflect(trial, batch.labels[i], manifest)?;
                labels[i] = label;
                out
            }
            AugmentationSpec::HS => {
                let partner = draw_partner(&batch.labels, i, rng);
                half_sample(
                    trial,
                    batch.labels[i],
                    batch.data.index_axis(Axis(0), partner),
                    batch.labels[partner],
                    manifest,
                )?
                .0
            }
        };
        data.index_axis_mut(Axis(0), i).assign(&out);
    }
    Ok(AugmentedBatch {
        data,
        labels,
        view_tag: spec.domain(),
    })
}

fn draw_partner<R: Rng + ?Sized>(labels: &[usize], i: usize, rng: &mut R) -> usize {
    let candidates: Vec<usize> = (0..labels.len())
        .filter(|&j| j != i && labels[j] == labels[i])
        .collect();
    if candidates.is_empty() {
        i
    } else {
        candidates[rng.random_range(0..candidates.len())]
    }
}
