//! Euclidean Alignment: whiten trials by the inverse square root of the mean
//! trial covariance `R = mean_i X_i X_iᵀ`, so aligned trials satisfy
//! `mean_i X̃_i X̃_iᵀ ≈ I`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::epochs::EpochSet;
use super::{DataError, Result};

/// Relative ridge added to the mean covariance, scaled by `trace / C`.
pub const ALIGNMENT_EPSILON: f64 = 1e-8;

/// Order of reference update and alignment for a streamed test trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineOrder {
    #[default]
    UpdateThenAlign,
    AlignThenUpdate,
}

/// Running covariance sum and the derived whitening matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    cov_sum: Array2<f64>,
    count: usize,
    ref_inv_sqrt: Array2<f64>,
}

impl AlignmentState {
    /// State with no trials; `align` fails until the first update.
    pub fn empty(n_channels: usize) -> Self {
        Self {
            cov_sum: Array2::zeros((n_channels, n_channels)),
            count: 0,
            ref_inv_sqrt: Array2::eye(n_channels),
        }
    }

    /// Batch reference over `trials` `[n × C × T]`.
    pub fn compute_reference(trials: ArrayView3<'_, f64>) -> Result<Self> {
        let (n, c, _) = trials.dim();
        if n == 0 {
            return Err(DataError::Usage(
                "cannot compute a reference from zero trials".into(),
            ));
        }
        let mut cov_sum = Array2::zeros((c, c));
        for trial in trials.outer_iter() {
            check_finite(trial)?;
            cov_sum += &trial.dot(&trial.t());
        }
        let ref_inv_sqrt = inverse_sqrt(&cov_sum, n)?;
        Ok(Self {
            cov_sum,
            count: n,
            ref_inv_sqrt,
        })
    }

    /// Adds one trial to the running sum and refreshes the whitening matrix.
    pub fn update(&mut self, trial: ArrayView2<'_, f64>) -> Result<()> {
        if trial.nrows() != self.cov_sum.nrows() {
            return Err(DataError::Usage(format!(
                "trial has {} channels, reference has {}",
                trial.nrows(),
                self.cov_sum.nrows()
            )));
        }
        check_finite(trial)?;
        let mut cov_sum = self.cov_sum.clone();
        cov_sum += &trial.dot(&trial.t());
        let ref_inv_sqrt = inverse_sqrt(&cov_sum, self.count + 1)?;
        self.cov_sum = cov_sum;
        self.count += 1;
        self.ref_inv_sqrt = ref_inv_sqrt;
        Ok(())
    }

    /// `ref_inv_sqrt · trial`.
    pub fn align(&self, trial: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.count == 0 {
            return Err(DataError::Usage("reference not initialized".into()));
        }
        if trial.nrows() != self.ref_inv_sqrt.ncols() {
            return Err(DataError::Usage(format!(
                "trial has {} channels, reference has {}",
                trial.nrows(),
                self.ref_inv_sqrt.ncols()
            )));
        }
        Ok(self.ref_inv_sqrt.dot(&trial))
    }

    /// Processes the next trial of an online test stream.
    ///
    /// With [`OnlineOrder::AlignThenUpdate`] the very first trial has no
    /// reference to align with, so it is folded in before aligning.
    pub fn stream(
        &mut self,
        trial: ArrayView2<'_, f64>,
        order: OnlineOrder,
    ) -> Result<Array2<f64>> {
        match order {
            OnlineOrder::UpdateThenAlign => {
                self.update(trial)?;
                self.align(trial)
            }
            OnlineOrder::AlignThenUpdate if self.count == 0 => {
                self.update(trial)?;
                self.align(trial)
            }
            OnlineOrder::AlignThenUpdate => {
                let out = self.align(trial)?;
                self.update(trial)?;
                Ok(out)
            }
        }
    }

    pub fn cov_sum(&self) -> &Array2<f64> {
        &self.cov_sum
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ref_inv_sqrt(&self) -> &Array2<f64> {
        &self.ref_inv_sqrt
    }

    /// Aligns every trial in `trials` with this reference.
    pub fn align_all(&self, trials: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let mut out = Array3::zeros(trials.dim());
        for (i, trial) in trials.outer_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&self.align(trial)?);
        }
        Ok(out)
    }
}

fn check_finite(trial: ArrayView2<'_, f64>) -> Result<()> {
    if trial.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DataError::Numerical("non-finite sample in trial".into()))
    }
}

fn inverse_sqrt(cov_sum: &Array2<f64>, count: usize) -> Result<Array2<f64>> {
    let c = cov_sum.nrows();
    let mean = cov_sum / count as f64;
    let ridge = ALIGNMENT_EPSILON * mean.diag().sum() / c as f64;
    let m = DMatrix::from_fn(c, c, |i, j| {
        // Symmetrize against round-off before the eigensolver.
        let v = 0.5 * (mean[[i, j]] + mean[[j, i]]);
        if i == j {
            v + ridge
        } else {
            v
        }
    });
    let eig = SymmetricEigen::new(m);
    if let Some(bad) = eig
        .eigenvalues
        .iter()
        .find(|&&l| !(l.is_finite() && l > 0.0))
    {
        return Err(DataError::Numerical(format!(
            "reference covariance is not positive definite (eigenvalue {bad:e})"
        )));
    }
    let v = &eig.eigenvectors;
    Ok(Array2::from_shape_fn((c, c), |(i, j)| {
        (0..c)
            .map(|k| v[(i, k)] * v[(j, k)] / eig.eigenvalues[k].sqrt())
            .sum()
    }))
}

/// Aligns a training set: one reference per subject, or one pooled reference.
pub fn align_training_set(set: &EpochSet, pooled: bool) -> Result<EpochSet> {
    if pooled {
        let state = AlignmentState::compute_reference(set.data().view())?;
        return Ok(set.with_data(state.align_all(set.data().view())?));
    }
    let mut out = set.data().clone();
    for subject in set.present_subjects() {
        let idx = set.indices_of_subject(subject);
        let trials = set.data().select(Axis(0), &idx);
        let state = AlignmentState::compute_reference(trials.view())?;
        for (&i, trial) in idx.iter().zip(trials.outer_iter()) {
            out.index_axis_mut(Axis(0), i).assign(&state.align(trial)?);
        }
    }
    Ok(set.with_data(out))
}
