use ndarray::{Array3, ArrayView2, Axis};

use super::manifest::{validate_manifest, DatasetManifest, SubjectId};
use super::{DataError, Result};

/// Labeled trials `[n_trials × C × T]` with per-trial subject provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    data: Array3<f64>,
    labels: Vec<usize>,
    subject_ids: Vec<SubjectId>,
    manifest: DatasetManifest,
}

impl EpochSet {
    /// Builds a set after checking shapes, labels, finiteness and the manifest.
    pub fn new(
        data: Array3<f64>,
        labels: Vec<usize>,
        subject_ids: Vec<SubjectId>,
        manifest: DatasetManifest,
    ) -> Result<Self> {
        let report = validate_manifest(&manifest);
        if !report.is_empty() {
            return Err(DataError::Validation(report.to_string()));
        }
        let (n, c, t) = data.dim();
        if c != manifest.n_channels || t != manifest.n_timepoints {
            return Err(DataError::Validation(format!(
                "trial shape [{c} × {t}] does not match manifest [{} × {}]",
                manifest.n_channels, manifest.n_timepoints
            )));
        }
        if labels.len() != n || subject_ids.len() != n {
            return Err(DataError::Validation(format!(
                "{n} trials but {} labels and {} subject ids",
                labels.len(),
                subject_ids.len()
            )));
        }
        let n_labels = manifest.label_names.len();
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_labels) {
            return Err(DataError::Validation(format!(
                "label {l} of trial {i} is out of range for {n_labels} label names"
            )));
        }
        if let Some(s) = subject_ids.iter().find(|s| !manifest.subjects.contains(s)) {
            return Err(DataError::Validation(format!(
                "subject {s} is not listed in the manifest"
            )));
        }
        for (i, trial) in data.outer_iter().enumerate() {
            if trial.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { trial: i });
            }
        }
        Ok(Self {
            data,
            labels,
            subject_ids,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[SubjectId] {
        &self.subject_ids
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn trial(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.label_names.len()
    }

    /// Distinct subjects present, in manifest order.
    pub fn present_subjects(&self) -> Vec<SubjectId> {
        self.manifest
            .subjects
            .iter()
            .copied()
            .filter(|s| self.subject_ids.contains(s))
            .collect()
    }

    /// Trials at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> EpochSet {
        EpochSet {
            data: self.data.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i]).collect(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn indices_of_subject(&self, subject: SubjectId) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.subject_ids[i] == subject)
            .collect()
    }

    /// Same trials with `data` replaced; used after alignment.
    pub(crate) fn with_data(&self, data: Array3<f64>) -> EpochSet {
        assert_eq!(data.dim(), self.data.dim());
        EpochSet {
            data,
            labels: self.labels.clone(),
            subject_ids: self.subject_ids.clone(),
            manifest: self.manifest.clone(),
        }
    }

    /// Concatenation of two sets over the same manifest.
    pub fn concat(&self, other: &EpochSet) -> Result<EpochSet> {
        if self.manifest != other.manifest {
            return Err(DataError::Usage(
                "cannot concatenate different datasets".into(),
            ));
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .map_err(|e| DataError::Validation(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        let mut subject_ids = self.subject_ids.clone();
        subject_ids.extend(&other.subject_ids);
        Ok(EpochSet {
            data,
            labels,
            subject_ids,
            manifest: self.manifest.clone(),
        })
    }
}

/// Splits off `target` as the test subject; both halves keep file order.
pub fn loso_split(dataset: &EpochSet, target: SubjectId) -> Result<(EpochSet, EpochSet)> {
    if !dataset.manifest.subjects.contains(&target) {
        return Err(DataError::Usage(format!("unknown subject {target}")));
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.subject_ids[i] == target);
    if train_idx.is_empty() {
        return Err(DataError::Usage("empty training set".into()));
    }
    if test_idx.is_empty() {
        return Err(DataError::Usage(format!("subject {target} has no trials")));
    }
    Ok((dataset.select(&train_idx), dataset.select(&test_idx)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn manifest(c: usize, t: usize, subjects: Vec<SubjectId>) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            fs_hz: 250.0,
            n_channels: c,
            n_timepoints: t,
            channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
            symmetric_pairs: vec![],
            midline_channels: (0..c).collect(),
            label_names: vec!["left_hand".into(), "right_hand".into()],
            label_swap_on_reflection: false,
            subjects,
            notes: None,
        }
    }

    fn four_subjects() -> EpochSet {
        let subjects: Vec<SubjectId> = (1..=4).collect();
        let n = 12;
        let data = Array3::from_shape_fn((n, 2, 3), |(i, c, t)| (i * 100 + c * 10 + t) as f64);
        let labels = (0..n).map(|i| i % 2).collect();
        let sids = (0..n).map(|i| (i % 4) as SubjectId + 1).collect();
        EpochSet::new(data, labels, sids, manifest(2, 3, subjects)).unwrap()
    }

    #[test]
    fn split_holds_out_target_in_order() {
        let ds = four_subjects();
        let (train, test) = loso_split(&ds, 2).unwrap();
        assert!(test.subject_ids().iter().all(|&s| s == 2));
        assert!(train.subject_ids().iter().all(|&s| s != 2));
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(train.present_subjects(), vec![1, 3, 4]);
        // Original order of the held-out trials: indices 1, 5, 9.
        let firsts: Vec<f64> = test.data().outer_iter().map(|t| t[[0, 0]]).collect();
        assert_eq!(firsts, vec![100.0, 500.0, 900.0]);
    }

    #[test]
    fn split_unknown_subject_fails() {
        assert!(matches!(
            loso_split(&four_subjects(), 9),
            Err(DataError::Usage(_))
        ));
    }

    #[test]
    fn split_single_subject_fails() {
        let data = Array3::zeros((2, 2, 3));
        let ds = EpochSet::new(data, vec![0, 1], vec![7, 7], manifest(2, 3, vec![7])).unwrap();
        match loso_split(&ds, 7) {
            Err(DataError::Usage(msg)) => assert_eq!(msg, "empty training set"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let data = Array3::zeros((1, 2, 3));
        let err = EpochSet::new(data, vec![7], vec![1], manifest(2, 3, vec![1])).unwrap_err();
        assert!(matches!(err, DataError::Validation(_)));
    }

    #[test]
    fn rejects_non_finite() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[1, 0, 2]] = f64::NAN;
        let err = EpochSet::new(data, vec![0, 1], vec![1, 1], manifest(2, 3, vec![1])).unwrap_err();
        assert!(matches!(err, DataError::NonFinite { trial: 1 }));
    }
}
