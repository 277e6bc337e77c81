//! On-disk archive layout.
//!
//! ```text
//! <dir>/manifest.json              DatasetManifest, snake_case keys
//! <dir>/subject_<S>.bin            f32 little-endian, row-major [n_trials][C][T]
//! <dir>/subject_<S>.labels.bin     i32 little-endian, [n_trials]
//! ```
//!
//! Samples are stored as `f32` and widened to `f64` on load.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::epochs::EpochSet;
use super::manifest::{validate_manifest, DatasetManifest, SubjectId};
use super::{DataError, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn data_file(dir: &Path, subject: SubjectId) -> PathBuf {
    dir.join(format!("subject_{subject}.bin"))
}

fn labels_file(dir: &Path, subject: SubjectId) -> PathBuf {
    dir.join(format!("subject_{subject}.labels.bin"))
}

/// Loads and validates an archive directory.
pub fn load_archive(dir: impl AsRef<Path>) -> Result<EpochSet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&read(&manifest_path)?).map_err(|e| DataError::Corrupt {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    let report = validate_manifest(&manifest);
    if !report.is_empty() {
        return Err(DataError::Validation(report.to_string()));
    }
    let (c, t) = (manifest.n_channels, manifest.n_timepoints);
    let trial_len = c * t;

    let mut samples: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut subject_ids = Vec::new();
    for &subject in &manifest.subjects {
        let label_path = labels_file(dir, subject);
        let label_bytes = read(&label_path)?;
        if label_bytes.len() % 4 != 0 {
            return Err(DataError::Corrupt {
                path: label_path,
                reason: format!("{} bytes is not a whole number of int32", label_bytes.len()),
            });
        }
        let n_trials = label_bytes.len() / 4;
        for (i, chunk) in label_bytes.chunks_exact(4).enumerate() {
            let raw = i32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            let label = usize::try_from(raw).map_err(|_| {
                DataError::Validation(format!(
                    "negative label {raw} at trial {i} in {}",
                    label_path.display()
                ))
            })?;
            labels.push(label);
            subject_ids.push(subject);
        }

        let data_path = data_file(dir, subject);
        let bytes = read(&data_path)?;
        let expected = n_trials * trial_len * 4;
        if bytes.len() != expected {
            return Err(DataError::Validation(format!(
                "{} holds {} bytes, expected {expected} for {n_trials} trials of [{c} × {t}] float32",
                data_path.display(),
                bytes.len()
            )));
        }
        samples.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64),
        );
    }
    let n = labels.len();
    let data = Array3::from_shape_vec((n, c, t), samples)
        .map_err(|e| DataError::Validation(e.to_string()))?;
    EpochSet::new(data, labels, subject_ids, manifest)
}

/// Writes `set` in archive layout. Samples are narrowed to `f32`.
pub fn save_archive(set: &EpochSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let manifest = set.manifest();
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| DataError::Corrupt {
        path: dir.join("manifest.json"),
        reason: e.to_string(),
    })?;
    write(&dir.join("manifest.json"), &json)?;

    for &subject in &manifest.subjects {
        let idx = set.indices_of_subject(subject);
        let mut data_bytes =
            Vec::with_capacity(idx.len() * manifest.n_channels * manifest.n_timepoints * 4);
        let mut label_bytes = Vec::with_capacity(idx.len() * 4);
        for &i in &idx {
            for &v in set.trial(i).iter() {
                data_bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let label = i32::try_from(set.labels()[i])
                .map_err(|_| DataError::Usage("label does not fit in int32".into()))?;
            label_bytes.extend_from_slice(&label.to_le_bytes());
        }
        write(&data_file(dir, subject), &data_bytes)?;
        write(&labels_file(dir, subject), &label_bytes)?;
    }
    Ok(())
}
