use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Subject identifier as stored in archive file names (`subject_<id>.bin`).
pub type SubjectId = u32;

/// Dataset-level metadata stored as `manifest.json` at the root of an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub fs_hz: f64,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub channel_names: Vec<String>,
    /// `(left, right)` channel indices mirrored across the midline.
    pub symmetric_pairs: Vec<(usize, usize)>,
    pub midline_channels: Vec<usize>,
    pub label_names: Vec<String>,
    pub label_swap_on_reflection: bool,
    pub subjects: Vec<SubjectId>,
    /// Free-form provenance (trial length, preprocessing, converter version).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

/// One broken manifest invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Result of [`validate_manifest`]; empty when every invariant holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Checks every manifest invariant and lists each violation found.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let c = manifest.n_channels;

    if !(manifest.fs_hz.is_finite() && manifest.fs_hz > 0.0) {
        report.push("fs_hz", "sampling rate must be positive");
    }
    if c == 0 {
        report.push("n_channels", "must be positive");
    }
    if manifest.n_timepoints == 0 {
        report.push("n_timepoints", "must be positive");
    }
    if manifest.channel_names.len() != c {
        report.push(
            "channel_names",
            format!("expected {c} names, found {}", manifest.channel_names.len()),
        );
    }

    let mut seen = BTreeSet::new();
    let mut check_index = |report: &mut ValidationReport, field: &'static str, idx: usize| {
        if idx >= c {
            report.push(
                field,
                format!("index out of range: {idx} (n_channels = {c})"),
            );
        } else if !seen.insert(idx) {
            report.push(field, format!("index {idx} appears more than once"));
        }
    };
    for &(left, right) in &manifest.symmetric_pairs {
        if left == right {
            report.push(
                "symmetric_pairs",
                format!("pair uses same index twice: ({left}, {right})"),
            );
            check_index(&mut report, "symmetric_pairs", left);
            continue;
        }
        check_index(&mut report, "symmetric_pairs", left);
        check_index(&mut report, "symmetric_pairs", right);
    }
    for &m in &manifest.midline_channels {
        check_index(&mut report, "midline_channels", m);
    }

    if manifest.label_names.len() < 2 {
        report.push("label_names", "at least two labels are required");
    }
    if manifest.label_swap_on_reflection && reflection_label_map(&manifest.label_names).is_none() {
        report.push(
            "label_swap_on_reflection",
            "label names do not encode a left/right symmetric task",
        );
    }

    if manifest.subjects.is_empty() {
        report.push("subjects", "no subjects listed");
    }
    let unique: BTreeSet<_> = manifest.subjects.iter().collect();
    if unique.len() != manifest.subjects.len() {
        report.push("subjects", "duplicate subject id");
    }
    report
}

/// Label permutation induced by mirroring the hemispheres.
///
/// Names containing `left` map to the name with `left` replaced by `right` (and
/// vice versa); all other labels map to themselves. Returns `None` unless at
/// least one left/right pair exists and every left/right name has a partner.
pub fn reflection_label_map(label_names: &[String]) -> Option<Vec<usize>> {
    let lower: Vec<String> = label_names.iter().map(|n| n.to_lowercase()).collect();
    let mut map: Vec<usize> = (0..label_names.len()).collect();
    let mut any = false;
    for (i, name) in lower.iter().enumerate() {
        let mirrored = if name.contains("left") {
            name.replace("left", "right")
        } else if name.contains("right") {
            name.replace("right", "left")
        } else {
            continue;
        };
        let j = lower.iter().position(|other| *other == mirrored)?;
        map[i] = j;
        any = true;
    }
    any.then_some(map)
}

impl DatasetManifest {
    /// Channels taken from the left hemisphere by half-sample recombination:
    /// left members of each pair plus the midline.
    pub fn left_hemisphere(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.symmetric_pairs.iter().map(|p| p.0).collect();
        out.extend(&self.midline_channels);
        out.sort_unstable();
        out
    }

    pub fn right_hemisphere(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.symmetric_pairs.iter().map(|p| p.1).collect();
        out.sort_unstable();
        out
    }

    /// First channel with neither a mirror partner nor a midline entry.
    pub fn uncovered_channel(&self) -> Option<usize> {
        let mut covered = vec![false; self.n_channels];
        for &(l, r) in &self.symmetric_pairs {
            for i in [l, r] {
                if let Some(slot) = covered.get_mut(i) {
                    *slot = true;
                }
            }
        }
        for &m in &self.midline_channels {
            if let Some(slot) = covered.get_mut(m) {
                *slot = true;
            }
        }
        covered.iter().position(|c| !c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest3() -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            fs_hz: 250.0,
            n_channels: 3,
            n_timepoints: 4,
            channel_names: vec!["C3".into(), "C4".into(), "Cz".into()],
            symmetric_pairs: vec![(0, 1)],
            midline_channels: vec![2],
            label_names: vec!["left_hand".into(), "right_hand".into()],
            label_swap_on_reflection: true,
            subjects: vec![1],
            notes: None,
        }
    }

    #[test]
    fn valid_manifest_has_empty_report() {
        assert!(validate_manifest(&manifest3()).is_empty());
    }

    #[test]
    fn same_index_pair_is_reported() {
        let mut m = manifest3();
        m.symmetric_pairs = vec![(0, 0)];
        let report = validate_manifest(&m);
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("pair uses same index twice")));
    }

    #[test]
    fn out_of_range_index_is_reported() {
        let mut m = manifest3();
        m.symmetric_pairs = vec![(0, 5)];
        let report = validate_manifest(&m);
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("index out of range")));
    }

    #[test]
    fn duplicate_across_pairs_and_midline() {
        let mut m = manifest3();
        m.midline_channels = vec![1];
        assert!(!validate_manifest(&m).is_empty());
    }

    #[test]
    fn label_swap_needs_symmetric_names() {
        let mut m = manifest3();
        m.label_names = vec!["right_hand".into(), "feet".into()];
        assert!(!validate_manifest(&m).is_empty());
        m.label_swap_on_reflection = false;
        assert!(validate_manifest(&m).is_empty());
    }

    #[test]
    fn label_map_swaps_left_and_right() {
        let names: Vec<String> = ["left_hand", "right_hand", "feet"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(reflection_label_map(&names), Some(vec![1, 0, 2]));
    }

    #[test]
    fn hemispheres() {
        let m = manifest3();
        assert_eq!(m.left_hemisphere(), vec![0, 2]);
        assert_eq!(m.right_hemisphere(), vec![1]);
        assert_eq!(m.uncovered_channel(), None);
    }
}
