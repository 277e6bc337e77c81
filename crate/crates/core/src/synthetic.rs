//! Constructed two-class motor-imagery-like dataset for end-to-end checks.
//!
//! Eight channels sampled at 128 Hz: three mirrored pairs (C3/C4, FC3/FC4,
//! CP3/CP4) and two midline channels (Cz, CPz). Every trial mixes a 10 Hz
//! and a 12 Hz rhythm with random phases plus white noise. For `left_hand`
//! the left hemisphere is dominated by 10 Hz and the right by 12 Hz;
//! `right_hand` is the mirror image, so reflecting channels exactly maps one
//! class onto the other. Midline channels carry both rhythms equally.
//!
//! Subjects differ by per-channel gains and a small common frequency offset.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{DataError, DatasetManifest, EpochSet, SubjectId};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub n_timepoints: usize,
    pub fs_hz: f64,
    /// White-noise standard deviation relative to a unit-amplitude rhythm.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            trials_per_subject: 50,
            n_timepoints: 256,
            fs_hz: 128.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

const CHANNELS: [&str; 8] = ["C3", "C4", "FC3", "FC4", "CP3", "CP4", "Cz", "CPz"];
const PAIRS: [(usize, usize); 3] = [(0, 1), (2, 3), (4, 5)];
const MIDLINE: [usize; 2] = [6, 7];
const STRONG: f64 = 1.0;
const WEAK: f64 = 0.3;
const MIDLINE_AMP: f64 = 0.6;

pub fn synthetic_manifest(config: &SyntheticConfig) -> DatasetManifest {
    DatasetManifest {
        name: "synthetic".into(),
        fs_hz: config.fs_hz,
        n_channels: CHANNELS.len(),
        n_timepoints: config.n_timepoints,
        channel_names: CHANNELS.iter().map(|s| s.to_string()).collect(),
        symmetric_pairs: PAIRS.to_vec(),
        midline_channels: MIDLINE.to_vec(),
        label_names: vec!["left_hand".into(), "right_hand".into()],
        label_swap_on_reflection: true,
        subjects: (1..=config.n_subjects as SubjectId).collect(),
        notes: Some(serde_json::json!({
            "generator": "synthetic two-class 10/12 Hz rhythms",
            "seed": config.seed,
            "noise_std": config.noise_std,
        })),
    }
}

/// `(10 Hz, 12 Hz)` amplitudes of channel `c` for `label`.
fn amplitudes(c: usize, label: usize) -> (f64, f64) {
    let left = PAIRS.iter().any(|p| p.0 == c);
    let right = PAIRS.iter().any(|p| p.1 == c);
    match (left, right, label) {
        (true, _, 0) | (_, true, 1) => (STRONG, WEAK),
        (true, _, _) | (_, true, _) => (WEAK, STRONG),
        _ => (MIDLINE_AMP, MIDLINE_AMP),
    }
}

/// Generates the dataset; labels are balanced within each subject and
/// trial order is shuffled.
pub fn generate(config: &SyntheticConfig) -> Result<EpochSet, DataError> {
    let manifest = synthetic_manifest(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, t) = (CHANNELS.len(), config.n_timepoints);
    let n = config.n_subjects * config.trials_per_subject;
    let mut data = Array3::zeros((n, c, t));
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let two_pi = 2.0 * std::f64::consts::PI;

    for (s_idx, &subject) in manifest.subjects.iter().enumerate() {
        let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.7..1.3)).collect();
        let df = rng.random_range(-0.2..0.2);
        let mut order: Vec<usize> = (0..config.trials_per_subject).map(|i| i % 2).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for (k, &label) in order.iter().enumerate() {
            let i = s_idx * config.trials_per_subject + k;
            let (p10, p12) = (rng.random_range(0.0..two_pi), rng.random_range(0.0..two_pi));
            for ch in 0..c {
                let (a10, a12) = amplitudes(ch, label);
                for step in 0..t {
                    let time = step as f64 / config.fs_hz;
                    let rhythm = a10 * (two_pi * (10.0 + df) * time + p10).sin()
                        + a12 * (two_pi * (12.0 + df) * time + p12).sin();
                    let noise = config.noise_std * gaussian(&mut rng);
                    data[[i, ch, step]] = gains[ch] * rhythm + noise;
                }
            }
            labels.push(label);
            subjects.push(subject);
        }
    }
    EpochSet::new(data, labels, subjects, manifest)
}

/// Standard normal draw (Box-Muller).
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
