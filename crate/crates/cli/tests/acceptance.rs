//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, with every
//! tolerance pinned below. Exits nonzero when any criterion fails.
//!
//! The paper-number check runs only when `MVCNET_ZHOU2016_ARCHIVE` points
//! at a converted Zhou2016 archive.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use mvcnet::augment::{
    amplitude_spectrum, apply_view, channel_reflect, flip, freq_shift, scale, surrogate,
    AugmentationKind, AugmentedBatch,
};
use mvcnet::dataio::{load_archive, AlignmentState, EpochSet};
use mvcnet::losses::{cross_model_loss, cross_view_loss, total_loss, LossConfig, ViewFeatures};
use mvcnet::models::{build_model, BackboneKind, Mode, ModelBundle, ModelConfig, Precision};
use mvcnet::synthetic::{generate, synthetic_manifest, SyntheticConfig};
use mvcnet::trainer::{prepare_fold, run_loso, train_observed, Method, TrainConfig};
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_BATCHES: usize = 50;
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const CLOSED_FORM_TOL: f64 = 1e-9;
const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-5;
const GRAD_MIN_PARAMS: usize = 100;
const SURR_REL_TOL: f64 = 1e-6;
const SHIFT_ZERO_TOL: f64 = 1e-9;
const AUGMENT_BUDGET: Duration = Duration::from_secs(30);
const EA_INCREMENTAL_TOL: f64 = 1e-8;
const EA_IDENTITY_TOL: f64 = 1e-6;
const EA_RESCALE_TOL: f64 = 1e-8;
const E2E_MIN_ACCURACY: f64 = 0.95;
const E2E_MARGIN: f64 = 0.01;
const E2E_EPOCHS: usize = 100;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const REDUCTION_EPOCHS: usize = 3;
const ZHOU_ENV: &str = "MVCNET_ZHOU2016_ARCHIVE";
const ZHOU_BASELINE: f64 = 83.22;
const ZHOU_MVCNET: f64 = 87.20;
const ZHOU_BAND: f64 = 3.0;
const ZHOU_MIN_GAIN: f64 = 1.5;
const GRID_RUNS: usize = 28;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Optional substring filter from the command line, e.g.
/// `cargo test --test acceptance -- ea`.
fn selected(name: &str) -> bool {
    std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .all(|f| name.contains(&f))
}

fn run(name: &str, f: impl FnOnce() -> Verdict) -> bool {
    if !selected(name) {
        return true;
    }
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Verdict::Pass(d) => ("PASS", d, true),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Skip(d) => ("SKIP", d, true),
    };
    println!("{tag} {name} ({secs:.1}s): {detail}");
    ok
}

fn verdict(r: Result<String, String>) -> Verdict {
    match r {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

// ---------------------------------------------------------------- losses

type Rows = Vec<Vec<f64>>;

fn tensor(rows: &Rows) -> Tensor {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// -log(e^{s(a,p)/τ} / (e^{s(a,p)/τ} + Σ_n e^{s(a,n)/τ})), evaluated directly.
fn pair_distance(a: &[f64], p: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let pos = (cos(a, p) / tau).exp();
    let neg: f64 = negatives.iter().map(|n| (cos(a, n) / tau).exp()).sum();
    -(pos / (pos + neg)).ln()
}

fn oracle_cvc(views: &[Rows], tau: f64) -> f64 {
    let n = views[0].len();
    let mut total = 0.0;
    for i in 0..n {
        let mut negatives: Vec<&[f64]> = Vec::new();
        for j in 0..n {
            for v in views {
                if j != i {
                    negatives.push(&v[j]);
                }
            }
        }
        for (a, p) in [(0, 1), (0, 2), (1, 2)] {
            total += pair_distance(&views[a][i], &views[p][i], &negatives, tau);
        }
    }
    total / (n * 3) as f64
}

fn oracle_cmc(orig: &Rows, views: &[Rows], tau: f64) -> f64 {
    let n = orig.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut negatives: Vec<&[f64]> = Vec::new();
        for j in 0..n {
            if j != i {
                negatives.push(&orig[j]);
                for v in views {
                    negatives.push(&v[j]);
                }
            }
        }
        for v in views {
            total += pair_distance(&orig[i], &v[i], &negatives, tau);
        }
    }
    total / (n * views.len()) as f64
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn loss_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for b in 0..ORACLE_BATCHES {
        let n = 2 + b % 7;
        let d = if b % 2 == 0 { 3 } else { 8 };
        let mut draw = || -> Rows {
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let orig = draw();
        let views = vec![draw(), draw(), draw()];
        let f = ViewFeatures::new(tensor(&orig), views.iter().map(tensor).collect()).unwrap();
        let cvc = scalar(&cross_view_loss(&f, &cfg).unwrap());
        let cmc = scalar(&cross_model_loss(&f, &cfg).unwrap());
        worst = worst
            .max((cvc - oracle_cvc(&views, cfg.tau)).abs())
            .max((cmc - oracle_cmc(&orig, &views, cfg.tau)).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        ensure(
            worst < ORACLE_TOL,
            format!("max abs error {worst:e} >= {ORACLE_TOL:e}"),
        )
        .and(ensure(elapsed < ORACLE_BUDGET, format!("took {elapsed:?}")))
        .map(|_| format!("{ORACLE_BATCHES} batches, max abs error {worst:.2e} < {ORACLE_TOL:e}")),
    )
}

fn closed_form() -> Verdict {
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for n in 2..=8 {
        let same: Rows = vec![vec![0.3, -0.4, 1.2, 0.7]; n];
        let f = ViewFeatures::new(
            tensor(&same),
            vec![tensor(&same), tensor(&same), tensor(&same)],
        )
        .unwrap();
        let cvc = scalar(&cross_view_loss(&f, &cfg).unwrap());
        let cmc = scalar(&cross_model_loss(&f, &cfg).unwrap());
        worst = worst
            .max((cvc - (1.0 + 3.0 * (n - 1) as f64).ln()).abs())
            .max((cmc - (1.0 + 4.0 * (n - 1) as f64).ln()).abs());
    }
    verdict(
        ensure(worst < CLOSED_FORM_TOL, format!("max error {worst:e}"))
            .map(|_| format!("N=2..8, max error {worst:.2e} < {CLOSED_FORM_TOL:e}")),
    )
}

// ------------------------------------------------------------- gradients

fn objective(
    bundle: &ModelBundle,
    x: &Array3<f64>,
    views: &[Array3<f64>],
    labels: &[usize],
) -> Tensor {
    let z = bundle
        .backbone_forward(
            &bundle.input(x.view()).unwrap(),
            &mut Mode::train_no_dropout(),
        )
        .unwrap();
    let logits = bundle.classify(&z).unwrap();
    let projected = views
        .iter()
        .map(|v| {
            bundle
                .encode_project(
                    &bundle.input(v.view()).unwrap(),
                    &mut Mode::train_no_dropout(),
                )
                .unwrap()
        })
        .collect();
    total_loss(
        &logits,
        labels,
        &ViewFeatures::new(z, projected).unwrap(),
        &LossConfig::default(),
    )
    .unwrap()
    .total
}

fn set_entry(var: &Var, flat: usize, value: f64) {
    let t = var.as_tensor();
    let mut values = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    values[flat] = value;
    var.set(&Tensor::from_vec(values, t.shape(), t.device()).unwrap())
        .unwrap();
}

fn gradient_check() -> Verdict {
    let mut config = ModelConfig::new(BackboneKind::EEGNet, 3, 32, 2);
    config.precision = Precision::F64;
    let bundle = build_model(&config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = || Array3::from_shape_fn((6, 3, 32), |_| rng.random_range(-1.0..1.0));
    let x = draw();
    let views = vec![draw(), draw(), draw()];
    let labels = [0, 1, 0, 1, 1, 0];
    let grads = objective(&bundle, &x, &views, &labels).backward().unwrap();

    let params: Vec<_> = bundle.store().params().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (name, var) in &params {
        // Every tensor contributes; larger tensors contribute more entries.
        let k = var.elem_count().min(12);
        for _ in 0..k {
            let flat = rng.random_range(0..var.elem_count());
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[flat])
                .unwrap_or(0.0);
            let original = var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[flat];
            set_entry(var, flat, original + GRAD_STEP);
            let up = scalar(&objective(&bundle, &x, &views, &labels));
            set_entry(var, flat, original - GRAD_STEP);
            let down = scalar(&objective(&bundle, &x, &views, &labels));
            set_entry(var, flat, original);
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel >= GRAD_REL_TOL {
                return Verdict::Fail(format!(
                    "{name}[{flat}]: analytic {analytic:e}, numeric {numeric:e}"
                ));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        ensure(checked >= GRAD_MIN_PARAMS, format!("only {checked} parameters checked")).map(|_| {
            format!(
                "{checked} parameters over {} tensors, worst relative error {worst:.2e} < {GRAD_REL_TOL:e}",
                params.len()
            )
        }),
    )
}

// ---------------------------------------------------------- augmentation

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn augmentation_suite() -> Result<String, String> {
    let start = Instant::now();
    let cfg = SyntheticConfig {
        n_subjects: 2,
        trials_per_subject: 12,
        ..SyntheticConfig::default()
    };
    let set = generate(&cfg).unwrap();
    let manifest = synthetic_manifest(&cfg);
    let fs = manifest.fs_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut surr_worst = 0.0f64;
    let mut shift_worst = 0.0f64;
    for i in 0..set.len() {
        let x = set.trial(i).to_owned();
        let label = set.labels()[i];
        ensure(
            flip(flip(x.view()).view()) == x,
            "Flip is not an exact involution",
        )?;
        let (once, l1) = channel_reflect(x.view(), label, &manifest).unwrap();
        let (twice, l2) = channel_reflect(once.view(), l1, &manifest).unwrap();
        ensure(
            twice == x && l2 == label && l1 != label,
            "CR is not an exact involution",
        )?;
        ensure(
            scale(x.view(), 1.0).unwrap() == x,
            "Scale(1) is not the identity",
        )?;
        let sur = surrogate(x.view(), &mut rng);
        for (a, b) in x.outer_iter().zip(sur.outer_iter()) {
            let (sa, sb) = (
                amplitude_spectrum(a.as_slice().unwrap()),
                amplitude_spectrum(&b.to_vec()),
            );
            let peak = sa.iter().fold(0.0f64, |m, v| m.max(*v));
            let err = sa
                .iter()
                .zip(&sb)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            surr_worst = surr_worst.max(err / peak);
        }
        let shifted = freq_shift(x.view(), 0.0, fs).unwrap();
        let t = x.ncols();
        let interior = s![.., t / 10..t - t / 10];
        shift_worst = shift_worst.max(max_abs(
            &shifted.slice(interior).to_owned(),
            &x.slice(interior).to_owned(),
        ));
    }
    ensure(
        surr_worst < SURR_REL_TOL,
        format!("Surr amplitude error {surr_worst:e}"),
    )?;
    ensure(
        shift_worst < SHIFT_ZERO_TOL,
        format!("Shift(0) interior error {shift_worst:e}"),
    )?;

    // 10 Hz sinusoid shifted by +2 Hz peaks at 12 Hz.
    let t = 256;
    let sine = Array2::from_shape_fn((1, t), |(_, k)| {
        (2.0 * std::f64::consts::PI * 10.0 * k as f64 / fs).sin()
    });
    let moved = freq_shift(sine.view(), 2.0, fs).unwrap();
    let spectrum = amplitude_spectrum(&moved.row(0).to_vec());
    let peak_bin = (0..=t / 2)
        .max_by(|&a, &b| spectrum[a].total_cmp(&spectrum[b]))
        .unwrap();
    let peak_hz = peak_bin as f64 * fs / t as f64;
    ensure(peak_hz == 12.0, format!("shifted peak at {peak_hz} Hz"))?;

    // HS keeps labels and takes the right hemisphere from a same-class trial.
    let batch = AugmentedBatch::new(set.data().clone(), set.labels().to_vec());
    let right = manifest.right_hemisphere();
    for seed in 0..20 {
        let hs = apply_view(
            &batch,
            &AugmentationKind::HS.default_spec(),
            &manifest,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        ensure(hs.labels == batch.labels, "HS changed a label")?;
        for (i, out) in hs.data.outer_iter().enumerate() {
            let donor_ok = (0..batch.len()).any(|j| {
                batch.labels[j] == batch.labels[i]
                    && right
                        .iter()
                        .all(|&r| out.row(r) == batch.data.index_axis(Axis(0), j).row(r))
            });
            ensure(donor_ok, format!("HS trial {i} mixes classes"))?;
        }
    }

    // Seeded transforms are bit-reproducible.
    for kind in AugmentationKind::ALL {
        let spec = kind.default_spec();
        let a = apply_view(&batch, &spec, &manifest, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = apply_view(&batch, &spec, &manifest, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let same = a.labels == b.labels
            && a.data
                .iter()
                .zip(b.data.iter())
                .all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, format!("{} is not reproducible", kind.name()))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < AUGMENT_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "involutions exact, Surr rel error {surr_worst:.1e}, Shift(0) interior {shift_worst:.1e}, peak {peak_hz} Hz, HS label-pure, all kinds reproducible"
    ))
}

// ------------------------------------------------------------- alignment

fn mean_cov(trials: &Array3<f64>) -> Array2<f64> {
    let c = trials.dim().1;
    let mut sum = Array2::zeros((c, c));
    for t in trials.outer_iter() {
        sum += &t.dot(&t.t());
    }
    sum / trials.dim().0 as f64
}

fn ea_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mix = Array2::from_shape_fn((6, 6), |(i, j)| {
        if i == j {
            2.0
        } else {
            rng.random_range(-0.5..0.5)
        }
    });
    let trials = Array3::from_shape_fn((40, 6, 128), |_| rng.random_range(-1.0..1.0));
    let mut mixed = trials.clone();
    for (i, t) in trials.outer_iter().enumerate() {
        mixed.index_axis_mut(Axis(0), i).assign(&mix.dot(&t));
    }
    let batch = AlignmentState::compute_reference(mixed.view()).map_err(|e| e.to_string())?;
    let mut inc = AlignmentState::empty(6);
    for t in mixed.outer_iter() {
        inc.update(t).map_err(|e| e.to_string())?;
    }
    let inc_err = max_abs(batch.ref_inv_sqrt(), inc.ref_inv_sqrt());
    ensure(
        inc_err < EA_INCREMENTAL_TOL,
        format!("incremental vs batch {inc_err:e}"),
    )?;

    let aligned = batch.align_all(mixed.view()).map_err(|e| e.to_string())?;
    let id_err = max_abs(&mean_cov(&aligned), &Array2::eye(6));
    ensure(
        id_err < EA_IDENTITY_TOL,
        format!("mean covariance off identity by {id_err:e}"),
    )?;

    let scaled = mixed.mapv(|v| v * 37.5);
    let rescaled = AlignmentState::compute_reference(scaled.view())
        .and_then(|s| s.align_all(scaled.view()))
        .map_err(|e| e.to_string())?;
    let scale_err = (&rescaled - &aligned)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(
        scale_err < EA_RESCALE_TOL,
        format!("rescaling changed aligned trials by {scale_err:e}"),
    )?;
    Ok(format!(
        "incremental {inc_err:.1e} < {EA_INCREMENTAL_TOL:e}, identity {id_err:.1e} < {EA_IDENTITY_TOL:e}, rescaling {scale_err:.1e} < {EA_RESCALE_TOL:e}"
    ))
}

// -------------------------------------------------------------- training

fn workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn synthetic_end_to_end() -> Result<String, String> {
    let start = Instant::now();
    let set = generate(&SyntheticConfig::default()).unwrap();
    ensure(
        set.len() == 200 && set.manifest().n_channels == 8,
        "unexpected synthetic shape",
    )?;
    let mut acc = Vec::new();
    for method in [Method::Baseline, Method::MVCNet] {
        let mut c = TrainConfig::new(method);
        c.epochs = E2E_EPOCHS;
        c.repeats = 1;
        let r = run_loso(&set, BackboneKind::EEGNet, &c, workers()).map_err(|e| e.to_string())?;
        acc.push(r.aggregate().mean);
    }
    let elapsed = start.elapsed();
    let (base, ours) = (acc[0], acc[1]);
    let detail = format!(
        "Baseline {:.2}%, MVCNet {:.2}%, {:.0}s on {} worker(s)",
        base * 100.0,
        ours * 100.0,
        elapsed.as_secs_f64(),
        workers()
    );
    ensure(
        base >= E2E_MIN_ACCURACY && ours >= E2E_MIN_ACCURACY,
        format!("below 95%: {detail}"),
    )?;
    ensure(
        ours >= base - E2E_MARGIN,
        format!("MVCNet more than 1 point below Baseline: {detail}"),
    )?;
    ensure(elapsed <= E2E_BUDGET, format!("over 10 min: {detail}"))?;
    Ok(detail)
}

fn snapshot(bundle: &ModelBundle) -> Vec<(String, Vec<u32>)> {
    bundle
        .store()
        .all()
        .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("classifier."))
        .map(|(n, v)| {
            let values = v
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            (n.clone(), values.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

fn reduction_identity() -> Result<String, String> {
    let set = generate(&SyntheticConfig {
        n_subjects: 3,
        trials_per_subject: 16,
        n_timepoints: 128,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (train, _) =
        prepare_fold(&set, 1, &TrainConfig::new(Method::Baseline).ea).map_err(|e| e.to_string())?;
    let trajectory = |method: Method, weight: f64| {
        let mut c = TrainConfig::new(method);
        c.epochs = REDUCTION_EPOCHS;
        c.batch_size = Some(8);
        c.loss.lambda = weight;
        c.loss.gamma = weight;
        let mut states = Vec::new();
        train_observed(&train, BackboneKind::EEGNet, &c, 42, |_, b| {
            states.push(snapshot(b))
        })
        .unwrap();
        states
    };
    let base = trajectory(Method::Baseline, 0.1);
    let reduced = trajectory(Method::MVCNet, 0.0);
    ensure(base.len() == REDUCTION_EPOCHS, "missing epochs")?;
    ensure(base == reduced, "trajectories differ")?;
    let values: usize = base[0].iter().map(|(_, v)| v.len()).sum();
    Ok(format!(
        "{REDUCTION_EPOCHS} epochs, {values} backbone/classifier values bit-identical each epoch"
    ))
}

fn zhou2016() -> Verdict {
    let Ok(dir) = std::env::var(ZHOU_ENV) else {
        return Verdict::Skip(format!("set {ZHOU_ENV} to a converted Zhou2016 archive"));
    };
    let set: EpochSet = match load_archive(&dir) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(format!("cannot load {dir}: {e}")),
    };
    let mut acc = Vec::new();
    for method in [Method::Baseline, Method::MVCNet] {
        let c = TrainConfig::new(method);
        match run_loso(&set, BackboneKind::EEGNet, &c, workers()) {
            Ok(r) => acc.push(r.aggregate().mean * 100.0),
            Err(e) => return Verdict::Fail(e.to_string()),
        }
    }
    let (base, ours) = (acc[0], acc[1]);
    let detail =
        format!("Baseline {base:.2}% (ref {ZHOU_BASELINE}), MVCNet {ours:.2}% (ref {ZHOU_MVCNET})");
    verdict(
        ensure(
            (base - ZHOU_BASELINE).abs() <= ZHOU_BAND,
            format!("Baseline off: {detail}"),
        )
        .and(ensure(
            (ours - ZHOU_MVCNET).abs() <= ZHOU_BAND,
            format!("MVCNet off: {detail}"),
        ))
        .and(ensure(
            ours - base >= ZHOU_MIN_GAIN,
            format!("gain below {ZHOU_MIN_GAIN}: {detail}"),
        ))
        .map(|_| detail),
    )
}

// ------------------------------------------------------------------- CLI

fn mvcnet(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvcnet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "mvcnet {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Header row and data rows after the two provenance lines.
fn csv_body(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let hash = lines.next().unwrap_or_default();
    let seed = lines.next().unwrap_or_default();
    ensure(
        hash.starts_with("# config_sha256=")
            && hash.len() == 16 + 64
            && seed.starts_with("# seed="),
        format!("{} lacks the provenance lines", path.display()),
    )?;
    let split = |l: &str| l.split(',').map(String::from).collect::<Vec<_>>();
    let header = split(lines.next().unwrap_or_default());
    Ok((header, lines.map(split).collect()))
}

fn cli_golden() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    mvcnet(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--subjects",
            "3",
            "--trials",
            "8",
            "--timepoints",
            "64",
        ],
    )?;
    let config = r#"{
  "dataset_path": "data",
  "methods": ["Baseline", "MVCNet"],
  "train": {"epochs": 1, "repeats": 1, "seed": 3}
}
"#;
    std::fs::write(dir.join("config.json"), config).map_err(|e| e.to_string())?;
    mvcnet(dir, &["run", "--config", "config.json", "--out", "r1"])?;
    mvcnet(
        dir,
        &[
            "run",
            "--config",
            "config.json",
            "--out",
            "r2",
            "--workers",
            "2",
        ],
    )?;
    for name in ["cells.csv", "aggregate.csv", "curves.csv", "config.json"] {
        let a = std::fs::read(dir.join("r1").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("r2").join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{name} differs between reruns"))?;
    }
    let (header, rows) = csv_body(&dir.join("r1/cells.csv"))?;
    ensure(
        header
            == [
                "dataset", "backbone", "method", "subject", "repeat", "accuracy",
            ],
        "cells.csv header",
    )?;
    ensure(
        rows.len() == 2 * 3,
        format!("cells.csv has {} rows", rows.len()),
    )?;
    ensure(
        rows.iter()
            .all(|r| r.len() == 6 && r[5].parse::<f64>().is_ok_and(|a| (0.0..=1.0).contains(&a))),
        "cells.csv values",
    )?;
    let (header, rows) = csv_body(&dir.join("r1/aggregate.csv"))?;
    ensure(
        header
            == [
                "dataset", "backbone", "method", "mean", "std", "subjects", "repeats",
            ]
            && rows.len() == 2,
        "aggregate.csv schema",
    )?;

    mvcnet(dir, &["grid", "--config", "config.json", "--out", "g"])?;
    let kinds: Vec<&str> = AugmentationKind::ALL.iter().map(|k| k.name()).collect();
    let (header, rows) = csv_body(&dir.join("g/grid_EEGNet.csv"))?;
    ensure(
        header[0] == "kind" && header[1..] == kinds[..],
        format!("grid header {header:?}"),
    )?;
    ensure(rows.len() == 7, format!("grid has {} rows", rows.len()))?;
    let mut filled = 0;
    for (i, r) in rows.iter().enumerate() {
        ensure(r[0] == kinds[i] && r.len() == 8, "grid row labels")?;
        filled += r[1..]
            .iter()
            .filter(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
            .count();
    }
    ensure(
        filled == 49,
        format!("{filled} of 49 grid entries populated"),
    )?;
    let (_, runs) = csv_body(&dir.join("g/grid_runs.csv"))?;
    ensure(runs.len() == GRID_RUNS, format!("{} grid runs", runs.len()))?;

    let report = mvcnet(dir, &["report", "r1"])?;
    let table_rows = report
        .lines()
        .filter(|l| l.starts_with("| EEGNet |"))
        .count();
    ensure(table_rows == 2, format!("report has {table_rows} rows"))?;
    ensure(
        report.matches("**").count() == 2,
        "report must bold exactly one entry",
    )?;
    Ok(format!(
        "run/grid/report schemas exact, reruns byte-identical, {GRID_RUNS} grid runs fill 49 cells"
    ))
}

fn main() {
    let mut ok = true;
    ok &= run("loss-oracle", loss_oracle);
    ok &= run("closed-form-losses", closed_form);
    ok &= run("gradient-check", gradient_check);
    ok &= run("augmentation-suite", || verdict(augmentation_suite()));
    ok &= run("ea-suite", || verdict(ea_suite()));
    ok &= run("synthetic-end-to-end", || verdict(synthetic_end_to_end()));
    ok &= run("reduction-identity", || verdict(reduction_identity()));
    ok &= run("zhou2016-reproduction", zhou2016);
    ok &= run("cli-golden", || verdict(cli_golden()));
    if !ok {
        std::process::exit(1);
    }
}
