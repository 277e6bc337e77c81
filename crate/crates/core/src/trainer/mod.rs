//! Training loops for every compared method, online evaluation and
//! leave-one-subject-out runs.
//!
//! Each fold draws from independent seeded streams: model initialization,
//! batch order, backbone dropout, encoder dropout and augmentation. Methods
//! that share a batch size therefore see identical batches and identical
//! backbone dropout masks, whatever else they compute.

mod config;
mod optim;

use candle_core::Var;
use ndarray::{concatenate, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_view, AugmentError, AugmentationSpec, AugmentedBatch};
use crate::dataio::{
    align_training_set, loso_split, AlignmentState, DataError, EpochSet, OnlineOrder, SubjectId,
};
use crate::losses::{
    cross_entropy, infonce_loss, simclr_loss, total_loss, LossError, ViewFeatures,
};
use crate::models::{build_model, BackboneKind, Mode, ModelBundle, ModelConfig, ModelError};

pub use config::{default_pool, default_views, EaConfig, Method, SingleAugMode, TrainConfig};
pub use optim::Adam;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: ce={ce}, cvc={cvc}, cmc={cmc}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        ce: f64,
        cvc: f64,
        cmc: f64,
    },
    #[error("fold (subject {subject}, repeat {repeat}) failed: {source}")]
    Fold {
        subject: SubjectId,
        repeat: usize,
        #[source]
        source: Box<TrainError>,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

/// Per-epoch means over batches. For two-view methods the pair loss is
/// reported as `cvc`; terms a method does not compute are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub cvc: f64,
    pub cmc: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainedModel {
    pub bundle: ModelBundle,
    pub curve: Vec<EpochLog>,
}

/// Independent random streams of one fold.
struct Streams {
    batches: ChaCha8Rng,
    backbone_dropout: ChaCha8Rng,
    encoder_dropout: ChaCha8Rng,
    augment: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            rng
        };
        Self {
            batches: stream(1),
            backbone_dropout: stream(2),
            encoder_dropout: stream(3),
            augment: stream(4),
        }
    }
}

/// Shuffled index batches of size `size`. The final partial batch is kept;
/// a lone leftover trial joins the previous batch, since batch statistics
/// and contrastive negatives need at least two rows.
fn epoch_batches<R: Rng>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn model_config(train: &EpochSet, backbone: BackboneKind, config: &TrainConfig) -> ModelConfig {
    let m = train.manifest();
    let mut mc = ModelConfig::new(backbone, m.n_channels, m.n_timepoints, m.label_names.len());
    mc.precision = config.precision;
    mc
}

/// Trains on an already aligned training set.
pub fn train(
    train: &EpochSet,
    backbone: BackboneKind,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    train_observed(train, backbone, config, seed, |_, _| {})
}

/// [`train`], calling `after_epoch(epoch, bundle)` at the end of every epoch.
pub fn train_observed(
    train: &EpochSet,
    backbone: BackboneKind,
    config: &TrainConfig,
    seed: u64,
    mut after_epoch: impl FnMut(usize, &ModelBundle),
) -> Result<TrainedModel> {
    config.validate()?;
    if train.len() < 2 {
        return Err(TrainError::Usage(format!(
            "training needs at least 2 trials, got {}",
            train.len()
        )));
    }
    let bundle = build_model(&model_config(train, backbone, config), seed)?;
    let mut streams = Streams::new(seed);
    let params: Vec<Var> = bundle
        .store()
        .params()
        .iter()
        .map(|(_, v)| v.clone())
        .collect();
    let mut opt = Adam::new(params, config.learning_rate);
    let originals_per_batch = match (config.method, config.single_aug_mode) {
        (Method::SingleAug(_), SingleAugMode::Combined) => config.batch_size() / 2,
        _ => config.batch_size(),
    };

    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train.len(), originals_per_batch, &mut streams.batches);
        let mut sums = [0.0f64; 4];
        for (b, idx) in batches.iter().enumerate() {
            let batch = AugmentedBatch::new(
                train.data().select(Axis(0), idx),
                idx.iter().map(|&i| train.labels()[i]).collect(),
            );
            let step = batch_loss(&bundle, train, &batch, config, &mut streams)?;
            if !step.total_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    ce: step.ce,
                    cvc: step.cvc,
                    cmc: step.cmc,
                });
            }
            let grads = step.total.backward()?;
            opt.step(&grads)?;
            for (s, v) in sums
                .iter_mut()
                .zip([step.ce, step.cvc, step.cmc, step.total_value])
            {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let log = EpochLog {
            epoch,
            ce: sums[0] / nb,
            cvc: sums[1] / nb,
            cmc: sums[2] / nb,
            total: sums[3] / nb,
        };
        log::debug!(
            "epoch {epoch}: ce {:.4} cvc {:.4} cmc {:.4}",
            log.ce,
            log.cvc,
            log.cmc
        );
        curve.push(log);
        after_epoch(epoch, &bundle);
    }
    Ok(TrainedModel { bundle, curve })
}

struct StepLoss {
    total: candle_core::Tensor,
    total_value: f64,
    ce: f64,
    cvc: f64,
    cmc: f64,
}

fn batch_loss(
    bundle: &ModelBundle,
    train: &EpochSet,
    batch: &AugmentedBatch,
    config: &TrainConfig,
    streams: &mut Streams,
) -> Result<StepLoss> {
    let manifest = train.manifest();
    let view =
        |spec: &AugmentationSpec, rng: &mut ChaCha8Rng| apply_view(batch, spec, manifest, rng);
    let project = |x: &Array3<f64>, rng: &mut ChaCha8Rng| -> Result<candle_core::Tensor> {
        Ok(bundle.encode_project(&bundle.input(x.view())?, &mut Mode::train(rng))?)
    };

    match config.method {
        Method::Baseline | Method::SingleAug(_) => {
            let (data, labels) = match config.method {
                Method::SingleAug(kind) => {
                    let aug = view(&config.spec_for(kind), &mut streams.augment)?;
                    match config.single_aug_mode {
                        SingleAugMode::Combined => {
                            let data = concatenate(Axis(0), &[batch.data.view(), aug.data.view()])
                                .expect("matching trial shapes");
                            let labels = batch.labels.iter().chain(&aug.labels).copied().collect();
                            (data, labels)
                        }
                        SingleAugMode::Replace => (aug.data, aug.labels),
                    }
                }
                _ => (batch.data.clone(), batch.labels.clone()),
            };
            let z = bundle.backbone_forward(
                &bundle.input(data.view())?,
                &mut Mode::train(&mut streams.backbone_dropout),
            )?;
            let ce = cross_entropy(&bundle.classify(&z)?, &labels)?;
            let v = scalar(&ce)?;
            Ok(StepLoss {
                total: ce,
                total_value: v,
                ce: v,
                cvc: 0.0,
                cmc: 0.0,
            })
        }
        Method::MVCNet => {
            let views = config
                .views
                .iter()
                .map(|spec| view(spec, &mut streams.augment))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let z = bundle.backbone_forward(
                &bundle.input(batch.data.view())?,
                &mut Mode::train(&mut streams.backbone_dropout),
            )?;
            let logits = bundle.classify(&z)?;
            let zv = views
                .iter()
                .map(|v| project(&v.data, &mut streams.encoder_dropout))
                .collect::<Result<Vec<_>>>()?;
            let out = total_loss(
                &logits,
                &batch.labels,
                &ViewFeatures::new(z, zv)?,
                &config.loss,
            )?;
            Ok(StepLoss {
                total_value: scalar(&out.total)?,
                total: out.total,
                ce: out.ce,
                cvc: out.cvc,
                cmc: out.cmc,
            })
        }
        Method::SimCLR2View | Method::InfoNCE2View => {
            let pool = &config.augmentation_pool;
            let a = streams.augment.random_range(0..pool.len());
            let mut b = streams.augment.random_range(0..pool.len() - 1);
            if b >= a {
                b += 1;
            }
            let va = view(&pool[a], &mut streams.augment)?;
            let vb = view(&pool[b], &mut streams.augment)?;
            let z = bundle.backbone_forward(
                &bundle.input(batch.data.view())?,
                &mut Mode::train(&mut streams.backbone_dropout),
            )?;
            let ce = cross_entropy(&bundle.classify(&z)?, &batch.labels)?;
            let za = project(&va.data, &mut streams.encoder_dropout)?;
            let zb = project(&vb.data, &mut streams.encoder_dropout)?;
            let pair = if config.method == Method::SimCLR2View {
                simclr_loss(&za, &zb, &config.loss)?
            } else {
                infonce_loss(&za, &zb, &config.loss)?
            };
            let total = (&ce + (&pair * config.loss.lambda)?)?;
            Ok(StepLoss {
                total_value: scalar(&total)?,
                total,
                ce: scalar(&ce)?,
                cvc: scalar(&pair)?,
                cmc: 0.0,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Streams test trials in arrival order through the online alignment state
/// (when given), then predicts argmax F(E(x)) in evaluation mode.
pub fn evaluate(
    bundle: &ModelBundle,
    test: &EpochSet,
    ea: Option<(&mut AlignmentState, OnlineOrder)>,
) -> Result<Evaluation> {
    let data = match ea {
        Some((state, order)) => {
            let mut aligned = Array3::zeros(test.data().dim());
            for (i, trial) in test.data().outer_iter().enumerate() {
                aligned
                    .index_axis_mut(Axis(0), i)
                    .assign(&state.stream(trial, order)?);
            }
            aligned
        }
        None => test.data().clone(),
    };
    let predictions = bundle.predict(data.view(), EVAL_CHUNK)?;
    Ok(Evaluation {
        accuracy: accuracy(&predictions, test.labels()),
        predictions,
    })
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of repeat `repeat` (base seed + repeat) for one held-out subject.
pub fn fold_seed(base_seed: u64, repeat: usize, subject: SubjectId) -> u64 {
    mix(mix(base_seed.wrapping_add(repeat as u64)) ^ u64::from(subject))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub subject: SubjectId,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub curve: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    /// Mean over subjects within each repeat, then over repeats.
    pub mean: f64,
    /// Population standard deviation of the per-repeat means.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub backbone: BackboneKind,
    pub method: Method,
    pub cells: Vec<CellResult>,
}

impl RunResult {
    pub fn aggregate(&self) -> Aggregate {
        aggregate(self.cells.iter().map(|c| (c.repeat, c.accuracy)))
    }
}

/// Aggregates `(repeat, accuracy)` cells as in [`Aggregate`].
pub fn aggregate(cells: impl IntoIterator<Item = (usize, f64)>) -> Aggregate {
    let mut per_repeat: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (r, acc) in cells {
        let e = per_repeat.entry(r).or_insert((0.0, 0));
        e.0 += acc;
        e.1 += 1;
    }
    let means: Vec<f64> = per_repeat.values().map(|(s, n)| s / *n as f64).collect();
    if means.is_empty() {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let k = means.len() as f64;
    let mean = means.iter().sum::<f64>() / k;
    let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / k).sqrt();
    Aggregate { mean, std }
}

/// Splits out `target`, aligns the training subjects and returns
/// `(aligned training set, raw test set)`.
pub fn prepare_fold(
    dataset: &EpochSet,
    target: SubjectId,
    ea: &EaConfig,
) -> Result<(EpochSet, EpochSet)> {
    let (train_set, test_set) = loso_split(dataset, target)?;
    assert!(
        !train_set.subject_ids().contains(&target),
        "held-out subject {target} leaked into the training set"
    );
    let train_set = if ea.enabled {
        align_training_set(&train_set, ea.pooled_training)?
    } else {
        train_set
    };
    Ok((train_set, test_set))
}

/// Trains and evaluates one (held-out subject, repeat) cell.
pub fn run_fold(
    dataset: &EpochSet,
    target: SubjectId,
    repeat: usize,
    backbone: BackboneKind,
    config: &TrainConfig,
) -> Result<CellResult> {
    run_fold_with(dataset, target, repeat, backbone, config, &|_, _| Ok(()))
}

/// Called with every finished cell and its trained model.
pub type ModelHook<'a> = dyn Fn(&CellResult, &ModelBundle) -> Result<()> + Sync + 'a;

/// [`run_fold`] that hands the trained model to `on_model` after evaluation.
pub fn run_fold_with(
    dataset: &EpochSet,
    target: SubjectId,
    repeat: usize,
    backbone: BackboneKind,
    config: &TrainConfig,
    on_model: &ModelHook<'_>,
) -> Result<CellResult> {
    let seed = fold_seed(config.seed, repeat, target);
    let inner = || -> Result<CellResult> {
        let (train_set, test_set) = prepare_fold(dataset, target, &config.ea)?;
        let trained = train(&train_set, backbone, config, seed)?;
        let mut state = AlignmentState::empty(dataset.manifest().n_channels);
        let ea = config
            .ea
            .enabled
            .then_some((&mut state, config.ea.online_order));
        let eval = evaluate(&trained.bundle, &test_set, ea)?;
        let cell = CellResult {
            subject: target,
            repeat,
            seed,
            accuracy: eval.accuracy,
            curve: trained.curve,
        };
        on_model(&cell, &trained.bundle)?;
        Ok(cell)
    };
    inner().map_err(|e| TrainError::Fold {
        subject: target,
        repeat,
        source: Box::new(e),
    })
}

/// Leave-one-subject-out over every present subject and `config.repeats`
/// repeats, with up to `workers` cells in parallel. Cells are returned in
/// (repeat, subject) order regardless of scheduling.
pub fn run_loso(
    dataset: &EpochSet,
    backbone: BackboneKind,
    config: &TrainConfig,
    workers: usize,
) -> Result<RunResult> {
    run_loso_with(dataset, backbone, config, workers, &|_, _| Ok(()))
}

/// [`run_loso`] with a hook receiving every trained fold model.
pub fn run_loso_with(
    dataset: &EpochSet,
    backbone: BackboneKind,
    config: &TrainConfig,
    workers: usize,
    on_model: &ModelHook<'_>,
) -> Result<RunResult> {
    config.validate()?;
    let subjects = dataset.present_subjects();
    if subjects.len() < 2 {
        return Err(TrainError::Usage(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let jobs: Vec<(usize, SubjectId)> = (0..config.repeats)
        .flat_map(|r| subjects.iter().map(move |&s| (r, s)))
        .collect();
    let cells = run_cells(&jobs, workers, |&(r, s)| {
        run_fold_with(dataset, s, r, backbone, config, on_model)
    })?;
    Ok(RunResult {
        dataset: dataset.manifest().name.clone(),
        backbone,
        method: config.method,
        cells,
    })
}

/// Runs `f` over `jobs` on a pool of `workers` threads (inline for 1),
/// returning results in job order or the first error in job order.
pub fn run_cells<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if workers <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}
