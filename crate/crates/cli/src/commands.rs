//! Experiment commands. Each writes its CSV files into the output directory
//! and returns a summary for the caller to print.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvcnet::augment::{apply_view, AugmentationKind, AugmentedBatch};
use mvcnet::dataio::{align_training_set, load_archive, save_archive, EpochSet};
use mvcnet::models::{load_checkpoint, save_checkpoint, BackboneKind, ModelBundle, ModelError};
use mvcnet::synthetic::{generate, SyntheticConfig};
use mvcnet::trainer::{run_loso_with, CellResult, Method, RunResult, TrainConfig, TrainError};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{load_config, ExperimentConfig, LoadedConfig};
use crate::output::{num, write_atomic, Provenance, Table, CELL_HEADER};
use crate::{plot, CliError};

/// Rows of `features` are computed per subject in chunks of this size.
const FEATURE_CHUNK: usize = 64;

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    /// Accepted for interface compatibility: every run is seeded and
    /// bit-reproducible regardless of worker count.
    pub deterministic: bool,
}

/// A loaded config, its dataset and the resolved output directory.
pub struct Experiment {
    pub loaded: LoadedConfig,
    pub dataset: EpochSet,
    pub out_dir: PathBuf,
    pub provenance: Provenance,
    workers: usize,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config_sha256: &'a str,
    config: &'a ExperimentConfig,
}

impl Experiment {
    pub fn open(globals: &Globals) -> Result<Self, CliError> {
        let path = globals
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config <path>".into()))?;
        let loaded = load_config(path, globals.seed)?;
        let out_dir = globals
            .out
            .clone()
            .or_else(|| loaded.output_dir())
            .ok_or_else(|| {
                CliError::Usage("no output directory: pass --out or set output_dir".into())
            })?;
        let dataset =
            load_archive(&loaded.dataset_dir).map_err(|e| CliError::Usage(e.to_string()))?;
        let provenance = Provenance {
            config_sha256: loaded.config.hash(),
            seed: loaded.config.train.seed,
        };
        Ok(Self {
            loaded,
            dataset,
            out_dir,
            provenance,
            workers: globals.workers.max(1),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn dataset_name(&self) -> &str {
        &self.dataset.manifest().name
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Effective config with every default filled in, beside the results.
    fn write_config_echo(&self) -> Result<(), CliError> {
        let echo = ConfigEcho {
            config_sha256: &self.provenance.config_sha256,
            config: self.config(),
        };
        let mut text = serde_json::to_string_pretty(&echo).expect("config serializes");
        text.push('\n');
        write_atomic(&self.path("config.json"), text.as_bytes())
    }

    fn write(&self, name: &str, table: &Table) -> Result<(), CliError> {
        table.write(&self.path(name), &self.provenance)
    }

    fn run_loso(
        &self,
        backbone: BackboneKind,
        config: &TrainConfig,
        on_model: Option<&(dyn Fn(&CellResult, &ModelBundle) -> Result<(), TrainError> + Sync)>,
    ) -> Result<RunResult, CliError> {
        let run = match on_model {
            Some(hook) => run_loso_with(&self.dataset, backbone, config, self.workers, hook),
            None => run_loso_with(
                &self.dataset,
                backbone,
                config,
                self.workers,
                &|_, _| Ok(()),
            ),
        }
        .map_err(|e| CliError::Run(e.to_string()))?;
        let agg = run.aggregate();
        log::info!(
            "{} {} {}: {:.2} ± {:.2} %",
            run.dataset,
            backbone.name(),
            config.method,
            agg.mean * 100.0,
            agg.std * 100.0
        );
        Ok(run)
    }

    fn push_cells(&self, table: &mut Table, run: &RunResult, label: &str) {
        for c in &run.cells {
            table.push(vec![
                self.dataset_name().to_string(),
                run.backbone.name().to_string(),
                label.to_string(),
                c.subject.to_string(),
                c.repeat.to_string(),
                num(c.accuracy),
            ]);
        }
    }
}

/// Mean and population std of a run, in percent.
fn percent(run: &RunResult) -> (f64, f64) {
    let a = run.aggregate();
    (a.mean * 100.0, a.std * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub runs: Vec<RunResult>,
}

/// Leave-one-subject-out for every (backbone, method) of the config:
/// `cells.csv`, `aggregate.csv`, `curves.csv` and optionally one checkpoint
/// per fold under `checkpoints/`.
pub fn cmd_run(exp: &Experiment, checkpoints: bool) -> Result<RunSummary, CliError> {
    exp.write_config_echo()?;
    let ckpt_dir = exp.path("checkpoints");
    let mut cells = Table::new(&CELL_HEADER);
    let mut aggregate = Table::new(&[
        "dataset", "backbone", "method", "mean", "std", "subjects", "repeats",
    ]);
    let mut curves = Table::new(&[
        "dataset", "backbone", "method", "subject", "repeat", "epoch", "ce", "cvc", "cmc", "total",
    ]);
    let mut runs = Vec::new();
    for &backbone in &exp.config().backbone_kind {
        for &method in &exp.config().methods {
            let config = exp.loaded.config.train_config(method);
            let save = |cell: &CellResult, bundle: &ModelBundle| -> Result<(), TrainError> {
                let name = format!(
                    "{}_{}_s{}_r{}.json",
                    backbone.name(),
                    method,
                    cell.subject,
                    cell.repeat
                );
                save_atomic(bundle, &ckpt_dir.join(name)).map_err(TrainError::from)
            };
            let hook: Option<
                &(dyn Fn(&CellResult, &ModelBundle) -> Result<(), TrainError> + Sync),
            > = if checkpoints { Some(&save) } else { None };
            let run = exp.run_loso(backbone, &config, hook)?;
            exp.push_cells(&mut cells, &run, &method.to_string());
            let (mean, std) = percent(&run);
            aggregate.push(vec![
                run.dataset.clone(),
                backbone.name().into(),
                method.to_string(),
                num(mean),
                num(std),
                exp.dataset.present_subjects().len().to_string(),
                config.repeats.to_string(),
            ]);
            for c in &run.cells {
                for e in &c.curve {
                    curves.push(vec![
                        run.dataset.clone(),
                        backbone.name().into(),
                        method.to_string(),
                        c.subject.to_string(),
                        c.repeat.to_string(),
                        e.epoch.to_string(),
                        num(e.ce),
                        num(e.cvc),
                        num(e.cmc),
                        num(e.total),
                    ]);
                }
            }
            runs.push(run);
        }
    }
    exp.write("cells.csv", &cells)?;
    exp.write("aggregate.csv", &aggregate)?;
    exp.write("curves.csv", &curves)?;
    Ok(RunSummary { runs })
}

fn save_atomic(bundle: &ModelBundle, path: &Path) -> Result<(), ModelError> {
    let err = |e: std::io::Error| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let dir = path.parent().expect("checkpoint paths have a directory");
    std::fs::create_dir_all(dir).map_err(err)?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    save_checkpoint(bundle, tmp.path())?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

/// 7 × 7 two-view accuracies (percent) for one backbone, indexed by
/// [`AugmentationKind::ALL`]; `(a, b)` and `(b, a)` share one run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub backbone: BackboneKind,
    pub matrix: [[f64; 7]; 7],
    pub runs: usize,
}

/// Two-view SimCLR over every unordered pair of augmentation kinds plus
/// the diagonal, where the pool holds the same kind twice.
pub fn cmd_grid(exp: &Experiment) -> Result<Vec<GridResult>, CliError> {
    exp.write_config_echo()?;
    let kinds = AugmentationKind::ALL;
    let mut cells = Table::new(&CELL_HEADER);
    let mut runs_table = Table::new(&["dataset", "backbone", "view_a", "view_b", "mean", "std"]);
    let mut results = Vec::new();
    for &backbone in &exp.config().backbone_kind {
        let mut matrix = [[f64::NAN; 7]; 7];
        let mut runs = 0;
        for i in 0..kinds.len() {
            for j in i..kinds.len() {
                let mut config = exp.loaded.config.train_config(Method::SimCLR2View);
                config.augmentation_pool =
                    vec![config.spec_for(kinds[i]), config.spec_for(kinds[j])];
                let run = exp.run_loso(backbone, &config, None)?;
                let label = format!("SimCLR[{}+{}]", kinds[i].name(), kinds[j].name());
                exp.push_cells(&mut cells, &run, &label);
                let (mean, std) = percent(&run);
                runs_table.push(vec![
                    run.dataset.clone(),
                    backbone.name().into(),
                    kinds[i].name().into(),
                    kinds[j].name().into(),
                    num(mean),
                    num(std),
                ]);
                matrix[i][j] = mean;
                matrix[j][i] = mean;
                runs += 1;
            }
        }
        let mut grid = Table::new(
            &std::iter::once("kind")
                .chain(kinds.iter().map(|k| k.name()))
                .collect::<Vec<_>>(),
        );
        for (i, k) in kinds.iter().enumerate() {
            grid.push(
                std::iter::once(k.name().to_string())
                    .chain(matrix[i].iter().map(|&v| num(v)))
                    .collect(),
            );
        }
        exp.write(&format!("grid_{}.csv", backbone.name()), &grid)?;
        if exp.config().plot {
            let svg = plot::heatmap_svg(
                &format!(
                    "{} {} two-view accuracy (%)",
                    exp.dataset_name(),
                    backbone.name()
                ),
                &kinds.map(|k| k.name()),
                &matrix,
            );
            write_atomic(
                &exp.path(&format!("grid_{}.svg", backbone.name())),
                svg.as_bytes(),
            )?;
        }
        results.push(GridResult {
            backbone,
            matrix,
            runs,
        });
    }
    exp.write("grid_runs.csv", &runs_table)?;
    exp.write("grid_cells.csv", &cells)?;
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub backbone: BackboneKind,
    pub arm: &'static str,
    pub lambda: f64,
    pub gamma: f64,
    pub mean: f64,
    pub std: f64,
}

pub const ABLATION_ARMS: [&str; 4] = ["CE only", "+CVC", "+CMC", "+both"];

/// MVCNet with each combination of the two contrastive terms switched on;
/// switched-on terms keep the configured weights. "CE only" keeps MVCNet's
/// batch size, so it matches Baseline only when the batch sizes agree.
pub fn cmd_ablation(exp: &Experiment) -> Result<Vec<ArmResult>, CliError> {
    exp.write_config_echo()?;
    let base = exp.loaded.config.train_config(Method::MVCNet);
    let (l, g) = (base.loss.lambda, base.loss.gamma);
    let weights = [(0.0, 0.0), (l, 0.0), (0.0, g), (l, g)];
    let mut cells = Table::new(&CELL_HEADER);
    let mut table = Table::new(&[
        "dataset", "backbone", "arm", "lambda", "gamma", "mean", "std",
    ]);
    let mut out = Vec::new();
    for &backbone in &exp.config().backbone_kind {
        for (arm, (lambda, gamma)) in ABLATION_ARMS.into_iter().zip(weights) {
            let mut config = base.clone();
            config.loss.lambda = lambda;
            config.loss.gamma = gamma;
            let run = exp.run_loso(backbone, &config, None)?;
            exp.push_cells(&mut cells, &run, arm);
            let (mean, std) = percent(&run);
            table.push(vec![
                run.dataset.clone(),
                backbone.name().into(),
                arm.into(),
                num(lambda),
                num(gamma),
                num(mean),
                num(std),
            ]);
            out.push(ArmResult {
                backbone,
                arm,
                lambda,
                gamma,
                mean,
                std,
            });
        }
    }
    exp.write("ablation.csv", &table)?;
    exp.write("ablation_cells.csv", &cells)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub backbone: BackboneKind,
    pub parameter: &'static str,
    pub value: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mean: f64,
    pub std: f64,
}

/// MVCNet accuracy against λ (γ at its configured value) and against γ
/// (λ at its configured value). Points with identical weights share a run.
pub fn cmd_sensitivity(exp: &Experiment) -> Result<Vec<SweepPoint>, CliError> {
    exp.write_config_echo()?;
    let base = exp.loaded.config.train_config(Method::MVCNet);
    let grid = &exp.config().sensitivity;
    let points: Vec<(&'static str, f64, f64, f64)> = grid
        .lambda
        .iter()
        .map(|&v| ("lambda", v, v, base.loss.gamma))
        .chain(
            grid.gamma
                .iter()
                .map(|&v| ("gamma", v, base.loss.lambda, v)),
        )
        .collect();
    let mut cells = Table::new(&CELL_HEADER);
    let mut table = Table::new(&[
        "dataset",
        "backbone",
        "parameter",
        "value",
        "lambda",
        "gamma",
        "mean",
        "std",
    ]);
    let mut out = Vec::new();
    for &backbone in &exp.config().backbone_kind {
        let mut done: BTreeMap<(u64, u64), (f64, f64)> = BTreeMap::new();
        for &(parameter, value, lambda, gamma) in &points {
            let key = (lambda.to_bits(), gamma.to_bits());
            let (mean, std) = match done.get(&key) {
                Some(&r) => r,
                None => {
                    let mut config = base.clone();
                    config.loss.lambda = lambda;
                    config.loss.gamma = gamma;
                    let run = exp.run_loso(backbone, &config, None)?;
                    let label = format!("MVCNet[lambda={},gamma={}]", num(lambda), num(gamma));
                    exp.push_cells(&mut cells, &run, &label);
                    let r = percent(&run);
                    done.insert(key, r);
                    r
                }
            };
            table.push(vec![
                exp.dataset_name().to_string(),
                backbone.name().into(),
                parameter.into(),
                num(value),
                num(lambda),
                num(gamma),
                num(mean),
                num(std),
            ]);
            out.push(SweepPoint {
                backbone,
                parameter,
                value,
                lambda,
                gamma,
                mean,
                std,
            });
        }
    }
    exp.write("sensitivity.csv", &table)?;
    exp.write("sensitivity_cells.csv", &cells)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSummary {
    pub rows: usize,
    pub feature_dim: usize,
    pub path: PathBuf,
}

/// Backbone features of every (aligned) trial plus the projected features
/// of its three configured views, one row each: `subject, label, view_tag,
/// f_1..f_d` with `view_tag` in {none, T, S, F}.
pub fn cmd_features(exp: &Experiment, checkpoint: &Path) -> Result<FeatureSummary, CliError> {
    let bundle = load_checkpoint(checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let mc = bundle.config();
    let manifest = exp.dataset.manifest();
    let mismatch = |what: &str, ckpt: String, data: String| {
        CliError::Usage(format!(
            "checkpoint {} was trained with {what} {ckpt}, but the config gives {data}",
            checkpoint.display()
        ))
    };
    if mc.n_channels != manifest.n_channels {
        return Err(mismatch(
            "channels",
            mc.n_channels.to_string(),
            manifest.n_channels.to_string(),
        ));
    }
    if mc.n_timepoints != manifest.n_timepoints {
        return Err(mismatch(
            "time samples",
            mc.n_timepoints.to_string(),
            manifest.n_timepoints.to_string(),
        ));
    }
    if mc.n_classes != exp.dataset.n_classes() {
        return Err(mismatch(
            "classes",
            mc.n_classes.to_string(),
            exp.dataset.n_classes().to_string(),
        ));
    }
    if !exp.config().backbone_kind.contains(&mc.backbone_kind) {
        let names: Vec<&str> = exp
            .config()
            .backbone_kind
            .iter()
            .map(|b| b.name())
            .collect();
        return Err(mismatch(
            "backbone",
            mc.backbone_kind.name().into(),
            names.join(", "),
        ));
    }
    exp.write_config_echo()?;

    let ea = exp.config().ea;
    let data = if ea.enabled {
        align_training_set(&exp.dataset, ea.pooled_training)
            .map_err(|e| CliError::Run(e.to_string()))?
    } else {
        exp.dataset.clone()
    };
    let d = bundle.feature_dim();
    let header: Vec<String> = ["subject", "label", "view_tag"]
        .into_iter()
        .map(String::from)
        .chain((1..=d).map(|i| format!("f_{i}")))
        .collect();
    let mut table = Table::new(&header);
    let mut rng = ChaCha8Rng::seed_from_u64(exp.config().train.seed);
    let run_err = |e: &dyn std::fmt::Display| CliError::Run(e.to_string());
    for subject in data.present_subjects() {
        let idx = data.indices_of_subject(subject);
        for chunk in idx.chunks(FEATURE_CHUNK) {
            let part = data.select(chunk);
            let batch = AugmentedBatch::new(part.data().clone(), part.labels().to_vec());
            let base = bundle
                .features(part.data().view(), FEATURE_CHUNK)
                .map_err(|e| run_err(&e))?;
            let mut views = Vec::new();
            for spec in &exp.config().train.views {
                let v = apply_view(&batch, spec, manifest, &mut rng).map_err(|e| run_err(&e))?;
                let z = bundle.projections(v.data.view()).map_err(|e| run_err(&e))?;
                views.push((v.view_tag, v.labels, z));
            }
            for (i, &label) in part.labels().iter().enumerate() {
                let row = |tag: String, label: usize, f: ndarray::ArrayView1<f64>| -> Vec<String> {
                    [subject.to_string(), label.to_string(), tag]
                        .into_iter()
                        .chain(f.iter().map(|&x| num(x)))
                        .collect()
                };
                table.push(row("none".into(), label, base.row(i)));
                for (tag, labels, z) in &views {
                    table.push(row(tag.to_string(), labels[i], z.row(i)));
                }
            }
        }
    }
    let path = exp.path("features.csv");
    exp.write("features.csv", &table)?;
    Ok(FeatureSummary {
        rows: table.len(),
        feature_dim: d,
        path,
    })
}

/// Writes the constructed synthetic dataset as an archive.
pub fn cmd_synth(config: &SyntheticConfig, out: &Path) -> Result<usize, CliError> {
    let set = generate(config).map_err(|e| CliError::Usage(e.to_string()))?;
    save_archive(&set, out).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(set.len())
}
