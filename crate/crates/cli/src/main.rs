use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvcnet::synthetic::SyntheticConfig;
use mvcnet_cli::{
    cmd_ablation, cmd_features, cmd_grid, cmd_run, cmd_sensitivity, cmd_synth, output,
    render_report, CliError, Experiment, Globals,
};

#[derive(Parser)]
#[command(
    name = "mvcnet",
    version,
    about = "Multi-view contrastive EEG experiments"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Accepted for compatibility; results are always bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-subject-out for every backbone and method of the config.
    Run {
        /// Save every fold's trained model under `checkpoints/`.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Two-view training for every pair of augmentation kinds.
    Grid,
    /// MVCNet with the contrastive terms switched on and off.
    Ablation,
    /// MVCNet accuracy against the two contrastive weights.
    Sensitivity,
    /// Dump backbone and per-view projected features from a checkpoint.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a markdown table from the cell CSVs in a results directory.
    Report { results_dir: PathBuf },
    /// Write the synthetic two-class dataset as an archive to `--out`.
    Synth {
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 256)]
        timepoints: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let globals = Globals {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Run { checkpoints } => {
            let exp = Experiment::open(&globals)?;
            let summary = cmd_run(&exp, checkpoints)?;
            for run in &summary.runs {
                let a = run.aggregate();
                println!(
                    "{} {} {}: {}±{}",
                    run.dataset,
                    run.backbone.name(),
                    run.method,
                    output::round2(a.mean * 100.0),
                    output::round2(a.std * 100.0)
                );
            }
        }
        Command::Grid => {
            let exp = Experiment::open(&globals)?;
            for g in cmd_grid(&exp)? {
                println!("{}: {} runs", g.backbone.name(), g.runs);
            }
        }
        Command::Ablation => {
            let exp = Experiment::open(&globals)?;
            for a in cmd_ablation(&exp)? {
                println!(
                    "{} {}: {}±{}",
                    a.backbone.name(),
                    a.arm,
                    output::round2(a.mean),
                    output::round2(a.std)
                );
            }
        }
        Command::Sensitivity => {
            let exp = Experiment::open(&globals)?;
            for p in cmd_sensitivity(&exp)? {
                println!(
                    "{} {}={}: {}±{}",
                    p.backbone.name(),
                    p.parameter,
                    p.value,
                    output::round2(p.mean),
                    output::round2(p.std)
                );
            }
        }
        Command::Features { checkpoint } => {
            let exp = Experiment::open(&globals)?;
            let s = cmd_features(&exp, &checkpoint)?;
            println!(
                "{} rows of {} features in {}",
                s.rows,
                s.feature_dim,
                s.path.display()
            );
        }
        Command::Report { results_dir } => {
            let md = render_report(&results_dir)?;
            match &globals.out {
                Some(dir) => output::write_atomic(&dir.join("report.md"), md.as_bytes())?,
                None => print!("{md}"),
            }
        }
        Command::Synth {
            subjects,
            trials,
            timepoints,
            noise,
        } => {
            let out = globals
                .out
                .ok_or_else(|| CliError::Usage("synth needs --out <dir>".into()))?;
            let config = SyntheticConfig {
                n_subjects: subjects,
                trials_per_subject: trials,
                n_timepoints: timepoints,
                noise_std: noise,
                seed: globals.seed.unwrap_or(0),
                ..SyntheticConfig::default()
            };
            let n = cmd_synth(&config, &out)?;
            println!("{n} trials written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
