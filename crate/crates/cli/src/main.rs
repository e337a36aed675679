use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajcast_cli::config::RunConfig;
use trajcast_cli::{cmd_bench, cmd_eval, cmd_gen, cmd_predict, cmd_train, CliError, CliResult, EXIT_USAGE};

/// Map-free multi-agent trajectory forecasting.
///
/// Settings resolve as defaults, then `--config`, then `--set`, then the
/// dedicated flags. Each command writes the resolved settings to a
/// `resolved-config` file, which can be passed back as `--config`.
#[derive(Parser)]
#[command(name = "trajcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra key=value setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; 1 gives bit-identical reruns.
    #[arg(long, env = "TRAJCAST_THREADS")]
    threads: Option<usize>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as JSON Lines.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Agents per scene, `N` or `LO..HI`.
        #[arg(long)]
        agents: Option<String>,
        /// Position noise standard deviation, meters.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Output scene file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, `train_log.csv` and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training scene file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation scene file.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write global-frame forecasts as JSON Lines.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory, or a training output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output prediction file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against labeled scenes; prints metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Prediction file.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Labeled scene file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// `per-agent` or `paper-literal`.
        #[arg(long)]
        metric_mode: Option<String>,
        /// Also write the metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time joint and factorized attention over an S x T grid.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint for the full-model kernel; a fresh model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sizes used for both S and T.
        #[arg(long)]
        grid: Option<String>,
        /// Output directory for CSV, SVG plots and fits.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_pairs(&common.set)?;
    let shared = [
        ("threads", common.threads.map(|t| t.to_string())),
        ("seed", common.seed.map(|s| s.to_string())),
    ];
    for (key, value) in shared.iter().chain(flags) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen {
            common,
            scenes,
            agents,
            noise_std,
            out,
        } => cmd_gen(&resolve(
            &common,
            &[
                ("scenes", scenes.map(|s| s.to_string())),
                ("agents", agents),
                ("noise_std", noise_std.map(|n| n.to_string())),
                ("out", path(&out)),
            ],
        )?),
        Command::Train {
            common,
            data,
            val,
            out,
            epochs,
            max_steps,
        } => cmd_train(&resolve(
            &common,
            &[
                ("data", path(&data)),
                ("val", path(&val)),
                ("out", path(&out)),
                ("epochs", epochs.map(|e| e.to_string())),
                ("max_steps", max_steps.map(|m| m.to_string())),
            ],
        )?),
        Command::Predict {
            common,
            checkpoint,
            data,
            out,
        } => cmd_predict(&resolve(
            &common,
            &[("checkpoint", path(&checkpoint)), ("data", path(&data)), ("out", path(&out))],
        )?),
        Command::Eval {
            common,
            pred,
            truth,
            metric_mode,
            out,
        } => cmd_eval(&resolve(
            &common,
            &[
                ("pred", path(&pred)),
                ("truth", path(&truth)),
                ("metric_mode", metric_mode),
                ("out", path(&out)),
            ],
        )?)
        .map(|_| ()),
        Command::Bench {
            common,
            checkpoint,
            grid,
            out,
        } => cmd_bench(&resolve(
            &common,
            &[("checkpoint", path(&checkpoint)), ("grid", grid), ("out", path(&out))],
        )?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
