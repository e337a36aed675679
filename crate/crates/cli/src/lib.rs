//! Command implementations behind the `trajcast` binary.

pub mod config;

use std::path::{Path, PathBuf};

use trajcast::eval::bench::{run_bench, BenchConfig, Kernel};
use trajcast::eval::{predict_scene, score_files, write_prediction_file, MetricReport};
use trajcast::model::{Model, CONFIG_FILE};
use trajcast::numcore::Real;
use trajcast::scene::{generate_synthetic, normalize, parse_scene_file, write_scene_file, SyntheticConfig};
use trajcast::training::{train, BEST_DIR, LAST_DIR};

use config::{Precision, RunConfig, RESOLVED_CONFIG};

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit status when training stopped on a non-finite value.
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] trajcast::Error),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) | CliError::Core(trajcast::Error::NonFinite { .. }) => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required setting {key} (flag --{key})")))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    trajcast::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// `<file>.resolved-config` next to a file output.
fn sibling_config(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(RESOLVED_CONFIG);
    out.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// A checkpoint directory holds `model.config`; a training output directory
/// resolves to its `best` checkpoint, else `last`.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join(CONFIG_FILE).is_file() {
        return path.to_path_buf();
    }
    let best = path.join(BEST_DIR);
    if best.join(CONFIG_FILE).is_file() {
        return best;
    }
    path.join(LAST_DIR)
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let out = require(&cfg.out, "out")?;
    let synth = SyntheticConfig {
        n_scenes: cfg.scenes,
        agents: cfg.agents,
        horizon: cfg.scene_config(),
        noise_std: cfg.noise_std,
        ..Default::default()
    };
    let scenes = generate_synthetic(cfg.train.seed, &synth);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_scene_file(out, &scenes)?;
    write_text(&sibling_config(out), &cfg.to_text())?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let data = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    let horizon = cfg.scene_config();
    let train_set: Vec<_> = parse_scene_file(data, &horizon)?.iter().map(normalize).collect();
    let val_set: Vec<_> = match &cfg.val {
        Some(v) => parse_scene_file(v, &horizon)?.iter().map(normalize).collect(),
        None => Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &train_set, &val_set, out),
        Precision::F64 => train_with::<f64>(cfg, &train_set, &val_set, out),
    }
}

fn train_with<T: Real>(
    cfg: &RunConfig,
    train_set: &[trajcast::scene::NormalizedScene],
    val_set: &[trajcast::scene::NormalizedScene],
    out: &Path,
) -> CliResult<()> {
    let mut model = Model::<T>::init(cfg.train.model, cfg.train.seed)?;
    let outcome = train(&mut model, train_set, val_set, &cfg.train, Some(out), |e| {
        let val = e
            .val
            .as_ref()
            .map(|v| format!(" val minade {:.4} minfde {:.4} mr {:.4}", v.min_ade, v.min_fde, v.miss_rate))
            .unwrap_or_default();
        println!(
            "epoch {} step {} lr {:.3e} loss {:.4} reg {:.4} cls {:.4}{val}",
            e.epoch, e.step, e.lr, e.loss, e.loss_reg, e.loss_cls
        );
    })?;
    if let Some(msg) = outcome.diverged {
        return Err(CliError::Diverged(msg));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let ckpt = resolve_checkpoint(require(&cfg.checkpoint, "checkpoint")?);
    let data = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    match cfg.precision {
        Precision::F32 => predict_with(&Model::<f32>::load(&ckpt)?, cfg, data, out),
        Precision::F64 => predict_with(&Model::<f64>::load(&ckpt)?, cfg, data, out),
    }
}

fn predict_with<T: Real>(model: &Model<T>, cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    let mut horizon = cfg.scene_config();
    horizon.future_steps = model.config.future_steps;
    let scenes = parse_scene_file(data, &horizon)?;
    let mut preds = Vec::new();
    for s in &scenes {
        preds.extend(predict_scene(model, s)?);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_prediction_file(out, &preds)?;
    write_text(&sibling_config(out), &cfg.to_text())?;
    eprintln!("wrote {} agent predictions to {}", preds.len(), out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<MetricReport> {
    cfg.validate()?;
    let pred = require(&cfg.pred, "pred")?;
    let truth = require(&cfg.truth, "truth")?;
    let report = score_files(pred, truth, &cfg.scene_config(), cfg.metric_mode)?;
    let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    print!("{csv}");
    if let Some(out) = &cfg.out {
        write_text(out, &csv)?;
        write_text(&sibling_config(out), &cfg.to_text())?;
    }
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let out = require(&cfg.out, "out")?;
    let model = match &cfg.checkpoint {
        Some(c) => Model::<f32>::load(&resolve_checkpoint(c))?,
        None => Model::<f32>::init(cfg.train.model, cfg.train.seed)?,
    };
    let bench = BenchConfig {
        hidden: model.config.hidden,
        heads: model.config.heads,
        s_list: cfg.grid_s.clone(),
        t_list: cfg.grid_t.clone(),
        warmup: cfg.bench_warmup,
        iterations: cfg.bench_iterations,
        seed: cfg.train.seed,
        ..Default::default()
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let report = run_bench(&bench, Some(&model))?;
    write_text(&out.join("bench.csv"), &report.to_csv())?;
    for &kernel in &bench.kernels {
        for (against_t, axis) in [(false, "S"), (true, "T")] {
            let name = format!("latency_vs_{axis}_{}.svg", kernel.as_str());
            write_text(&out.join(name), &report.to_svg(kernel, against_t))?;
        }
    }
    let mut summary = format!(
        "# single worker thread, {} warmup, {} timed samples per point, median latency\n",
        bench.warmup, bench.iterations
    );
    if let Ok(fit) = report.power_fit(Kernel::Joint) {
        summary += &format!(
            "joint power law: exponent_S {:.3} exponent_T {:.3} r2 {:.4}\n",
            fit.exponent_s, fit.exponent_t, fit.r2
        );
    }
    for kernel in [Kernel::Factorized, Kernel::FactorizedScene] {
        if let Ok(fit) = report.quadratic_fit(kernel) {
            summary += &format!(
                "{} quadratic fit: a {:.4e} b {:.4e} c {:.4e} r2 {:.4}\n",
                kernel.as_str(),
                fit.a,
                fit.b,
                fit.c,
                fit.r2
            );
        }
    }
    let (s_max, t_max) = (
        cfg.grid_s.iter().copied().max().unwrap_or(0),
        cfg.grid_t.iter().copied().max().unwrap_or(0),
    );
    if let (Some(j), Some(f)) = (
        report.median_at(Kernel::Joint, s_max, t_max),
        report.median_at(Kernel::FactorizedScene, s_max, t_max),
    ) {
        summary += &format!("speedup at S={s_max} T={t_max}: {:.2}x\n", j / f);
    }
    print!("{summary}");
    write_text(&out.join("fits.txt"), &summary)
}
