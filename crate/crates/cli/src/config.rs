//! Plain-text `key = value` run configuration.
//!
//! One file format serves every command. Values are resolved in the order
//! defaults, `--config` file, `--set` pairs, dedicated flags; the result is
//! echoed as a `resolved-config` file that reproduces the run on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use trajcast::eval::MetricMode;
use trajcast::model::ModelConfig;
use trajcast::scene::SceneConfig;
use trajcast::training::{Supervision, TrainConfig};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved-config";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dt: f64,
    pub history_steps: usize,
    pub precision: Precision,
    pub metric_mode: MetricMode,

    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,

    pub scenes: usize,
    pub agents: (usize, usize),
    pub noise_std: f64,

    pub grid_s: Vec<usize>,
    pub grid_t: Vec<usize>,
    pub bench_warmup: usize,
    pub bench_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        RunConfig {
            train: TrainConfig::default(),
            dt: scene.dt,
            history_steps: scene.history_steps,
            precision: Precision::F32,
            metric_mode: MetricMode::PerAgent,
            data: None,
            val: None,
            out: None,
            checkpoint: None,
            pred: None,
            truth: None,
            scenes: 100,
            agents: (1, 8),
            noise_std: 0.05,
            grid_s: vec![8, 16, 32, 64],
            grid_t: vec![8, 16, 32, 64],
            bench_warmup: 5,
            bench_iterations: 30,
        }
    }
}

/// Keys besides the model keys, in the order they are written.
const RUN_KEYS: [&str; 30] = [
    "batch_size",
    "lr",
    "lr_min",
    "weight_decay",
    "epochs",
    "max_steps",
    "seed",
    "soft_target_temperature",
    "grad_clip",
    "supervision",
    "threads",
    "checkpoint_every",
    "mirror_augment",
    "dt",
    "history_steps",
    "precision",
    "metric_mode",
    "data",
    "val",
    "out",
    "checkpoint",
    "pred",
    "truth",
    "scenes",
    "agents",
    "noise_std",
    "grid",
    "grid_t",
    "bench_warmup",
    "bench_iterations",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value for {key}: {value:?}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// `"2..8"` or a single count.
pub fn parse_range(key: &str, value: &str) -> Result<(usize, usize), CliError> {
    let (lo, hi) = match value.split_once("..") {
        Some((lo, hi)) => (parse(key, lo.trim())?, parse(key, hi.trim().trim_start_matches('='))?),
        None => {
            let n = parse(key, value)?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(CliError::Usage(format!("invalid range for {key}: {value:?}")));
    }
    Ok((lo, hi))
}

impl RunConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            dt: self.dt,
            history_steps: self.history_steps,
            future_steps: self.train.model.future_steps,
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        if self.train.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "max_steps" => {
                t.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => t.seed = parse(key, value)?,
            "soft_target_temperature" => t.soft_target_temperature = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "supervision" => {
                t.supervision = match value {
                    "all-labeled" => Supervision::AllLabeled,
                    "target-only" => Supervision::TargetOnly,
                    _ => return Err(CliError::Usage(format!("invalid value for supervision: {value:?}"))),
                }
            }
            "threads" => t.threads = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "mirror_augment" => t.mirror_augment = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "history_steps" => self.history_steps = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(CliError::Usage(format!("invalid value for precision: {value:?}"))),
                }
            }
            "metric_mode" => {
                self.metric_mode = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("invalid value for metric_mode: {value:?}")))?
            }
            "data" => self.data = opt_path(value),
            "val" => self.val = opt_path(value),
            "out" => self.out = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "pred" => self.pred = opt_path(value),
            "truth" => self.truth = opt_path(value),
            "scenes" => self.scenes = parse(key, value)?,
            "agents" => self.agents = parse_range(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "grid" => {
                self.grid_s = list(key, value)?;
                self.grid_t = self.grid_s.clone();
            }
            "grid_s" => self.grid_s = list(key, value)?,
            "grid_t" => self.grid_t = list(key, value)?,
            "bench_warmup" => self.bench_warmup = parse(key, value)?,
            "bench_iterations" => self.bench_iterations = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key = value", origin.display(), i + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                CliError::Usage(msg) => CliError::Usage(format!("{}:{}: {msg}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| trajcast::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text, path)
    }

    /// `key=value` pairs from `--set`.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::from("# resolved trajcast configuration\n");
        s.push_str(&t.model.to_kv());
        for key in RUN_KEYS {
            let v = match key {
                "batch_size" => t.batch_size.to_string(),
                "lr" => format!("{:e}", t.lr),
                "lr_min" => format!("{:e}", t.lr_min),
                "weight_decay" => format!("{:e}", t.weight_decay),
                "epochs" => t.epochs.to_string(),
                "max_steps" => t.max_steps.map(|m| m.to_string()).unwrap_or_else(|| "none".into()),
                "seed" => t.seed.to_string(),
                "soft_target_temperature" => t.soft_target_temperature.to_string(),
                "grad_clip" => t.grad_clip.to_string(),
                "supervision" => match t.supervision {
                    Supervision::AllLabeled => "all-labeled".into(),
                    Supervision::TargetOnly => "target-only".into(),
                },
                "threads" => t.threads.to_string(),
                "checkpoint_every" => t.checkpoint_every.to_string(),
                "mirror_augment" => t.mirror_augment.to_string(),
                "dt" => self.dt.to_string(),
                "history_steps" => self.history_steps.to_string(),
                "precision" => self.precision.as_str().into(),
                "metric_mode" => self.metric_mode.as_str().into(),
                "data" => path(&self.data),
                "val" => path(&self.val),
                "out" => path(&self.out),
                "checkpoint" => path(&self.checkpoint),
                "pred" => path(&self.pred),
                "truth" => path(&self.truth),
                "scenes" => self.scenes.to_string(),
                "agents" => format!("{}..{}", self.agents.0, self.agents.1),
                "noise_std" => self.noise_std.to_string(),
                "grid" => join(&self.grid_s),
                "grid_t" => join(&self.grid_t),
                "bench_warmup" => self.bench_warmup.to_string(),
                "bench_iterations" => self.bench_iterations.to_string(),
                _ => unreachable!("every run key is listed"),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if !(self.dt > 0.0) || self.history_steps < 2 {
            return Err(CliError::Usage("dt must be positive and history_steps at least 2".into()));
        }
        if self.train.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&["lr=1e-3".into(), "agents=2..5".into(), "data=x.jsonl".into(), "grid=4,8".into()])
            .unwrap();
        cfg.train.max_steps = Some(7);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("hiden = 3\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("hiden") && err.to_string().contains("c.cfg:1"));
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("agents", "2..8").unwrap(), (2, 8));
        assert_eq!(parse_range("agents", "3").unwrap(), (3, 3));
        assert!(parse_range("agents", "8..2").is_err());
    }
}
