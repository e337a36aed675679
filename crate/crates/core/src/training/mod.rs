//! Losses and the minibatch optimization loop.

mod losses;

pub use losses::{
    best_mode, classification_loss, laplace_nll, scene_loss, soft_targets, supervised_agents, LossBreakdown,
    Supervision, LOG_FLOOR,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricMode, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::numcore::{adamw_step, cosine_lr, AdamWConfig, AdamWState, Graph, Mode, ParamTree, Real};
use crate::scene::NormalizedScene;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,step,lr,loss,loss_reg,loss_cls,val_minade,val_minfde,val_mr";
/// Checkpoint subdirectory refreshed during training.
pub const LAST_DIR: &str = "last";
/// Checkpoint subdirectory holding the best validation minFDE.
pub const BEST_DIR: &str = "best";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stops after this many optimizer steps; the schedule still spans
    /// `epochs`.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub soft_target_temperature: f64,
    pub grad_clip: f64,
    pub supervision: Supervision,
    /// Worker threads for per-scene gradients. Results do not depend on it.
    pub threads: usize,
    /// Refresh the `last` checkpoint every this many epochs; 0 only at the end.
    pub checkpoint_every: usize,
    /// Reflects each training sample across the x-axis with probability 1/2.
    pub mirror_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 32,
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            epochs: 64,
            max_steps: None,
            seed: 0,
            soft_target_temperature: 1.0,
            grad_clip: 5.0,
            supervision: Supervision::AllLabeled,
            threads: 1,
            checkpoint_every: 1,
            mirror_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let checks = [
            (self.batch_size > 0, "batch_size must be positive"),
            (self.epochs > 0, "epochs must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.lr_min >= 0.0 && self.lr_min <= self.lr, "lr_min must lie in [0, lr]"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.soft_target_temperature > 0.0, "soft_target_temperature must be positive"),
            (self.grad_clip > 0.0, "grad_clip must be positive"),
            (self.threads > 0, "threads must be positive"),
            (self.max_steps != Some(0), "max_steps must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub loss_reg: f64,
    pub loss_cls: f64,
    pub val: Option<MetricReport>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let (a, f, m) = match &self.val {
            Some(v) => (v.min_ade.to_string(), v.min_fde.to_string(), v.miss_rate.to_string()),
            None => Default::default(),
        };
        format!(
            "{},{},{},{},{},{},{a},{f},{m}",
            self.epoch, self.step, self.lr, self.loss, self.loss_reg, self.loss_cls
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Set when a non-finite loss or gradient stopped training. Parameters
    /// are those before the failing step.
    pub diverged: Option<String>,
}

struct SceneGrad<T> {
    loss: f64,
    reg: f64,
    cls: f64,
    grads: ParamTree<T>,
}

fn mix_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scene_gradient<T: Real>(
    model: &Model<T>,
    ns: &NormalizedScene,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<SceneGrad<T>>> {
    let mirrored;
    let ns = if cfg.mirror_augment && seed >> 63 == 1 {
        mirrored = ns.mirrored();
        &mirrored
    } else {
        ns
    };
    let mut g = Graph::new(Mode::Train, seed);
    let p = model.params.bind(&mut g);
    let fv = model.forward(&mut g, &p, ns)?;
    let Some(loss) = scene_loss(&mut g, &fv, ns, cfg.supervision, cfg.soft_target_temperature)? else {
        return Ok(None);
    };
    let grads = g.backward(loss.total)?;
    let value = |v| g.value(v).data()[0].as_f64();
    Ok(Some(SceneGrad {
        loss: value(loss.total),
        reg: value(loss.reg),
        cls: value(loss.cls),
        grads: p.gradients(&g, &grads),
    }))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

struct LogFile {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LogFile {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = LogFile {
            out: BufWriter::new(f),
            path,
        };
        log.line(LOG_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `model` in place.
///
/// Every scene of a minibatch gets its own graph; gradients are summed in
/// batch order and divided by the number of supervised scenes, so the
/// result is independent of `threads`. With `out_dir` set, the CSV log and
/// the `last` / `best` checkpoints are written there.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[NormalizedScene],
    val_set: &[NormalizedScene],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("train", "training set is empty"));
    }
    if model.config != cfg.model {
        return Err(Error::Consistency("model configuration differs from training configuration".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut log = out_dir.map(LogFile::create).transpose()?;
    let adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamWState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX).min(total_steps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        steps: 0,
        diverged: None,
    };
    let mut best_fde = f64::INFINITY;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_reg, mut sum_cls, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            if outcome.steps >= step_limit {
                break;
            }
            let step = outcome.steps;
            lr = cosine_lr(step as u64, total_steps as u64, cfg.lr, cfg.lr_min)?;
            let mut grads: Option<ParamTree<T>> = None;
            let (mut bl, mut br, mut bc, mut used) = (0.0, 0.0, 0.0, 0usize);
            let mut failure = None;
            let chunk_len = cfg.threads.max(1);
            for (c, chunk) in batch.chunks(chunk_len).enumerate() {
                let results: Vec<Result<Option<SceneGrad<T>>>> = pool.install(|| {
                    chunk
                        .par_iter()
                        .enumerate()
                        .map(|(i, &idx)| {
                            let seed = mix_seed(cfg.seed, step as u64, (c * chunk_len + i) as u64);
                            scene_gradient(model, &train_set[idx], cfg, seed)
                        })
                        .collect()
                });
                for r in results {
                    match r {
                        Ok(Some(sg)) => {
                            bl += sg.loss;
                            br += sg.reg;
                            bc += sg.cls;
                            used += 1;
                            match grads.as_mut() {
                                Some(acc) => acc.add_assign(&sg.grads)?,
                                None => grads = Some(sg.grads),
                            }
                        }
                        Ok(None) => {}
                        Err(e) if is_divergence(&e) => failure = Some(e.to_string()),
                        Err(e) => return Err(e),
                    }
                }
                if failure.is_some() {
                    break;
                }
            }
            let Some(mut grads) = grads.filter(|_| failure.is_none()) else {
                if let Some(msg) = failure {
                    outcome.diverged = Some(msg);
                    break 'epochs;
                }
                continue;
            };
            let inv = 1.0 / used as f64;
            grads.scale(T::lit(inv));
            let norm = grads.global_norm();
            if !bl.is_finite() || !norm.is_finite() {
                outcome.diverged = Some(format!("non-finite loss {bl} or gradient norm {norm} at step {step}"));
                break 'epochs;
            }
            if norm > cfg.grad_clip {
                grads.scale(T::lit(cfg.grad_clip / norm));
            }
            adamw_step(&mut model.params, &grads, &mut state, lr, &adamw)?;
            outcome.steps += 1;
            sum_loss += bl * inv;
            sum_reg += br * inv;
            sum_cls += bc * inv;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, cfg.supervision, MetricMode::PerAgent)?)
        };
        let row = EpochLog {
            epoch,
            step: outcome.steps,
            lr,
            loss: sum_loss / batches as f64,
            loss_reg: sum_reg / batches as f64,
            loss_cls: sum_cls / batches as f64,
            val,
        };
        if let Some(log) = log.as_mut() {
            log.line(&row.csv_row())?;
        }
        if let Some(dir) = out_dir {
            if let Some(v) = &row.val {
                if v.min_fde < best_fde {
                    best_fde = v.min_fde;
                    model.save(&dir.join(BEST_DIR))?;
                }
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(LAST_DIR))?;
            }
        }
        on_epoch(&row);
        outcome.epochs.push(row);
        if outcome.steps >= step_limit {
            break;
        }
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join(LAST_DIR))?;
    }
    Ok(outcome)
}
