//! The two-stage forecasting network: encoder, interaction and decoder.

mod config;
pub mod decoder;
pub mod encoder;
pub mod interaction;
mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, ModelConfig};
pub use decoder::ForecastVars;
pub use encoder::{Axis, EncodedVars};
pub use layers::MASK_LOGIT;
pub(crate) use layers::attention;

use crate::error::{Error, Result};
use crate::numcore::{checkpoint_paths, BoundParams, Graph, Mode, ParamTree, Real, Tensor, Var};
use crate::scene::{Frame, NormalizedScene};
use layers::ParamInit;

/// File holding the model configuration inside a checkpoint directory.
pub const CONFIG_FILE: &str = "model.config";

/// Every intermediate of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub encoded: EncodedVars,
    /// `[N, hidden]` sum of both encodings at each agent's last valid step.
    pub fused: Var,
    /// `[N, hidden]` spatial interaction output `Ŝ`.
    pub spatial: Var,
    /// `[N, hidden]` temporal interaction output `T̂`.
    pub temporal: Var,
    pub forecast: ForecastVars,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamTree<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit {
            tree: &mut params,
            rng: &mut rng,
        };
        encoder::init_params(&mut init, &config)?;
        interaction::init_params(&mut init, &config)?;
        decoder::init_params(&mut init, &config)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking them against the layout
    /// `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamTree<T>) -> Result<Self> {
        let reference = Model::<T>::init(config, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = checkpoint_paths(dir);
        self.params.write_checkpoint(&manifest, &blob)?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_kv()).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ModelConfig::from_kv(&text)?;
        let (manifest, blob) = checkpoint_paths(dir);
        let params = ParamTree::read_checkpoint(&manifest, &blob)?;
        Model::from_params(config, params)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Builds the forward pass for one normalized scene.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, ns: &NormalizedScene) -> Result<ForecastVars> {
        Ok(self.forward_traced(g, p, ns)?.forecast)
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, p: &BoundParams, ns: &NormalizedScene) -> Result<ForwardTrace> {
        let n = ns.num_agents();
        let t_h = ns.history_steps;
        if n == 0 || t_h == 0 {
            return Err(Error::arg("forward", "scene has no agents or no history"));
        }
        let r = g.constant(ns.features.cast());
        self.forward_features(g, p, r, ns)
    }

    /// Forward pass with caller-supplied features `r[N, T_h, 3]`; masks
    /// and geometry still come from `ns`.
    pub fn forward_features(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        r: Var,
        ns: &NormalizedScene,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let n = ns.num_agents();
        let t_h = ns.history_steps;
        let encoded = encoder::encode(g, p, cfg, r, &ns.valid)?;
        let x = g.add(encoded.temporal, encoded.spatial)?;
        let last = interaction::last_valid_steps(&ns.valid, n, t_h);
        let fused = interaction::gather_steps(g, x, &last)?;

        let spatial = if cfg.ablation.spatial_interaction {
            let pair = g.constant(interaction::pair_features(ns).cast());
            let e = interaction::pairwise_embed(g, p, cfg, pair)?;
            let neighbors = interaction::neighbor_mask(ns, cfg.neighbor_radius);
            interaction::spatial_interact(g, p, cfg, fused, e, &neighbors)?
        } else {
            fused
        };
        let temporal = if cfg.ablation.temporal_interaction {
            interaction::temporal_interact(g, p, cfg, x, &ns.valid)?
        } else {
            fused
        };
        let base = kinematic_steps(g.value(r), &ns.valid, &last, cfg.future_steps);
        let forecast = decoder::decode(g, p, cfg, spatial, temporal, &base)?;
        Ok(ForwardTrace {
            encoded,
            fused,
            spatial,
            temporal,
            forecast,
        })
    }

    /// Eval-mode inference in each agent's local frame.
    pub fn predict(&self, ns: &NormalizedScene) -> Result<Forecast> {
        let mut g = Graph::new(Mode::Eval, 0);
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, ns)?;
        Ok(Forecast::from_graph(&g, &out, self.config.modes, ns.num_agents(), self.config.future_steps))
    }
}

/// History steps used by [`kinematic_steps`].
pub const FIT_WINDOW: usize = 20;
/// Valid steps needed before an acceleration is estimated.
pub const MIN_ACCEL_POINTS: usize = 6;

/// Per-step displacement `[N, T_f, 2]` that extrapolates each agent's
/// motion, from `r[N, T_h, 3]`.
///
/// Positions over the last [`FIT_WINDOW`] steps up to `last[a]` are fitted
/// with a quadratic in time (a line below [`MIN_ACCEL_POINTS`] valid steps)
/// and continued from the last position. Steps that would move backwards
/// along the current velocity are zero: a decelerating agent stops. Agents
/// with a single valid step get zeros. Validity comes from `valid`, never
/// from the features.
fn kinematic_steps<T: Real>(r: &Tensor<T>, valid: &[bool], last: &[usize], t_f: usize) -> Tensor<f64> {
    let t_h = r.shape()[1];
    let d = r.data();
    let mut out = Vec::with_capacity(last.len() * t_f * 2);
    for (a, &end) in last.iter().enumerate() {
        let steps: Vec<usize> = (end.saturating_sub(FIT_WINDOW - 1)..=end)
            .filter(|&t| valid[a * t_h + t])
            .collect();
        // Walk back from the last position, which is the origin.
        let mut pos = vec![[0.0; 2]; steps.len()];
        for i in (1..steps.len()).rev() {
            let base = (a * t_h + steps[i]) * 3;
            pos[i - 1] = [pos[i][0] - d[base].as_f64(), pos[i][1] - d[base + 1].as_f64()];
        }
        let tau: Vec<f64> = steps.iter().map(|&t| t as f64 - end as f64).collect();
        let degree = match steps.len() {
            0 | 1 => None,
            n if n < MIN_ACCEL_POINTS => Some(1),
            _ => Some(2),
        };
        let (mut v, mut acc) = ([0.0; 2], [0.0; 2]);
        if let Some(deg) = degree {
            for c in 0..2 {
                let xs: Vec<f64> = pos.iter().map(|p| p[c]).collect();
                let coef = poly_fit(&tau, &xs, deg);
                v[c] = coef[1];
                acc[c] = if deg == 2 { 2.0 * coef[2] } else { 0.0 };
            }
        }
        let mut stopped = false;
        for k in 1..=t_f {
            let h = k as f64 - 0.5;
            let step = [v[0] + acc[0] * h, v[1] + acc[1] * h];
            stopped |= step[0] * v[0] + step[1] * v[1] <= 0.0;
            out.extend(if stopped { [0.0; 2] } else { step });
        }
    }
    Tensor::new(&[last.len(), t_f, 2], out).expect("consistent shape")
}

/// Least-squares polynomial coefficients, lowest order first. Needs more
/// distinct `ts` than `degree`.
fn poly_fit(ts: &[f64], xs: &[f64], degree: usize) -> Vec<f64> {
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&t, &x) in ts.iter().zip(xs) {
        for i in 0..m {
            for j in 0..m {
                a[i][j] += t.powi((i + j) as i32);
            }
            a[i][m] += x * t.powi(i as i32);
        }
    }
    for c in 0..m {
        let piv = a[c][c];
        for v in a[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..m {
            if r != c {
                let f = a[r][c];
                for j in 0..=m {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    a.iter().map(|row| row[m]).collect()
}

/// Concrete Laplace mixture forecast in local frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub modes: usize,
    pub agents: usize,
    pub steps: usize,
    /// `[K, N, T_f, 2]`.
    pub mu: Vec<f64>,
    /// `[K, N, T_f, 2]`.
    pub b: Vec<f64>,
    /// `[N, K]`.
    pub pi: Vec<f64>,
}

impl Forecast {
    pub fn from_graph<T: Real>(g: &Graph<T>, v: &ForecastVars, modes: usize, agents: usize, steps: usize) -> Self {
        Forecast {
            modes,
            agents,
            steps,
            mu: g.value(v.mu).to_f64_vec(),
            b: g.value(v.b).to_f64_vec(),
            pi: g.value(v.pi).to_f64_vec(),
        }
    }

    fn idx(&self, k: usize, n: usize, t: usize) -> usize {
        ((k * self.agents + n) * self.steps + t) * 2
    }

    pub fn mu(&self, k: usize, n: usize, t: usize) -> [f64; 2] {
        let i = self.idx(k, n, t);
        [self.mu[i], self.mu[i + 1]]
    }

    pub fn b(&self, k: usize, n: usize, t: usize) -> [f64; 2] {
        let i = self.idx(k, n, t);
        [self.b[i], self.b[i + 1]]
    }

    pub fn pi(&self, n: usize, k: usize) -> f64 {
        self.pi[n * self.modes + k]
    }

    /// Trajectory of mode `k` for agent `n`.
    pub fn trajectory(&self, k: usize, n: usize) -> Vec<[f64; 2]> {
        (0..self.steps).map(|t| self.mu(k, n, t)).collect()
    }

    pub fn mu_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.modes, self.agents, self.steps, 2], self.mu.clone()).expect("forecast shape")
    }
}

/// Maps local-frame locations to the global frame, `[N][K][T_f]`. Scales
/// stay in the local frame.
pub fn to_global(forecast: &Forecast, frames: &[Frame]) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
    if frames.len() != forecast.agents {
        return Err(Error::arg(
            "to_global",
            format!("{} frames for {} agents", frames.len(), forecast.agents),
        ));
    }
    Ok(frames
        .iter()
        .enumerate()
        .map(|(n, frame)| {
            (0..forecast.modes)
                .map(|k| forecast.trajectory(k, n).into_iter().map(|p| frame.to_global(p)).collect())
                .collect()
        })
        .collect())
}
