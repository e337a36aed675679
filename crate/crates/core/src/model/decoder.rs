//! Laplace mixture decoder.

use super::config::ModelConfig;
use super::layers::{mlp, ParamInit};
use crate::error::{Error, Result};
use crate::numcore::{BoundParams, Graph, Real, Tensor, Var};

/// Lower bound added to the softplus scale.
pub const SCALE_FLOOR: f64 = 1e-4;

pub(crate) fn init_params<T: Real>(init: &mut ParamInit<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let h = cfg.hidden;
    init.mlp("decoder.fuse", 2 * h, h, h)?;
    init.mlp("decoder.reg", h, h, cfg.modes * cfg.future_steps * 4)?;
    init.mlp("decoder.cls", h, h, cfg.modes)
}

/// Graph handles of a decoded forecast, local frames.
#[derive(Debug, Clone, Copy)]
pub struct ForecastVars {
    /// `[K, N, T_f, 2]` locations.
    pub mu: Var,
    /// `[K, N, T_f, 2]` scales, strictly positive.
    pub b: Var,
    /// `[N, K]` mode probabilities.
    pub pi: Var,
    /// `[K, N, T_f, 4]` regression head output.
    pub raw: Var,
}

/// Decodes `Ŝ[N, hidden]` and `T̂[N, hidden]`.
///
/// Location channels of the regression head are per-step corrections to
/// `base[N, T_f, 2]`, each agent's extrapolated kinematic displacement per
/// step; `μ` is the running sum of `base + correction` over the horizon.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    s_hat: Var,
    t_hat: Var,
    base: &Tensor<f64>,
) -> Result<ForecastVars> {
    let (ss, ts) = (g.shape(s_hat).to_vec(), g.shape(t_hat).to_vec());
    if ss.len() != 2 || ss != ts || ss[1] != cfg.hidden {
        return Err(Error::shape("decode", &ss, &ts));
    }
    let n = ss[0];
    let (k, t_f) = (cfg.modes, cfg.future_steps);
    if base.shape() != [n, t_f, 2] {
        return Err(Error::shape("decode", base.shape(), &[n, t_f, 2]));
    }
    let x = g.concat(&[s_hat, t_hat], 1)?;
    let x = mlp(g, p, "decoder.fuse", x, cfg.dropout)?;
    let x = g.relu(x)?;

    let raw = mlp(g, p, "decoder.reg", x, cfg.dropout)?;
    let raw = g.reshape(raw, &[n, k, t_f, 4])?;
    let raw = g.permute(raw, &[1, 0, 2, 3])?;
    let steps = g.slice(raw, 3, 0, 2)?;
    let anchor = g.constant(base.cast());
    let steps = g.add(steps, anchor)?;
    let mu = g.cumsum(steps, 2)?;
    let b = g.slice(raw, 3, 2, 2)?;
    let b = g.softplus(b)?;
    let b = g.add_scalar(b, T::lit(SCALE_FLOOR))?;

    let logits = mlp(g, p, "decoder.cls", x, cfg.dropout)?;
    let pi = g.softmax(logits, 1)?;
    Ok(ForecastVars { mu, b, pi, raw })
}
