//! Stage one: per-agent temporal and spatial encoding.
//!
//! The temporal path runs a shared stacked LSTM over each agent's history
//! and then self-attention over time (one sequence per agent). The
//! spatial path runs a position-wise MLP and then self-attention over
//! agents (one set per timestep). Both take the normalized features
//! `R = (Δx, Δy, flag)` directly.

use super::config::ModelConfig;
use super::layers::{self, attention, mlp, zero_rows, AttentionOut, ParamInit};
use crate::error::{Error, Result};
use crate::numcore::{BoundParams, Graph, Real, Tensor, Var};

pub(crate) const INPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Attend over timesteps of one agent.
    Temporal,
    /// Attend over agents at one timestep.
    Spatial,
}

/// Encoder outputs, both `[N, T_h, hidden]`. Invalid positions are zero.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub temporal: Var,
    pub spatial: Var,
}

pub(crate) fn init_params<T: Real>(init: &mut ParamInit<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let h = cfg.hidden;
    if cfg.ablation.lstm {
        for l in 0..cfg.lstm_layers {
            let input = if l == 0 { INPUT_DIM } else { h };
            init.weight(&format!("encoder.lstm.{l}.w_ih"), input, 4 * h)?;
            init.weight(&format!("encoder.lstm.{l}.w_hh"), h, 4 * h)?;
            init.constant(&format!("encoder.lstm.{l}.bias"), 4 * h, 0.0)?;
        }
    } else {
        init.linear("encoder.embed", INPUT_DIM, h)?;
    }
    init.mlp("encoder.mlp", INPUT_DIM, h, h)?;
    for (enabled, name) in [
        (cfg.ablation.temporal_attention, "tattn"),
        (cfg.ablation.spatial_attention, "sattn"),
    ] {
        if enabled {
            for proj in ["wq", "wk", "wv"] {
                init.weight(&format!("encoder.{name}.{proj}"), h, h)?;
            }
            init.linear(&format!("encoder.{name}.out"), h, h)?;
        }
    }
    Ok(())
}

fn valid_mask<T: Real>(g: &mut Graph<T>, valid: &[bool], n: usize, t_h: usize) -> Result<Var> {
    let data = valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    Ok(g.constant(Tensor::new(&[n, 1], data).map_err(|_| Error::shape("lstm", &[n, t_h], &[valid.len()]))?))
}

/// Stacked LSTM over `r[N, T_h, in]` with zero initial state, returning
/// the last layer's hidden state at every step, `[N, T_h, hidden]`.
///
/// Gate layout in the fused `4·hidden` axis is input, forget, cell,
/// output. At steps where an agent is invalid its state is carried over
/// unchanged.
pub fn lstm_encode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    r: Var,
    valid: &[bool],
) -> Result<Var> {
    let shape = g.shape(r).to_vec();
    if shape.len() != 3 || shape[2] != INPUT_DIM {
        return Err(Error::shape("lstm_encode", &shape, &[0, 0, INPUT_DIM]));
    }
    if !g.value(r).is_finite() {
        return Err(Error::NonFinite { op: "lstm_encode" });
    }
    let (n, t_h) = (shape[0], shape[1]);
    if valid.len() != n * t_h {
        return Err(Error::shape("lstm_encode", &[n, t_h], &[valid.len()]));
    }
    let h = cfg.hidden;
    let step_masks: Vec<Option<Var>> = (0..t_h)
        .map(|t| {
            let col: Vec<bool> = (0..n).map(|a| valid[a * t_h + t]).collect();
            if col.iter().all(|&v| v) {
                Ok(None)
            } else {
                valid_mask(g, &col, n, t_h).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let inv_masks: Vec<Option<Var>> = step_masks
        .iter()
        .map(|m| m.map(|m| g.scale(m, -T::one()).and_then(|x| g.add_scalar(x, T::one()))).transpose())
        .collect::<Result<_>>()?;

    let mut x = r;
    for l in 0..cfg.lstm_layers {
        let w_ih = p.var(&format!("encoder.lstm.{l}.w_ih"))?;
        let w_hh = p.var(&format!("encoder.lstm.{l}.w_hh"))?;
        let bias = p.var(&format!("encoder.lstm.{l}.bias"))?;
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add(xw, bias)?;
        let mut hid = g.constant(Tensor::zeros(&[n, h]));
        let mut cell = g.constant(Tensor::zeros(&[n, h]));
        let mut outputs = Vec::with_capacity(t_h);
        for t in 0..t_h {
            let xt = g.slice(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[n, 4 * h])?;
            let hw = g.matmul(hid, w_hh)?;
            let gates = g.add(xt, hw)?;
            let i = g.slice(gates, 1, 0, h)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(gates, 1, h, h)?;
            let f = g.sigmoid(f)?;
            let c_hat = g.slice(gates, 1, 2 * h, h)?;
            let c_hat = g.tanh(c_hat)?;
            let o = g.slice(gates, 1, 3 * h, h)?;
            let o = g.sigmoid(o)?;
            let fc = g.mul(f, cell)?;
            let ic = g.mul(i, c_hat)?;
            let c_new = g.add(fc, ic)?;
            let tc = g.tanh(c_new)?;
            let h_new = g.mul(o, tc)?;
            (hid, cell) = match (step_masks[t], inv_masks[t]) {
                (Some(m), Some(inv)) => {
                    let keep_h = g.mul(h_new, m)?;
                    let old_h = g.mul(hid, inv)?;
                    let keep_c = g.mul(c_new, m)?;
                    let old_c = g.mul(cell, inv)?;
                    (g.add(keep_h, old_h)?, g.add(keep_c, old_c)?)
                }
                _ => (h_new, c_new),
            };
            outputs.push(g.reshape(hid, &[n, 1, h])?);
        }
        x = g.concat(&outputs, 1)?;
    }
    Ok(x)
}

/// Position-wise two-layer MLP (ReLU) over every `(agent, step)`.
pub fn mlp_encode<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, r: Var) -> Result<Var> {
    let shape = g.shape(r);
    if shape.len() != 3 || shape[2] != INPUT_DIM {
        return Err(Error::shape("mlp_encode", shape, &[0, 0, INPUT_DIM]));
    }
    mlp(g, p, "encoder.mlp", r, cfg.dropout)
}

/// Multi-head self-attention of `x[N, T_h, hidden]` along one axis,
/// followed by the output projection `W, b`.
///
/// Invalid `(agent, step)` positions are excluded as keys and produce
/// zero outputs.
pub fn axis_attention<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    axis: Axis,
    valid: &[bool],
) -> Result<AttentionOut> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || valid.len() != shape[0] * shape[1] {
        return Err(Error::shape("axis_attention", &shape, &[valid.len()]));
    }
    let (n, t_h) = (shape[0], shape[1]);
    let (seq, mask): (Var, Vec<bool>) = match axis {
        Axis::Temporal => (x, valid.to_vec()),
        Axis::Spatial => {
            let xt = g.transpose(x, 0, 1)?;
            let m = (0..t_h)
                .flat_map(|t| (0..n).map(move |a| (a, t)))
                .map(|(a, t)| valid[a * t_h + t])
                .collect();
            (xt, m)
        }
    };
    let q = g.matmul(seq, p.var(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(seq, p.var(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(seq, p.var(&format!("{prefix}.wv"))?)?;
    let att = attention(g, q, k, v, cfg.heads, &mask, &mask)?;
    let out = layers::linear(g, p, &format!("{prefix}.out"), att.out)?;
    let out = g.dropout(out, cfg.dropout)?;
    let out = zero_rows(g, out, &mask)?;
    let out = match axis {
        Axis::Temporal => out,
        Axis::Spatial => g.transpose(out, 0, 1)?,
    };
    Ok(AttentionOut {
        out,
        weights: att.weights,
    })
}

/// Full stage-one encoder over normalized features `r[N, T_h, 3]`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    r: Var,
    valid: &[bool],
) -> Result<EncodedVars> {
    let ab = cfg.ablation;
    let hidden_seq = if ab.lstm {
        lstm_encode(g, p, cfg, r, valid)?
    } else {
        let e = layers::linear(g, p, "encoder.embed", r)?;
        g.relu(e)?
    };
    let positionwise = mlp_encode(g, p, cfg, r)?;
    let hidden_seq = zero_rows(g, hidden_seq, valid)?;
    let positionwise = zero_rows(g, positionwise, valid)?;
    // Residual around each attention block keeps the per-agent signal.
    let temporal = if ab.temporal_attention {
        let a = axis_attention(g, p, "encoder.tattn", cfg, hidden_seq, Axis::Temporal, valid)?.out;
        g.add(hidden_seq, a)?
    } else {
        hidden_seq
    };
    let spatial = if ab.spatial_attention {
        let a = axis_attention(g, p, "encoder.sattn", cfg, positionwise, Axis::Spatial, valid)?.out;
        g.add(positionwise, a)?
    } else {
        positionwise
    };
    Ok(EncodedVars { temporal, spatial })
}
