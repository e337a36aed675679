//! Stage two: gated graph attention across agents and masked temporal
//! self-attention across time.

use super::config::ModelConfig;
use super::layers::{attention, layer_norm, mlp, zero_rows, ParamInit};
use crate::error::{Error, Result};
use crate::numcore::{BoundParams, Graph, Real, Tensor, Var};
use crate::scene::NormalizedScene;

const PAIR_DIM: usize = 4;

pub(crate) fn init_params<T: Real>(init: &mut ParamInit<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let h = cfg.hidden;
    let ffn = h * cfg.ffn_mult;
    if cfg.ablation.spatial_interaction {
        init.mlp("interaction.pair", PAIR_DIM, h, h)?;
        for l in 0..cfg.spatial_layers {
            let p = format!("interaction.spatial.{l}");
            init.weight(&format!("{p}.wq"), h, h)?;
            init.weight(&format!("{p}.wk"), 2 * h, h)?;
            init.weight(&format!("{p}.wv"), 2 * h, h)?;
            init.weight(&format!("{p}.w_gate"), 2 * h, h)?;
            init.constant(&format!("{p}.b_gate"), h, 0.0)?;
            init.weight(&format!("{p}.w_self"), h, h)?;
            init.layer_norm(&format!("{p}.ln1"), h)?;
            init.mlp(&format!("{p}.ffn"), h, ffn, h)?;
            init.layer_norm(&format!("{p}.ln2"), h)?;
        }
        init.mlp("interaction.spatial_out", h, h, h)?;
    }
    if cfg.ablation.temporal_interaction {
        for l in 0..cfg.temporal_layers {
            let p = format!("interaction.temporal.{l}");
            for proj in ["wq", "wk", "wv"] {
                init.weight(&format!("{p}.{proj}"), h, h)?;
            }
            init.layer_norm(&format!("{p}.ln1"), h)?;
            init.mlp(&format!("{p}.ffn"), h, ffn, h)?;
            init.layer_norm(&format!("{p}.ln2"), h)?;
        }
    }
    Ok(())
}

/// `[N, N, 4]` rows of `(dx, dy, cos Δθ, sin Δθ)`, entry `(i, j)` is `j`
/// seen from `i`.
pub fn pair_features(ns: &NormalizedScene) -> Tensor<f64> {
    let n = ns.num_agents();
    let mut data = Vec::with_capacity(n * n * PAIR_DIM);
    for i in 0..n {
        for j in 0..n {
            let r = ns.rel(i, j);
            data.extend([r.offset[0], r.offset[1], r.dtheta.cos(), r.dtheta.sin()]);
        }
    }
    Tensor::new(&[n, n, PAIR_DIM], data).expect("pair feature shape")
}

/// Pairwise embedding `e[N, N, hidden]` from `pair[N, N, 4]`.
pub fn pairwise_embed<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, pair: Var) -> Result<Var> {
    let s = g.shape(pair);
    if s.len() != 3 || s[2] != PAIR_DIM {
        return Err(Error::shape("pairwise_embed", s, &[0, 0, PAIR_DIM]));
    }
    mlp(g, p, "interaction.pair", pair, cfg.dropout)
}

/// `[N * N]` neighbor mask, entry `i * N + j`.
///
/// `j` is a neighbor of `i` when both are observed at t = 0 and their
/// distance does not exceed the configured radius. Every observed agent is
/// its own neighbor.
pub fn neighbor_mask(ns: &NormalizedScene, radius: f64) -> Vec<bool> {
    let n = ns.num_agents();
    let t_now = ns.history_steps - 1;
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let r = ns.rel(i, j);
            let dist = r.offset[0].hypot(r.offset[1]);
            mask.push(ns.is_valid(i, t_now) && ns.is_valid(j, t_now) && dist <= radius);
        }
    }
    mask
}

/// Intermediate values of one spatial layer.
#[derive(Debug, Clone, Copy)]
pub struct SpatialLayerOut {
    /// `[N, hidden]` after residual, norm and feed-forward.
    pub out: Var,
    /// `[N, heads, 1, N]` attention over neighbors.
    pub alpha: Var,
    /// `[N, hidden]` aggregated message `m`.
    pub message: Var,
    /// `[N, hidden]` gate `g`.
    pub gate: Var,
    /// `[N, hidden]` `W_self · F`.
    pub self_term: Var,
    /// `[N, hidden]` `g ⊙ W_self F + (1 − g) ⊙ m`, before residual and norm.
    pub fused: Var,
}

/// One gated graph-attention layer over agent vectors `f[N, hidden]` with
/// pairwise embeddings `e[N, N, hidden]`.
pub fn spatial_layer<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    f: Var,
    e: Var,
    neighbors: &[bool],
) -> Result<SpatialLayerOut> {
    let fs = g.shape(f).to_vec();
    let h = cfg.hidden;
    if fs.len() != 2 || fs[1] != h {
        return Err(Error::shape("spatial_layer", &fs, &[0, h]));
    }
    let n = fs[0];
    let es = g.shape(e).to_vec();
    if es != [n, n, h] || neighbors.len() != n * n {
        return Err(Error::shape("spatial_layer", &fs, &es));
    }
    let wk = p.var(&format!("{prefix}.wk"))?;
    let wv = p.var(&format!("{prefix}.wv"))?;
    let q = g.matmul(f, p.var(&format!("{prefix}.wq"))?)?;
    let q = g.reshape(q, &[n, 1, h])?;
    // [F_j, e_ij] · W splits into F_j · W[..h] + e_ij · W[h..].
    let mut kv = [f; 2];
    for (slot, w) in kv.iter_mut().zip([wk, wv]) {
        let w_f = g.slice(w, 0, 0, h)?;
        let w_e = g.slice(w, 0, h, h)?;
        let from_f = g.matmul(f, w_f)?;
        let from_e = g.matmul(e, w_e)?;
        *slot = g.add(from_e, from_f)?;
    }
    let query_valid: Vec<bool> = (0..n).map(|i| neighbors[i * n + i]).collect();
    let att = attention(g, q, kv[0], kv[1], cfg.heads, neighbors, &query_valid)?;
    let message = g.reshape(att.out, &[n, h])?;

    let fm = g.concat(&[f, message], 1)?;
    let gate = g.matmul(fm, p.var(&format!("{prefix}.w_gate"))?)?;
    let gate = g.add(gate, p.var(&format!("{prefix}.b_gate"))?)?;
    let gate = g.sigmoid(gate)?;
    let self_term = g.matmul(f, p.var(&format!("{prefix}.w_self"))?)?;
    let not_gate = g.scale(gate, -T::one())?;
    let not_gate = g.add_scalar(not_gate, T::one())?;
    let kept = g.mul(gate, self_term)?;
    let mixed = g.mul(not_gate, message)?;
    let fused = g.add(kept, mixed)?;

    let x = g.dropout(fused, cfg.dropout)?;
    let x = g.add(f, x)?;
    let x = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let y = mlp(g, p, &format!("{prefix}.ffn"), x, cfg.dropout)?;
    let y = g.dropout(y, cfg.dropout)?;
    let y = g.add(x, y)?;
    let y = layer_norm(g, p, &format!("{prefix}.ln2"), y)?;
    let out = zero_rows(g, y, &query_valid)?;
    Ok(SpatialLayerOut {
        out,
        alpha: att.weights,
        message,
        gate,
        self_term,
        fused,
    })
}

/// Stacked spatial layers followed by the output MLP, giving `Ŝ[N, hidden]`.
pub fn spatial_interact<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    f: Var,
    e: Var,
    neighbors: &[bool],
) -> Result<Var> {
    let mut x = f;
    for l in 0..cfg.spatial_layers {
        x = spatial_layer(g, p, &format!("interaction.spatial.{l}"), cfg, x, e, neighbors)?.out;
    }
    let n = g.shape(f)[0];
    let present: Vec<bool> = (0..n).map(|i| neighbors[i * n + i]).collect();
    let out = mlp(g, p, "interaction.spatial_out", x, cfg.dropout)?;
    zero_rows(g, out, &present)
}

/// One masked self-attention block over time for `x[N, T_h, hidden]`.
/// Invalid positions come out as zeros.
pub fn temporal_layer<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    valid: &[bool],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != cfg.hidden || valid.len() != s[0] * s[1] {
        return Err(Error::shape("temporal_layer", &s, &[valid.len()]));
    }
    let q = g.matmul(x, p.var(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(x, p.var(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(x, p.var(&format!("{prefix}.wv"))?)?;
    let att = attention(g, q, k, v, cfg.heads, valid, valid)?;
    let a = g.dropout(att.out, cfg.dropout)?;
    let y = g.add(x, a)?;
    let y = layer_norm(g, p, &format!("{prefix}.ln1"), y)?;
    let z = mlp(g, p, &format!("{prefix}.ffn"), y, cfg.dropout)?;
    let z = g.dropout(z, cfg.dropout)?;
    let z = g.add(y, z)?;
    let z = layer_norm(g, p, &format!("{prefix}.ln2"), z)?;
    zero_rows(g, z, valid)
}

/// Per agent, the last valid step (or the final step when none is valid).
pub fn last_valid_steps(valid: &[bool], n: usize, t_h: usize) -> Vec<usize> {
    (0..n)
        .map(|a| {
            (0..t_h)
                .rev()
                .find(|&t| valid[a * t_h + t])
                .unwrap_or(t_h - 1)
        })
        .collect()
}

/// Picks `x[a, last[a], :]` for every agent, giving `[N, hidden]`.
pub fn gather_steps<T: Real>(g: &mut Graph<T>, x: Var, last: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || last.len() != s[0] {
        return Err(Error::shape("gather_steps", &s, &[last.len()]));
    }
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let rows: Vec<usize> = last.iter().enumerate().map(|(a, &t)| a * s[1] + t).collect();
    g.index_select(flat, &rows)
}

/// Stacked temporal layers reduced to `T̂[N, hidden]` at each agent's last
/// valid step.
pub fn temporal_interact<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    valid: &[bool],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("temporal_interact", &s, &[0, 0, cfg.hidden]));
    }
    let mut y = x;
    for l in 0..cfg.temporal_layers {
        y = temporal_layer(g, p, &format!("interaction.temporal.{l}"), cfg, y, valid)?;
    }
    let last = last_valid_steps(valid, s[0], s[1]);
    gather_steps(g, y, &last)
}
