//! Winner-takes-all Laplace regression and soft-target classification.

use crate::error::{Error, Result};
use crate::model::ForecastVars;
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::scene::NormalizedScene;

/// Floor applied to predicted probabilities before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Index of the mode with the least summed squared displacement to
/// `truth[N, T_f, 2]`, per agent, from `mu[K, N, T_f, 2]`. Ties go to the
/// lowest index.
pub fn best_mode<T: Real>(mu: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<usize>> {
    let (ms, ts) = (mu.shape(), truth.shape());
    if ms.len() != 4 || ts.len() != 3 || ms[1..] != ts[..] {
        return Err(Error::shape("best_mode", ms, ts));
    }
    let (k, n, t) = (ms[0], ms[1], ms[2]);
    let (m, y) = (mu.data(), truth.data());
    Ok((0..n)
        .map(|a| {
            let mut best = (0, f64::INFINITY);
            for mode in 0..k {
                let base = (mode * n + a) * t * 2;
                let err: f64 = (0..t * 2)
                    .map(|i| {
                        let d = m[base + i].as_f64() - y[a * t * 2 + i].as_f64();
                        d * d
                    })
                    .sum();
                if err < best.1 {
                    best = (mode, err);
                }
            }
            best.0
        })
        .collect())
}

/// `softmax_k(−FDE_k / temperature)` per agent, `[N, K]`.
pub fn soft_targets<T: Real>(mu: &Tensor<T>, truth: &Tensor<T>, temperature: f64) -> Result<Tensor<f64>> {
    let (ms, ts) = (mu.shape(), truth.shape());
    if ms.len() != 4 || ts.len() != 3 || ms[1..] != ts[..] {
        return Err(Error::shape("soft_targets", ms, ts));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("soft_targets", format!("temperature {temperature} must be positive")));
    }
    let (k, n, t) = (ms[0], ms[1], ms[2]);
    let (m, y) = (mu.data(), truth.data());
    let mut out = Vec::with_capacity(n * k);
    for a in 0..n {
        let end = (a * t + t - 1) * 2;
        let logits: Vec<f64> = (0..k)
            .map(|mode| {
                let p = ((mode * n + a) * t + t - 1) * 2;
                let fde = (m[p].as_f64() - y[end].as_f64()).hypot(m[p + 1].as_f64() - y[end + 1].as_f64());
                -fde / temperature
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(&[n, k], out)
}

/// Laplace negative log-likelihood of `truth` under `(mu, b)`, all
/// `[M, T_f, 2]`: `Σ (log(2b) + |x − μ| / b) / (M · T_f)`.
pub fn laplace_nll<T: Real>(g: &mut Graph<T>, mu: Var, b: Var, truth: Var) -> Result<Var> {
    let s = g.shape(mu).to_vec();
    if s.len() != 3 || g.shape(b) != s.as_slice() || g.shape(truth) != s.as_slice() {
        return Err(Error::shape("laplace_nll", &s, g.shape(b)));
    }
    if g.value(b).data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::arg("laplace_nll", "scale must be positive"));
    }
    let diff = g.sub(truth, mu)?;
    let diff = g.abs(diff)?;
    let resid = g.div(diff, b)?;
    let two_b = g.scale(b, T::lit(2.0))?;
    let log_b = g.log(two_b)?;
    let nll = g.add(log_b, resid)?;
    let total = g.sum(nll)?;
    g.scale(total, T::lit(1.0 / (s[0] * s[1]) as f64))
}

/// Cross-entropy `−(1/M) Σ target · log(max(pi, 1e-12))` over `[M, K]`.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, pi: Var, target: Var) -> Result<Var> {
    let s = g.shape(pi).to_vec();
    if s.len() != 2 || g.shape(target) != s.as_slice() {
        return Err(Error::shape("classification_loss", &s, g.shape(target)));
    }
    let p = g.clamp_min(pi, T::lit(LOG_FLOOR))?;
    let logp = g.log(p)?;
    let weighted = g.mul(target, logp)?;
    let total = g.sum(weighted)?;
    g.scale(total, T::lit(-1.0 / s[0] as f64))
}

/// Which agents receive supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Supervision {
    /// Every agent with a labeled future.
    #[default]
    AllLabeled,
    /// Only the scene's target agent.
    TargetOnly,
}

pub fn supervised_agents(ns: &NormalizedScene, sup: Supervision) -> Vec<usize> {
    (0..ns.num_agents())
        .filter(|&a| ns.future_local[a].is_some())
        .filter(|&a| sup == Supervision::AllLabeled || a == ns.target)
        .collect()
}

/// Graph handles and values of one scene's loss.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub reg: Var,
    pub cls: Var,
    /// Supervised agents, in scene order.
    pub agents: Vec<usize>,
    /// `k*` for each supervised agent.
    pub best_modes: Vec<usize>,
}

/// `L = L_reg + L_cls` for one scene. Returns `None` when no agent is
/// supervised.
pub fn scene_loss<T: Real>(
    g: &mut Graph<T>,
    fv: &ForecastVars,
    ns: &NormalizedScene,
    sup: Supervision,
    temperature: f64,
) -> Result<Option<LossBreakdown>> {
    let agents = supervised_agents(ns, sup);
    if agents.is_empty() {
        return Ok(None);
    }
    let ms = g.shape(fv.mu).to_vec();
    let (k, n, t_f) = (ms[0], ms[1], ms[2]);
    let mut truth = Vec::with_capacity(agents.len() * t_f * 2);
    for &a in &agents {
        let fut = ns.future_local[a].as_ref().expect("supervised agents are labeled");
        if fut.len() != t_f {
            return Err(Error::Consistency(format!(
                "scene {} agent {} has {} future steps, model predicts {t_f}",
                ns.scene_id,
                ns.agent_ids[a],
                fut.len()
            )));
        }
        truth.extend(fut.iter().flat_map(|p| [T::lit(p[0]), T::lit(p[1])]));
    }
    let m = agents.len();
    let truth = Tensor::new(&[m, t_f, 2], truth)?;

    // Values of the supervised agents' modes, [K, M, T_f, 2].
    let mu_all = g.value(fv.mu);
    let mut sel = Vec::with_capacity(k * m * t_f * 2);
    for mode in 0..k {
        for &a in &agents {
            let base = (mode * n + a) * t_f * 2;
            sel.extend_from_slice(&mu_all.data()[base..base + t_f * 2]);
        }
    }
    let mu_sel = Tensor::new(&[k, m, t_f, 2], sel)?;
    let best = best_mode(&mu_sel, &truth)?;
    let target = soft_targets(&mu_sel, &truth, temperature)?;

    let rows: Vec<usize> = best.iter().zip(&agents).map(|(&kb, &a)| kb * n + a).collect();
    let mu_flat = g.reshape(fv.mu, &[k * n, t_f, 2])?;
    let b_flat = g.reshape(fv.b, &[k * n, t_f, 2])?;
    let mu_best = g.index_select(mu_flat, &rows)?;
    let b_best = g.index_select(b_flat, &rows)?;
    let truth = g.constant(truth);
    let reg = laplace_nll(g, mu_best, b_best, truth)?;

    let pi = g.index_select(fv.pi, &agents)?;
    let target = g.constant(target.cast());
    let cls = classification_loss(g, pi, target)?;
    let total = g.add(reg, cls)?;
    Ok(Some(LossBreakdown {
        total,
        reg,
        cls,
        agents,
        best_modes: best,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_closed_forms() {
        let mut g = Graph::<f64>::default();
        let mu = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let half = g.constant(Tensor::full(&[1, 2, 2], 0.5));
        let one = g.constant(Tensor::full(&[1, 2, 2], 1.0));
        let zero = laplace_nll(&mut g, mu, half, mu).unwrap();
        assert!(g.value(zero).data()[0].abs() < 1e-15);
        let l = laplace_nll(&mut g, mu, one, mu).unwrap();
        // Two axes per step, averaged over steps.
        assert!((g.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let mut g = Graph::<f64>::default();
        let u = g.constant(Tensor::full(&[3, 6], 1.0 / 6.0));
        let l = classification_loss(&mut g, u, u).unwrap();
        assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cold_targets_concentrate() {
        let truth = Tensor::<f64>::zeros(&[1, 2, 2]);
        let mu = Tensor::from_f64(&[3, 1, 2, 2], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let st = soft_targets(&mu, &truth, 1e-3).unwrap();
        assert!(st.data()[1] > 0.999);
        assert_eq!(best_mode(&mu, &truth).unwrap(), vec![1]);
    }
}
