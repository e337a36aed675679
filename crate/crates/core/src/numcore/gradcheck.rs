//! Central finite-difference checks for reverse-mode gradients (f64 only).

use super::graph::{Graph, Mode, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
}

/// Relative L2 error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

/// Checks `d f(inputs) / d inputs` where `f` builds a scalar on a fresh
/// eval-mode graph from the given leaves.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval, 0);
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new(Mode::Eval, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let ga = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(ga[j]);
        }
    }
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    Ok(GradCheck {
        rel_err: relative_error(&analytic, &numeric),
        max_abs_err,
        n_checked: analytic.len(),
    })
}
