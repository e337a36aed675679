//! Displacement metrics over `K` candidate trajectories.
//!
//! Predictions are `[K, N, T_f, 2]` and ground truth `[N, T_f, 2]`, both
//! in meters and in the same frame.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Endpoint errors at or above this many meters are misses.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Where the minimum over modes is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricMode {
    /// Best mode chosen independently for every agent.
    #[default]
    PerAgent,
    /// One mode per scene minimizing the error summed over its agents.
    PaperLiteral,
}

impl MetricMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::PerAgent => "per-agent",
            MetricMode::PaperLiteral => "paper-literal",
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-agent" => Ok(MetricMode::PerAgent),
            "paper-literal" => Ok(MetricMode::PaperLiteral),
            other => Err(Error::Config(format!(
                "unknown metric mode {other:?} (expected per-agent or paper-literal)"
            ))),
        }
    }
}

/// Per-agent, per-mode displacement errors of one scene.
#[derive(Debug, Clone)]
pub struct ModeErrors {
    pub modes: usize,
    pub agents: usize,
    /// `[K, N]` mean L2 error over the horizon.
    pub ade: Vec<f64>,
    /// `[K, N]` endpoint L2 error.
    pub fde: Vec<f64>,
}

impl ModeErrors {
    pub fn new(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Self> {
        let ps = pred.shape();
        let ts = truth.shape();
        if ps.len() != 4 || ts.len() != 3 || ps[1..] != ts[..] || ps[3] != 2 {
            return Err(Error::shape("metrics", ps, ts));
        }
        let (k, n, t) = (ps[0], ps[1], ps[2]);
        if t == 0 {
            return Err(Error::arg("metrics", "future horizon is empty"));
        }
        let (p, y) = (pred.data(), truth.data());
        let mut ade = vec![0.0; k * n];
        let mut fde = vec![0.0; k * n];
        for m in 0..k {
            for a in 0..n {
                let mut sum = 0.0;
                let mut last = 0.0;
                for s in 0..t {
                    let pi = ((m * n + a) * t + s) * 2;
                    let yi = (a * t + s) * 2;
                    last = (p[pi] - y[yi]).hypot(p[pi + 1] - y[yi + 1]);
                    sum += last;
                }
                ade[m * n + a] = sum / t as f64;
                fde[m * n + a] = last;
            }
        }
        Ok(ModeErrors {
            modes: k,
            agents: n,
            ade,
            fde,
        })
    }

    fn column_min(&self, v: &[f64], agent: usize) -> f64 {
        (0..self.modes).map(|m| v[m * self.agents + agent]).fold(f64::INFINITY, f64::min)
    }

    /// Mode whose agent-summed error in `v` is least; ties go to the lower index.
    fn scene_mode(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for m in 0..self.modes {
            let s: f64 = v[m * self.agents..(m + 1) * self.agents].iter().sum();
            if s < best.1 {
                best = (m, s);
            }
        }
        best.0
    }

    /// Per-agent `(ade, fde)` under `mode`.
    pub fn selected(&self, mode: MetricMode) -> Vec<(f64, f64)> {
        match mode {
            MetricMode::PerAgent => (0..self.agents)
                .map(|a| (self.column_min(&self.ade, a), self.column_min(&self.fde, a)))
                .collect(),
            MetricMode::PaperLiteral => {
                let ka = self.scene_mode(&self.ade);
                let kf = self.scene_mode(&self.fde);
                (0..self.agents)
                    .map(|a| (self.ade[ka * self.agents + a], self.fde[kf * self.agents + a]))
                    .collect()
            }
        }
    }
}

pub fn min_ade(pred: &Tensor<f64>, truth: &Tensor<f64>, mode: MetricMode) -> Result<f64> {
    let e = ModeErrors::new(pred, truth)?.selected(mode);
    Ok(e.iter().map(|x| x.0).sum::<f64>() / e.len() as f64)
}

pub fn min_fde(pred: &Tensor<f64>, truth: &Tensor<f64>, mode: MetricMode) -> Result<f64> {
    let e = ModeErrors::new(pred, truth)?.selected(mode);
    Ok(e.iter().map(|x| x.1).sum::<f64>() / e.len() as f64)
}

/// Fraction of agents whose selected endpoint error is at least `threshold`.
pub fn miss_rate(pred: &Tensor<f64>, truth: &Tensor<f64>, threshold: f64, mode: MetricMode) -> Result<f64> {
    let e = ModeErrors::new(pred, truth)?.selected(mode);
    Ok(e.iter().filter(|x| x.1 >= threshold).count() as f64 / e.len() as f64)
}

/// Aggregate over many scenes; each agent counts once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub scene_count: usize,
    pub agent_count: usize,
    pub modes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub mode: MetricMode,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "scene_count,agent_count,K,minade,minfde,mr,metric_mode";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scene_count, self.agent_count, self.modes, self.min_ade, self.min_fde, self.miss_rate, self.mode
        )
    }
}

#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    mode: MetricMode,
    threshold: f64,
    modes: Option<usize>,
    scenes: usize,
    agents: usize,
    ade: f64,
    fde: f64,
    misses: usize,
}

impl MetricAccumulator {
    pub fn new(mode: MetricMode) -> Self {
        MetricAccumulator {
            mode,
            threshold: MISS_THRESHOLD,
            modes: None,
            scenes: 0,
            agents: 0,
            ade: 0.0,
            fde: 0.0,
            misses: 0,
        }
    }

    /// Adds one scene. Every scene must carry the same `K`.
    pub fn add(&mut self, pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<()> {
        let e = ModeErrors::new(pred, truth)?;
        match self.modes {
            Some(k) if k != e.modes => {
                return Err(Error::Consistency(format!("scene has K={} but earlier scenes K={k}", e.modes)));
            }
            _ => self.modes = Some(e.modes),
        }
        for (ade, fde) in e.selected(self.mode) {
            self.ade += ade;
            self.fde += fde;
            self.misses += usize::from(fde >= self.threshold);
        }
        self.agents += e.agents;
        self.scenes += 1;
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.agents == 0 {
            return Err(Error::arg("metrics", "no agents to score"));
        }
        let n = self.agents as f64;
        Ok(MetricReport {
            scene_count: self.scenes,
            agent_count: self.agents,
            modes: self.modes.unwrap_or(0),
            min_ade: self.ade / n,
            min_fde: self.fde / n,
            miss_rate: self.misses as f64 / n,
            mode: self.mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn constant_offset_gives_that_offset() {
        let truth = t(&[1, 3, 2], &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let pred = t(&[1, 1, 3, 2], &[0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        assert!((min_ade(&pred, &truth, MetricMode::PerAgent).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_only_and_pythagorean() {
        let truth = t(&[1, 2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let right_end = t(&[1, 1, 2, 2], &[9.0, 9.0, 0.0, 0.0]);
        assert_eq!(min_fde(&right_end, &truth, MetricMode::PerAgent).unwrap(), 0.0);
        let off = t(&[1, 1, 2, 2], &[0.0, 0.0, 3.0, 4.0]);
        assert!((min_fde(&off, &truth, MetricMode::PerAgent).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn one_of_four_missed() {
        let truth = Tensor::zeros(&[4, 1, 2]);
        let pred = t(&[1, 4, 1, 2], &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.5, 0.5]);
        assert_eq!(miss_rate(&pred, &truth, MISS_THRESHOLD, MetricMode::PerAgent).unwrap(), 0.25);
        assert_eq!(miss_rate(&pred, &truth, f64::INFINITY, MetricMode::PerAgent).unwrap(), 0.0);
    }

    #[test]
    fn paper_literal_uses_one_mode_per_scene() {
        // Agent 0 is perfect in mode 0, agent 1 in mode 1.
        let truth = Tensor::zeros(&[2, 1, 2]);
        let pred = t(&[2, 2, 1, 2], &[0.0, 0.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(min_ade(&pred, &truth, MetricMode::PerAgent).unwrap(), 0.0);
        assert!((min_ade(&pred, &truth, MetricMode::PaperLiteral).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_horizon_is_an_error() {
        assert!(ModeErrors::new(&Tensor::zeros(&[1, 1, 1, 2]), &Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
