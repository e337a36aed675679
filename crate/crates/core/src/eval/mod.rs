//! Metrics, prediction files and the latency benchmark.

pub mod bench;
mod metrics;
mod predictions;

pub use metrics::{
    min_ade, min_fde, miss_rate, MetricAccumulator, MetricMode, MetricReport, ModeErrors, MISS_THRESHOLD,
};

pub use predictions::{
    predict_scene, read_prediction_file, score, score_files, write_prediction_file, write_predictions,
    AgentPrediction, ModePrediction,
};

use crate::error::Result;
use crate::model::{Forecast, Model};
use crate::numcore::{Real, Tensor};
use crate::scene::NormalizedScene;
use crate::training::{supervised_agents, Supervision};

/// Local-frame `(pred[K, M, T_f, 2], truth[M, T_f, 2])` for the selected
/// agents. `None` when no selected agent is labeled.
pub fn labeled_pair(fc: &Forecast, ns: &NormalizedScene, sup: Supervision) -> Result<Option<(Tensor<f64>, Tensor<f64>)>> {
    let agents = supervised_agents(ns, sup);
    if agents.is_empty() {
        return Ok(None);
    }
    let t_f = fc.steps;
    let mut pred = Vec::with_capacity(fc.modes * agents.len() * t_f * 2);
    for k in 0..fc.modes {
        for &a in &agents {
            pred.extend(fc.trajectory(k, a).into_iter().flatten());
        }
    }
    let mut truth = Vec::with_capacity(agents.len() * t_f * 2);
    for &a in &agents {
        truth.extend(ns.future_local[a].as_ref().expect("labeled").iter().flatten());
    }
    Ok(Some((
        Tensor::new(&[fc.modes, agents.len(), t_f, 2], pred)?,
        Tensor::new(&[agents.len(), t_f, 2], truth)?,
    )))
}

/// Eval-mode metrics of `model` on labeled agents of `scenes`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    scenes: &[NormalizedScene],
    sup: Supervision,
    mode: MetricMode,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(mode);
    for ns in scenes {
        let fc = model.predict(ns)?;
        if let Some((pred, truth)) = labeled_pair(&fc, ns, sup)? {
            acc.add(&pred, &truth)?;
        }
    }
    acc.report()
}
