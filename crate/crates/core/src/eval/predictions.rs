//! Prediction files (JSON Lines) and file-based scoring.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricAccumulator, MetricMode, MetricReport};
use crate::error::{Error, Result};
use crate::model::{to_global, Model};
use crate::numcore::{Real, Tensor};
use crate::scene::{normalize, parse_scene_file, Scene, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModePrediction {
    pub pi: f64,
    pub traj: Vec<[f64; 2]>,
}

/// One line of a prediction file; trajectories are in the global frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPrediction {
    pub scene_id: String,
    pub agent_id: String,
    pub modes: Vec<ModePrediction>,
}

/// Eval-mode forecasts for every agent observed at t = 0.
pub fn predict_scene<T: Real>(model: &Model<T>, scene: &Scene) -> Result<Vec<AgentPrediction>> {
    let ns = normalize(scene);
    let fc = model.predict(&ns)?;
    let global = to_global(&fc, &ns.frames)?;
    Ok(global
        .into_iter()
        .enumerate()
        .map(|(a, modes)| AgentPrediction {
            scene_id: ns.scene_id.clone(),
            agent_id: ns.agent_ids[a].clone(),
            modes: modes
                .into_iter()
                .enumerate()
                .map(|(k, traj)| ModePrediction { pi: fc.pi(a, k), traj })
                .collect(),
        })
        .collect())
}

pub fn write_predictions<W: Write>(w: W, preds: &[AgentPrediction]) -> Result<()> {
    let mut w = BufWriter::new(w);
    let io = |e: std::io::Error| Error::io("<predictions>", e);
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::io("<predictions>", e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_prediction_file(path: &Path, preds: &[AgentPrediction]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(f, preds).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_prediction_file(path: &Path) -> Result<Vec<AgentPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: AgentPrediction = serde_json::from_str(line).map_err(|e| {
            let msg = e.to_string();
            if e.is_data() {
                Error::Schema {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg,
                }
            } else {
                Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg,
                }
            }
        })?;
        if p.modes.is_empty() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "no modes".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Scores predictions against labeled scenes, joining on
/// `(scene_id, agent_id)`. Agents that are labeled and observed at t = 0
/// must all have a prediction; extra predictions are ignored.
pub fn score(preds: &[AgentPrediction], truth: &[Scene], mode: MetricMode) -> Result<MetricReport> {
    let mut by_key: HashMap<(&str, &str), &AgentPrediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_key.insert((&p.scene_id, &p.agent_id), p).is_some() {
            return Err(Error::Consistency(format!(
                "duplicate prediction for scene {} agent {}",
                p.scene_id, p.agent_id
            )));
        }
    }
    let mut missing = Vec::new();
    let mut acc = MetricAccumulator::new(mode);
    // Scene order is fixed so that reports do not depend on line order.
    let scenes: BTreeMap<&str, &Scene> = truth.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    for scene in scenes.values() {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        let mut agents = 0;
        for agent in scene.agents.iter().filter(|a| a.observed_now()) {
            let Some(future) = &agent.future else { continue };
            let Some(p) = by_key.get(&(scene.scene_id.as_str(), agent.id.as_str())) else {
                missing.push(format!("{}/{}", scene.scene_id, agent.id));
                continue;
            };
            let k = p.modes.len();
            let t_f = future.len();
            if let Some((k0, _)) = shape {
                if k0 != k {
                    return Err(Error::Consistency(format!(
                        "scene {} mixes K={k0} and K={k}",
                        scene.scene_id
                    )));
                }
            }
            shape = Some((k, t_f));
            if p.modes.iter().any(|m| m.traj.len() != t_f) {
                return Err(Error::Consistency(format!(
                    "prediction for {}/{} has a trajectory length other than {t_f}",
                    scene.scene_id, agent.id
                )));
            }
            pred.push(p);
            gt.extend(future.iter().flatten());
            agents += 1;
        }
        let Some((k, t_f)) = shape else { continue };
        let mut data = Vec::with_capacity(k * agents * t_f * 2);
        for m in 0..k {
            for p in &pred {
                data.extend(p.modes[m].traj.iter().flatten());
            }
        }
        acc.add(
            &Tensor::new(&[k, agents, t_f, 2], data)?,
            &Tensor::new(&[agents, t_f, 2], gt)?,
        )?;
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    acc.report()
}

/// [`score`] over files. The truth file is a scene file with futures.
pub fn score_files(pred_path: &Path, truth_path: &Path, horizon: &SceneConfig, mode: MetricMode) -> Result<MetricReport> {
    let preds = read_prediction_file(pred_path)?;
    let truth = parse_scene_file(truth_path, horizon)?;
    score(&preds, &truth, mode)
}
