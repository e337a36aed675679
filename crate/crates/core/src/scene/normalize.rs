//! Agent-centric normalization.
//!
//! Each agent gets its own frame: origin at its position at t = 0, x-axis
//! along its last displacement. History becomes per-step displacements in
//! that frame plus the validity flag; cross-agent geometry is kept
//! separately for the interaction stage.

use std::f64::consts::PI;

use super::Scene;
use crate::numcore::Tensor;

/// Reference vectors shorter than this give heading 0.
const MIN_REFERENCE_NORM: f64 = 1e-6;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[inline]
fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// An agent's local frame in global coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        origin: [0.0, 0.0],
        heading: 0.0,
    };

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        rotate([p[0] - self.origin[0], p[1] - self.origin[1]], -self.heading)
    }

    pub fn to_global(&self, p: [f64; 2]) -> [f64; 2] {
        let r = rotate(p, self.heading);
        [r[0] + self.origin[0], r[1] + self.origin[1]]
    }

    /// Rotates a displacement into the local frame (no translation).
    pub fn vec_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        rotate(v, -self.heading)
    }

    pub fn vec_to_global(&self, v: [f64; 2]) -> [f64; 2] {
        rotate(v, self.heading)
    }
}

/// Geometry of agent `j` seen from agent `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelGeometry {
    /// `τ_j(0) − τ_i(0)` rotated into frame `i`.
    pub offset: [f64; 2],
    /// `θ_j − θ_i`, wrapped to `(-π, π]`.
    pub dtheta: f64,
}

#[derive(Debug, Clone)]
pub struct NormalizedScene {
    pub scene_id: String,
    pub agent_ids: Vec<String>,
    /// Index of each retained agent in the source scene.
    pub source_index: Vec<usize>,
    /// Position of the scene's target among retained agents.
    pub target: usize,
    pub history_steps: usize,
    /// `[N, T_h, 3]` of `(Δx, Δy, flag)` in each agent's own frame.
    pub features: Tensor<f64>,
    /// `[N * T_h]`, row-major by agent.
    pub valid: Vec<bool>,
    pub frames: Vec<Frame>,
    /// `[N * N]`, entry `i * N + j` is `j` seen from `i`.
    pub rel_geometry: Vec<RelGeometry>,
    /// Ground-truth future in each agent's frame, when labeled.
    pub future_local: Vec<Option<Vec<[f64; 2]>>>,
}

impl NormalizedScene {
    pub fn num_agents(&self) -> usize {
        self.frames.len()
    }

    pub fn rel(&self, i: usize, j: usize) -> RelGeometry {
        self.rel_geometry[i * self.num_agents() + j]
    }

    pub fn is_valid(&self, agent: usize, t: usize) -> bool {
        self.valid[agent * self.history_steps + t]
    }

    /// Agent has at least one valid step.
    pub fn agent_present(&self, agent: usize) -> bool {
        let t_h = self.history_steps;
        self.valid[agent * t_h..(agent + 1) * t_h].iter().any(|&v| v)
    }

    /// Appends an agent with no valid history step. It carries zero
    /// features and identity geometry.
    pub fn with_phantom_agent(&self, id: &str) -> NormalizedScene {
        let n = self.num_agents();
        let t_h = self.history_steps;
        let mut feats = self.features.data().to_vec();
        feats.extend(std::iter::repeat_n(0.0, t_h * 3));
        let mut valid = self.valid.clone();
        valid.extend(std::iter::repeat_n(false, t_h));
        let mut rel = Vec::with_capacity((n + 1) * (n + 1));
        let zero = RelGeometry {
            offset: [0.0, 0.0],
            dtheta: 0.0,
        };
        for i in 0..=n {
            for j in 0..=n {
                rel.push(if i < n && j < n { self.rel(i, j) } else { zero });
            }
        }
        let mut out = self.clone();
        out.agent_ids.push(id.to_string());
        out.source_index.push(usize::MAX);
        out.features = Tensor::new(&[n + 1, t_h, 3], feats).expect("consistent shape");
        out.valid = valid;
        out.frames.push(Frame::IDENTITY);
        out.rel_geometry = rel;
        out.future_local.push(None);
        out
    }

    /// The scene reflected across the global x-axis, `(x, y) -> (x, -y)`.
    /// Equal to normalizing the reflected source scene.
    pub fn mirrored(&self) -> NormalizedScene {
        let mut out = self.clone();
        for v in out.features.data_mut().chunks_exact_mut(3) {
            v[1] = -v[1];
        }
        for f in &mut out.frames {
            f.origin[1] = -f.origin[1];
            f.heading = wrap_angle(-f.heading);
        }
        for r in &mut out.rel_geometry {
            r.offset[1] = -r.offset[1];
            r.dtheta = wrap_angle(-r.dtheta);
        }
        for fut in out.future_local.iter_mut().flatten() {
            for p in fut.iter_mut() {
                p[1] = -p[1];
            }
        }
        out
    }
}

/// Normalizes a scene. Agents not observed at t = 0 are dropped.
///
/// A displacement is taken from the previous valid step; the first valid
/// step and every invalid step get `(0, 0)`. The heading is the direction
/// of the displacement into t = 0, or 0 when that vector is shorter than
/// 1e-6 m.
pub fn normalize(scene: &Scene) -> NormalizedScene {
    let t_h = scene.history_steps();
    let kept: Vec<usize> = (0..scene.agents.len())
        .filter(|&i| scene.agents[i].observed_now())
        .collect();
    let n = kept.len();
    let mut features = vec![0.0; n * t_h * 3];
    let mut valid = vec![false; n * t_h];
    let mut frames = Vec::with_capacity(n);
    let mut future_local = Vec::with_capacity(n);

    for (a, &src) in kept.iter().enumerate() {
        let track = &scene.agents[src];
        let mut disp = vec![[0.0, 0.0]; t_h];
        let mut prev: Option<[f64; 2]> = None;
        for (t, p) in track.history.iter().enumerate() {
            if !p.valid {
                continue;
            }
            if let Some(q) = prev {
                disp[t] = [p.x - q[0], p.y - q[1]];
            }
            prev = Some(p.pos());
        }
        let origin = track.history[t_h - 1].pos();
        let reference = disp[t_h - 1];
        let heading = if reference[0].hypot(reference[1]) < MIN_REFERENCE_NORM {
            0.0
        } else {
            reference[1].atan2(reference[0])
        };
        let frame = Frame { origin, heading };
        for (t, p) in track.history.iter().enumerate() {
            if !p.valid {
                continue;
            }
            let d = frame.vec_to_local(disp[t]);
            let base = (a * t_h + t) * 3;
            features[base] = d[0];
            features[base + 1] = d[1];
            features[base + 2] = 1.0;
            valid[a * t_h + t] = true;
        }
        future_local.push(
            track
                .future
                .as_ref()
                .map(|f| f.iter().map(|&p| frame.to_local(p)).collect()),
        );
        frames.push(frame);
    }

    let mut rel_geometry = Vec::with_capacity(n * n);
    for fi in &frames {
        for fj in &frames {
            rel_geometry.push(RelGeometry {
                offset: fi.vec_to_local([fj.origin[0] - fi.origin[0], fj.origin[1] - fi.origin[1]]),
                dtheta: wrap_angle(fj.heading - fi.heading),
            });
        }
    }

    let target = kept.iter().position(|&i| i == scene.target).unwrap_or(0);
    NormalizedScene {
        scene_id: scene.scene_id.clone(),
        agent_ids: kept.iter().map(|&i| scene.agents[i].id.clone()).collect(),
        source_index: kept,
        target,
        history_steps: t_h,
        features: Tensor::new(&[n.max(1), t_h.max(1), 3], pad_empty(features, n, t_h)).expect("consistent shape"),
        valid,
        frames,
        rel_geometry,
        future_local,
    }
}

// Tensors cannot have zero-sized dims; an empty scene keeps one zero row.
fn pad_empty(features: Vec<f64>, n: usize, t_h: usize) -> Vec<f64> {
    if n == 0 || t_h == 0 {
        vec![0.0; t_h.max(1) * 3]
    } else {
        features
    }
}

/// Reconstructs global history positions for valid steps; `None` marks
/// invalid steps. Inverse of [`normalize`] on the retained agents.
pub fn denormalize_history(ns: &NormalizedScene) -> Vec<Vec<Option<[f64; 2]>>> {
    let t_h = ns.history_steps;
    let f = ns.features.data();
    (0..ns.num_agents())
        .map(|a| {
            let frame = ns.frames[a];
            let mut out = vec![None; t_h];
            let mut cur = frame.origin;
            for t in (0..t_h).rev() {
                if !ns.is_valid(a, t) {
                    continue;
                }
                out[t] = Some(cur);
                let base = (a * t_h + t) * 3;
                let d = frame.vec_to_global([f[base], f[base + 1]]);
                cur = [cur[0] - d[0], cur[1] - d[1]];
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentTrack, HistoryPoint};

    fn scene_of(tracks: Vec<Vec<HistoryPoint>>) -> Scene {
        Scene {
            scene_id: "t".into(),
            dt: 0.1,
            target: 0,
            agents: tracks
                .into_iter()
                .enumerate()
                .map(|(i, history)| AgentTrack {
                    id: format!("a{i}"),
                    history,
                    future: None,
                })
                .collect(),
        }
    }

    #[test]
    fn mirrored_matches_normalizing_the_reflected_scene() {
        let cfg = crate::scene::SyntheticConfig {
            n_scenes: 3,
            ..Default::default()
        };
        for scene in crate::scene::generate_synthetic(4, &cfg) {
            let mut reflected = scene.clone();
            for a in &mut reflected.agents {
                for p in a.history.iter_mut().filter(|p| p.valid) {
                    p.y = -p.y;
                }
                for p in a.future.iter_mut().flatten() {
                    p[1] = -p[1];
                }
            }
            let (m, r) = (normalize(&scene).mirrored(), normalize(&reflected));
            assert!(m.features.max_abs_diff(&r.features) < 1e-9);
            assert_eq!(m.valid, r.valid);
            for (a, b) in m.frames.iter().zip(&r.frames) {
                assert!((a.origin[1] - b.origin[1]).abs() < 1e-9);
                assert!(wrap_angle(a.heading - b.heading).abs() < 1e-9);
            }
            for (a, b) in m.rel_geometry.iter().zip(&r.rel_geometry) {
                assert!((a.offset[1] - b.offset[1]).abs() < 1e-9 && wrap_angle(a.dtheta - b.dtheta).abs() < 1e-9);
            }
            for (a, b) in m.future_local.iter().zip(&r.future_local) {
                for (p, q) in a.as_ref().unwrap().iter().zip(b.as_ref().unwrap()) {
                    assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stationary_agent_has_zero_displacements_and_heading() {
        let s = scene_of(vec![vec![HistoryPoint::new(3.0, -4.0); 20]]);
        let ns = normalize(&s);
        assert_eq!(ns.frames[0].heading, 0.0);
        for t in 0..20 {
            assert_eq!(ns.features.at(&[0, t, 0]), 0.0);
            assert_eq!(ns.features.at(&[0, t, 1]), 0.0);
            assert_eq!(ns.features.at(&[0, t, 2]), 1.0);
        }
    }

    #[test]
    fn northbound_agent_rotates_onto_x_axis() {
        let s = scene_of(vec![(0..20).map(|t| HistoryPoint::new(5.0, t as f64)).collect()]);
        let ns = normalize(&s);
        assert!((ns.frames[0].heading - PI / 2.0).abs() < 1e-12);
        assert_eq!(ns.features.at(&[0, 0, 0]), 0.0);
        for t in 1..20 {
            assert!((ns.features.at(&[0, t, 0]) - 1.0).abs() < 1e-12);
            assert!(ns.features.at(&[0, t, 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn late_appearance_is_left_padded() {
        let mut h: Vec<HistoryPoint> = (0..20).map(|t| HistoryPoint::new(t as f64, 0.0)).collect();
        for p in h.iter_mut().take(5) {
            *p = HistoryPoint::invalid();
        }
        let s = scene_of(vec![h]);
        let ns = normalize(&s);
        for t in 0..6 {
            assert_eq!(ns.features.at(&[0, t, 0]), 0.0);
        }
        assert_eq!(ns.features.at(&[0, 4, 2]), 0.0);
        assert_eq!(ns.features.at(&[0, 5, 2]), 1.0);
        assert!(!ns.is_valid(0, 4) && ns.is_valid(0, 5));
    }

    #[test]
    fn agents_unobserved_now_are_dropped() {
        let mut ghost: Vec<HistoryPoint> = (0..20).map(|t| HistoryPoint::new(t as f64, 1.0)).collect();
        *ghost.last_mut().unwrap() = HistoryPoint::invalid();
        let s = scene_of(vec![(0..20).map(|t| HistoryPoint::new(t as f64, 0.0)).collect(), ghost]);
        let ns = normalize(&s);
        assert_eq!(ns.num_agents(), 1);
        assert_eq!(ns.agent_ids, vec!["a0".to_string()]);
    }

    #[test]
    fn frames_round_trip() {
        let f = Frame {
            origin: [3.0, -7.5],
            heading: 2.1,
        };
        let p = [0.3, 11.0];
        let q = f.to_global(f.to_local(p));
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0 - 2.0 * PI) + PI / 2.0).abs() < 1e-12);
    }
}
