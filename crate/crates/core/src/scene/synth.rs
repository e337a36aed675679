//! Synthetic multi-agent scenes built from simple motion primitives.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AgentTrack, HistoryPoint, Scene, SceneConfig};

/// Relative weights of the motion primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionMix {
    pub constant_velocity: f64,
    pub constant_turn: f64,
    pub accelerate: f64,
    pub lane_change: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        MotionMix {
            constant_velocity: 0.4,
            constant_turn: 0.25,
            accelerate: 0.2,
            lane_change: 0.15,
        }
    }
}

impl MotionMix {
    pub fn constant_velocity_only() -> Self {
        MotionMix {
            constant_velocity: 1.0,
            constant_turn: 0.0,
            accelerate: 0.0,
            lane_change: 0.0,
        }
    }

    pub fn turn_only() -> Self {
        MotionMix {
            constant_velocity: 0.0,
            constant_turn: 1.0,
            accelerate: 0.0,
            lane_change: 0.0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.constant_velocity.max(0.0),
            self.constant_turn.max(0.0),
            self.accelerate.max(0.0),
            self.lane_change.max(0.0),
        ]
    }
}

/// Sign of the yaw rate for constant-turn agents. `Left` is
/// counter-clockwise (positive curvature).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnDirection {
    Left,
    Right,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    /// Inclusive agent-count range, clamped to `[1, 32]`.
    pub agents: (usize, usize),
    pub motion_mix: MotionMix,
    pub horizon: SceneConfig,
    /// Standard deviation of Gaussian position noise, meters.
    pub noise_std: f64,
    pub speed_range: (f64, f64),
    /// Yaw-rate magnitude range, rad/s.
    pub turn_rate_range: (f64, f64),
    /// Longitudinal acceleration magnitude range, m/s².
    pub accel_range: (f64, f64),
    pub lane_width: f64,
    pub turn_direction: TurnDirection,
    /// Probability that a non-target agent first appears mid-history.
    pub late_appearance_prob: f64,
    /// Half-width of the box neighbors are placed in around the target.
    pub spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_scenes: 100,
            agents: (1, 8),
            motion_mix: MotionMix::default(),
            horizon: SceneConfig::default(),
            noise_std: 0.05,
            speed_range: (2.0, 12.0),
            turn_rate_range: (0.05, 0.3),
            accel_range: (0.3, 2.0),
            lane_width: 3.5,
            turn_direction: TurnDirection::Random,
            late_appearance_prob: 0.15,
            spread: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    ConstantVelocity,
    ConstantTurn { yaw_rate: f64 },
    Accelerate { accel: f64 },
    LaneChange { side: f64, onset: f64, duration: f64 },
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Noise-free positions for steps `0..total`, step `k` at time `k * dt`.
fn simulate(prim: Primitive, start: [f64; 2], heading: f64, speed: f64, dt: f64, total: usize) -> Vec<[f64; 2]> {
    let dir = [heading.cos(), heading.sin()];
    let normal = [-dir[1], dir[0]];
    match prim {
        Primitive::ConstantVelocity => (0..total)
            .map(|k| {
                let s = speed * dt * k as f64;
                [start[0] + s * dir[0], start[1] + s * dir[1]]
            })
            .collect(),
        Primitive::ConstantTurn { yaw_rate } => (0..total)
            .map(|k| {
                let t = k as f64 * dt;
                let r = speed / yaw_rate;
                let psi = heading + yaw_rate * t;
                [
                    start[0] + r * (psi.sin() - heading.sin()),
                    start[1] - r * (psi.cos() - heading.cos()),
                ]
            })
            .collect(),
        Primitive::Accelerate { accel } => (0..total)
            .map(|k| {
                let t = k as f64 * dt;
                // Decelerating agents stop rather than reverse.
                let s = if accel < 0.0 && speed + accel * t < 0.0 {
                    -speed * speed / (2.0 * accel)
                } else {
                    speed * t + 0.5 * accel * t * t
                };
                [start[0] + s * dir[0], start[1] + s * dir[1]]
            })
            .collect(),
        Primitive::LaneChange { side, onset, duration } => (0..total)
            .map(|k| {
                let t = k as f64 * dt;
                let s = speed * t;
                let l = side * smoothstep((t - onset) / duration);
                [
                    start[0] + s * dir[0] + l * normal[0],
                    start[1] + s * dir[1] + l * normal[1],
                ]
            })
            .collect(),
    }
}

fn pick_primitive(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Primitive {
    let w = cfg.motion_mix.weights();
    let total: f64 = w.iter().sum();
    let mut u = if total > 0.0 { rng.random::<f64>() * total } else { 0.0 };
    let mut which = 0;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            which = i;
            break;
        }
        u -= wi;
        which = i;
    }
    let horizon = &cfg.horizon;
    let t_hist = (horizon.history_steps.saturating_sub(1)) as f64 * horizon.dt;
    let t_total = (horizon.history_steps + horizon.future_steps) as f64 * horizon.dt;
    match which {
        0 => Primitive::ConstantVelocity,
        1 => {
            let mag = rng.random_range(cfg.turn_rate_range.0..=cfg.turn_rate_range.1);
            let sign = match cfg.turn_direction {
                TurnDirection::Left => 1.0,
                TurnDirection::Right => -1.0,
                TurnDirection::Random => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            Primitive::ConstantTurn { yaw_rate: sign * mag }
        }
        2 => {
            let mag = rng.random_range(cfg.accel_range.0..=cfg.accel_range.1);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Primitive::Accelerate { accel: sign * mag }
        }
        _ => {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 } * cfg.lane_width;
            Primitive::LaneChange {
                side,
                onset: rng.random_range(0.5 * t_hist..t_total.max(t_hist + 1e-9)),
                duration: rng.random_range(2.5..=4.0),
            }
        }
    }
}

/// Generates `cfg.n_scenes` scenes. Deterministic in `seed`.
pub fn generate_synthetic(seed: u64, cfg: &SyntheticConfig) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = cfg.agents.0.clamp(1, 32);
    let hi = cfg.agents.1.clamp(lo, 32);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let t_h = cfg.horizon.history_steps;
    let t_f = cfg.horizon.future_steps;
    let dt = cfg.horizon.dt;

    (0..cfg.n_scenes)
        .map(|s| {
            let n_agents = rng.random_range(lo..=hi);
            let center = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            let agents = (0..n_agents)
                .map(|a| {
                    let start = if a == 0 {
                        center
                    } else {
                        [
                            center[0] + rng.random_range(-cfg.spread..=cfg.spread),
                            center[1] + rng.random_range(-cfg.spread..=cfg.spread),
                        ]
                    };
                    let heading = rng.random_range(-PI..PI);
                    let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
                    let prim = pick_primitive(&mut rng, cfg);
                    let clean = simulate(prim, start, heading, speed, dt, t_h + t_f);
                    let mut noisy = clean.into_iter().map(|p| {
                        if cfg.noise_std > 0.0 {
                            [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]
                        } else {
                            p
                        }
                    });
                    let mut history: Vec<HistoryPoint> = (&mut noisy)
                        .take(t_h)
                        .map(|p| HistoryPoint::new(p[0], p[1]))
                        .collect();
                    let future: Vec<[f64; 2]> = noisy.collect();
                    // At least two valid steps remain so the heading is defined.
                    if a > 0 && t_h > 2 && rng.random::<f64>() < cfg.late_appearance_prob {
                        let first_valid = rng.random_range(1..=t_h - 2);
                        for p in history.iter_mut().take(first_valid) {
                            *p = HistoryPoint::invalid();
                        }
                    }
                    AgentTrack {
                        id: format!("agent_{a}"),
                        history,
                        future: Some(future),
                    }
                })
                .collect();
            Scene {
                scene_id: format!("synth_{seed}_{s:05}"),
                dt,
                target: 0,
                agents,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenes() {
        let cfg = SyntheticConfig {
            n_scenes: 5,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(7, &cfg), generate_synthetic(7, &cfg));
        assert_ne!(generate_synthetic(7, &cfg), generate_synthetic(8, &cfg));
    }

    #[test]
    fn constant_velocity_without_noise_extrapolates() {
        let cfg = SyntheticConfig {
            n_scenes: 10,
            motion_mix: MotionMix::constant_velocity_only(),
            noise_std: 0.0,
            late_appearance_prob: 0.0,
            ..Default::default()
        };
        for scene in generate_synthetic(3, &cfg) {
            for a in &scene.agents {
                let h = &a.history;
                let last = h[h.len() - 1].pos();
                let prev = h[h.len() - 2].pos();
                let v = [last[0] - prev[0], last[1] - prev[1]];
                for (k, p) in a.future.as_ref().unwrap().iter().enumerate() {
                    let step = (k + 1) as f64;
                    assert!((p[0] - (last[0] + step * v[0])).abs() < 1e-9);
                    assert!((p[1] - (last[1] + step * v[1])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn agent_counts_within_range() {
        let cfg = SyntheticConfig {
            n_scenes: 50,
            agents: (2, 8),
            ..Default::default()
        };
        for s in generate_synthetic(1, &cfg) {
            assert!((2..=8).contains(&s.agents.len()));
            assert!(s.agents[s.target].observed_now());
        }
    }
}
