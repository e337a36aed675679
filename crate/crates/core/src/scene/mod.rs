//! Scene schema, JSON Lines ingestion, agent-centric normalization and the
//! synthetic scene generator.

mod io;
mod normalize;
mod synth;

pub use io::{parse_scene_file, parse_scenes, write_scene_file, write_scenes};
pub use normalize::{denormalize_history, normalize, wrap_angle, Frame, NormalizedScene, RelGeometry};
pub use synth::{generate_synthetic, MotionMix, SyntheticConfig, TurnDirection};

/// Horizon configuration. Defaults are 10 Hz with 2 s of history and 3 s
/// of future.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub dt: f64,
    pub history_steps: usize,
    pub future_steps: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            dt: 0.1,
            history_steps: 20,
            future_steps: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryPoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl HistoryPoint {
    pub fn new(x: f64, y: f64) -> Self {
        HistoryPoint { x, y, valid: true }
    }

    pub fn invalid() -> Self {
        HistoryPoint {
            x: 0.0,
            y: 0.0,
            valid: false,
        }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: String,
    /// Oldest first; the last entry is t = 0.
    pub history: Vec<HistoryPoint>,
    pub future: Option<Vec<[f64; 2]>>,
}

impl AgentTrack {
    pub fn observed_now(&self) -> bool {
        self.history.last().is_some_and(|p| p.valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub target: usize,
    pub agents: Vec<AgentTrack>,
}

impl Scene {
    pub fn history_steps(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    /// Applies the rigid motion `p -> R(angle) p + translation` to every
    /// position in the scene.
    pub fn transformed(&self, angle: f64, translation: [f64; 2]) -> Scene {
        let (s, c) = angle.sin_cos();
        let tf = |x: f64, y: f64| [c * x - s * y + translation[0], s * x + c * y + translation[1]];
        let mut out = self.clone();
        for a in &mut out.agents {
            for p in &mut a.history {
                if p.valid {
                    let [x, y] = tf(p.x, p.y);
                    p.x = x;
                    p.y = y;
                }
            }
            if let Some(f) = &mut a.future {
                for p in f.iter_mut() {
                    *p = tf(p[0], p[1]);
                }
            }
        }
        out
    }
}
