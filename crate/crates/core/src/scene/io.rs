use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentTrack, HistoryPoint, Scene, SceneConfig};
use crate::error::{Error, Result};

// Field order here is the on-disk key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    scene_id: String,
    dt: f64,
    target: usize,
    agents: Vec<RawAgent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    id: String,
    history: Vec<(f64, f64, u8)>,
    future: Option<Vec<(f64, f64)>>,
}

impl From<&Scene> for RawScene {
    fn from(s: &Scene) -> Self {
        RawScene {
            scene_id: s.scene_id.clone(),
            dt: s.dt,
            target: s.target,
            agents: s
                .agents
                .iter()
                .map(|a| RawAgent {
                    id: a.id.clone(),
                    history: a.history.iter().map(|p| (p.x, p.y, u8::from(p.valid))).collect(),
                    future: a.future.as_ref().map(|f| f.iter().map(|p| (p[0], p[1])).collect()),
                })
                .collect(),
        }
    }
}

fn validate(raw: RawScene, cfg: &SceneConfig) -> std::result::Result<Scene, String> {
    if !(raw.dt.is_finite() && raw.dt > 0.0) {
        return Err(format!("dt must be positive, got {}", raw.dt));
    }
    if raw.agents.is_empty() {
        return Err("scene has no agents".into());
    }
    if raw.target >= raw.agents.len() {
        return Err(format!("target {} out of range for {} agents", raw.target, raw.agents.len()));
    }
    let mut agents = Vec::with_capacity(raw.agents.len());
    let mut ids = std::collections::HashSet::new();
    for a in raw.agents {
        if !ids.insert(a.id.clone()) {
            return Err(format!("duplicate agent id {:?}", a.id));
        }
        if a.history.len() != cfg.history_steps {
            return Err(format!(
                "agent {:?}: history has {} entries, expected T_h={}",
                a.id,
                a.history.len(),
                cfg.history_steps
            ));
        }
        let mut history = Vec::with_capacity(a.history.len());
        for (t, &(x, y, v)) in a.history.iter().enumerate() {
            if v > 1 {
                return Err(format!("agent {:?}: valid flag at step {t} must be 0 or 1", a.id));
            }
            if v == 1 && !(x.is_finite() && y.is_finite()) {
                return Err(format!("agent {:?}: non-finite position at step {t}", a.id));
            }
            history.push(HistoryPoint { x, y, valid: v == 1 });
        }
        let future = match a.future {
            None => None,
            Some(f) => {
                if f.len() != cfg.future_steps {
                    return Err(format!(
                        "agent {:?}: future has {} entries, expected T_f={}",
                        a.id,
                        f.len(),
                        cfg.future_steps
                    ));
                }
                if f.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
                    return Err(format!("agent {:?}: non-finite future position", a.id));
                }
                Some(f.into_iter().map(|(x, y)| [x, y]).collect())
            }
        };
        agents.push(AgentTrack {
            id: a.id,
            history,
            future,
        });
    }
    if !agents[raw.target].observed_now() {
        return Err(format!("target agent {:?} is not observed at t=0", agents[raw.target].id));
    }
    Ok(Scene {
        scene_id: raw.scene_id,
        dt: raw.dt,
        target: raw.target,
        agents,
    })
}

/// Parses JSON Lines scene text. `path` is used for error messages only.
pub fn parse_scenes(text: &str, path: &Path, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene = serde_json::from_str(line).map_err(|e| {
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
        let scene = validate(raw, cfg).map_err(|msg| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn parse_scene_file(path: &Path, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenes(&text, path, cfg)
}

/// Serializes scenes as JSON Lines with keys in schema order.
pub fn write_scenes<W: Write>(out: &mut W, scenes: &[Scene]) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *out, &RawScene::from(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_scene_file(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut buf = Vec::new();
    write_scenes(&mut buf, scenes).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_agent_scene() -> Scene {
        let history = (0..20)
            .map(|t| HistoryPoint::new(0.1 * t as f64 + 1.0 / 3.0, -2.5e-3 * t as f64))
            .collect();
        let future = (0..30).map(|t| [2.0 + 0.1 * t as f64, std::f64::consts::PI * t as f64]).collect();
        Scene {
            scene_id: "s0".into(),
            dt: 0.1,
            target: 0,
            agents: vec![AgentTrack {
                id: "a".into(),
                history,
                future: Some(future),
            }],
        }
    }

    #[test]
    fn empty_input_gives_no_scenes() {
        let cfg = SceneConfig::default();
        assert!(parse_scenes("", Path::new("x"), &cfg).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = one_agent_scene();
        let mut buf = Vec::new();
        write_scenes(&mut buf, std::slice::from_ref(&s)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed = parse_scenes(&text, Path::new("x"), &SceneConfig::default()).unwrap();
        assert_eq!(parsed, vec![s]);
    }

    #[test]
    fn writer_emits_keys_in_schema_order() {
        let mut buf = Vec::new();
        write_scenes(&mut buf, &[one_agent_scene()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let pos = |k: &str| text.find(k).unwrap();
        assert!(pos("\"scene_id\"") < pos("\"dt\""));
        assert!(pos("\"dt\"") < pos("\"target\""));
        assert!(pos("\"target\"") < pos("\"agents\""));
        assert!(pos("\"id\"") < pos("\"history\""));
        assert!(pos("\"history\"") < pos("\"future\""));
        assert!(text.contains(",1]"));
    }

    #[test]
    fn short_history_is_schema_error_naming_horizon() {
        let mut s = one_agent_scene();
        s.agents[0].history.pop();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let err = parse_scenes(&text, Path::new("f.jsonl"), &SceneConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Schema { line: 1, .. }), "{msg}");
        assert!(msg.contains("T_h=20"), "{msg}");
    }

    #[test]
    fn malformed_json_is_parse_error_with_line() {
        let good = {
            let mut buf = Vec::new();
            write_scenes(&mut buf, &[one_agent_scene()]).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let text = format!("{good}{{\"scene_id\": \n");
        let err = parse_scenes(&text, Path::new("f.jsonl"), &SceneConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn target_unobserved_now_is_schema_error() {
        let mut s = one_agent_scene();
        *s.agents[0].history.last_mut().unwrap() = HistoryPoint::invalid();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let err = parse_scenes(&text, Path::new("f"), &SceneConfig::default()).unwrap_err();
        assert!(err.to_string().contains("not observed at t=0"), "{err}");
    }

    #[test]
    fn bad_valid_flag_rejected() {
        let text = serde_json::to_string(&RawScene::from(&one_agent_scene()))
            .unwrap()
            .replacen(",1]", ",2]", 1);
        assert!(matches!(
            parse_scenes(&text, Path::new("f"), &SceneConfig::default()),
            Err(Error::Schema { .. })
        ));
    }
}
