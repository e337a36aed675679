//! Frame equivariance and padding-mask properties of the full model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajcast::model::{to_global, Model, ModelConfig};
use trajcast::numcore::Tensor;
use trajcast::scene::{generate_synthetic, normalize, NormalizedScene, SyntheticConfig};

fn model() -> Model<f64> {
    let cfg = ModelConfig {
        hidden: 32,
        heads: 4,
        ..Default::default()
    };
    Model::init(cfg, 7).unwrap()
}

fn scenes(seed: u64, n: usize) -> Vec<trajcast::scene::Scene> {
    let cfg = SyntheticConfig {
        n_scenes: n,
        agents: (2, 6),
        late_appearance_prob: 0.4,
        ..Default::default()
    };
    generate_synthetic(seed, &cfg)
}

#[test]
fn forecasts_move_rigidly_with_the_scene() {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scene in scenes(1, 10) {
        let angle = rng.random_range(-PI..PI);
        let shift = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
        let (s, c) = angle.sin_cos();
        let a = normalize(&scene);
        let b = normalize(&scene.transformed(angle, shift));
        let (fa, fb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
        let (ga, gb) = (to_global(&fa, &a.frames).unwrap(), to_global(&fb, &b.frames).unwrap());
        for (ta, tb) in ga.iter().flatten().flatten().zip(gb.iter().flatten().flatten()) {
            let moved = [c * ta[0] - s * ta[1] + shift[0], s * ta[0] + c * ta[1] + shift[1]];
            assert!((moved[0] - tb[0]).abs() <= 1e-4 && (moved[1] - tb[1]).abs() <= 1e-4);
        }
        for (pa, pb) in fa.pi.iter().zip(&fb.pi) {
            assert!((pa - pb).abs() <= 1e-6);
        }
    }
}

fn max_forecast_change(model: &Model<f64>, a: &NormalizedScene, b: &NormalizedScene, agents: usize) -> f64 {
    let (fa, fb) = (model.predict(a).unwrap(), model.predict(b).unwrap());
    let mut worst: f64 = 0.0;
    for n in 0..agents {
        for k in 0..fa.modes {
            for t in 0..fa.steps {
                let (p, q) = (fa.mu(k, n, t), fb.mu(k, n, t));
                worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
            }
            worst = worst.max((fa.pi(n, k) - fb.pi(n, k)).abs());
        }
    }
    worst
}

#[test]
fn phantom_agent_changes_nothing() {
    let model = model();
    for scene in scenes(2, 10) {
        let ns = normalize(&scene);
        let padded = ns.with_phantom_agent("phantom");
        assert!(max_forecast_change(&model, &ns, &padded, ns.num_agents()) <= 1e-6);
        // The phantom's own forecast is finite.
        let fc = model.predict(&padded).unwrap();
        assert!(fc.mu.iter().chain(&fc.pi).all(|v| v.is_finite()));
    }
}

#[test]
fn features_at_invalid_steps_are_ignored() {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut touched = 0;
    for scene in scenes(3, 20) {
        let ns = normalize(&scene);
        if ns.valid.iter().all(|&v| v) {
            continue;
        }
        let mut noisy = ns.clone();
        let mut data = noisy.features.data().to_vec();
        for (i, v) in ns.valid.iter().enumerate() {
            if !v {
                // All channels, including the validity indicator.
                for c in 0..3 {
                    data[i * 3 + c] = rng.random_range(-50.0..50.0);
                }
                touched += 1;
            }
        }
        noisy.features = Tensor::new(noisy.features.shape(), data).unwrap();
        assert!(max_forecast_change(&model, &ns, &noisy, ns.num_agents()) <= 1e-6);
    }
    assert!(touched > 0);
}

#[test]
fn agents_unobserved_now_do_not_affect_the_others() {
    let model = model();
    for scene in scenes(4, 5) {
        let base = normalize(&scene);
        let mut extended = scene.clone();
        let mut ghost = scene.agents[0].clone();
        ghost.id = "ghost".into();
        ghost.history.last_mut().unwrap().valid = false;
        extended.agents.push(ghost);
        let ext = normalize(&extended);
        assert_eq!(ext.num_agents(), base.num_agents());
        assert_eq!(max_forecast_change(&model, &base, &ext, base.num_agents()), 0.0);
    }
}
