//! Whole-model gradient checks and winner-takes-all isolation, f64.

use trajcast::model::{Model, ModelConfig};
use trajcast::numcore::{gradcheck, BoundParams, Graph, Mode, Tensor, Var};
use trajcast::scene::{generate_synthetic, normalize, NormalizedScene, SceneConfig, SyntheticConfig};
use trajcast::training::{best_mode, classification_loss, laplace_nll, scene_loss, soft_targets, Supervision};
use trajcast::Result;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        modes: 2,
        future_steps: 3,
        dropout: 0.0,
        ..Default::default()
    }
}

fn tiny_scenes(seed: u64, n: usize) -> Vec<NormalizedScene> {
    let cfg = SyntheticConfig {
        n_scenes: n,
        agents: (2, 2),
        horizon: SceneConfig {
            dt: 0.1,
            history_steps: 4,
            future_steps: 3,
        },
        late_appearance_prob: 0.0,
        ..Default::default()
    };
    generate_synthetic(seed, &cfg).iter().map(normalize).collect()
}

/// Best modes and soft targets at the current parameters, all agents labeled.
fn frozen_targets(model: &Model<f64>, ns: &NormalizedScene) -> (Vec<usize>, Tensor<f64>, Tensor<f64>) {
    let fc = model.predict(ns).unwrap();
    let n = ns.num_agents();
    let t_f = fc.steps;
    let truth: Vec<f64> = (0..n)
        .flat_map(|a| ns.future_local[a].clone().unwrap().into_iter().flatten())
        .collect();
    let truth = Tensor::new(&[n, t_f, 2], truth).unwrap();
    let mu = fc.mu_tensor();
    (
        best_mode(&mu, &truth).unwrap(),
        soft_targets(&mu, &truth, 1.0).unwrap(),
        truth,
    )
}

/// `L_reg + L_cls` with the mode assignment and the classification
/// targets held fixed.
fn frozen_loss(
    model: &Model<f64>,
    ns: &NormalizedScene,
    frozen: &(Vec<usize>, Tensor<f64>, Tensor<f64>),
    g: &mut Graph<f64>,
    p: &BoundParams,
) -> Result<Var> {
    let fv = model.forward(g, p, ns)?;
    let (best, target, truth) = frozen;
    let s = g.shape(fv.mu).to_vec();
    let (k, n, t_f) = (s[0], s[1], s[2]);
    let rows: Vec<usize> = best.iter().enumerate().map(|(a, &kb)| kb * n + a).collect();
    let mu = g.reshape(fv.mu, &[k * n, t_f, 2])?;
    let b = g.reshape(fv.b, &[k * n, t_f, 2])?;
    let mu = g.index_select(mu, &rows)?;
    let b = g.index_select(b, &rows)?;
    let y = g.constant(truth.clone());
    let reg = laplace_nll(g, mu, b, y)?;
    let target = g.constant(target.clone());
    let cls = classification_loss(g, fv.pi, target)?;
    g.add(reg, cls)
}

#[test]
fn full_model_matches_finite_differences() {
    for (seed, ns) in tiny_scenes(5, 2).iter().enumerate() {
        let model = Model::<f64>::init(tiny_config(), seed as u64 + 3).unwrap();
        let frozen = frozen_targets(&model, ns);
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let r = gradcheck::check(&inputs, 1e-6, |g, vars| {
            let p = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars.iter().copied()));
            frozen_loss(&model, ns, &frozen, g, &p)
        })
        .unwrap();
        assert!(r.rel_err < 1e-3, "scene {seed}: rel err {}", r.rel_err);
    }
}

#[test]
fn frozen_loss_equals_training_loss_value() {
    let ns = &tiny_scenes(9, 1)[0];
    let model = Model::<f64>::init(tiny_config(), 1).unwrap();
    let frozen = frozen_targets(&model, ns);
    let mut g = Graph::new(Mode::Eval, 0);
    let p = model.params.bind(&mut g);
    let a = frozen_loss(&model, ns, &frozen, &mut g, &p).unwrap();
    let fv = model.forward(&mut g, &p, ns).unwrap();
    let b = scene_loss(&mut g, &fv, ns, Supervision::AllLabeled, 1.0).unwrap().unwrap();
    assert!((g.value(a).data()[0] - g.value(b.total).data()[0]).abs() < 1e-12);
}

#[test]
fn regression_gradient_reaches_only_the_winning_mode() {
    for (i, ns) in tiny_scenes(11, 4).iter().enumerate() {
        let cfg = ModelConfig {
            modes: 4,
            ..tiny_config()
        };
        let model = Model::<f64>::init(cfg, i as u64).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let p = model.params.bind(&mut g);
        let fv = model.forward(&mut g, &p, ns).unwrap();
        let loss = scene_loss(&mut g, &fv, ns, Supervision::AllLabeled, 1.0).unwrap().unwrap();
        let grads = g.backward(loss.reg).unwrap();
        let d_mu = grads.get(fv.mu).expect("mu receives gradient");
        let s = d_mu.shape().to_vec();
        let (k, n, t_f) = (s[0], s[1], s[2]);
        for (slot, &a) in loss.agents.iter().enumerate() {
            for mode in 0..k {
                let base = (mode * n + a) * t_f * 2;
                let block = &d_mu.data()[base..base + t_f * 2];
                if mode == loss.best_modes[slot] {
                    assert!(block.iter().any(|&v| v != 0.0));
                } else {
                    assert!(block.iter().all(|&v| v == 0.0), "mode {mode} agent {a}");
                }
            }
        }
    }
}
