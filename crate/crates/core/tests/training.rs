//! Optimization loop: determinism, divergence handling, checkpoints.

use trajcast::eval::{evaluate, MetricMode};
use trajcast::model::{Model, ModelConfig};
use trajcast::scene::{generate_synthetic, normalize, NormalizedScene, SceneConfig, SyntheticConfig};
use trajcast::training::{train, Supervision, TrainConfig, BEST_DIR, LAST_DIR, LOG_FILE, LOG_HEADER};

fn small() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            hidden: 16,
            heads: 2,
            lstm_layers: 1,
            spatial_layers: 1,
            temporal_layers: 1,
            modes: 3,
            future_steps: 6,
            ..Default::default()
        },
        batch_size: 4,
        lr: 1e-3,
        epochs: 3,
        ..Default::default()
    }
}

fn data(seed: u64, n: usize) -> Vec<NormalizedScene> {
    let cfg = SyntheticConfig {
        n_scenes: n,
        agents: (1, 4),
        horizon: SceneConfig {
            dt: 0.1,
            history_steps: 8,
            future_steps: 6,
        },
        ..Default::default()
    };
    generate_synthetic(seed, &cfg).iter().map(normalize).collect()
}

fn run(cfg: &TrainConfig) -> (Model<f32>, Vec<String>) {
    let mut model = Model::<f32>::init(cfg.model, cfg.seed).unwrap();
    let out = train(&mut model, &data(1, 10), &data(2, 4), cfg, None, |_| {}).unwrap();
    assert!(out.diverged.is_none());
    (model, out.epochs.iter().map(|e| e.csv_row()).collect())
}

#[test]
fn thread_count_does_not_change_results() {
    let one = run(&small());
    let again = run(&small());
    let three = run(&TrainConfig { threads: 3, ..small() });
    assert_eq!(one.1, again.1);
    assert_eq!(one.1, three.1);
    for ((n, a), (_, b)) in one.0.params.iter().zip(three.0.params.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn loss_decreases_on_a_small_set() {
    let cfg = TrainConfig {
        epochs: 30,
        model: ModelConfig { dropout: 0.0, ..small().model },
        ..small()
    };
    let (_, log) = run(&cfg);
    let loss = |row: &String| row.split(',').nth(3).unwrap().parse::<f64>().unwrap();
    assert!(loss(log.last().unwrap()) < loss(&log[0]));
}

#[test]
fn non_finite_parameters_stop_training_without_an_update() {
    let cfg = small();
    let mut model = Model::<f32>::init(cfg.model, 0).unwrap();
    let name = model.params.names().next().unwrap().to_string();
    model.params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let before = model.params.clone();
    let out = train(&mut model, &data(1, 6), &[], &cfg, None, |_| {}).unwrap();
    assert!(out.diverged.is_some());
    assert_eq!(out.steps, 0);
    for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoints_and_log_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let mut model = Model::<f32>::init(cfg.model, 0).unwrap();
    let val = data(2, 4);
    train(&mut model, &data(1, 8), &val, &cfg, Some(dir.path()), |_| {}).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(log.lines().count(), 1 + cfg.epochs);
    let last = Model::<f32>::load(&dir.path().join(LAST_DIR)).unwrap();
    assert_eq!(last.params, model.params);
    let best = Model::<f32>::load(&dir.path().join(BEST_DIR)).unwrap();
    let a = evaluate(&best, &val, Supervision::AllLabeled, MetricMode::PerAgent).unwrap();
    assert!(a.min_fde.is_finite());
}

#[test]
fn mirrored_training_stays_deterministic() {
    let cfg = TrainConfig {
        mirror_augment: true,
        ..small()
    };
    assert_eq!(run(&cfg).1, run(&TrainConfig { threads: 2, ..cfg }).1);
}
