//! Metrics and losses against brute-force and closed-form oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajcast::eval::{min_ade, min_fde, miss_rate, MetricMode, MISS_THRESHOLD};
use trajcast::numcore::{Graph, Tensor};
use trajcast::training::{best_mode, classification_loss, laplace_nll};

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-9;

/// `pred[k][n][t]` and `truth[n][t]` as nested vectors plus tensors.
struct Instance {
    pred: Vec<Vec<Vec<[f64; 2]>>>,
    truth: Vec<Vec<[f64; 2]>>,
    pred_t: Tensor<f64>,
    truth_t: Tensor<f64>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let (k, n, t) = (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..9));
    let mut pt = || [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
    let pred: Vec<Vec<Vec<[f64; 2]>>> = (0..k).map(|_| (0..n).map(|_| (0..t).map(|_| pt()).collect()).collect()).collect();
    let truth: Vec<Vec<[f64; 2]>> = (0..n).map(|_| (0..t).map(|_| pt()).collect()).collect();
    let flat_p: Vec<f64> = pred.iter().flatten().flatten().flatten().copied().collect();
    let flat_t: Vec<f64> = truth.iter().flatten().flatten().copied().collect();
    Instance {
        pred_t: Tensor::new(&[k, n, t, 2], flat_p).unwrap(),
        truth_t: Tensor::new(&[n, t, 2], flat_t).unwrap(),
        pred,
        truth,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn ade(p: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    p.iter().zip(y).map(|(&a, &b)| dist(a, b)).sum::<f64>() / p.len() as f64
}

fn fde(p: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    dist(*p.last().unwrap(), *y.last().unwrap())
}

type ErrorFn = fn(&[[f64; 2]], &[[f64; 2]]) -> f64;

/// Per-agent errors under the chosen selection rule.
fn oracle_errors(inst: &Instance, err: ErrorFn, shared_mode: bool) -> Vec<f64> {
    let n = inst.truth.len();
    if shared_mode {
        let totals: Vec<f64> = inst
            .pred
            .iter()
            .map(|mode| (0..n).map(|a| err(&mode[a], &inst.truth[a])).sum())
            .collect();
        let mut k_best = 0;
        for (k, &s) in totals.iter().enumerate() {
            if s < totals[k_best] {
                k_best = k;
            }
        }
        (0..n).map(|a| err(&inst.pred[k_best][a], &inst.truth[a])).collect()
    } else {
        (0..n)
            .map(|a| {
                inst.pred
                    .iter()
                    .map(|mode| err(&mode[a], &inst.truth[a]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn metrics_match_brute_force_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let inst = instance(&mut rng);
        for (mode, shared_mode) in [(MetricMode::PerAgent, false), (MetricMode::PaperLiteral, true)] {
            let a = mean(&oracle_errors(&inst, ade, shared_mode));
            let fdes = oracle_errors(&inst, fde, shared_mode);
            let f = mean(&fdes);
            let threshold = rng.random_range(0.5..4.0);
            let mr = fdes.iter().filter(|&&e| e >= threshold).count() as f64 / fdes.len() as f64;
            assert!((min_ade(&inst.pred_t, &inst.truth_t, mode).unwrap() - a).abs() < TOL);
            assert!((min_fde(&inst.pred_t, &inst.truth_t, mode).unwrap() - f).abs() < TOL);
            assert!((miss_rate(&inst.pred_t, &inst.truth_t, threshold, mode).unwrap() - mr).abs() < TOL);
        }
    }
}

#[test]
fn endpoint_error_equal_to_threshold_is_a_miss() {
    let pred = Tensor::from_f64(&[1, 1, 1, 2], &[MISS_THRESHOLD, 0.0]).unwrap();
    let truth = Tensor::from_f64(&[1, 1, 2], &[0.0, 0.0]).unwrap();
    assert_eq!(miss_rate(&pred, &truth, MISS_THRESHOLD, MetricMode::PerAgent).unwrap(), 1.0);
}

#[test]
fn best_mode_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let inst = instance(&mut rng);
        let got = best_mode(&inst.pred_t, &inst.truth_t).unwrap();
        for (a, &k_got) in got.iter().enumerate() {
            let sq = |k: usize| -> f64 {
                inst.pred[k][a]
                    .iter()
                    .zip(&inst.truth[a])
                    .map(|(p, y)| dist(*p, *y).powi(2))
                    .sum()
            };
            let k_best = (0..inst.pred.len()).fold(0, |b, k| if sq(k) < sq(b) { k } else { b });
            assert_eq!(k_got, k_best);
        }
    }
}

#[test]
fn laplace_nll_matches_log_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let (m, t) = (rng.random_range(1..5), rng.random_range(1..8));
        let len = m * t * 2;
        let mu: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..3.0)).collect();
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let oracle: f64 = (0..len)
            .map(|i| {
                let density = (-(x[i] - mu[i]).abs() / b[i]).exp() / (2.0 * b[i]);
                -density.ln()
            })
            .sum::<f64>()
            / (m * t) as f64;
        let mut g = Graph::<f64>::default();
        let shape = [m, t, 2];
        let vars = [&mu, &b, &x].map(|v| g.constant(Tensor::new(&shape, v.clone()).unwrap()));
        let l = laplace_nll(&mut g, vars[0], vars[1], vars[2]).unwrap();
        assert!((g.value(l).data()[0] - oracle).abs() < TOL);
    }
}

#[test]
fn classification_loss_matches_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let (m, k) = (rng.random_range(1..6), rng.random_range(1..8));
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / z).collect()
        };
        let pi: Vec<Vec<f64>> = (0..m).map(|_| row(&mut rng)).collect();
        let target: Vec<Vec<f64>> = (0..m).map(|_| row(&mut rng)).collect();
        let oracle = -pi
            .iter()
            .zip(&target)
            .map(|(p, q)| p.iter().zip(q).map(|(p, q)| q * p.ln()).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        let mut g = Graph::<f64>::default();
        let p = g.constant(Tensor::new(&[m, k], pi.concat()).unwrap());
        let q = g.constant(Tensor::new(&[m, k], target.concat()).unwrap());
        let l = classification_loss(&mut g, p, q).unwrap();
        assert!((g.value(l).data()[0] - oracle).abs() < TOL);
    }
}
