//! Finite-difference checks of every differentiable op, f64.
//!
//! Each op output is contracted with a fixed random weight tensor so that
//! every output element contributes a distinct amount to the scalar.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajcast::numcore::{gradcheck, Graph, Tensor, Var};
use trajcast::Result;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-1, 1]` kept at least `gap` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor<f64> {
    let mut t = rnd(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink);
        }
    }
    t
}

fn check(
    seed: u64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> std::result::Result<(), TestCaseError> {
    let rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let r = gradcheck::check(inputs, H, |g, v| {
        let y = f(g, v)?;
        let shape = g.shape(y).to_vec();
        let w = g.constant(rnd(&mut rng.clone(), &shape, -1.0, 1.0));
        let p = g.mul(y, w)?;
        g.sum(p)
    })
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(r.rel_err < TOL, "rel err {} (max abs {})", r.rel_err, r.max_abs_err);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul(seed: u64, b in 1usize..4, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = [rnd(&mut r, &[b, m, k], -1.0, 1.0), rnd(&mut r, &[k, n], -1.0, 1.0)];
        check(seed, &x, |g, v| g.matmul(v[0], v[1]))?;
    }

    #[test]
    fn attention_products(seed: u64, b in 1usize..3, lq in 1usize..5, lk in 1usize..5, heads in 1usize..4, dh in 1usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * dh;
        let x = [rnd(&mut r, &[b, lq, d], -1.0, 1.0), rnd(&mut r, &[b, lk, d], -1.0, 1.0)];
        check(seed, &x, |g, v| g.head_scores(v[0], v[1], heads, 0.7))?;
        let x = [rnd(&mut r, &[b, heads, lq, lk], -1.0, 1.0), rnd(&mut r, &[b, lk, d], -1.0, 1.0)];
        check(seed, &x, |g, v| g.head_mix(v[0], v[1]))?;
    }

    #[test]
    fn binary_broadcasts(seed: u64, a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rnd(&mut r, &[a, b, c], -1.0, 1.0);
        for rhs_shape in [vec![a, b, c], vec![b, c], vec![c], vec![a, b, 1], vec![a, 1, 1]] {
            let y = rnd(&mut r, &rhs_shape, -1.0, 1.0);
            let pos = rnd(&mut r, &rhs_shape, 0.5, 2.0);
            check(seed, &[x.clone(), y.clone()], |g, v| g.add(v[0], v[1]))?;
            check(seed, &[x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]))?;
            check(seed, &[x.clone(), y], |g, v| g.mul(v[0], v[1]))?;
            check(seed, &[x.clone(), pos], |g, v| g.div(v[0], v[1]))?;
        }
    }

    #[test]
    fn unary(seed: u64, n in 1usize..6, m in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rnd(&mut r, &[n, m], -2.0, 2.0);
        let pos = rnd(&mut r, &[n, m], 0.2, 3.0);
        let kinked = away_from(&mut r, &[n, m], 0.0, 1e-3);
        check(seed, &[x.clone()], |g, v| g.sigmoid(v[0]))?;
        check(seed, &[x.clone()], |g, v| g.tanh(v[0]))?;
        check(seed, &[x.clone()], |g, v| g.exp(v[0]))?;
        check(seed, &[x.clone()], |g, v| g.softplus(v[0]))?;
        check(seed, &[pos], |g, v| g.log(v[0]))?;
        check(seed, &[kinked.clone()], |g, v| g.relu(v[0]))?;
        check(seed, &[kinked], |g, v| g.abs(v[0]))?;
        check(seed, &[away_from(&mut r, &[n, m], 0.1, 1e-3)], |g, v| g.clamp_min(v[0], 0.1))?;
        check(seed, &[x], |g, v| {
            let s = g.scale(v[0], -1.5)?;
            g.add_scalar(s, 0.25)
        })?;
    }

    #[test]
    fn reductions(seed: u64, a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rnd(&mut r, &[a, b, c], -1.0, 1.0);
        check(seed, &[x.clone()], |g, v| g.sum(v[0]))?;
        check(seed, &[x.clone()], |g, v| g.mean(v[0]))?;
        check(seed, &[x.clone()], |g, v| g.sum_axis(v[0], axis))?;
        check(seed, &[x.clone()], |g, v| g.cumsum(v[0], axis))?;
        check(seed, &[x], |g, v| g.softmax(v[0], axis))?;
    }

    #[test]
    fn layer_norm(seed: u64, rows in 1usize..5, d in 2usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = [rnd(&mut r, &[rows, d], -1.0, 1.0), rnd(&mut r, &[d], 0.5, 1.5), rnd(&mut r, &[d], -0.5, 0.5)];
        check(seed, &x, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    }

    #[test]
    fn masked_fill_then_softmax(seed: u64, rows in 1usize..5, cols in 2usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rnd(&mut r, &[rows, cols], -1.0, 1.0);
        // At least one open key per row.
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols != 0 && r.random::<bool>()).collect();
        check(seed, &[x], |g, v| {
            let m = g.masked_fill(v[0], &mask, -1e9)?;
            g.softmax(m, 1)
        })?;
    }

    #[test]
    fn shape_ops(seed: u64, a in 1usize..4, b in 1usize..4, c in 2usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rnd(&mut r, &[a, b, c], -1.0, 1.0);
        check(seed, &[x.clone()], |g, v| g.reshape(v[0], &[b, a * c]))?;
        check(seed, &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]))?;
        check(seed, &[x.clone()], |g, v| g.transpose(v[0], 0, 2))?;
        check(seed, &[x.clone()], |g, v| g.slice(v[0], 2, 1, c - 1))?;
        check(seed, &[x.clone(), rnd(&mut r, &[a, b, 1], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 2))?;
        let rows: Vec<usize> = (0..a + 2).map(|_| r.random_range(0..a)).collect();
        check(seed, &[x], |g, v| g.index_select(v[0], &rows))?;
    }
}
