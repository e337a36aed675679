//! Building blocks shared by the encoder, interaction and decoder stages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{BoundParams, Graph, ParamTree, Real, Tensor, Var};

/// Additive logit used for masked attention positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Creates parameters in a fixed order from one RNG stream.
pub(crate) struct ParamInit<'a, T: Real> {
    pub tree: &'a mut ParamTree<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> ParamInit<'_, T> {
    /// Uniform(±1/√fan_in) weight.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        self.tree.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn constant(&mut self, name: &str, len: usize, value: f64) -> Result<()> {
        self.tree.insert(name, Tensor::full(&[len], T::lit(value)))
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), fan_in, fan_out)?;
        self.constant(&format!("{prefix}.b"), fan_out, 0.0)
    }

    pub fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<()> {
        self.linear(&format!("{prefix}.0"), fan_in, hidden)?;
        self.linear(&format!("{prefix}.1"), hidden, fan_out)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gamma"), dim, 1.0)?;
        self.constant(&format!("{prefix}.beta"), dim, 0.0)
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `linear -> relu -> dropout -> linear`.
pub(crate) fn mlp<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.0"), x)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout)?;
    linear(g, p, &format!("{prefix}.1"), h)
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}

/// Multiplies `x[B, L, D]` by a 0/1 row mask over `(B, L)`. No-op when
/// every row is kept.
pub(crate) fn zero_rows<T: Real>(g: &mut Graph<T>, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&k| k) {
        return Ok(x);
    }
    let mut shape = g.shape(x).to_vec();
    *shape.last_mut().unwrap() = 1;
    let m = g.constant(Tensor::new(&shape, keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect())?);
    g.mul(x, m)
}

/// Output of [`attention`].
pub struct AttentionOut {
    /// `[B, Lq, D]` with heads concatenated.
    pub out: Var,
    /// `[B, heads, Lq, Lk]` softmax weights.
    pub weights: Var,
}

/// Multi-head scaled dot-product attention.
///
/// `key_valid` is `[B * Lk]`: invalid keys get a `-1e9` logit.
/// `query_valid` is `[B * Lq]`: rows that are invalid, or whose keys are all
/// invalid, produce zeros.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_valid: &[bool],
    query_valid: &[bool],
) -> Result<AttentionOut> {
    let (b, lq, d) = {
        let s = g.shape(q);
        (s[0], s[1], s[2])
    };
    let lk = g.shape(k)[1];
    let scale = T::lit(1.0 / ((d / heads) as f64).sqrt());
    let scores = g.head_scores(q, k, heads, scale)?;
    let scores = if key_valid.iter().all(|&v| v) {
        scores
    } else {
        let mut mask = Vec::with_capacity(b * heads * lq * lk);
        for bi in 0..b {
            let keys = &key_valid[bi * lk..(bi + 1) * lk];
            for _ in 0..heads * lq {
                mask.extend(keys.iter().map(|&v| !v));
            }
        }
        g.masked_fill(scores, &mask, T::lit(MASK_LOGIT))?
    };
    let weights = g.softmax(scores, 3)?;
    let out = g.head_mix(weights, v)?;
    let keep: Vec<bool> = (0..b * lq)
        .map(|r| {
            let bi = r / lq;
            query_valid[r] && key_valid[bi * lk..(bi + 1) * lk].iter().any(|&v| v)
        })
        .collect();
    let out = zero_rows(g, out, &keep)?;
    Ok(AttentionOut { out, weights })
}
