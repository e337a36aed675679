//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward sweep. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and `backward` walks it once in
//! reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, strides, MatView, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// rhs shape is a suffix of lhs shape; repeats every `period` elements.
    Suffix { period: usize },
    /// rhs shape is lhs shape with trailing dims set to 1; each rhs value
    /// covers `inner` consecutive lhs values.
    Trailing { inner: usize },
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
            return Ok(Bcast::Suffix {
                period: rhs.iter().product(),
            });
        }
        if rhs.len() == lhs.len() {
            let keep = rhs.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
            if lhs[..keep] == rhs[..keep] {
                return Ok(Bcast::Trailing {
                    inner: lhs[keep..].iter().product(),
                });
            }
        }
        Err(Error::shape(op, lhs, rhs))
    }

    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix { period } => i % period,
            Bcast::Trailing { inner } => i / inner,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Softplus,
    Abs,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
struct HeadDims {
    batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    dh: usize,
}

impl HeadDims {
    fn d(&self) -> usize {
        self.heads * self.dh
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    HeadScores {
        q: Var,
        k: Var,
        dims: HeadDims,
        scale: T,
    },
    HeadMix {
        attn: Var,
        v: Var,
        dims: HeadDims,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    ClampMin {
        x: Var,
        min: T,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        x: Var,
        scale: T,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CumSum {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_width: usize,
        offset: usize,
        width: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        d: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Autodiff tape. One graph per forward/backward pass; it owns every
/// intermediate value it produced.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Mode::Eval, 0)
    }
}

impl<T: Real> Graph<T> {
    /// `seed` drives dropout masks; it has no effect in eval mode.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(a).data(),
            MatView::row_major(0, k),
            self.value(b).data(),
            MatView::row_major(0, n),
            T::zero(),
            &mut out,
            MatView::row_major(0, n),
        );
        let value = Tensor::from_parts(out_shape, out);
        self.push("matmul", value, Op::MatMul { a, b, rows, k, n }, &[a, b])
    }

    fn head_dims(&self, op: &'static str, q: Var, k: Var, heads: usize) -> Result<HeadDims> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape(op, sq, sk));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::arg(op, format!("width {} not divisible by {heads} heads", sq[2])));
        }
        Ok(HeadDims {
            batch: sq[0],
            lq: sq[1],
            lk: sk[1],
            heads,
            dh: sq[2] / heads,
        })
    }

    /// Per-head scaled dot products: `q[B, Lq, D]`, `k[B, Lk, D]` with the
    /// feature axis split into `heads` contiguous chunks gives
    /// `scale · q_h k_hᵀ` as `[B, heads, Lq, Lk]`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize, scale: T) -> Result<Var> {
        let dims = self.head_dims("head_scores", q, k, heads)?;
        let HeadDims { batch, lq, lk, dh, .. } = dims;
        let d = dims.d();
        let mut out = vec![T::zero(); batch * heads * lq * lk];
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    qd,
                    MatView::row_major(b * lq * d + h * dh, d),
                    kd,
                    MatView::row_major(b * lk * d + h * dh, d).t(),
                    T::zero(),
                    &mut out,
                    MatView::row_major((b * heads + h) * lq * lk, lk),
                );
            }
        }
        let value = Tensor::from_parts(vec![batch, heads, lq, lk], out);
        self.push("head_scores", value, Op::HeadScores { q, k, dims, scale }, &[q, k])
    }

    /// Applies per-head attention weights `[B, heads, Lq, Lk]` to values
    /// `v[B, Lk, D]`, concatenating heads back into `[B, Lq, D]`.
    pub fn head_mix(&mut self, attn: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(attn), self.shape(v));
        if sa.len() != 4 || sv.len() != 3 || sa[0] != sv[0] || sa[3] != sv[1] || sv[2] % sa[1] != 0 {
            return Err(Error::shape("head_mix", sa, sv));
        }
        let dims = HeadDims {
            batch: sa[0],
            lq: sa[2],
            lk: sa[3],
            heads: sa[1],
            dh: sv[2] / sa[1],
        };
        let HeadDims { batch, lq, lk, heads, dh } = dims;
        let d = dims.d();
        let mut out = vec![T::zero(); batch * lq * d];
        let (ad, vd) = (self.value(attn).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    ad,
                    MatView::row_major((b * heads + h) * lq * lk, lk),
                    vd,
                    MatView::row_major(b * lk * d + h * dh, d),
                    T::zero(),
                    &mut out,
                    MatView::row_major(b * lq * d + h * dh, d),
                );
            }
        }
        let value = Tensor::from_parts(vec![batch, lq, d], out);
        self.push("head_mix", value, Op::HeadMix { attn, v, dims }, &[attn, v])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match kind {
            Binary::Add => ad.iter().enumerate().map(|(i, &x)| x + bd[bc.map(i)]).collect(),
            Binary::Sub => ad.iter().enumerate().map(|(i, &x)| x - bd[bc.map(i)]).collect(),
            Binary::Mul => ad.iter().enumerate().map(|(i, &x)| x * bd[bc.map(i)]).collect(),
            Binary::Div => ad.iter().enumerate().map(|(i, &x)| x / bd[bc.map(i)]).collect(),
        };
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, value, Op::Binary { kind, a, b, bc }, &[a, b])
    }

    /// `a + b`; `b` may be a suffix of `a`'s shape or `a`'s shape with
    /// trailing ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Binary::Div, a, b)
    }

    fn unary(&mut self, name: &'static str, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Softplus => softplus,
            Unary::Abs => |v| v.abs(),
        };
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, Op::Unary { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect());
        self.push("scale", value, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v + c).collect());
        self.push("add_scalar", value, Op::AddScalar { x }, &[x])
    }

    /// `max(x, min)`; gradient flows only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v.max(min)).collect());
        self.push("clamp_min", value, Op::ClampMin { x, min }, &[x])
    }

    /// Writes `value` where `mask` is set. Masked positions pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: T) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape("masked_fill", xv.shape(), &[mask.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(
            "masked_fill",
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        )
    }

    /// Inverted dropout: in train mode zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg("dropout", format!("rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = T::lit(1.0 / (1.0 - p));
        let keep_scale: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep_scale).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { x, keep_scale }, &[x])
    }

    // ----- reductions and normalizers ------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::arg("softmax", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(src[base + a * inner]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    total += e;
                }
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / total;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum_all();
        self.push("sum", Tensor::scalar(total), Op::Sum { x, scale: T::one() }, &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let scale = T::one() / T::lit(xv.numel() as f64);
        let total = xv.sum_all() * scale;
        self.push("mean", Tensor::scalar(total), Op::Sum { x, scale }, &[x])
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::arg("sum_axis", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::from_parts(shape, out);
        self.push("sum_axis", value, Op::SumAxis { x, outer, len, inner }, &[x])
    }

    /// Running sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::arg("cumsum", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for a in 1..len {
                for i in 0..inner {
                    let prev = out[(o * len + a - 1) * inner + i];
                    out[(o * len + a) * inner + i] += prev;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("cumsum", value, Op::CumSum { x, outer, len, inner }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let rows = xv.numel() / d;
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let src = xv.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bta[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                d,
            },
            &[x, gamma, beta],
        )
    }

    // ----- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute", format!("{perm:?} for rank {rank}")));
        }
        let in_strides = strides(xv.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = xv.data();
        let mut out = Vec::with_capacity(src.len());
        for_each_strided(&out_shape, &src_strides, |off| out.push(src[off]));
        let value = Tensor::from_parts(out_shape, out);
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if a0 >= rank || a1 >= rank {
            return Err(Error::arg("transpose", format!("axes {a0},{a1} for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::arg("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut widths = Vec::with_capacity(xs.len());
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            let (_, len, inner) = split_axis(s, axis);
            widths.push(len * inner);
            axis_total += s[axis];
        }
        let (outer, _, _) = split_axis(&base, axis);
        let total_width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let value = Tensor::from_parts(shape, out);
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            xs,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::arg(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, axis_len, inner) = split_axis(xv.shape(), axis);
        let src_width = axis_len * inner;
        let offset = start * inner;
        let width = len * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[o * src_width + offset..o * src_width + offset + width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        self.push(
            "slice",
            value,
            Op::Slice {
                x,
                outer,
                src_width,
                offset,
                width,
            },
            &[x],
        )
    }

    /// Gathers entries of axis 0: output row `r` is input row `rows[r]`.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::arg("index_select", format!("rows {rows:?} for leading dim {n}")));
        }
        let row_len = xv.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&xv.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::from_parts(shape, out);
        self.push(
            "index_select",
            value,
            Op::IndexSelect {
                x,
                rows: rows.to_vec(),
                row_len,
            },
            &[x],
        )
    }

    // ----- backward ------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if self.wants(a) {
                    let ga = slot(grads, a, rows * k);
                    gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        gy,
                        MatView::row_major(0, n),
                        self.value(b).data(),
                        MatView::row_major(0, n).t(),
                        T::one(),
                        ga,
                        MatView::row_major(0, k),
                    );
                }
                if self.wants(b) {
                    let gb = slot(grads, b, k * n);
                    gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        self.value(a).data(),
                        MatView::row_major(0, k).t(),
                        gy,
                        MatView::row_major(0, n),
                        T::one(),
                        gb,
                        MatView::row_major(0, n),
                    );
                }
            }
            &Op::HeadScores { q, k, dims, scale } => {
                let HeadDims { batch, lq, lk, heads, dh } = dims;
                let d = dims.d();
                let (qd, kd) = (self.value(q).data(), self.value(k).data());
                for b in 0..batch {
                    for h in 0..heads {
                        let gs = MatView::row_major((b * heads + h) * lq * lk, lk);
                        let qv = MatView::row_major(b * lq * d + h * dh, d);
                        let kv = MatView::row_major(b * lk * d + h * dh, d);
                        if self.wants(q) {
                            let gq = slot(grads, q, batch * lq * d);
                            gemm(lq, lk, dh, scale, gy, gs, kd, kv, T::one(), gq, qv);
                        }
                        if self.wants(k) {
                            let gk = slot(grads, k, batch * lk * d);
                            gemm(lk, lq, dh, scale, gy, gs.t(), qd, qv, T::one(), gk, kv);
                        }
                    }
                }
            }
            &Op::HeadMix { attn, v, dims } => {
                let HeadDims { batch, lq, lk, heads, dh } = dims;
                let d = dims.d();
                let (ad, vd) = (self.value(attn).data(), self.value(v).data());
                for b in 0..batch {
                    for h in 0..heads {
                        let av = MatView::row_major((b * heads + h) * lq * lk, lk);
                        let vv = MatView::row_major(b * lk * d + h * dh, d);
                        let ov = MatView::row_major(b * lq * d + h * dh, d);
                        if self.wants(attn) {
                            let ga = slot(grads, attn, batch * heads * lq * lk);
                            gemm(lq, dh, lk, T::one(), gy, ov, vd, vv.t(), T::one(), ga, av);
                        }
                        if self.wants(v) {
                            let gv = slot(grads, v, batch * lk * d);
                            gemm(lk, lq, dh, T::one(), ad, av.t(), gy, ov, T::one(), gv, vv);
                        }
                    }
                }
            }
            &Op::Binary { kind, a, b, bc } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = slot(grads, a, ad.len());
                    match kind {
                        Binary::Add | Binary::Sub => add_into(ga, gy),
                        Binary::Mul => {
                            for (i, g) in ga.iter_mut().enumerate() {
                                *g += gy[i] * bd[bc.map(i)];
                            }
                        }
                        Binary::Div => {
                            for (i, g) in ga.iter_mut().enumerate() {
                                *g += gy[i] / bd[bc.map(i)];
                            }
                        }
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, bd.len());
                    for i in 0..gy.len() {
                        let j = bc.map(i);
                        gb[j] += match kind {
                            Binary::Add => gy[i],
                            Binary::Sub => -gy[i],
                            Binary::Mul => gy[i] * ad[i],
                            Binary::Div => -gy[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                }
            }
            &Op::Unary { kind, x } => {
                let xd = self.value(x).data();
                let gx = slot(grads, x, xd.len());
                for i in 0..gx.len() {
                    let (xi, yi) = (xd[i], y[i]);
                    gx[i] += gy[i]
                        * match kind {
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => yi,
                            Unary::Log => T::one() / xi,
                            Unary::Softplus => sigmoid(xi),
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                }
            }
            &Op::Scale { x, s } => {
                let gx = slot(grads, x, gy.len());
                for (g, &v) in gx.iter_mut().zip(gy) {
                    *g += v * s;
                }
            }
            &Op::AddScalar { x } => add_into(slot(grads, x, gy.len()), gy),
            &Op::ClampMin { x, min } => {
                let xd = self.value(x).data();
                let gx = slot(grads, x, gy.len());
                for i in 0..gx.len() {
                    if xd[i] > min {
                        gx[i] += gy[i];
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let gx = slot(grads, x, gy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += gy[base + a * inner] * y[base + a * inner];
                        }
                        for a in 0..len {
                            let idx = base + a * inner;
                            gx[idx] += y[idx] * (gy[idx] - dot);
                        }
                    }
                }
            }
            &Op::Sum { x, scale } => {
                let n = self.value(x).numel();
                let g = gy[0] * scale;
                for v in slot(grads, x, n).iter_mut() {
                    *v += g;
                }
            }
            &Op::SumAxis { x, outer, len, inner } => {
                let gx = slot(grads, x, outer * len * inner);
                for o in 0..outer {
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        add_into(dst, &gy[o * inner..(o + 1) * inner]);
                    }
                }
            }
            &Op::CumSum { x, outer, len, inner } => {
                let gx = slot(grads, x, gy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = T::zero();
                        for a in (0..len).rev() {
                            let idx = (o * len + a) * inner + i;
                            acc += gy[idx];
                            gx[idx] += acc;
                        }
                    }
                }
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if self.wants(v) {
                        let gx = slot(grads, v, outer * w);
                        for o in 0..*outer {
                            add_into(&mut gx[o * w..(o + 1) * w], &gy[o * total + off..o * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice {
                x,
                outer,
                src_width,
                offset,
                width,
            } => {
                let gx = slot(grads, x, outer * src_width);
                for o in 0..outer {
                    let dst = &mut gx[o * src_width + offset..o * src_width + offset + width];
                    add_into(dst, &gy[o * width..(o + 1) * width]);
                }
            }
            &Op::Reshape { x } => add_into(slot(grads, x, gy.len()), gy),
            Op::Permute { x, perm } => {
                let in_strides = strides(self.shape(*x));
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let gx = slot(grads, *x, gy.len());
                let mut k = 0;
                for_each_strided(node.value.shape(), &src_strides, |off| {
                    gx[off] += gy[k];
                    k += 1;
                });
            }
            Op::IndexSelect { x, rows, row_len } => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                for (r, &src) in rows.iter().enumerate() {
                    add_into(
                        &mut gx[src * row_len..(src + 1) * row_len],
                        &gy[r * row_len..(r + 1) * row_len],
                    );
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = slot(grads, *x, gy.len());
                for i in 0..gx.len() {
                    if !mask[i] {
                        gx[i] += gy[i];
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                let gx = slot(grads, *x, gy.len());
                for i in 0..gx.len() {
                    gx[i] += gy[i] * keep_scale[i];
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                d,
            } => {
                let d = *d;
                let rows = gy.len() / d;
                let g = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for r in 0..rows {
                        add_into(gb, &gy[r * d..(r + 1) * d]);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, gy.len());
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rows {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gy[r * d + j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = gy[r * d + j] * g[j];
                            let xh = xhat[r * d + j];
                            gx[r * d + j] += rstd[r] * inv_d * (T::lit(d as f64) * dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                }
            }
        }
    }
}

/// Mutable gradient buffer for `v`, zero-initialized on first touch.
fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// offset `Σ idx[i] * strides[i]`.
fn for_each_strided(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        f(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::default();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
        assert_eq!(g.shape(y), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::default();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_of_product_is_ones_times_bt() {
        let mut g = Graph::<f64>::default();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -3.0, 1.5]));
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        // ones[2x2] · bᵀ: each row is the row sums of b.
        assert_eq!(grads.get(a).unwrap().data(), &[-0.5, 2.25, -1.5, -0.5, 2.25, -1.5]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut g = Graph::<f64>::default();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.softmax(x, 1).unwrap();
        let yv = g.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|a| yv.at(&[o, a, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn masked_fill_writes_and_blocks_gradient() {
        let mut g = Graph::<f64>::default();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.masked_fill(x, &[false, true], -1e9).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1e9]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::default();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(g.exp(x).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::default();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bias = g.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let col = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let y = g.add(a, bias).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let y = g.mul(a, col).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 4.0, 5.0, 6.0]);
        let bad = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::default();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut g = Graph::<f64>::new(Mode::Eval, 1);
        let x = g.constant(Tensor::full(&[100], 1.0));
        let y = g.dropout(x, 0.1).unwrap();
        assert_eq!(x, y);
        let mut g = Graph::<f64>::new(Mode::Train, 1);
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn cumsum_values() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.cumsum(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 6.0, 4.0, 9.0, 15.0]);
    }
}
