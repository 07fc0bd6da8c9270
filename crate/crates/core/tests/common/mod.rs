//! Shared fixtures and straight-line reference implementations.
//!
//! The references here index raw `Vec<f64>` buffers directly and share no
//! code with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use swattn::rng::NormalStream;
use swattn::{seeded_random_tensor, AttentionConfig, BlockSelection, Normal, Scalar, Tensor};

pub struct Qkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

pub fn qkv<T: Scalar>(n_q: usize, n_k: usize, cfg: &AttentionConfig, seed: u64) -> Qkv<T> {
    let (hq, hkv, d) = (cfg.query_heads, cfg.kv_heads, cfg.head_dim);
    Qkv {
        q: seeded_random_tensor(&[n_q, hq, d], seed.wrapping_mul(3), Normal::STANDARD).unwrap(),
        k: seeded_random_tensor(&[n_k, hkv, d], seed.wrapping_mul(3) + 1, Normal::STANDARD).unwrap(),
        v: seeded_random_tensor(&[n_k, hkv, d], seed.wrapping_mul(3) + 2, Normal::STANDARD).unwrap(),
    }
}

pub fn heads(hq: usize, hkv: usize, d: usize) -> AttentionConfig {
    AttentionConfig::compact().with_heads(hq, hkv, d)
}

/// Uniform integers from a seeded stream.
pub struct Draw(NormalStream);

impl Draw {
    pub fn new(seed: u64) -> Self {
        Self(NormalStream::new(seed))
    }

    /// Uniform in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + ((self.0.next_uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
    }

    pub fn unit(&mut self) -> f64 {
        self.0.next_uniform()
    }
}

/// Random visible sets: the query's own block always, every other past
/// block with probability `density`.
pub fn random_selection(n_q: usize, n_k: usize, b: usize, groups: usize, density: f64, draw: &mut Draw) -> BlockSelection {
    let off = n_k - n_q;
    let mut sets = Vec::with_capacity(n_q * groups);
    for r in 0..n_q {
        let own = (off + r) / b;
        for _ in 0..groups {
            let mut set: Vec<u32> = (0..own as u32).filter(|_| draw.unit() < density).collect();
            set.push(own as u32);
            sets.push(set);
        }
    }
    BlockSelection::from_sets(b, n_k, groups, sets).unwrap()
}

/// Masked softmax attention with the mask given as a predicate on
/// `(row, kv_group, key)`. Returns `(output [n_q·h_q·d], lse [n_q·h_q])`.
#[allow(clippy::too_many_arguments)]
pub fn reference_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    hq: usize,
    hkv: usize,
    d: usize,
    visible: impl Fn(usize, usize, usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let g_size = hq / hkv;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n_q * hq * d];
    let mut lse = vec![0.0; n_q * hq];
    for i in 0..n_q {
        for h in 0..hq {
            let g = h / g_size;
            let mut logits = vec![f64::NEG_INFINITY; n_k];
            for j in 0..n_k {
                if visible(i, g, j) {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += q[(i * hq + h) * d + t] * k[(j * hkv + g) * d + t];
                    }
                    logits[j] = s * scale;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n_k {
                z += (logits[j] - mx).exp();
            }
            for j in 0..n_k {
                let p = (logits[j] - mx).exp() / z;
                for t in 0..d {
                    out[(i * hq + h) * d + t] += p * v[(j * hkv + g) * d + t];
                }
            }
            lse[i * hq + h] = mx + z.ln();
        }
    }
    (out, lse)
}

pub fn causal_reference(q: &[f64], k: &[f64], v: &[f64], n_q: usize, n_k: usize, cfg: &AttentionConfig) -> (Vec<f64>, Vec<f64>) {
    let off = n_k - n_q;
    reference_attention(q, k, v, n_q, n_k, cfg.query_heads, cfg.kv_heads, cfg.head_dim, |i, _, j| j <= off + i)
}

/// `max |a - b| / max(max |b|, 1)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Elementwise gradient agreement: `|a - n| ≤ max(rel · max(|a|, |n|), floor)`.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64, what: &str) {
    for (idx, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = (rel * a.abs().max(n.abs())).max(floor);
        assert!((a - n).abs() <= tol, "{what}[{idx}]: analytic {a} vs numeric {n}");
    }
}

/// Central differences of `f(x) = sum(forward(x) ⊙ d_out)` for every element of
/// the tensor at `which` (0 = Q, 1 = K, 2 = V).
pub fn numeric_grad(
    inputs: &Qkv<f64>,
    which: usize,
    step: f64,
    loss: impl Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> f64,
) -> Vec<f64> {
    let base = [&inputs.q, &inputs.k, &inputs.v][which].clone();
    (0..base.numel())
        .map(|idx| {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[idx] += delta;
                match which {
                    0 => loss(&t, &inputs.k, &inputs.v),
                    1 => loss(&inputs.q, &t, &inputs.v),
                    _ => loss(&inputs.q, &inputs.k, &t),
                }
            };
            (eval(step) - eval(-step)) / (2.0 * step)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
