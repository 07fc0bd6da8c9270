//! Grouped-query dense attention.
//!
//! [`naive_gqa_forward`] evaluates `softmax(Q K^T / sqrt(d_h)) V` one query
//! row at a time with the full logit row in memory. [`tiled_gqa_forward`]
//! streams key tiles through an online softmax and never holds more than a
//! `tile_q × tile_k` score tile per worker.

use rayon::prelude::*;

use crate::config::AttentionConfig;
use crate::counter::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::layout::{Geometry, Heads};
use crate::scalar::{dot, softmax_scale, Scalar};
use crate::tensor::Tensor;

/// Attention output `[n_q, h_q, d_h]` and natural-log normaliser `[n_q, h_q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T> {
    pub output: Tensor<T>,
    pub lse: Tensor<T>,
}

/// Gradients of `sum(O ⊙ dO)` with respect to the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiles {
    pub query: usize,
    pub key: usize,
}

impl Tiles {
    pub const fn new(query: usize, key: usize) -> Self {
        Self { query, key }
    }

    fn check(self) -> Result<()> {
        if self.query == 0 || self.key == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile sizes must be positive, got {}x{}",
                self.query, self.key
            )));
        }
        Ok(())
    }
}

impl Default for Tiles {
    fn default() -> Self {
        Self::new(64, 64)
    }
}

pub fn naive_gqa_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
) -> Result<AttentionResult<T>> {
    naive_gqa_forward_counted(q, k, v, causal, cfg, &OpCounter::new())
}

pub fn naive_gqa_forward_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
    ops: &OpCounter,
) -> Result<AttentionResult<T>> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    let (qh, kh, vh) = (Heads::new(q), Heads::new(k), Heads::new(v));
    let d = geom.head_dim;
    let scale = softmax_scale(d);

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..geom.n_q)
        .into_par_iter()
        .map(|row| {
            let visible = geom.visible_len(row, causal);
            let mut out = vec![0.0; geom.query_heads * d];
            let mut lse = vec![0.0; geom.query_heads];
            let mut logits = vec![0.0; visible];
            for h in 0..geom.query_heads {
                let g = h / geom.group_size;
                let qrow = qh.row(row, h);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = dot(qrow, kh.row(j, g)) * scale;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let o = &mut out[h * d..(h + 1) * d];
                for (j, &p) in logits.iter().enumerate() {
                    for (acc, x) in o.iter_mut().zip(vh.row(j, g)) {
                        *acc += p * x;
                    }
                }
                for acc in o.iter_mut() {
                    *acc /= sum;
                }
                lse[h] = max + sum.ln();
            }
            let pairs = (visible * geom.query_heads) as u64;
            ops.record(Stage::Dense, pairs * 2 * d as u64, pairs);
            (out, lse)
        })
        .collect();

    assemble(&geom, rows)
}

/// Softmax probabilities of one `(row, head)` pair over its visible keys,
/// computed the same way as [`naive_gqa_forward`].
pub fn naive_probability_row<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
    row: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let geom = Geometry::from_queries(q, k.shape()[0], cfg)?;
    if row >= geom.n_q || head >= geom.query_heads {
        return Err(Error::InvalidArgument(format!("no query row {row} head {head}")));
    }
    Ok(probability_row(&geom, &Heads::new(q), &Heads::new(k), causal, row, head))
}

/// Full probability tensor `[n_q, h_q, n_k]`, zero at masked keys.
pub fn naive_probabilities<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
) -> Result<Tensor<f64>> {
    let geom = Geometry::from_queries(q, k.shape()[0], cfg)?;
    let (qh, kh) = (Heads::new(q), Heads::new(k));
    let mut data = vec![0.0; geom.n_q * geom.query_heads * geom.n_k];
    data.par_chunks_mut(geom.n_k).enumerate().for_each(|(i, out)| {
        let p = probability_row(&geom, &qh, &kh, causal, i / geom.query_heads, i % geom.query_heads);
        out[..p.len()].copy_from_slice(&p);
    });
    Tensor::new([geom.n_q, geom.query_heads, geom.n_k], data)
}

fn probability_row(geom: &Geometry, qh: &Heads, kh: &Heads, causal: bool, row: usize, head: usize) -> Vec<f64> {
    let scale = softmax_scale(geom.head_dim);
    let g = head / geom.group_size;
    let logits: Vec<f64> = (0..geom.visible_len(row, causal))
        .map(|j| dot(qh.row(row, head), kh.row(j, g)) * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn tiled_gqa_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
    tiles: Tiles,
) -> Result<AttentionResult<T>> {
    tiled_gqa_forward_counted(q, k, v, causal, cfg, tiles, &OpCounter::new())
}

pub fn tiled_gqa_forward_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
    tiles: Tiles,
    ops: &OpCounter,
) -> Result<AttentionResult<T>> {
    tiles.check()?;
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    let (qh, kh, vh) = (Heads::new(q), Heads::new(k), Heads::new(v));
    let d = geom.head_dim;
    let scale = softmax_scale(d);
    let q_tiles = geom.n_q.div_ceil(tiles.query);
    let k_tiles = geom.n_k.div_ceil(tiles.key);

    // One work item per (head, query tile); each owns a disjoint output block.
    let blocks: Vec<TileOutput> = (0..geom.query_heads * q_tiles)
        .into_par_iter()
        .map(|item| {
            let (h, qt) = (item / q_tiles, item % q_tiles);
            let g = h / geom.group_size;
            let r0 = qt * tiles.query;
            let rows = tiles.query.min(geom.n_q - r0);
            let last_visible = geom.visible_len(r0 + rows - 1, causal);

            let mut m = vec![f64::NEG_INFINITY; rows];
            let mut l = vec![0.0; rows];
            let mut acc = vec![0.0; rows * d];
            let mut scores = vec![f64::NEG_INFINITY; tiles.query * tiles.key];
            ops.note_scratch(scores.len());
            let (mut macs, mut exps) = (0u64, 0u64);

            for kt in 0..k_tiles {
                let c0 = kt * tiles.key;
                if c0 >= last_visible {
                    break;
                }
                let cols = tiles.key.min(geom.n_k - c0);
                for r in 0..rows {
                    let visible = geom.visible_len(r0 + r, causal);
                    let s = &mut scores[r * tiles.key..r * tiles.key + cols];
                    let qrow = qh.row(r0 + r, h);
                    let mut row_max = f64::NEG_INFINITY;
                    for (c, slot) in s.iter_mut().enumerate() {
                        *slot = if c0 + c < visible {
                            let x = dot(qrow, kh.row(c0 + c, g)) * scale;
                            row_max = row_max.max(x);
                            x
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if row_max == f64::NEG_INFINITY {
                        continue;
                    }
                    let m_new = m[r].max(row_max);
                    let alpha = (m[r] - m_new).exp();
                    let o = &mut acc[r * d..(r + 1) * d];
                    for x in o.iter_mut() {
                        *x *= alpha;
                    }
                    let mut row_sum = 0.0;
                    let mut pairs = 0u64;
                    for (c, &x) in s.iter().enumerate() {
                        if x == f64::NEG_INFINITY {
                            continue;
                        }
                        let p = (x - m_new).exp();
                        row_sum += p;
                        for (a, y) in o.iter_mut().zip(vh.row(c0 + c, g)) {
                            *a += p * y;
                        }
                        pairs += 1;
                    }
                    l[r] = alpha * l[r] + row_sum;
                    m[r] = m_new;
                    macs += pairs * 2 * d as u64;
                    exps += pairs + 1;
                }
            }
            ops.record(Stage::Dense, macs, exps);

            for r in 0..rows {
                let inv = 1.0 / l[r];
                for x in &mut acc[r * d..(r + 1) * d] {
                    *x *= inv;
                }
            }
            let lse = m.iter().zip(&l).map(|(m, l)| m + l.ln()).collect();
            TileOutput { head: h, row0: r0, rows, out: acc, lse }
        })
        .collect();

    let mut output = vec![0.0; geom.n_q * geom.query_heads * d];
    let mut lse = vec![0.0; geom.n_q * geom.query_heads];
    for b in blocks {
        for r in 0..b.rows {
            let row = b.row0 + r;
            let dst = (row * geom.query_heads + b.head) * d;
            output[dst..dst + d].copy_from_slice(&b.out[r * d..(r + 1) * d]);
            lse[row * geom.query_heads + b.head] = b.lse[r];
        }
    }
    Ok(AttentionResult {
        output: Tensor::from_f64([geom.n_q, geom.query_heads, d], &output)?,
        lse: Tensor::from_f64([geom.n_q, geom.query_heads], &lse)?,
    })
}

struct TileOutput {
    head: usize,
    row0: usize,
    rows: usize,
    out: Vec<f64>,
    lse: Vec<f64>,
}

/// Counted MACs of dense attention over `n_q` trailing queries of an
/// `n_k`-token context, without running it: two `d_h`-length products per
/// visible (query, head, key) triple.
pub fn dense_mac_count(n_q: usize, n_k: usize, causal: bool, query_heads: usize, head_dim: usize) -> u64 {
    let pairs: u64 = if causal {
        let first = (n_k - n_q + 1) as u64;
        let last = n_k as u64;
        (first + last) * n_q as u64 / 2
    } else {
        (n_q * n_k) as u64
    };
    pairs * query_heads as u64 * 2 * head_dim as u64
}

/// Reverse mode of dense attention by direct materialisation of each
/// probability row.
pub fn naive_gqa_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d_out: &Tensor<T>,
    causal: bool,
    cfg: &AttentionConfig,
) -> Result<Gradients<T>> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    geom.check_output_grad(d_out)?;
    let (qh, kh, vh, doh) = (Heads::new(q), Heads::new(k), Heads::new(v), Heads::new(d_out));
    let d = geom.head_dim;
    let scale = softmax_scale(d);
    let mut dq = vec![0.0; geom.n_q * geom.query_heads * d];
    let mut dk = vec![0.0; geom.n_k * geom.kv_heads * d];
    let mut dv = vec![0.0; geom.n_k * geom.kv_heads * d];

    for row in 0..geom.n_q {
        let visible = geom.visible_len(row, causal);
        for h in 0..geom.query_heads {
            let g = h / geom.group_size;
            let qrow = qh.row(row, h);
            let dorow = doh.row(row, h);
            let logits: Vec<f64> = (0..visible).map(|j| dot(qrow, kh.row(j, g)) * scale).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            // dp_j = dO · V_j ; ds_j = p_j (dp_j - Σ_k p_k dp_k)
            let dp: Vec<f64> = (0..visible).map(|j| dot(dorow, vh.row(j, g))).collect();
            let mean_dp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let dq_row = &mut dq[(row * geom.query_heads + h) * d..][..d];
            for j in 0..visible {
                let ds = p[j] * (dp[j] - mean_dp) * scale;
                let kv = (j * geom.kv_heads + g) * d;
                for t in 0..d {
                    dq_row[t] += ds * kh.row(j, g)[t];
                    dk[kv + t] += ds * qrow[t];
                    dv[kv + t] += p[j] * dorow[t];
                }
            }
        }
    }
    Ok(Gradients {
        dq: Tensor::from_f64(q.shape(), &dq)?,
        dk: Tensor::from_f64(k.shape(), &dk)?,
        dv: Tensor::from_f64(v.shape(), &dv)?,
    })
}

pub(crate) fn assemble<T: Scalar>(geom: &Geometry, rows: Vec<(Vec<f64>, Vec<f64>)>) -> Result<AttentionResult<T>> {
    let mut output = Vec::with_capacity(geom.n_q * geom.query_heads * geom.head_dim);
    let mut lse = Vec::with_capacity(geom.n_q * geom.query_heads);
    for (o, l) in rows {
        output.extend(o.into_iter().map(T::narrow));
        lse.extend(l.into_iter().map(T::narrow));
    }
    Ok(AttentionResult {
        output: Tensor::new([geom.n_q, geom.query_heads, geom.head_dim], output)?,
        lse: Tensor::new([geom.n_q, geom.query_heads], lse)?,
    })
}
