//! Block-sparse attention over selected key blocks.
//!
//! One worker owns one query token and all `G` heads of each KV group, so the
//! heads of a group walk the same block list. Inside the query's own block the
//! causal cut is applied token by token.

use std::ops::Range;

use rayon::prelude::*;

use crate::config::AttentionConfig;
use crate::counter::{OpCounter, Stage};
use crate::dense::{assemble, AttentionResult, Gradients};
use crate::error::{Error, Result};
use crate::layout::{Geometry, Heads};
use crate::scalar::{dot, softmax_scale, Scalar};
use crate::selection::BlockSelection;
use crate::tensor::Tensor;

/// Token-level view of a block selection: query `i` sees the union of its
/// selected blocks intersected with `[0, i]`.
#[derive(Clone, Copy, Debug)]
pub struct SparseMask<'a> {
    sel: &'a BlockSelection,
}

impl<'a> SparseMask<'a> {
    pub fn new(sel: &'a BlockSelection) -> Self {
        Self { sel }
    }

    /// Visible key ranges of `(row, group)`, ascending and disjoint.
    pub fn ranges(&self, row: usize, group: usize) -> impl Iterator<Item = Range<usize>> + 'a {
        let b = self.sel.block_size();
        let end = self.sel.position(row) + 1;
        self.sel
            .blocks(row, group)
            .iter()
            .map(move |&j| (j as usize * b)..((j as usize + 1) * b).min(end))
            .filter(|r| !r.is_empty())
    }

    pub fn visible_count(&self, row: usize, group: usize) -> usize {
        self.ranges(row, group).map(|r| r.len()).sum()
    }

    pub fn is_visible(&self, row: usize, group: usize, token: usize) -> bool {
        token <= self.sel.position(row)
            && self
                .sel
                .blocks(row, group)
                .binary_search(&((token / self.sel.block_size()) as u32))
                .is_ok()
    }
}

fn check_selection(sel: &BlockSelection, geom: &Geometry, cfg: &AttentionConfig) -> Result<()> {
    if sel.rows() != geom.n_q || sel.n_k() != geom.n_k || sel.groups() != geom.kv_heads {
        return Err(Error::ShapeMismatch {
            what: "block selection",
            expected: vec![geom.n_q, geom.n_k, geom.kv_heads],
            got: vec![sel.rows(), sel.n_k(), sel.groups()],
        });
    }
    if sel.block_size() != cfg.block_size {
        return Err(Error::InvalidArgument(format!(
            "selection uses block size {}, config says {}",
            sel.block_size(),
            cfg.block_size
        )));
    }
    Ok(())
}

pub fn sparse_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sel: &BlockSelection,
    cfg: &AttentionConfig,
) -> Result<AttentionResult<T>> {
    sparse_forward_counted(q, k, v, sel, cfg, &OpCounter::new())
}

pub fn sparse_forward_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sel: &BlockSelection,
    cfg: &AttentionConfig,
    ops: &OpCounter,
) -> Result<AttentionResult<T>> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    check_selection(sel, &geom, cfg)?;
    let rows = forward_rows(&geom, &Heads::new(q), &Heads::new(k), &Heads::new(v), sel, ops)?;
    assemble(&geom, rows)
}

/// Per-row `(output [h_q·d_h], lse [h_q])` in `f64`.
fn forward_rows(
    geom: &Geometry,
    qh: &Heads,
    kh: &Heads,
    vh: &Heads,
    sel: &BlockSelection,
    ops: &OpCounter,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = geom.head_dim;
    let g_size = geom.group_size;
    let scale = softmax_scale(d);
    let mask = SparseMask::new(sel);
    ops.note_scratch(g_size * sel.block_size());

    (0..geom.n_q)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0; geom.query_heads * d];
            let mut lse = vec![0.0; geom.query_heads];
            let mut tile = vec![0.0; g_size * sel.block_size()];
            let (mut macs, mut exps) = (0u64, 0u64);
            for g in 0..geom.kv_heads {
                let mut m = vec![f64::NEG_INFINITY; g_size];
                let mut l = vec![0.0; g_size];
                let acc = &mut out[g * g_size * d..(g + 1) * g_size * d];
                for keys in mask.ranges(row, g) {
                    let len = keys.len();
                    for hi in 0..g_size {
                        let qrow = qh.row(row, g * g_size + hi);
                        let s = &mut tile[hi * len..(hi + 1) * len];
                        for (x, j) in s.iter_mut().zip(keys.clone()) {
                            *x = dot(qrow, kh.row(j, g)) * scale;
                        }
                        let m_new = s.iter().copied().fold(m[hi], f64::max);
                        let alpha = (m[hi] - m_new).exp();
                        let o = &mut acc[hi * d..(hi + 1) * d];
                        for x in o.iter_mut() {
                            *x *= alpha;
                        }
                        let mut sum = 0.0;
                        for (&x, j) in s.iter().zip(keys.clone()) {
                            let p = (x - m_new).exp();
                            sum += p;
                            for (a, y) in o.iter_mut().zip(vh.row(j, g)) {
                                *a += p * y;
                            }
                        }
                        l[hi] = alpha * l[hi] + sum;
                        m[hi] = m_new;
                    }
                    macs += (g_size * len * 2 * d) as u64;
                    exps += (g_size * (len + 1)) as u64;
                }
                if l[0] == 0.0 {
                    return Err(Error::EmptyVisibleSet { row });
                }
                for hi in 0..g_size {
                    let inv = 1.0 / l[hi];
                    for x in &mut acc[hi * d..(hi + 1) * d] {
                        *x *= inv;
                    }
                    lse[g * g_size + hi] = m[hi] + l[hi].ln();
                }
            }
            ops.record(Stage::Sparse, macs, exps);
            Ok((out, lse))
        })
        .collect()
}

/// Ground truth for [`sparse_forward`]: build the dense boolean mask, then a
/// direct masked softmax per (row, head) over all keys.
pub fn masked_naive_oracle<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sel: &BlockSelection,
    cfg: &AttentionConfig,
) -> Result<AttentionResult<T>> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    check_selection(sel, &geom, cfg)?;
    let (qh, kh, vh) = (Heads::new(q), Heads::new(k), Heads::new(v));
    let d = geom.head_dim;
    let scale = softmax_scale(d);
    let b = sel.block_size();

    // mask[(row * h_kv + g) * n_k + j]
    let mut mask = vec![false; geom.n_q * geom.kv_heads * geom.n_k];
    for row in 0..geom.n_q {
        let pos = geom.position(row);
        for g in 0..geom.kv_heads {
            for &blk in sel.blocks(row, g) {
                for j in blk as usize * b..(blk as usize + 1) * b {
                    if j <= pos && j < geom.n_k {
                        mask[(row * geom.kv_heads + g) * geom.n_k + j] = true;
                    }
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(geom.n_q);
    for row in 0..geom.n_q {
        let mut out = vec![0.0; geom.query_heads * d];
        let mut lse = vec![0.0; geom.query_heads];
        for h in 0..geom.query_heads {
            let g = h / geom.group_size;
            let visible = &mask[(row * geom.kv_heads + g) * geom.n_k..][..geom.n_k];
            let logits: Vec<f64> = (0..geom.n_k)
                .map(|j| {
                    if visible[j] {
                        dot(qh.row(row, h), kh.row(j, g)) * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyVisibleSet { row });
            }
            let probs: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = probs.iter().sum();
            for (j, p) in probs.iter().enumerate() {
                if visible[j] {
                    for (o, x) in out[h * d..(h + 1) * d].iter_mut().zip(vh.row(j, g)) {
                        *o += p / sum * x;
                    }
                }
            }
            lse[h] = max + sum.ln();
        }
        rows.push((out, lse));
    }
    assemble(&geom, rows)
}

/// Gradients of `sum(O ⊙ dO)` through the masked softmax. Selection is
/// treated as fixed; keys outside every query's mask get exactly zero.
///
/// Probabilities are recomputed block by block from the forward
/// log-sum-exp. Each KV group is one worker that owns its `dK`/`dV` rows and
/// visits queries in ascending order, so results are bitwise reproducible.
pub fn sparse_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sel: &BlockSelection,
    d_out: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Gradients<T>> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    check_selection(sel, &geom, cfg)?;
    geom.check_output_grad(d_out)?;
    let (qh, kh, vh, doh) = (Heads::new(q), Heads::new(k), Heads::new(v), Heads::new(d_out));
    let forward = forward_rows(&geom, &qh, &kh, &vh, sel, &OpCounter::new())?;
    let mask = SparseMask::new(sel);
    let d = geom.head_dim;
    let g_size = geom.group_size;
    let scale = softmax_scale(d);

    // Per group: dq rows [n_q, G, d], dk and dv rows [n_k, d].
    let per_group: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..geom.kv_heads)
        .into_par_iter()
        .map(|g| {
            let mut dq = vec![0.0; geom.n_q * g_size * d];
            let mut dk = vec![0.0; geom.n_k * d];
            let mut dv = vec![0.0; geom.n_k * d];
            for row in 0..geom.n_q {
                let (out, lse) = &forward[row];
                for hi in 0..g_size {
                    let h = g * g_size + hi;
                    let qrow = qh.row(row, h);
                    let dorow = doh.row(row, h);
                    let delta = dot(dorow, &out[h * d..(h + 1) * d]);
                    let dq_row = &mut dq[(row * g_size + hi) * d..][..d];
                    for keys in mask.ranges(row, g) {
                        for j in keys {
                            let krow = kh.row(j, g);
                            let p = (dot(qrow, krow) * scale - lse[h]).exp();
                            let ds = p * (dot(dorow, vh.row(j, g)) - delta) * scale;
                            let (dk_j, dv_j) = (&mut dk[j * d..(j + 1) * d], &mut dv[j * d..(j + 1) * d]);
                            for t in 0..d {
                                dq_row[t] += ds * krow[t];
                                dk_j[t] += ds * qrow[t];
                                dv_j[t] += p * dorow[t];
                            }
                        }
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = vec![0.0; geom.n_q * geom.query_heads * d];
    let mut dk = vec![0.0; geom.n_k * geom.kv_heads * d];
    let mut dv = vec![0.0; geom.n_k * geom.kv_heads * d];
    for (g, (gq, gk, gv)) in per_group.into_iter().enumerate() {
        for row in 0..geom.n_q {
            let dst = (row * geom.query_heads + g * g_size) * d;
            dq[dst..dst + g_size * d].copy_from_slice(&gq[row * g_size * d..(row + 1) * g_size * d]);
        }
        for j in 0..geom.n_k {
            let dst = (j * geom.kv_heads + g) * d;
            dk[dst..dst + d].copy_from_slice(&gk[j * d..(j + 1) * d]);
            dv[dst..dst + d].copy_from_slice(&gv[j * d..(j + 1) * d]);
        }
    }
    Ok(Gradients {
        dq: Tensor::from_f64(q.shape(), &dq)?,
        dk: Tensor::from_f64(k.shape(), &dk)?,
        dv: Tensor::from_f64(v.shape(), &dv)?,
    })
}
