//! Parameter-free block representation.
//!
//! 1. Keys are mean-pooled over sliding windows (`length`, `stride`).
//! 2. Each query head scores the pooled keys with a causal softmax; the
//!    scores of the `G` heads sharing a KV head are summed.
//! 3. The summed scores are max-pooled (`l`, `s`) into one score per
//!    selection block.
//!
//! A pooled entry is visible to a query only when its whole window ends at
//! or before the query position. With `l_C1 = B/2`, `s_C1 = B/4`, `l = 5`,
//! `s = 4`, block score `j` is the maximum over pooled windows starting at
//! tokens `jB, jB + B/4, ..., jB + B`, i.e. over tokens `[jB, jB + B + l_C1)`.

use rayon::prelude::*;

use crate::config::AttentionConfig;
use crate::counter::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::layout::{Geometry, Heads};
use crate::scalar::{dot, softmax_scale, Scalar};
use crate::tensor::Tensor;

/// Mean-pooled keys `[m, h_kv, d_h]`, one entry per complete window.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedKeys<T> {
    pub keys: Tensor<T>,
    pub pool_length: usize,
    pub pool_stride: usize,
    /// Position of the last token of each window.
    pub span_end: Vec<usize>,
    /// Length of the key sequence that was pooled.
    pub source_len: usize,
}

impl<T: Scalar> CompressedKeys<T> {
    pub fn len(&self) -> usize {
        self.span_end.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span_end.is_empty()
    }

    /// Entries whose window lies entirely at or before `position`.
    pub fn visible_at(&self, position: usize) -> usize {
        visible_entries(position, self.pool_length, self.pool_stride, self.len())
    }

    /// Number of windows of `length` tokens at `stride` that fit in `n` tokens.
    pub fn entry_count(n: usize, length: usize, stride: usize) -> usize {
        if n >= length {
            (n - length) / stride + 1
        } else {
            0
        }
    }
}

#[inline]
pub(crate) fn visible_entries(position: usize, length: usize, stride: usize, total: usize) -> usize {
    CompressedKeys::<f64>::entry_count(position + 1, length, stride).min(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    /// Per-query-head softmax over pooled keys of the given window.
    Compressed { pool_length: usize, pool_stride: usize },
    /// Per-KV-group sum of per-head scores.
    Shared,
    /// Max-pooled shared scores, one column per selection block.
    Block,
}

/// Scores laid out `[rows, planes, cols]`: rows are query tokens, planes are
/// heads (per-head kinds) or KV groups, columns are pooled entries or blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor<f64>,
    pub kind: ScoreKind,
    /// Absolute position of row 0.
    pub q_offset: usize,
    /// Rows for which no pooled entry was visible; their scores are all zero.
    pub empty_rows: Vec<bool>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn planes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.scores.shape()[2]
    }

    #[inline]
    pub fn row(&self, row: usize, plane: usize) -> &[f64] {
        let cols = self.cols();
        let start = (row * self.planes() + plane) * cols;
        &self.scores.data()[start..start + cols]
    }

    pub(crate) fn from_parts(
        rows: usize,
        planes: usize,
        cols: usize,
        data: Vec<f64>,
        kind: ScoreKind,
        q_offset: usize,
        empty_rows: Vec<bool>,
    ) -> Result<Self> {
        Ok(Self {
            scores: Tensor::new([rows, planes, cols], data)?,
            kind,
            q_offset,
            empty_rows,
        })
    }
}

pub fn mean_pool_keys<T: Scalar>(k: &Tensor<T>, length: usize, stride: usize) -> Result<CompressedKeys<T>> {
    mean_pool_keys_counted(k, length, stride, &OpCounter::new())
}

pub fn mean_pool_keys_counted<T: Scalar>(
    k: &Tensor<T>,
    length: usize,
    stride: usize,
    ops: &OpCounter,
) -> Result<CompressedKeys<T>> {
    if stride == 0 || length < stride {
        return Err(Error::InvalidArgument(format!(
            "pooling needs length >= stride >= 1, got length {length} stride {stride}"
        )));
    }
    if k.rank() != 3 {
        return Err(Error::ShapeMismatch {
            what: "keys",
            expected: vec![0, 0, 0],
            got: k.shape().to_vec(),
        });
    }
    let [n, h_kv, d] = [k.shape()[0], k.shape()[1], k.shape()[2]];
    let m = CompressedKeys::<T>::entry_count(n, length, stride);
    let kh = Heads::new(k);
    let inv = 1.0 / length as f64;
    let mut pooled = vec![0.0; m * h_kv * d];
    pooled
        .par_chunks_mut(h_kv * d)
        .enumerate()
        .for_each(|(e, entry)| {
            let start = e * stride;
            for g in 0..h_kv {
                let out = &mut entry[g * d..(g + 1) * d];
                for tok in start..start + length {
                    for (o, x) in out.iter_mut().zip(kh.row(tok, g)) {
                        *o += x;
                    }
                }
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
        });
    ops.record(Stage::Pool, (m * h_kv * d * length) as u64, 0);
    Ok(CompressedKeys {
        keys: Tensor::from_f64([m, h_kv, d], &pooled)?,
        pool_length: length,
        pool_stride: stride,
        span_end: (0..m).map(|e| e * stride + length - 1).collect(),
        source_len: n,
    })
}

/// Logit scale for compressed-key scores.
pub fn compressed_scale(cfg: &AttentionConfig) -> f64 {
    if cfg.scale_compressed {
        softmax_scale(cfg.head_dim)
    } else {
        1.0
    }
}

pub fn compressed_scores<T: Scalar>(
    q: &Tensor<T>,
    ck: &CompressedKeys<T>,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<ScoreMatrix> {
    compressed_scores_counted(q, ck, cfg, causal, &OpCounter::new())
}

pub fn compressed_scores_counted<T: Scalar>(
    q: &Tensor<T>,
    ck: &CompressedKeys<T>,
    cfg: &AttentionConfig,
    causal: bool,
    ops: &OpCounter,
) -> Result<ScoreMatrix> {
    let geom = Geometry::from_queries(q, ck.source_len, cfg)?;
    check_compressed(ck, &geom)?;
    let m = ck.len();
    let qh = Heads::new(q);
    let kh = Heads::new(&ck.keys);
    let scale = compressed_scale(cfg);
    let h_q = geom.query_heads;

    let mut data = vec![0.0; geom.n_q * h_q * m];
    let mut empty = vec![m == 0; geom.n_q];
    if m == 0 {
        return ScoreMatrix::from_parts(
            geom.n_q,
            h_q,
            0,
            data,
            ScoreKind::Compressed {
                pool_length: ck.pool_length,
                pool_stride: ck.pool_stride,
            },
            geom.q_offset(),
            empty,
        );
    }
    let work: u64 = data
        .par_chunks_mut(h_q * m)
        .zip(empty.par_iter_mut())
        .enumerate()
        .map(|(row, (out, is_empty))| {
            let visible = if causal { ck.visible_at(geom.position(row)) } else { m };
            if visible == 0 {
                *is_empty = true;
                return 0;
            }
            for h in 0..h_q {
                let g = h / geom.group_size;
                let s = &mut out[h * m..h * m + visible];
                for (e, x) in s.iter_mut().enumerate() {
                    *x = dot(qh.row(row, h), kh.row(e, g)) * scale;
                }
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in s.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in s.iter_mut() {
                    *x /= sum;
                }
            }
            (visible * h_q) as u64
        })
        .sum();
    ops.record(Stage::ScorePass, work * geom.head_dim as u64, work);
    ScoreMatrix::from_parts(
        geom.n_q,
        h_q,
        m,
        data,
        ScoreKind::Compressed {
            pool_length: ck.pool_length,
            pool_stride: ck.pool_stride,
        },
        geom.q_offset(),
        empty,
    )
}

pub(crate) fn check_compressed<T: Scalar>(ck: &CompressedKeys<T>, geom: &Geometry) -> Result<()> {
    let expected = [ck.len(), geom.kv_heads, geom.head_dim];
    if ck.keys.shape() != expected {
        return Err(Error::ShapeMismatch {
            what: "compressed keys",
            expected: expected.to_vec(),
            got: ck.keys.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sum the per-head score planes of each group of `group_size` heads.
pub fn head_group_sum(scores: &ScoreMatrix, group_size: usize) -> Result<ScoreMatrix> {
    if !matches!(scores.kind, ScoreKind::Compressed { .. }) {
        return Err(Error::InvalidArgument(format!(
            "head-group summation needs per-head scores, got {:?}",
            scores.kind
        )));
    }
    let heads = scores.planes();
    if group_size == 0 || !heads.is_multiple_of(group_size) {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads cannot be split into groups of {group_size}"
        )));
    }
    let groups = heads / group_size;
    let cols = scores.cols();
    let mut data = vec![0.0; scores.rows() * groups * cols];
    for row in 0..scores.rows() {
        for g in 0..groups {
            let out = &mut data[(row * groups + g) * cols..][..cols];
            for h in g * group_size..(g + 1) * group_size {
                for (o, x) in out.iter_mut().zip(scores.row(row, h)) {
                    *o += x;
                }
            }
        }
    }
    ScoreMatrix::from_parts(
        scores.rows(),
        groups,
        cols,
        data,
        ScoreKind::Shared,
        scores.q_offset,
        scores.empty_rows.clone(),
    )
}

/// Column `j` of the result is the maximum of columns `[j·s, j·s + l)`,
/// truncated at the right edge; there are `ceil(cols / s)` result columns.
pub fn max_pool_scores(scores: &ScoreMatrix, length: usize, stride: usize) -> Result<ScoreMatrix> {
    if length == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "max-pool needs positive length and stride, got {length} and {stride}"
        )));
    }
    let cols = scores.cols();
    let out_cols = cols.div_ceil(stride);
    let planes = scores.planes();
    let mut data = Vec::with_capacity(scores.rows() * planes * out_cols);
    for row in 0..scores.rows() {
        for p in 0..planes {
            let src = scores.row(row, p);
            for j in 0..out_cols {
                let lo = j * stride;
                let hi = (lo + length).min(cols);
                data.push(src[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    ScoreMatrix::from_parts(
        scores.rows(),
        planes,
        out_cols,
        data,
        ScoreKind::Block,
        scores.q_offset,
        scores.empty_rows.clone(),
    )
}
