//! Visible block sets and the fused shared-score kernel.
//!
//! For a query at position `i` in block `b = i / B` the visible set is
//!
//! ```text
//! I(i) = {0 .. N_init}  ∪  {b - N_local + 1 ..= b}  ∪  top-k(remaining)
//! ```
//!
//! where top-k ranks block scores among blocks outside the initial and
//! local sets that lie strictly before the local span. Ties go to the lower
//! block index. Each KV group selects independently; all `G` query heads of
//! a group share its set.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{
    check_compressed, compressed_scale, compressed_scores_counted, head_group_sum, max_pool_scores,
    mean_pool_keys_counted, CompressedKeys, ScoreKind, ScoreMatrix,
};
use crate::config::{validate_config, AttentionConfig};
use crate::counter::{OpCounter, Stage};
use crate::dense::Tiles;
use crate::error::{Error, Result};
use crate::layout::{Geometry, Heads};
use crate::scalar::{dot, Scalar};
use crate::tensor::{read_header, write_atomic, write_header, Tensor};

/// Precision-tag byte that marks a block-selection file.
pub const SELECTION_TAG: u8 = 0x10;

/// Sorted visible block indices per (query row, KV group), stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSelection {
    block_size: usize,
    n_k: usize,
    rows: usize,
    groups: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

/// How many blocks of a set came from each source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SetCounts {
    pub init: usize,
    pub local: usize,
    pub topk: usize,
}

impl BlockSelection {
    /// Build from explicit sets, ordered row-major then by group. Sets are
    /// sorted and deduplicated; a block past the query's own block is an error.
    pub fn from_sets(block_size: usize, n_k: usize, groups: usize, sets: Vec<Vec<u32>>) -> Result<Self> {
        if block_size == 0 || groups == 0 || !sets.len().is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{} sets do not split into {groups} groups (block size {block_size})",
                sets.len()
            )));
        }
        let rows = sets.len() / groups;
        if rows > n_k {
            return Err(Error::InvalidArgument(format!("{rows} query rows exceed {n_k} keys")));
        }
        let mut offsets = Vec::with_capacity(sets.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (i, mut set) in sets.into_iter().enumerate() {
            let own = ((n_k - rows + i / groups) / block_size) as u32;
            set.sort_unstable();
            set.dedup();
            if let Some(&j) = set.last() {
                if j > own {
                    return Err(Error::InvalidArgument(format!(
                        "row {} selects future block {j} (own block {own})",
                        i / groups
                    )));
                }
            }
            indices.extend(set);
            offsets.push(indices.len());
        }
        Ok(Self {
            block_size,
            n_k,
            rows,
            groups,
            offsets,
            indices,
        })
    }

    /// Every block up to and including each query's own block.
    pub fn all_past(block_size: usize, n_q: usize, n_k: usize, groups: usize) -> Result<Self> {
        let sets = (0..n_q * groups)
            .map(|i| (0..=((n_k - n_q + i / groups) / block_size) as u32).collect())
            .collect();
        Self::from_sets(block_size, n_k, groups, sets)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn q_offset(&self) -> usize {
        self.n_k - self.rows
    }

    pub fn position(&self, row: usize) -> usize {
        self.q_offset() + row
    }

    pub fn blocks(&self, row: usize, group: usize) -> &[u32] {
        let i = row * self.groups + group;
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Disjoint source breakdown of a set under the block counts of `cfg`;
    /// blocks in both fixed spans count as initial.
    pub fn counts(&self, row: usize, group: usize, cfg: &AttentionConfig) -> SetCounts {
        let (init_end, local_start, own) = fixed_spans(self.position(row), self.block_size, cfg);
        let local = own as usize + 1 - (local_start as usize).max(init_end);
        SetCounts {
            init: init_end,
            local,
            topk: self.topk_blocks(row, group, cfg).count(),
        }
    }

    /// Blocks of a set that lie between the initial and local spans.
    pub fn topk_blocks<'a>(&'a self, row: usize, group: usize, cfg: &AttentionConfig) -> impl Iterator<Item = u32> + 'a {
        let (init_end, local_start, _) = fixed_spans(self.position(row), self.block_size, cfg);
        self.blocks(row, group)
            .iter()
            .copied()
            .filter(move |&j| j >= init_end as u32 && j < local_start)
    }

    /// Selection file: the tensor header with rank 0 and tag
    /// [`SELECTION_TAG`], then `u32` block size, key count, rows and groups,
    /// then for each (row, group) a `u32` count followed by that many `u32`
    /// block indices. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 16 + 4 * (self.offsets.len() + self.indices.len()));
        write_header(&mut out, &[], SELECTION_TAG);
        for v in [self.block_size, self.n_k, self.rows, self.groups] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for i in 0..self.rows * self.groups {
            let set = &self.indices[self.offsets[i]..self.offsets[i + 1]];
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for j in set {
                out.extend_from_slice(&j.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, tag, payload) = read_header(bytes)?;
        if tag != SELECTION_TAG || !shape.is_empty() {
            return Err(Error::MalformedHeader(format!(
                "not a block-selection file (rank {}, tag {tag:#x})",
                shape.len()
            )));
        }
        let mut words = payload.chunks(4).map(|c| {
            c.try_into()
                .map(u32::from_le_bytes)
                .map_err(|_| Error::Truncated { expected: 4, got: c.len() })
        });
        let mut next = |what: &str| -> Result<u32> {
            words
                .next()
                .ok_or_else(|| Error::MalformedHeader(format!("selection file ends before {what}")))?
        };
        let block_size = next("block size")? as usize;
        let n_k = next("key count")? as usize;
        let rows = next("row count")? as usize;
        let groups = next("group count")? as usize;
        let mut sets = Vec::with_capacity(rows * groups);
        for _ in 0..rows * groups {
            let count = next("set length")? as usize;
            sets.push((0..count).map(|_| next("block index")).collect::<Result<Vec<_>>>()?);
        }
        if words.next().is_some() {
            return Err(Error::MalformedHeader("trailing bytes after selection".into()));
        }
        Self::from_sets(block_size, n_k, groups, sets)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `(init_end, local_start, own_block)` for a query position.
fn fixed_spans(position: usize, block_size: usize, cfg: &AttentionConfig) -> (usize, u32, u32) {
    let own = position / block_size;
    let init_end = cfg.n_init.min(own + 1);
    let local_start = own + 1 - cfg.n_local.min(own + 1);
    (init_end, local_start as u32, own as u32)
}

/// Build `I(i)` for every row of a block-score matrix.
pub fn build_block_sets(cmp: &ScoreMatrix, cfg: &AttentionConfig) -> Result<BlockSelection> {
    if cmp.kind != ScoreKind::Block {
        return Err(Error::InvalidArgument(format!(
            "block sets need block scores, got {:?}",
            cmp.kind
        )));
    }
    let b = cfg.block_size;
    let sets: Vec<Vec<Vec<u32>>> = (0..cmp.rows())
        .into_par_iter()
        .map(|row| {
            let (init_end, local_start, own) = fixed_spans(cmp.q_offset + row, b, cfg);
            let local_start = local_start as usize;
            // Candidates are [init_end, local_start), limited to existing columns.
            let cand_end = local_start.min(cmp.cols());
            (0..cmp.planes())
                .map(|g| {
                    let mut set: Vec<u32> = (0..init_end as u32).collect();
                    if !cmp.empty_rows[row] && cfg.k_top > 0 && init_end < cand_end {
                        let scores = cmp.row(row, g);
                        let mut cand: Vec<u32> = (init_end as u32..cand_end as u32).collect();
                        let by_rank = |a: &u32, b: &u32| {
                            scores[*b as usize]
                                .total_cmp(&scores[*a as usize])
                                .then(a.cmp(b))
                        };
                        if cand.len() > cfg.k_top {
                            cand.select_nth_unstable_by(cfg.k_top - 1, by_rank);
                            cand.truncate(cfg.k_top);
                        }
                        cand.sort_unstable();
                        set.extend(cand);
                    }
                    set.extend((local_start as u32..=own).filter(|&j| j as usize >= init_end));
                    set
                })
                .collect()
        })
        .collect();
    let n_k = cmp.q_offset + cmp.rows();
    BlockSelection::from_sets(b, n_k, cmp.planes(), sets.into_iter().flatten().collect())
}

/// True iff every query's window `[i - w + 1, i]` lies inside its selected blocks.
pub fn window_coverage_check(sel: &BlockSelection, window: usize) -> bool {
    (0..sel.rows()).into_par_iter().all(|row| {
        let pos = sel.position(row);
        let lo = (pos + 1).saturating_sub(window.max(1)) / sel.block_size();
        let hi = pos / sel.block_size();
        (0..sel.groups()).all(|g| {
            let set = sel.blocks(row, g);
            (lo..=hi).all(|j| set.binary_search(&(j as u32)).is_ok())
        })
    })
}

/// Shared scores by the two-pass fused kernel with the exact normaliser.
pub fn fused_shared_scores_exact<T: Scalar>(
    q: &Tensor<T>,
    c1: &CompressedKeys<T>,
    cfg: &AttentionConfig,
    tiles: Tiles,
) -> Result<ScoreMatrix> {
    fused_shared_scores(q, c1, None, cfg, tiles, &OpCounter::new())
}

/// Shared scores normalised by the log-sum-exp over the coarser `c2` keys.
pub fn fused_shared_scores_approx<T: Scalar>(
    q: &Tensor<T>,
    c1: &CompressedKeys<T>,
    c2: &CompressedKeys<T>,
    cfg: &AttentionConfig,
    tiles: Tiles,
) -> Result<ScoreMatrix> {
    fused_shared_scores(q, c1, Some(c2), cfg, tiles, &OpCounter::new())
}

/// Two-pass shared-score kernel.
///
/// Work items are (KV group, query tile). Pass 1 streams the normaliser
/// keys (`c2` when given, else `c1`) tile by tile and keeps a running
/// log-sum-exp per (head, row). Pass 2 streams `c1`, turns each logit into
/// `exp(x - lse)` and sums the `G` heads before writing the tile out. The
/// only per-head buffer is one `G × tile_q × tile_k` logit tile.
///
/// A row that sees `c1` entries but no `c2` entry falls back to the exact
/// normaliser. Rows that see no `c1` entry are zero and flagged empty.
pub fn fused_shared_scores<T: Scalar>(
    q: &Tensor<T>,
    c1: &CompressedKeys<T>,
    c2: Option<&CompressedKeys<T>>,
    cfg: &AttentionConfig,
    tiles: Tiles,
    ops: &OpCounter,
) -> Result<ScoreMatrix> {
    if tiles.query == 0 || tiles.key == 0 {
        return Err(Error::InvalidArgument("tile sizes must be positive".into()));
    }
    let geom = Geometry::from_queries(q, c1.source_len, cfg)?;
    check_compressed(c1, &geom)?;
    if let Some(c2) = c2 {
        check_compressed(c2, &geom)?;
        if c2.source_len != c1.source_len {
            return Err(Error::InvalidArgument(format!(
                "pooled key sets cover {} and {} tokens",
                c1.source_len, c2.source_len
            )));
        }
    }
    let qh = Heads::new(q);
    let k1 = Heads::new(&c1.keys);
    let k2 = c2.map(|c| Heads::new(&c.keys));
    let scale = compressed_scale(cfg);
    let (g_size, d) = (geom.group_size, geom.head_dim);
    let m1 = c1.len();
    let q_tiles = geom.n_q.div_ceil(tiles.query);

    let blocks: Vec<(usize, usize, usize, Vec<f64>)> = (0..geom.kv_heads * q_tiles)
        .into_par_iter()
        .map(|item| {
            let (g, qt) = (item / q_tiles, item % q_tiles);
            let r0 = qt * tiles.query;
            let rows = tiles.query.min(geom.n_q - r0);
            let heads = g * g_size..(g + 1) * g_size;
            let vis1: Vec<usize> = (0..rows).map(|r| c1.visible_at(geom.position(r0 + r))).collect();
            let vis2: Vec<usize> = match c2 {
                Some(c2) => (0..rows).map(|r| c2.visible_at(geom.position(r0 + r))).collect(),
                None => vec![0; rows],
            };

            let mut logits = vec![0.0; g_size * tiles.query * tiles.key];
            ops.note_scratch(logits.len());
            let mut lse = vec![f64::NEG_INFINITY; g_size * rows];

            // Pass 1: normaliser. Rows with a visible c2 entry use c2; the
            // rest (exact mode, or fallback) use c1.
            let approx_rows: Vec<bool> = (0..rows).map(|r| c2.is_some() && vis2[r] > 0).collect();
            let mut pass1 = |keys: &Heads, vis: &[usize], use_row: &dyn Fn(usize) -> bool| {
                let max_vis = (0..rows).filter(|&r| use_row(r)).map(|r| vis[r]).max().unwrap_or(0);
                let mut m = vec![f64::NEG_INFINITY; g_size * rows];
                let mut l = vec![0.0; g_size * rows];
                let (mut macs, mut exps) = (0u64, 0u64);
                for c0 in (0..max_vis).step_by(tiles.key) {
                    for (hi, h) in heads.clone().enumerate() {
                        for r in (0..rows).filter(|&r| use_row(r)) {
                            let cols = vis[r].saturating_sub(c0).min(tiles.key);
                            if cols == 0 {
                                continue;
                            }
                            let s = &mut logits[(hi * tiles.query + r) * tiles.key..][..cols];
                            let qrow = qh.row(r0 + r, h);
                            for (c, x) in s.iter_mut().enumerate() {
                                *x = dot(qrow, keys.row(c0 + c, g)) * scale;
                            }
                            let i = hi * rows + r;
                            let m_new = s.iter().copied().fold(m[i], f64::max);
                            let sum: f64 = s.iter().map(|x| (x - m_new).exp()).sum();
                            l[i] = l[i] * (m[i] - m_new).exp() + sum;
                            m[i] = m_new;
                            macs += (cols * d) as u64;
                            exps += cols as u64 + 1;
                        }
                    }
                }
                ops.record(Stage::LsePass, macs, exps);
                for r in (0..rows).filter(|&r| use_row(r)) {
                    for hi in 0..g_size {
                        let i = hi * rows + r;
                        if l[i] > 0.0 {
                            lse[i] = m[i] + l[i].ln();
                        }
                    }
                }
            };
            if let (Some(k2), true) = (&k2, approx_rows.iter().any(|&a| a)) {
                pass1(k2, &vis2, &|r| approx_rows[r]);
            }
            pass1(&k1, &vis1, &|r| !approx_rows[r] && vis1[r] > 0);

            // Pass 2: normalised c1 scores summed over the head group.
            let mut out = vec![0.0; rows * m1];
            let max_vis1 = vis1.iter().copied().max().unwrap_or(0);
            let (mut macs, mut exps) = (0u64, 0u64);
            for c0 in (0..max_vis1).step_by(tiles.key) {
                for (hi, h) in heads.clone().enumerate() {
                    for r in 0..rows {
                        let cols = vis1[r].saturating_sub(c0).min(tiles.key);
                        if cols == 0 {
                            continue;
                        }
                        let s = &mut logits[(hi * tiles.query + r) * tiles.key..][..cols];
                        let qrow = qh.row(r0 + r, h);
                        let norm = lse[hi * rows + r];
                        for (c, x) in s.iter_mut().enumerate() {
                            *x = (dot(qrow, k1.row(c0 + c, g)) * scale - norm).exp();
                        }
                        macs += (cols * d) as u64;
                        exps += cols as u64;
                    }
                }
                for r in 0..rows {
                    let cols = vis1[r].saturating_sub(c0).min(tiles.key);
                    let dst = &mut out[r * m1 + c0..][..cols];
                    for hi in 0..g_size {
                        let s = &logits[(hi * tiles.query + r) * tiles.key..][..cols];
                        for (o, x) in dst.iter_mut().zip(s) {
                            *o += x;
                        }
                    }
                }
            }
            ops.record(Stage::ScorePass, macs, exps);
            (g, r0, rows, out)
        })
        .collect();

    let mut data = vec![0.0; geom.n_q * geom.kv_heads * m1];
    for (g, r0, rows, out) in blocks {
        for r in 0..rows {
            data[((r0 + r) * geom.kv_heads + g) * m1..][..m1].copy_from_slice(&out[r * m1..(r + 1) * m1]);
        }
    }
    let empty = (0..geom.n_q).map(|r| c1.visible_at(geom.position(r)) == 0).collect();
    ScoreMatrix::from_parts(
        geom.n_q,
        geom.kv_heads,
        m1,
        data,
        ScoreKind::Shared,
        geom.q_offset(),
        empty,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Per-head scores materialised, then summed over the head group.
    Exact,
    /// Fused two-pass kernel with the coarse-key normaliser.
    Approx,
    /// Fused two-pass kernel with the exact normaliser.
    FusedExact,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" => Ok(Self::Approx),
            "fused-exact" => Ok(Self::FusedExact),
            other => Err(format!("unknown selection mode `{other}`")),
        }
    }
}

/// Tiles used by [`select_blocks`].
pub const SELECTION_TILES: Tiles = Tiles::new(64, 64);

pub fn select_blocks<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
    mode: SelectionMode,
) -> Result<BlockSelection> {
    select_blocks_with(q, k, cfg, mode, SELECTION_TILES, &OpCounter::new())
}

/// Pool keys, score, max-pool and build the visible sets.
pub fn select_blocks_with<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
    mode: SelectionMode,
    tiles: Tiles,
    ops: &OpCounter,
) -> Result<BlockSelection> {
    let cfg = validate_config(cfg.clone())?;
    let c1 = mean_pool_keys_counted(k, cfg.c1_len, cfg.c1_stride, ops)?;
    let shared = match mode {
        SelectionMode::Exact => {
            let per_head = compressed_scores_counted(q, &c1, &cfg, true, ops)?;
            head_group_sum(&per_head, cfg.group_size)?
        }
        SelectionMode::FusedExact => fused_shared_scores(q, &c1, None, &cfg, tiles, ops)?,
        SelectionMode::Approx => {
            let c2 = mean_pool_keys_counted(k, cfg.c2_len, cfg.c2_stride, ops)?;
            fused_shared_scores(q, &c1, Some(&c2), &cfg, tiles, ops)?
        }
    };
    let cmp = max_pool_scores(&shared, cfg.pool_len, cfg.pool_stride)?;
    build_block_sets(&cmp, &cfg)
}
