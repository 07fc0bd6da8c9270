//! How much dense attention mass the selected blocks capture.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use swattn::rng::qkv_seeds;
use swattn::tensor::write_atomic;
use swattn::{
    naive_probabilities, seeded_random_tensor, select_blocks, validate_config, AttentionConfig, BlockSelection, Normal,
    SelectionMode, SparseMask, Tensor,
};

use crate::error::{CliError, CliResult};

/// Long-context head geometry with a budget well below 4096 tokens:
/// `(1 + 4 + 8) · 64 = 832` visible tokens.
pub fn quality_config() -> AttentionConfig {
    AttentionConfig {
        seq_len: 4096,
        n_local: 4,
        k_top: 8,
        window: 128,
        ..AttentionConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityOptions {
    /// Trailing query rows scored per seed.
    pub query_rows: usize,
}

impl Default for QualityOptions {
    fn default() -> Self {
        Self { query_rows: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedQuality {
    pub seed: u64,
    pub recall_exact: f64,
    pub recall_approx: f64,
    /// Uniformly random past blocks, as many as the exact set holds.
    pub recall_random: f64,
    /// Exact initial and local blocks plus random middle blocks.
    pub recall_random_topk: f64,
    /// Mean `|topk_approx ∩ topk_exact| / |topk_exact|`.
    pub topk_overlap: f64,
    pub random_topk_overlap: f64,
    pub exact_beats_random: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub config: AttentionConfig,
    pub n: usize,
    pub query_rows: usize,
    pub budget_tokens: usize,
    pub seeds: Vec<SeedQuality>,
    pub mean_recall_exact: f64,
    pub mean_recall_approx: f64,
    pub mean_recall_random: f64,
    pub mean_topk_overlap: f64,
    pub exact_beats_random_on_all_seeds: bool,
}

/// Mean over (row, head) of the dense probability mass inside the selection.
fn recall(probs: &Tensor<f64>, sel: &BlockSelection, group_size: usize) -> f64 {
    let [rows, heads, n_k] = [probs.shape()[0], probs.shape()[1], probs.shape()[2]];
    let mask = SparseMask::new(sel);
    let mut total = 0.0;
    for r in 0..rows {
        for h in 0..heads {
            let p = &probs.data()[(r * heads + h) * n_k..][..n_k];
            total += mask.ranges(r, h / group_size).map(|span| p[span].iter().sum::<f64>()).sum::<f64>();
        }
    }
    total / (rows * heads) as f64
}

fn topk_overlap(a: &BlockSelection, exact: &BlockSelection, cfg: &AttentionConfig) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..exact.rows() {
        for g in 0..exact.groups() {
            let want: Vec<u32> = exact.topk_blocks(r, g, cfg).collect();
            if want.is_empty() {
                continue;
            }
            let hits = a.topk_blocks(r, g, cfg).filter(|j| want.contains(j)).count();
            sum += hits as f64 / want.len() as f64;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Random sets matching the exact set sizes: fully random past blocks, and
/// the exact fixed blocks plus random middle blocks.
fn random_baselines(exact: &BlockSelection, cfg: &AttentionConfig, seed: u64) -> CliResult<(BlockSelection, BlockSelection)> {
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x5eed_ba5e);
    let b = exact.block_size();
    let (mut uniform, mut middle) = (Vec::new(), Vec::new());
    for r in 0..exact.rows() {
        let own = exact.position(r) / b;
        for g in 0..exact.groups() {
            let set = exact.blocks(r, g);
            let mut u: Vec<u32> = sample(&mut rng, own + 1, set.len()).into_iter().map(|j| j as u32).collect();
            u.sort_unstable();
            uniform.push(u);

            let topk: Vec<u32> = exact.topk_blocks(r, g, cfg).collect();
            let mut fixed: Vec<u32> = set.iter().copied().filter(|j| !topk.contains(j)).collect();
            let init_end = cfg.n_init.min(own + 1);
            let local_start = own + 1 - cfg.n_local.min(own + 1);
            let span = local_start.saturating_sub(init_end);
            fixed.extend(sample(&mut rng, span, topk.len().min(span)).into_iter().map(|j| (init_end + j) as u32));
            fixed.sort_unstable();
            middle.push(fixed);
        }
    }
    Ok((
        BlockSelection::from_sets(b, exact.n_k(), exact.groups(), uniform)?,
        BlockSelection::from_sets(b, exact.n_k(), exact.groups(), middle)?,
    ))
}

pub fn run_selection_quality(
    cfg: &AttentionConfig,
    n: usize,
    seeds: &[u64],
    out: Option<&Path>,
    opts: &QualityOptions,
) -> CliResult<QualityReport> {
    let cfg = validate_config(cfg.clone())?;
    if n == 0 || opts.query_rows == 0 {
        return Err(CliError::Usage("sequence length and query rows must be positive".into()));
    }
    let n_q = opts.query_rows.min(n);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let [sq, sk, _] = qkv_seeds(seed);
        let q: Tensor<f64> = seeded_random_tensor(&[n_q, cfg.query_heads, cfg.head_dim], sq, Normal::STANDARD)?;
        let k: Tensor<f64> = seeded_random_tensor(&[n, cfg.kv_heads, cfg.head_dim], sk, Normal::STANDARD)?;
        let probs = naive_probabilities(&q, &k, true, &cfg)?;
        let exact = select_blocks(&q, &k, &cfg, SelectionMode::Exact)?;
        let approx = select_blocks(&q, &k, &cfg, SelectionMode::Approx)?;
        let (uniform, middle) = random_baselines(&exact, &cfg, seed)?;
        let recall_exact = recall(&probs, &exact, cfg.group_size);
        let recall_random = recall(&probs, &uniform, cfg.group_size);
        per_seed.push(SeedQuality {
            seed,
            recall_exact,
            recall_approx: recall(&probs, &approx, cfg.group_size),
            recall_random,
            recall_random_topk: recall(&probs, &middle, cfg.group_size),
            topk_overlap: topk_overlap(&approx, &exact, &cfg),
            random_topk_overlap: topk_overlap(&middle, &exact, &cfg),
            exact_beats_random: recall_exact > recall_random,
        });
    }
    let mean = |f: fn(&SeedQuality) -> f64| {
        if per_seed.is_empty() {
            0.0
        } else {
            per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64
        }
    };
    let report = QualityReport {
        n,
        query_rows: n_q,
        budget_tokens: cfg.visible_token_budget(),
        mean_recall_exact: mean(|s| s.recall_exact),
        mean_recall_approx: mean(|s| s.recall_approx),
        mean_recall_random: mean(|s| s.recall_random),
        mean_topk_overlap: mean(|s| s.topk_overlap),
        exact_beats_random_on_all_seeds: per_seed.iter().all(|s| s.exact_beats_random),
        seeds: per_seed,
        config: cfg,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("quality.json"), &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}
