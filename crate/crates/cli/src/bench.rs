//! Counted-work and wall-clock benchmarks.
//!
//! The workload is the last `query_rows` query tokens of an `n`-token
//! context (a decode or chunked-prefill step), so dense attention touches
//! about `n` keys per query and sparse attention at most the visible-token
//! budget. Speedups are ratios of counted multiply-accumulates, never of
//! wall time.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use swattn::dense::{dense_mac_count, naive_gqa_forward_counted, tiled_gqa_forward_counted};
use swattn::rng::qkv_seeds;
use swattn::selection::{select_blocks_with, SELECTION_TILES};
use swattn::sparse::sparse_forward_counted;
use swattn::tensor::write_atomic;
use swattn::{
    seeded_random_tensor, validate_config, AttentionConfig, BlockSelection, Normal, OpCounter, OpCounts, Precision,
    Scalar, SelectionMode, SparseMask, Stage, StageKind, Tensor, Tiles,
};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    DenseNaive,
    DenseTiled,
    SelectExact,
    SelectApprox,
    Sparse,
}

impl BenchMode {
    pub const ALL: [BenchMode; 5] = [
        BenchMode::DenseNaive,
        BenchMode::DenseTiled,
        BenchMode::SelectExact,
        BenchMode::SelectApprox,
        BenchMode::Sparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DenseNaive => "dense-naive",
            Self::DenseTiled => "dense-tiled",
            Self::SelectExact => "select-exact",
            Self::SelectApprox => "select-approx",
            Self::Sparse => "sparse",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown bench mode `{s}`")))
    }
}

/// One CSV row. Column order is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub n: usize,
    #[serde(rename = "B")]
    pub block_size: usize,
    pub k_top: usize,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub d_h: usize,
    pub mac_count: u64,
    pub exp_count: u64,
    pub wall_ms: f64,
    pub speedup_counts: f64,
}

/// Per-stage breakdown reported alongside each record in the JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchDetail {
    pub mode: BenchMode,
    pub n: usize,
    pub query_rows: usize,
    pub pool: OpCounts,
    pub lse_pass: OpCounts,
    pub score_pass: OpCounts,
    pub dense: OpCounts,
    pub sparse: OpCounts,
    pub peak_scratch: u64,
    /// Largest number of keys any (query, KV group) pair visits.
    pub max_key_visits: Option<usize>,
}

/// Normaliser-pass work of the exact and approximate selection kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsePassRatio {
    pub n: usize,
    pub exact_macs: u64,
    pub approx_macs: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub query_rows: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            query_rows: 16,
            repetitions: 5,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: AttentionConfig,
    pub options: BenchOptions,
    pub records: Vec<BenchRecord>,
    pub details: Vec<BenchDetail>,
    pub lse_pass_ratios: Vec<LsePassRatio>,
}

impl BenchReport {
    pub fn record(&self, mode: BenchMode, n: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.mode == mode && r.n == n)
    }

    pub fn csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

struct Cell {
    ops: OpCounter,
    wall_ms: Vec<f64>,
}

/// Run `work` `reps` times, each with a fresh counter; counts must agree.
fn repeat(mode: BenchMode, n: usize, reps: usize, mut work: impl FnMut(&OpCounter) -> CliResult<()>) -> CliResult<Cell> {
    let mut first: Option<OpCounter> = None;
    let mut wall_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let ops = OpCounter::new();
        let start = Instant::now();
        work(&ops)?;
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        match &first {
            None => first = Some(ops),
            Some(f) => {
                let same = Stage::ALL.iter().all(|&s| f.stage(s) == ops.stage(s)) && f.peak_scratch() == ops.peak_scratch();
                if !same {
                    return Err(CliError::UnstableCounts { mode: mode.to_string(), n });
                }
            }
        }
    }
    Ok(Cell { ops: first.expect("at least one repetition"), wall_ms })
}

fn selection_mode(mode: BenchMode) -> SelectionMode {
    if mode == BenchMode::SelectExact {
        SelectionMode::FusedExact
    } else {
        SelectionMode::Approx
    }
}

struct SizeResult {
    records: Vec<BenchRecord>,
    details: Vec<BenchDetail>,
    selection: Option<BlockSelection>,
}

fn bench_size<T: Scalar>(cfg: &AttentionConfig, n: usize, modes: &[BenchMode], opts: &BenchOptions) -> CliResult<SizeResult> {
    let n_q = opts.query_rows.min(n);
    let [sq, sk, sv] = qkv_seeds(opts.seed.wrapping_add(n as u64));
    let q: Tensor<T> = seeded_random_tensor(&[n_q, cfg.query_heads, cfg.head_dim], sq, Normal::STANDARD)?;
    let k: Tensor<T> = seeded_random_tensor(&[n, cfg.kv_heads, cfg.head_dim], sk, Normal::STANDARD)?;
    let v: Tensor<T> = seeded_random_tensor(&[n, cfg.kv_heads, cfg.head_dim], sv, Normal::STANDARD)?;
    let dense_macs = dense_mac_count(n_q, n, true, cfg.query_heads, cfg.head_dim);
    let reps = opts.repetitions;

    let mut out = SizeResult { records: Vec::new(), details: Vec::new(), selection: None };
    for &mode in modes {
        let mut max_key_visits = None;
        let cell = match mode {
            BenchMode::DenseNaive => repeat(mode, n, reps, |ops| {
                naive_gqa_forward_counted(&q, &k, &v, true, cfg, ops)?;
                Ok(())
            })?,
            BenchMode::DenseTiled => repeat(mode, n, reps, |ops| {
                tiled_gqa_forward_counted(&q, &k, &v, true, cfg, Tiles::default(), ops)?;
                Ok(())
            })?,
            BenchMode::SelectExact | BenchMode::SelectApprox => repeat(mode, n, reps, |ops| {
                select_blocks_with(&q, &k, cfg, selection_mode(mode), SELECTION_TILES, ops)?;
                Ok(())
            })?,
            BenchMode::Sparse => {
                let sel = select_blocks_with(&q, &k, cfg, SelectionMode::Approx, SELECTION_TILES, &OpCounter::new())?;
                let cell = repeat(mode, n, reps, |ops| {
                    sparse_forward_counted(&q, &k, &v, &sel, cfg, ops)?;
                    Ok(())
                })?;
                let mask = SparseMask::new(&sel);
                max_key_visits = (0..sel.rows())
                    .flat_map(|r| (0..sel.groups()).map(move |g| (r, g)))
                    .map(|(r, g)| mask.visible_count(r, g))
                    .max();
                out.selection = Some(sel);
                cell
            }
        };
        let counts = match mode {
            BenchMode::DenseNaive | BenchMode::DenseTiled => cell.ops.kind(StageKind::Dense),
            BenchMode::SelectExact | BenchMode::SelectApprox => cell.ops.kind(StageKind::Selection),
            BenchMode::Sparse => cell.ops.kind(StageKind::Sparse),
        };
        out.records.push(BenchRecord {
            mode,
            n,
            block_size: cfg.block_size,
            k_top: cfg.k_top,
            group_size: cfg.group_size,
            d_h: cfg.head_dim,
            mac_count: counts.mac_count,
            exp_count: counts.exp_count,
            wall_ms: median(cell.wall_ms),
            speedup_counts: if counts.mac_count == 0 {
                0.0
            } else {
                dense_macs as f64 / counts.mac_count as f64
            },
        });
        out.details.push(BenchDetail {
            mode,
            n,
            query_rows: n_q,
            pool: cell.ops.stage(Stage::Pool),
            lse_pass: cell.ops.stage(Stage::LsePass),
            score_pass: cell.ops.stage(Stage::ScorePass),
            dense: cell.ops.stage(Stage::Dense),
            sparse: cell.ops.stage(Stage::Sparse),
            peak_scratch: cell.ops.peak_scratch(),
            max_key_visits,
        });
    }
    Ok(out)
}

/// Benchmark every (mode, n) cell. With `out` set, writes `bench.csv`,
/// `bench.json` and, for the sparse mode, `selections/n<n>.bin`; each file
/// is written once, atomically.
pub fn run_bench(
    cfg: &AttentionConfig,
    sizes: &[usize],
    modes: &[BenchMode],
    out: Option<&Path>,
    opts: &BenchOptions,
) -> CliResult<BenchReport> {
    let cfg = validate_config(cfg.clone())?;
    if opts.repetitions == 0 || opts.query_rows == 0 {
        return Err(CliError::Usage("repetitions and query rows must be positive".into()));
    }
    if sizes.contains(&0) {
        return Err(CliError::Usage("sizes must be positive".into()));
    }
    let mut report = BenchReport {
        config: cfg.clone(),
        options: opts.clone(),
        records: Vec::new(),
        details: Vec::new(),
        lse_pass_ratios: Vec::new(),
    };
    let mut selections = Vec::new();
    for &n in sizes {
        let res = match opts.precision {
            Precision::F32 => bench_size::<f32>(&cfg, n, modes, opts)?,
            Precision::F64 => bench_size::<f64>(&cfg, n, modes, opts)?,
        };
        let lse = |m: BenchMode| res.details.iter().find(|d| d.mode == m).map(|d| d.lse_pass.mac_count);
        if let (Some(exact), Some(approx)) = (lse(BenchMode::SelectExact), lse(BenchMode::SelectApprox)) {
            report.lse_pass_ratios.push(LsePassRatio {
                n,
                exact_macs: exact,
                approx_macs: approx,
                ratio: if exact == 0 { 0.0 } else { approx as f64 / exact as f64 },
            });
        }
        report.records.extend(res.records);
        report.details.extend(res.details);
        if let Some(sel) = res.selection {
            selections.push((n, sel));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("bench.csv"), &report.csv()?)?;
        write_atomic(&dir.join("bench.json"), &serde_json::to_vec_pretty(&report)?)?;
        if !selections.is_empty() {
            std::fs::create_dir_all(dir.join("selections"))?;
            for (n, sel) in &selections {
                sel.save(dir.join("selections").join(format!("n{n}.bin")))?;
            }
        }
    }
    Ok(report)
}
