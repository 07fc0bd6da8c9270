//! Cross-oracle correctness suite.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use swattn::compression::compressed_scores;
use swattn::rng::qkv_seeds;
use swattn::selection::fused_shared_scores_exact;
use swattn::tensor::write_atomic;
use swattn::{
    attend, head_group_sum, masked_naive_oracle, mean_pool_keys, naive_gqa_backward, naive_gqa_forward,
    seeded_random_tensor, select_blocks, sparse_backward, sparse_forward, tiled_gqa_forward, window_coverage_check,
    AttentionConfig, AttentionMode, BlockSelection, Normal, Scalar, SelectionMode, SwitchPolicy, Tensor, Tiles,
};

use crate::error::{exit, CliError, CliResult};

/// Test hook: shift the first element of a named check's fast-path result.
/// Written `name=delta` on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub check: String,
    pub delta: f64,
}

impl FromStr for Perturbation {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (check, delta) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("perturbation `{s}` is not of the form check=delta")))?;
        let delta = delta
            .parse()
            .map_err(|_| CliError::Usage(format!("perturbation delta `{delta}` is not a number")))?;
        Ok(Self { check: check.to_string(), delta })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub n: Option<usize>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub checks: Vec<CheckRecord>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl CorrectnessReport {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            exit::SUCCESS
        } else {
            exit::TOLERANCE_BREACH
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Geometry used by the suite: 4 query heads over 2 KV heads, 16-token blocks.
pub fn check_config() -> AttentionConfig {
    AttentionConfig::compact()
}

struct Suite<'a> {
    perturb: Option<&'a Perturbation>,
    records: Vec<CheckRecord>,
}

impl Suite<'_> {
    fn push(&mut self, name: &str, n: Option<usize>, max_error: f64, tolerance: f64) {
        self.records.push(CheckRecord {
            name: name.to_string(),
            n,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        });
    }

    fn shift(&self, name: &str) -> f64 {
        match self.perturb {
            Some(p) if p.check == name => p.delta,
            _ => 0.0,
        }
    }

    /// `max |fast - reference| / max(max |reference|, 1)`.
    fn compare(&mut self, name: &str, n: usize, mut fast: Vec<f64>, reference: &[f64], tolerance: f64) {
        if let Some(x) = fast.first_mut() {
            *x += self.shift(name);
        }
        let scale = reference.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let err = fast
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        self.push(name, Some(n), if err.is_nan() { f64::INFINITY } else { err }, tolerance);
    }

    fn count(&mut self, name: &str, n: usize, mismatches: usize) {
        let err = mismatches as f64 + self.shift(name).abs();
        self.push(name, Some(n), err, 0.0);
    }
}

fn inputs<T: Scalar>(n_q: usize, n_k: usize, cfg: &AttentionConfig, seed: u64) -> CliResult<[Tensor<T>; 3]> {
    let [sq, sk, sv] = qkv_seeds(seed);
    Ok([
        seeded_random_tensor(&[n_q, cfg.query_heads, cfg.head_dim], sq, Normal::STANDARD)?,
        seeded_random_tensor(&[n_k, cfg.kv_heads, cfg.head_dim], sk, Normal::STANDARD)?,
        seeded_random_tensor(&[n_k, cfg.kv_heads, cfg.head_dim], sv, Normal::STANDARD)?,
    ])
}

fn random_selection(n: usize, b: usize, groups: usize, seed: u64) -> CliResult<BlockSelection> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let sets = (0..n)
        .flat_map(|i| (0..groups).map(move |_| i))
        .map(|i| {
            let own = (i / b) as u32;
            let mut set: Vec<u32> = (0..own).filter(|_| rng.random_bool(0.3)).collect();
            set.push(own);
            set
        })
        .collect();
    Ok(BlockSelection::from_sets(b, n, groups, sets)?)
}

fn differing_sets(a: &BlockSelection, b: &BlockSelection) -> usize {
    (0..a.rows())
        .flat_map(|r| (0..a.groups()).map(move |g| (r, g)))
        .filter(|&(r, g)| a.blocks(r, g) != b.blocks(r, g))
        .count()
}

fn concat(t: &[&Tensor<f64>]) -> Vec<f64> {
    t.iter().flat_map(|x| x.data().iter().copied()).collect()
}

/// Worst elementwise `|a - n| / max(|a|, |n|, 1e-3)`: at most 1e-5 means
/// agreement to 1e-5 relative with a 1e-8 absolute floor.
fn gradient_error(
    x: &[Tensor<f64>; 3],
    d_out: &Tensor<f64>,
    analytic: [&Tensor<f64>; 3],
    forward: impl Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> CliResult<Tensor<f64>>,
) -> CliResult<f64> {
    let step = 1e-4;
    let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> CliResult<f64> {
        Ok(forward(q, k, v)?.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for which in 0..3 {
        for idx in 0..x[which].numel() {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t[which].data_mut()[idx] += delta;
                loss(&t[0], &t[1], &t[2])
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[which].data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn size_checks(suite: &mut Suite, n: usize, seed: u64) -> CliResult<()> {
    let cfg = check_config();
    let s = seed.wrapping_add((n as u64).wrapping_mul(0x9E37_79B9));

    let [q, k, v] = inputs::<f64>(n, n, &cfg, s)?;
    let naive = naive_gqa_forward(&q, &k, &v, true, &cfg)?;
    let tiled = tiled_gqa_forward(&q, &k, &v, true, &cfg, Tiles::new(16, 32))?;
    suite.compare("dense-tiled-vs-naive-f64", n, tiled.output.to_f64_vec(), naive.output.data(), 1e-10);
    suite.compare("dense-lse-vs-naive-f64", n, tiled.lse.to_f64_vec(), naive.lse.data(), 1e-10);

    let [q32, k32, v32] = inputs::<f32>(n, n, &cfg, s)?;
    let naive32 = naive_gqa_forward(&q32, &k32, &v32, true, &cfg)?;
    let tiled32 = tiled_gqa_forward(&q32, &k32, &v32, true, &cfg, Tiles::new(16, 32))?;
    suite.compare("dense-tiled-vs-naive-f32", n, tiled32.output.to_f64_vec(), &naive32.output.to_f64_vec(), 1e-4);

    let random = random_selection(n, cfg.block_size, cfg.kv_heads, s)?;
    let fast = sparse_forward(&q, &k, &v, &random, &cfg)?;
    let oracle = masked_naive_oracle(&q, &k, &v, &random, &cfg)?;
    suite.compare("sparse-vs-oracle-random-f64", n, fast.output.to_f64_vec(), oracle.output.data(), 1e-10);

    let sel = select_blocks(&q, &k, &cfg, SelectionMode::Approx)?;
    let fast = sparse_forward(&q, &k, &v, &sel, &cfg)?;
    let oracle = masked_naive_oracle(&q, &k, &v, &sel, &cfg)?;
    suite.compare("sparse-vs-oracle-selected-f64", n, fast.output.to_f64_vec(), oracle.output.data(), 1e-10);

    let sel32 = select_blocks(&q32, &k32, &cfg, SelectionMode::Approx)?;
    let fast32 = sparse_forward(&q32, &k32, &v32, &sel32, &cfg)?;
    let oracle32 = masked_naive_oracle(&q32, &k32, &v32, &sel32, &cfg)?;
    suite.compare("sparse-vs-oracle-selected-f32", n, fast32.output.to_f64_vec(), &oracle32.output.to_f64_vec(), 1e-4);

    let all = BlockSelection::all_past(cfg.block_size, n, n, cfg.kv_heads)?;
    let full = sparse_forward(&q, &k, &v, &all, &cfg)?;
    suite.compare("sparse-full-vs-dense-f64", n, full.output.to_f64_vec(), naive.output.data(), 1e-10);

    let c1 = mean_pool_keys(&k, cfg.c1_len, cfg.c1_stride)?;
    let fused = fused_shared_scores_exact(&q, &c1, &cfg, Tiles::new(8, 16))?;
    let direct = head_group_sum(&compressed_scores(&q, &c1, &cfg, true)?, cfg.group_size)?;
    suite.compare("fused-exact-vs-composition", n, fused.scores.to_f64_vec(), direct.scores.data(), 1e-10);

    let exact = select_blocks(&q, &k, &cfg, SelectionMode::Exact)?;
    let fused_sel = select_blocks(&q, &k, &cfg, SelectionMode::FusedExact)?;
    suite.count("selection-exact-vs-fused-exact", n, differing_sets(&exact, &fused_sel));

    let single = AttentionConfig::compact().with_heads(2, 2, cfg.head_dim);
    let [q1, k1, _] = inputs::<f64>(n, n, &single, s ^ 1)?;
    let a = select_blocks(&q1, &k1, &single, SelectionMode::Approx)?;
    let e = select_blocks(&q1, &k1, &single, SelectionMode::Exact)?;
    suite.count("selection-single-head-approx-invariance", n, differing_sets(&a, &e));

    let uncovered = usize::from(!window_coverage_check(&sel, cfg.window));
    suite.count("window-coverage", n, uncovered);

    if n <= cfg.visible_token_budget() {
        let policy = SwitchPolicy::from_config(&cfg);
        let (dense, _) = attend(&q, &k, &v, &cfg, &policy.forced(AttentionMode::Dense))?;
        let (sparse, _) = attend(&q, &k, &v, &cfg, &policy.forced(AttentionMode::Sparse))?;
        suite.compare("switch-sparse-vs-dense-below-budget", n, sparse.output.to_f64_vec(), dense.output.data(), 1e-10);
    }
    Ok(())
}

fn gradient_checks(suite: &mut Suite, seed: u64) -> CliResult<()> {
    let cfg = AttentionConfig::compact().with_heads(4, 2, 4).with_block_size(4);
    for i in 0..5u64 {
        let n = 8 + 2 * i as usize;
        let s = seed.wrapping_add(1000 + i);
        let x = inputs::<f64>(n, n, &cfg, s)?;
        let d_out = seeded_random_tensor(&[n, 4, 4], s.wrapping_mul(7), Normal::STANDARD)?;

        let g = naive_gqa_backward(&x[0], &x[1], &x[2], &d_out, true, &cfg)?;
        let mut err = gradient_error(&x, &d_out, [&g.dq, &g.dk, &g.dv], |q, k, v| {
            Ok(naive_gqa_forward(q, k, v, true, &cfg)?.output)
        })?;
        err += suite.shift("gradient-dense-fd");
        suite.push("gradient-dense-fd", Some(n), err, 1e-5);

        let sel = random_selection(n, 4, 2, s)?;
        let g = sparse_backward(&x[0], &x[1], &x[2], &sel, &d_out, &cfg)?;
        let mut err = gradient_error(&x, &d_out, [&g.dq, &g.dk, &g.dv], |q, k, v| {
            Ok(sparse_forward(q, k, v, &sel, &cfg)?.output)
        })?;
        err += suite.shift("gradient-sparse-fd");
        suite.push("gradient-sparse-fd", Some(n), err, 1e-5);

        let all = BlockSelection::all_past(4, n, n, 2)?;
        let sparse = sparse_backward(&x[0], &x[1], &x[2], &all, &d_out, &cfg)?;
        let dense = naive_gqa_backward(&x[0], &x[1], &x[2], &d_out, true, &cfg)?;
        suite.compare(
            "gradient-sparse-full-vs-dense",
            n,
            concat(&[&sparse.dq, &sparse.dk, &sparse.dv]),
            &concat(&[&dense.dq, &dense.dk, &dense.dv]),
            1e-10,
        );
    }
    Ok(())
}

/// Run every cross-oracle check at each size. An empty size list runs
/// nothing and passes with a warning.
pub fn run_correctness(seed: u64, sizes: &[usize], perturb: Option<&Perturbation>) -> CliResult<CorrectnessReport> {
    let mut suite = Suite { perturb, records: Vec::new() };
    let mut warnings = Vec::new();
    if sizes.is_empty() {
        warnings.push("no checks run: empty size list".to_string());
    } else {
        for &n in sizes {
            if n == 0 {
                return Err(CliError::Usage("sizes must be positive".into()));
            }
            size_checks(&mut suite, n, seed)?;
        }
        gradient_checks(&mut suite, seed)?;
    }
    if let Some(p) = perturb {
        if !suite.records.iter().any(|r| r.name == p.check) {
            warnings.push(format!("perturbation target `{}` matched no check", p.check));
        }
    }
    let passed = suite.records.iter().all(|r| r.passed);
    Ok(CorrectnessReport {
        seed,
        sizes: sizes.to_vec(),
        checks: suite.records,
        warnings,
        passed,
    })
}
