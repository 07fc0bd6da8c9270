//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use swattn::rng::qkv_seeds;
use swattn::{
    build_block_sets, compressed_scores, fused_shared_scores_exact, head_group_sum, masked_naive_oracle, max_pool_scores,
    mean_pool_keys, naive_gqa_backward, naive_gqa_forward, seeded_random_tensor, select_blocks, sparse_backward,
    sparse_forward, tiled_gqa_forward, window_coverage_check, AttentionConfig, BlockSelection, Normal, Precision,
    Scalar, SelectionMode, SparseMask, Tensor, Tiles,
};
use swattn_cli::{
    gen_fixtures, quality_config, run_bench, run_correctness, run_selection_quality, BenchMode, BenchOptions,
    QualityOptions,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn inputs<T: Scalar>(n_q: usize, n_k: usize, cfg: &AttentionConfig, seed: u64) -> [Tensor<T>; 3] {
    let [sq, sk, sv] = qkv_seeds(seed);
    [
        seeded_random_tensor(&[n_q, cfg.query_heads, cfg.head_dim], sq, Normal::STANDARD).unwrap(),
        seeded_random_tensor(&[n_k, cfg.kv_heads, cfg.head_dim], sk, Normal::STANDARD).unwrap(),
        seeded_random_tensor(&[n_k, cfg.kv_heads, cfg.head_dim], sv, Normal::STANDARD).unwrap(),
    ]
}

fn widen<T: Scalar>(x: &[Tensor<T>; 3]) -> [Tensor<f64>; 3] {
    [x[0].cast(), x[1].cast(), x[2].cast()]
}

/// `max |a - b| / max |b|`.
fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(f64::MIN_POSITIVE, |m, x| m.max(x.abs()));
    let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Straight-line masked softmax attention over raw buffers.
fn reference(x: &[Tensor<f64>; 3], cfg: &AttentionConfig, visible: impl Fn(usize, usize, usize) -> bool) -> Vec<f64> {
    let (q, k, v) = (x[0].data(), x[1].data(), x[2].data());
    let (n_q, n_k) = (x[0].shape()[0], x[1].shape()[0]);
    let (hq, hkv, d) = (cfg.query_heads, cfg.kv_heads, cfg.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n_q * hq * d];
    for i in 0..n_q {
        for h in 0..hq {
            let g = h / (hq / hkv);
            let logits: Vec<f64> = (0..n_k)
                .map(|j| {
                    if visible(i, g, j) {
                        (0..d).map(|t| q[(i * hq + h) * d + t] * k[(j * hkv + g) * d + t]).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let p = (l - mx).exp() / z;
                for t in 0..d {
                    out[(i * hq + h) * d + t] += p * v[(j * hkv + g) * d + t];
                }
            }
        }
    }
    out
}

fn random_selection(n_q: usize, n_k: usize, b: usize, groups: usize, density: f64, rng: &mut SplitMix64) -> BlockSelection {
    let off = n_k - n_q;
    let sets = (0..n_q * groups)
        .map(|idx| {
            let own = ((off + idx / groups) / b) as u32;
            let mut set: Vec<u32> = (0..own).filter(|_| rng.random_bool(density)).collect();
            set.push(own);
            set
        })
        .collect();
    BlockSelection::from_sets(b, n_k, groups, sets).unwrap()
}

fn sparse_cfg(hq: usize, hkv: usize, d: usize, b: usize) -> AttentionConfig {
    AttentionConfig { n_local: 2, window: 1, ..AttentionConfig::compact().with_heads(hq, hkv, d).with_block_size(b) }
}

fn dense_oracle() -> Outcome {
    let shapes = [(4, 2, 16), (8, 2, 32), (6, 3, 8)];
    let tiles = [Tiles::new(16, 32), Tiles::default(), Tiles::new(7, 5)];
    let (mut instances, mut worst64, mut worst32) = (0, 0.0f64, 0.0f64);
    let mut check = |x: [Tensor<f64>; 3], x32: [Tensor<f32>; 3], cfg: &AttentionConfig, t: Tiles, independent: bool| {
        let naive = naive_gqa_forward(&x[0], &x[1], &x[2], true, cfg).unwrap();
        let tiled = tiled_gqa_forward(&x[0], &x[1], &x[2], true, cfg, t).unwrap();
        worst64 = worst64.max(rel(tiled.output.data(), naive.output.data())).max(rel(tiled.lse.data(), naive.lse.data()));
        if independent {
            let off = x[1].shape()[0] - x[0].shape()[0];
            worst64 = worst64.max(rel(naive.output.data(), &reference(&x, cfg, |i, _, j| j <= off + i)));
        }
        let tiled32 = tiled_gqa_forward(&x32[0], &x32[1], &x32[2], true, cfg, t).unwrap();
        let w = widen(&x32);
        let naive_w = naive_gqa_forward(&w[0], &w[1], &w[2], true, cfg).unwrap();
        worst32 = worst32.max(rel(&tiled32.output.to_f64_vec(), naive_w.output.data()));
        instances += 2;
    };
    for (si, n) in [1usize, 2, 63, 64, 65, 257, 1024, 2048].into_iter().enumerate() {
        for rep in 0..3 {
            let (hq, hkv, d) = shapes[(si + rep) % 3];
            let cfg = AttentionConfig::compact().with_heads(hq, hkv, d);
            let seed = 100 * n as u64 + rep as u64;
            check(inputs(n, n, &cfg, seed), inputs(n, n, &cfg, seed), &cfg, tiles[rep], n <= 257);
        }
    }
    // Long-context head geometry: full self-attention at short lengths and
    // trailing queries against a 2048-token context.
    let paper = AttentionConfig::default();
    for (n_q, n_k) in [(64, 64), (257, 257), (8, 2048)] {
        check(inputs(n_q, n_k, &paper, n_k as u64), inputs(n_q, n_k, &paper, n_k as u64), &paper, Tiles::default(), n_k <= 257);
    }
    ensure(instances >= 50, || format!("only {instances} instances"))?;
    ensure(worst64 <= 1e-10 && worst32 <= 1e-4, || format!("worst f64 {worst64:e}, worst f32 {worst32:e}"))?;
    Ok(format!("{instances} instances, worst f64 {worst64:.1e} (≤1e-10), worst f32 {worst32:.1e} (≤1e-4)"))
}

fn sparse_oracle() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(2);
    let shapes = [(4, 2, 16), (8, 2, 8), (3, 3, 8), (4, 1, 8)];
    let (mut worst64, mut worst32, mut ragged) = (0.0f64, 0.0f64, 0);
    let instances = 220;
    for i in 0..instances {
        let b = [4, 8, 16, 32][rng.random_range(0..4)];
        let (hq, hkv, d) = shapes[rng.random_range(0..shapes.len())];
        let cfg = sparse_cfg(hq, hkv, d, b);
        let n_k = rng.random_range(1..=300);
        let n_q = if rng.random_bool(0.5) { n_k } else { rng.random_range(1..=n_k) };
        ragged += usize::from(n_k % b != 0);
        let sel = random_selection(n_q, n_k, b, hkv, rng.random_range(0.0..1.0), &mut rng);
        if i % 2 == 0 {
            let x = inputs::<f64>(n_q, n_k, &cfg, 5000 + i);
            let fast = sparse_forward(&x[0], &x[1], &x[2], &sel, &cfg).unwrap();
            let oracle = masked_naive_oracle(&x[0], &x[1], &x[2], &sel, &cfg).unwrap();
            let mask = SparseMask::new(&sel);
            let direct = reference(&x, &cfg, |r, g, j| mask.is_visible(r, g, j));
            worst64 = worst64
                .max(rel(fast.output.data(), oracle.output.data()))
                .max(rel(fast.lse.data(), oracle.lse.data()))
                .max(rel(oracle.output.data(), &direct));
        } else {
            let x = inputs::<f32>(n_q, n_k, &cfg, 5000 + i);
            let fast = sparse_forward(&x[0], &x[1], &x[2], &sel, &cfg).unwrap();
            let w = widen(&x);
            let oracle = masked_naive_oracle(&w[0], &w[1], &w[2], &sel, &cfg).unwrap();
            worst32 = worst32.max(rel(&fast.output.to_f64_vec(), oracle.output.data()));
        }
    }
    let mut worst_full = 0.0f64;
    for (n, b) in [(1, 4), (50, 16), (129, 32), (300, 8)] {
        let cfg = sparse_cfg(4, 2, 16, b);
        let x = inputs::<f64>(n, n, &cfg, n as u64);
        let all = BlockSelection::all_past(b, n, n, 2).unwrap();
        let sparse = sparse_forward(&x[0], &x[1], &x[2], &all, &cfg).unwrap();
        let dense = naive_gqa_forward(&x[0], &x[1], &x[2], true, &cfg).unwrap();
        worst_full = worst_full.max(rel(sparse.output.data(), dense.output.data()));
    }
    ensure(ragged > 0, || "no instance with n not divisible by B".into())?;
    ensure(worst64 <= 1e-10 && worst32 <= 1e-4 && worst_full <= 1e-10, || {
        format!("worst f64 {worst64:e}, f32 {worst32:e}, full selection {worst_full:e}")
    })?;
    Ok(format!(
        "{instances} instances ({ragged} with n mod B ≠ 0), worst f64 {worst64:.1e}, f32 {worst32:.1e}, full selection vs dense {worst_full:.1e}"
    ))
}

fn fused_equivalence() -> Outcome {
    let tiles = [Tiles::new(1, 1), Tiles::new(3, 5), Tiles::new(8, 16), Tiles::new(16, 16), Tiles::new(64, 64), Tiles::new(128, 32)];
    let (mut worst, mut compared, mut selections) = (0.0f64, 0, 0);
    for (i, (n, (hq, hkv, d))) in [(1, (4, 2, 16)), (17, (8, 2, 16)), (100, (6, 3, 8)), (257, (4, 2, 16)), (513, (16, 1, 8))]
        .into_iter()
        .enumerate()
    {
        let cfg = AttentionConfig::compact().with_heads(hq, hkv, d);
        let x = inputs::<f64>(n, n, &cfg, 70 + i as u64);
        let c1 = mean_pool_keys(&x[1], cfg.c1_len, cfg.c1_stride).unwrap();
        let direct = head_group_sum(&compressed_scores(&x[0], &c1, &cfg, true).unwrap(), cfg.group_size).unwrap();
        for t in tiles {
            let fused = fused_shared_scores_exact(&x[0], &c1, &cfg, t).unwrap();
            ensure(fused.empty_rows == direct.empty_rows, || format!("empty rows differ at n={n}"))?;
            let err = fused
                .scores
                .data()
                .iter()
                .zip(direct.scores.data())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            worst = worst.max(err);
            compared += 1;
        }
        let exact = select_blocks(&x[0], &x[1], &cfg, SelectionMode::Exact).unwrap();
        let fused = select_blocks(&x[0], &x[1], &cfg, SelectionMode::FusedExact).unwrap();
        ensure(exact == fused, || format!("selections differ at n={n}"))?;
        selections += 1;
    }
    ensure(worst <= 1e-10, || format!("worst {worst:e}"))?;
    Ok(format!("{compared} (instance, tile) pairs, worst {worst:.1e} (≤1e-10); {selections}/{selections} selections identical"))
}

fn single_head_invariance() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(4);
    let instances = 60;
    for i in 0..instances {
        let h = [1, 2, 4][rng.random_range(0..3)];
        let b = [8, 16, 32][rng.random_range(0..3)];
        let base = AttentionConfig::compact().with_heads(h, h, 8).with_block_size(b);
        let cfg = AttentionConfig { n_local: 2, window: b, k_top: rng.random_range(1..6), ..base };
        let n = rng.random_range(1..=700);
        let x = inputs::<f64>(n, n, &cfg, 900 + i);
        let approx = select_blocks(&x[0], &x[1], &cfg, SelectionMode::Approx).unwrap();
        let exact = select_blocks(&x[0], &x[1], &cfg, SelectionMode::Exact).unwrap();
        ensure(approx == exact, || format!("instance {i}: n={n} B={b} heads={h} differ"))?;
    }
    Ok(format!("{instances}/{instances} instances with identical selections"))
}

fn window_coverage() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(5);
    let draws = 520;
    for i in 0..draws {
        let b = [4, 8, 16, 32, 64][rng.random_range(0..5)];
        let w = rng.random_range(1..=4 * b + 8);
        let n = rng.random_range(1..=400);
        let base = AttentionConfig::compact().with_heads(2, 1, 8).with_block_size(b);
        let cfg = AttentionConfig {
            window: w,
            n_local: w.div_ceil(b) + 1,
            n_init: rng.random_range(1..=2),
            k_top: rng.random_range(0..=3),
            ..base
        };
        let x = inputs::<f32>(n, n, &cfg, 3000 + i);
        let sel = select_blocks(&x[0], &x[1], &cfg, SelectionMode::Approx).unwrap();
        ensure(window_coverage_check(&sel, w), || format!("draw {i}: n={n} w={w} B={b} not covered"))?;
    }
    // One local block short of the requirement: the query at the start of the
    // last block cannot reach back a full window.
    let mut found = 0u64;
    let trials = 50;
    for i in 0..trials {
        let b = [4, 8, 16, 32][rng.random_range(0..4)];
        let w = rng.random_range(b + 1..=6 * b);
        let n = 2 * w + 2 * b + rng.random_range(0..50);
        let cfg = AttentionConfig { window: w, n_local: w.div_ceil(b) + 1, k_top: 0, ..AttentionConfig::compact().with_heads(2, 1, 8).with_block_size(b) };
        let x = inputs::<f64>(n, n, &cfg, 4000 + i);
        let c1 = mean_pool_keys(&x[1], cfg.c1_len, cfg.c1_stride).unwrap();
        let shared = head_group_sum(&compressed_scores(&x[0], &c1, &cfg, true).unwrap(), cfg.group_size).unwrap();
        let blocks = max_pool_scores(&shared, cfg.pool_len, cfg.pool_stride).unwrap();
        let short = AttentionConfig { n_local: w.div_ceil(b) - 1, ..cfg };
        let sel = build_block_sets(&blocks, &short).unwrap();
        found += u64::from(!window_coverage_check(&sel, w));
    }
    ensure(found == trials, || format!("counterexample found in only {found}/{trials} configurations"))?;
    Ok(format!("{draws} covered draws; counterexample found in {found}/{trials} short-window configurations"))
}

/// Worst `|a - n| / max(1e-5 · max(|a|, |n|), 1e-8)`; at most 1 passes.
fn fd_ratio(
    x: &[Tensor<f64>; 3],
    d_out: &Tensor<f64>,
    analytic: [&Tensor<f64>; 3],
    forward: impl Fn(&[Tensor<f64>; 3]) -> Tensor<f64>,
) -> f64 {
    let step = 1e-4;
    let loss = |t: &[Tensor<f64>; 3]| forward(t).data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut worst = 0.0f64;
    for which in 0..3 {
        for idx in 0..x[which].numel() {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t[which].data_mut()[idx] += delta;
                loss(&t)
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[which].data()[idx];
            worst = worst.max((a - numeric).abs() / (1e-5 * a.abs().max(numeric.abs())).max(1e-8));
        }
    }
    worst
}

fn gradients() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(6);
    let cfg = sparse_cfg(4, 2, 4, 4);
    let (mut dense_worst, mut sparse_worst) = (0.0f64, 0.0f64);
    for (i, n) in [1usize, 4, 9, 13, 16].into_iter().enumerate() {
        let x = inputs::<f64>(n, n, &cfg, 600 + i as u64);
        let d_out: Tensor<f64> = seeded_random_tensor(&[n, 4, 4], 700 + i as u64, Normal::STANDARD).unwrap();
        let g = naive_gqa_backward(&x[0], &x[1], &x[2], &d_out, true, &cfg).unwrap();
        dense_worst = dense_worst.max(fd_ratio(&x, &d_out, [&g.dq, &g.dk, &g.dv], |t| {
            naive_gqa_forward(&t[0], &t[1], &t[2], true, &cfg).unwrap().output
        }));
    }
    for (i, (n_q, n_k)) in [(5, 5), (8, 8), (12, 12), (16, 16), (3, 14), (6, 16)].into_iter().enumerate() {
        let x = inputs::<f64>(n_q, n_k, &cfg, 800 + i as u64);
        let d_out: Tensor<f64> = seeded_random_tensor(&[n_q, 4, 4], 900 + i as u64, Normal::STANDARD).unwrap();
        let sel = random_selection(n_q, n_k, 4, 2, 0.4, &mut rng);
        let g = sparse_backward(&x[0], &x[1], &x[2], &sel, &d_out, &cfg).unwrap();
        sparse_worst = sparse_worst.max(fd_ratio(&x, &d_out, [&g.dq, &g.dk, &g.dv], |t| {
            sparse_forward(&t[0], &t[1], &t[2], &sel, &cfg).unwrap().output
        }));
    }
    // Trailing queries over a long context leave most key blocks unselected.
    let cfg8 = sparse_cfg(4, 2, 8, 8);
    let mut zero_rows = 0;
    for i in 0..10u64 {
        let (n_q, n_k) = (rng.random_range(1..=6), rng.random_range(40..=160));
        let x = inputs::<f64>(n_q, n_k, &cfg8, 1000 + i);
        let d_out: Tensor<f64> = seeded_random_tensor(&[n_q, 4, 8], 1100 + i, Normal::STANDARD).unwrap();
        let sel = random_selection(n_q, n_k, 8, 2, 0.2, &mut rng);
        let g = sparse_backward(&x[0], &x[1], &x[2], &sel, &d_out, &cfg8).unwrap();
        let mask = SparseMask::new(&sel);
        for grp in 0..2 {
            for j in (0..n_k).filter(|&j| (0..n_q).all(|r| !mask.is_visible(r, grp, j))) {
                let row = |t: &Tensor<f64>| t.data()[(j * 2 + grp) * 8..][..8].iter().all(|&v| v == 0.0);
                ensure(row(&g.dk) && row(&g.dv), || format!("instance {i}: key {j} group {grp} has a nonzero gradient"))?;
                zero_rows += 1;
            }
        }
    }
    ensure(zero_rows > 0, || "no invisible key rows were exercised".into())?;
    ensure(dense_worst <= 1.0 && sparse_worst <= 1.0, || {
        format!("tolerance multiples: dense {dense_worst:.3}, sparse {sparse_worst:.3}")
    })?;
    Ok(format!(
        "dense 5 and sparse 6 instances within tolerance (worst {dense_worst:.3} and {sparse_worst:.3} of the allowance); {zero_rows} invisible key rows exactly zero"
    ))
}

fn long_context_bench() -> swattn_cli::BenchReport {
    let modes = [BenchMode::DenseTiled, BenchMode::Sparse, BenchMode::SelectExact, BenchMode::SelectApprox];
    let opts = BenchOptions { query_rows: 16, repetitions: 5, seed: 0, precision: Precision::F32 };
    run_bench(&AttentionConfig::default(), &[32768], &modes, None, &opts).unwrap()
}

fn counted_speedup(report: &swattn_cli::BenchReport) -> Outcome {
    let cfg = &report.config;
    let sparse = report.record(BenchMode::Sparse, 32768).ok_or("missing sparse record")?;
    let detail = report.details.iter().find(|d| d.mode == BenchMode::Sparse).ok_or("missing sparse detail")?;
    let visits = detail.max_key_visits.unwrap_or(usize::MAX);
    let per_query = sparse.mac_count as f64 / detail.query_rows as f64;
    let bound = (6144 * 2 * cfg.head_dim * cfg.query_heads) as f64;
    ensure(visits <= 6144, || format!("a query visits {visits} keys"))?;
    ensure(per_query <= bound, || format!("{per_query} MACs per query > {bound}"))?;
    ensure(sparse.speedup_counts >= 4.0, || format!("speedup {:.3}", sparse.speedup_counts))?;
    Ok(format!(
        "speedup {:.3} (≥4.0), max keys per query {visits} (≤6144), {per_query:.0} MACs per query (≤{bound:.0})",
        sparse.speedup_counts
    ))
}

fn lse_cost_ratio(report: &swattn_cli::BenchReport) -> Outcome {
    let r = report.lse_pass_ratios.iter().find(|r| r.n == 32768).ok_or("missing pass-1 ratio")?;
    ensure((r.ratio - 0.25).abs() <= 0.02, || format!("ratio {:.4}", r.ratio))?;
    Ok(format!("pass-1 MACs {} / {} = {:.4} (0.25 ± 0.02)", r.approx_macs, r.exact_macs, r.ratio))
}

fn selection_quality() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let report = run_selection_quality(&quality_config(), 4096, &seeds, None, &QualityOptions::default()).unwrap();
    let losing: Vec<u64> = report.seeds.iter().filter(|s| !s.exact_beats_random).map(|s| s.seed).collect();
    ensure(losing.is_empty(), || format!("random baseline matched or beat exact on seeds {losing:?}"))?;
    let margin = report.seeds.iter().map(|s| s.recall_exact - s.recall_random).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "mean recall exact {:.4} vs random {:.4}, exact ahead on 10/10 seeds (smallest margin {margin:.2e}); approx {:.4}, approx/exact top-k overlap {:.3}, budget {} of 4096",
        report.mean_recall_exact, report.mean_recall_random, report.mean_recall_approx, report.mean_topk_overlap, report.budget_tokens
    ))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let pool = |threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (i, threads) in [1, 4, 4].into_iter().enumerate() {
        let run = pool(threads).install(|| {
            let check = run_correctness(11, &[1, 65, 130], None).unwrap();
            let dir = tmp.path().join(format!("run{i}"));
            let opts = BenchOptions { query_rows: 32, repetitions: 2, seed: 3, precision: Precision::F32 };
            let mut bench = run_bench(&AttentionConfig::compact(), &[64, 300], &BenchMode::ALL, Some(&dir.join("bench")), &opts).unwrap();
            gen_fixtures(&AttentionConfig::compact(), 9, &[64, 257], Precision::F32, &dir.join("fixtures")).unwrap();
            for r in &mut bench.records {
                r.wall_ms = 0.0;
            }
            let outputs: Vec<_> = files(&dir).into_iter().filter(|(name, _)| !name.starts_with("bench/bench.")).collect();
            (serde_json::to_string(&check).unwrap(), serde_json::to_string(&bench).unwrap(), outputs)
        });
        runs.push(run);
    }
    let n_files = runs[0].2.len();
    ensure(n_files > 0, || "no output files".into())?;
    for (i, r) in runs.iter().enumerate().skip(1) {
        ensure(r.0 == runs[0].0, || format!("run {i}: check report differs"))?;
        ensure(r.1 == runs[0].1, || format!("run {i}: bench counts differ"))?;
        ensure(r.2 == runs[0].2, || format!("run {i}: fixture or selection files differ"))?;
    }
    Ok(format!("3 runs on 1 and 4 threads: check reports, bench counts and {n_files} fixture/selection files bitwise identical"))
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS [{id:>2}] {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {msg} ({secs:.1}s)");
            }
        }
    };
    report(1, "dense oracle equivalence", &mut dense_oracle);
    report(2, "sparse oracle equivalence", &mut sparse_oracle);
    report(3, "fused selection equivalence", &mut fused_equivalence);
    report(4, "single-head approximation invariance", &mut single_head_invariance);
    report(5, "window coverage", &mut window_coverage);
    report(6, "gradient correctness", &mut gradients);
    let t = Instant::now();
    let bench = long_context_bench();
    println!("     long-context bench at n=32768 took {:.1}s", t.elapsed().as_secs_f64());
    report(7, "counted speedup", &mut || counted_speedup(&bench));
    report(8, "approximate normaliser cost ratio", &mut || lse_cost_ratio(&bench));
    report(9, "selection quality", &mut selection_quality);
    report(10, "determinism", &mut determinism);
    println!("acceptance: {} of 10 criteria passed in {:.1}s", 10 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
