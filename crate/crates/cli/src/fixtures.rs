//! Golden tensors for external comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swattn::rng::qkv_seeds;
use swattn::tensor::write_atomic;
use swattn::{
    naive_gqa_forward, seeded_random_tensor, select_blocks, validate_config, AttentionConfig, Normal, Precision, Scalar,
    SelectionMode, Tensor,
};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub precision: Precision,
    pub config: AttentionConfig,
    pub sizes: Vec<usize>,
    /// Files relative to the output directory.
    pub files: Vec<PathBuf>,
}

fn write_size<T: Scalar>(cfg: &AttentionConfig, n: usize, seed: u64, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let [sq, sk, sv] = qkv_seeds(seed);
    let q: Tensor<T> = seeded_random_tensor(&[n, cfg.query_heads, cfg.head_dim], sq, Normal::STANDARD)?;
    let k: Tensor<T> = seeded_random_tensor(&[n, cfg.kv_heads, cfg.head_dim], sk, Normal::STANDARD)?;
    let v: Tensor<T> = seeded_random_tensor(&[n, cfg.kv_heads, cfg.head_dim], sv, Normal::STANDARD)?;
    let res = naive_gqa_forward(&q, &k, &v, true, cfg)?;
    let sel = select_blocks(&q, &k, cfg, SelectionMode::Approx)?;

    let sub = PathBuf::from(format!("n{n}"));
    std::fs::create_dir_all(dir.join(&sub))?;
    let mut files = Vec::new();
    for (name, t) in [("q.bin", &q), ("k.bin", &k), ("v.bin", &v), ("out.bin", &res.output), ("lse.bin", &res.lse)] {
        t.save(dir.join(&sub).join(name))?;
        files.push(sub.join(name));
    }
    sel.save(dir.join(&sub).join("selection.bin"))?;
    files.push(sub.join("selection.bin"));
    Ok(files)
}

/// Write inputs, dense output, log-sum-exp and the approximate block
/// selection for each size under `out/n<size>/`, plus `manifest.json`.
pub fn gen_fixtures(cfg: &AttentionConfig, seed: u64, sizes: &[usize], precision: Precision, out: &Path) -> CliResult<FixtureManifest> {
    let cfg = validate_config(cfg.clone())?;
    if sizes.contains(&0) {
        return Err(CliError::Usage("sizes must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for &n in sizes {
        files.extend(match precision {
            Precision::F32 => write_size::<f32>(&cfg, n, seed, out)?,
            Precision::F64 => write_size::<f64>(&cfg, n, seed, out)?,
        });
    }
    let manifest = FixtureManifest { seed, precision, config: cfg, sizes: sizes.to_vec(), files };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
