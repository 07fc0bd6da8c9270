//! Architectural and sparsity hyperparameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// All attention hyperparameters. The JSON form uses the short symbol names
/// (`h_q`, `B`, `l_C1`, `N_local`, ...).
///
/// Extents are in tokens unless noted. `pool_len`/`pool_stride` are in units
/// of stage-1 compressed entries. `seq_len` is the nominal sequence length
/// used by fixtures and the CLI; kernels take the length from their inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    #[serde(rename = "n")]
    pub seq_len: usize,
    #[serde(rename = "d")]
    pub model_dim: usize,
    #[serde(rename = "d_h")]
    pub head_dim: usize,
    #[serde(rename = "h_q")]
    pub query_heads: usize,
    #[serde(rename = "h_kv")]
    pub kv_heads: usize,
    #[serde(rename = "G")]
    pub group_size: usize,
    #[serde(rename = "B")]
    pub block_size: usize,
    #[serde(rename = "l_C1")]
    pub c1_len: usize,
    #[serde(rename = "s_C1")]
    pub c1_stride: usize,
    #[serde(rename = "l_C2")]
    pub c2_len: usize,
    #[serde(rename = "s_C2")]
    pub c2_stride: usize,
    #[serde(rename = "l")]
    pub pool_len: usize,
    #[serde(rename = "s")]
    pub pool_stride: usize,
    #[serde(rename = "N_init")]
    pub n_init: usize,
    #[serde(rename = "N_local")]
    pub n_local: usize,
    pub k_top: usize,
    #[serde(rename = "w")]
    pub window: usize,
    /// Context length above which the switch takes the sparse path.
    /// `None` means the visible-token budget.
    #[serde(default)]
    pub switch_threshold: Option<usize>,
    /// Apply `1/sqrt(d_h)` to compressed-key logits as in dense attention.
    #[serde(default = "default_true")]
    pub scale_compressed: bool,
    /// Allow pooling profiles that break block alignment.
    #[serde(default)]
    pub experimental: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AttentionConfig {
    /// 8B-scale long-context profile: 32 query heads over 2 KV heads of
    /// width 128, 64-token blocks, 1 + 32 + 63 selected blocks.
    fn default() -> Self {
        Self {
            seq_len: 32768,
            model_dim: 4096,
            head_dim: 128,
            query_heads: 32,
            kv_heads: 2,
            group_size: 16,
            block_size: 64,
            c1_len: 32,
            c1_stride: 16,
            c2_len: 128,
            c2_stride: 64,
            pool_len: 5,
            pool_stride: 4,
            n_init: 1,
            n_local: 32,
            k_top: 63,
            window: 512,
            switch_threshold: None,
            scale_compressed: true,
            experimental: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("`{0}` must be strictly positive")]
    ZeroExtent(&'static str),
    #[error("group divisibility: h_q = {query_heads} is not a multiple of h_kv = {kv_heads}")]
    GroupDivisibility { query_heads: usize, kv_heads: usize },
    #[error("group size: G = {group_size} but h_q / h_kv = {expected}")]
    GroupSize { group_size: usize, expected: usize },
    #[error("pool ordering: {stage} length {length} is shorter than its stride {stride}")]
    PoolOrdering {
        stage: &'static str,
        length: usize,
        stride: usize,
    },
    #[error("stride divisibility: s_C1 = {stride} does not divide l_C1 = {length}")]
    StrideDivisibility { stride: usize, length: usize },
    #[error("block pool overlap: s = {stride} does not divide l - 1 = {}", length - 1)]
    BlockPoolOverlap { stride: usize, length: usize },
    #[error("block alignment: s * s_C1 = {got} but B = {block_size}")]
    BlockAlignment { got: usize, block_size: usize },
    #[error("approximation pooling: s_C2 = {c2_stride} must be a multiple of s_C1 = {c1_stride} and l_C2 = {c2_len} at least l_C1 = {c1_len}")]
    ApproxPooling {
        c1_len: usize,
        c1_stride: usize,
        c2_len: usize,
        c2_stride: usize,
    },
    #[error("window coverage: N_local = {n_local} < ceil(w / B) + 1 = {required}")]
    WindowCoverage { n_local: usize, required: usize },
}

impl AttentionConfig {
    /// Small geometry for quick checks: 4 query heads over 2 KV heads of
    /// width 16, 16-token blocks.
    pub fn compact() -> Self {
        Self {
            seq_len: 256,
            model_dim: 64,
            head_dim: 16,
            query_heads: 4,
            kv_heads: 2,
            group_size: 2,
            block_size: 16,
            c1_len: 8,
            c1_stride: 4,
            c2_len: 32,
            c2_stride: 16,
            pool_len: 5,
            pool_stride: 4,
            n_init: 1,
            n_local: 3,
            k_top: 4,
            window: 32,
            switch_threshold: None,
            scale_compressed: true,
            experimental: false,
        }
    }

    /// Pooling profile derived from a block size: `l_C1 = B/2`, `s_C1 = B/4`,
    /// `l_C2 = 4 l_C1`, `s_C2 = 4 s_C1`, `l = 5`, `s = 4`.
    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self.c1_len = block_size / 2;
        self.c1_stride = block_size / 4;
        self.c2_len = 4 * self.c1_len;
        self.c2_stride = 4 * self.c1_stride;
        self.pool_len = 5;
        self.pool_stride = 4;
        self
    }

    pub fn with_heads(mut self, query_heads: usize, kv_heads: usize, head_dim: usize) -> Self {
        self.query_heads = query_heads;
        self.kv_heads = kv_heads;
        self.head_dim = head_dim;
        self.group_size = query_heads.checked_div(kv_heads).unwrap_or(0);
        self.model_dim = query_heads * head_dim;
        self
    }

    /// Smallest local-block count that covers a window of `window` tokens.
    pub fn required_local_blocks(window: usize, block_size: usize) -> usize {
        window.div_ceil(block_size) + 1
    }

    /// `(N_init + N_local + k_top) · B`: the most keys a sparse query can visit.
    pub fn visible_token_budget(&self) -> usize {
        (self.n_init + self.n_local + self.k_top) * self.block_size
    }

    pub fn switch_threshold_tokens(&self) -> usize {
        self.switch_threshold.unwrap_or_else(|| self.visible_token_budget())
    }

    pub fn num_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
    }

    pub fn validate(self) -> Result<Self, ConfigError> {
        validate_config(self)
    }
}

/// Check every invariant, reporting the first one violated.
pub fn validate_config(cfg: AttentionConfig) -> Result<AttentionConfig, ConfigError> {
    let extents = [
        ("n", cfg.seq_len),
        ("d", cfg.model_dim),
        ("d_h", cfg.head_dim),
        ("h_q", cfg.query_heads),
        ("h_kv", cfg.kv_heads),
        ("G", cfg.group_size),
        ("B", cfg.block_size),
        ("l_C1", cfg.c1_len),
        ("s_C1", cfg.c1_stride),
        ("l_C2", cfg.c2_len),
        ("s_C2", cfg.c2_stride),
        ("l", cfg.pool_len),
        ("s", cfg.pool_stride),
        ("N_init", cfg.n_init),
        ("N_local", cfg.n_local),
        ("w", cfg.window),
    ];
    if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
        return Err(ConfigError::ZeroExtent(name));
    }
    if !cfg.query_heads.is_multiple_of(cfg.kv_heads) {
        return Err(ConfigError::GroupDivisibility {
            query_heads: cfg.query_heads,
            kv_heads: cfg.kv_heads,
        });
    }
    let expected = cfg.query_heads / cfg.kv_heads;
    if cfg.group_size != expected {
        return Err(ConfigError::GroupSize {
            group_size: cfg.group_size,
            expected,
        });
    }
    for (stage, length, stride) in [
        ("C1", cfg.c1_len, cfg.c1_stride),
        ("C2", cfg.c2_len, cfg.c2_stride),
    ] {
        if length < stride {
            return Err(ConfigError::PoolOrdering { stage, length, stride });
        }
    }
    if !cfg.experimental {
        if !cfg.c1_len.is_multiple_of(cfg.c1_stride) {
            return Err(ConfigError::StrideDivisibility {
                stride: cfg.c1_stride,
                length: cfg.c1_len,
            });
        }
        if !(cfg.pool_len - 1).is_multiple_of(cfg.pool_stride) {
            return Err(ConfigError::BlockPoolOverlap {
                stride: cfg.pool_stride,
                length: cfg.pool_len,
            });
        }
        if cfg.pool_stride * cfg.c1_stride != cfg.block_size {
            return Err(ConfigError::BlockAlignment {
                got: cfg.pool_stride * cfg.c1_stride,
                block_size: cfg.block_size,
            });
        }
        if !cfg.c2_stride.is_multiple_of(cfg.c1_stride) || cfg.c2_len < cfg.c1_len {
            return Err(ConfigError::ApproxPooling {
                c1_len: cfg.c1_len,
                c1_stride: cfg.c1_stride,
                c2_len: cfg.c2_len,
                c2_stride: cfg.c2_stride,
            });
        }
    }
    let required = AttentionConfig::required_local_blocks(cfg.window, cfg.block_size);
    if cfg.n_local < required {
        return Err(ConfigError::WindowCoverage {
            n_local: cfg.n_local,
            required,
        });
    }
    Ok(cfg)
}
