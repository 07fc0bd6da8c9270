//! Length-based switch between dense and block-sparse attention.

use serde::{Deserialize, Serialize};

use crate::config::{validate_config, AttentionConfig};
use crate::counter::OpCounter;
use crate::dense::{tiled_gqa_forward_counted, AttentionResult, Tiles};
use crate::error::Result;
use crate::layout::Geometry;
use crate::scalar::Scalar;
use crate::selection::{select_blocks_with, SelectionMode, SELECTION_TILES};
use crate::sparse::sparse_forward_counted;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    Sparse,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        })
    }
}

/// Keys a sparse query can see at most; above it sparse attention saves work.
pub fn visible_token_budget(cfg: &AttentionConfig) -> usize {
    cfg.visible_token_budget()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwitchPolicy {
    /// Key lengths up to and including this run dense.
    pub threshold_tokens: usize,
    /// Overrides the length rule when set.
    pub forced_mode: Option<AttentionMode>,
    pub selection: SelectionMode,
}

impl SwitchPolicy {
    pub fn from_config(cfg: &AttentionConfig) -> Self {
        Self {
            threshold_tokens: cfg.switch_threshold_tokens(),
            forced_mode: None,
            selection: SelectionMode::Approx,
        }
    }

    pub fn forced(mut self, mode: AttentionMode) -> Self {
        self.forced_mode = Some(mode);
        self
    }

    pub fn mode_for(&self, n_k: usize) -> AttentionMode {
        self.forced_mode.unwrap_or(if n_k <= self.threshold_tokens {
            AttentionMode::Dense
        } else {
            AttentionMode::Sparse
        })
    }
}

/// Causal attention over `q` (trailing rows of the sequence) and `k`/`v`,
/// dense or sparse by key length. Returns the path taken.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    policy: &SwitchPolicy,
) -> Result<(AttentionResult<T>, AttentionMode)> {
    attend_counted(q, k, v, cfg, policy, &OpCounter::new())
}

pub fn attend_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    policy: &SwitchPolicy,
    ops: &OpCounter,
) -> Result<(AttentionResult<T>, AttentionMode)> {
    let geom = Geometry::from_qkv(q, k, v, cfg)?;
    let mode = policy.mode_for(geom.n_k);
    let out = match mode {
        AttentionMode::Dense => tiled_gqa_forward_counted(q, k, v, true, cfg, Tiles::default(), ops)?,
        AttentionMode::Sparse => {
            let cfg = validate_config(cfg.clone())?;
            let sel = select_blocks_with(q, k, &cfg, policy.selection, SELECTION_TILES, ops)?;
            sparse_forward_counted(q, k, v, &sel, &cfg, ops)?
        }
    };
    Ok((out, mode))
}
