//! Dense-sparse switchable grouped-query attention for the CPU.
//!
//! Short inputs run exact dense attention. Long inputs run a parameter-free
//! block selection (mean-pooled keys, head-group score summation, max-pooled
//! block scores, top-k plus initial and local blocks) followed by
//! block-sparse attention over the selected blocks. Both paths read the same
//! Q/K/V and return the same output and log-sum-exp layout.
//!
//! Every kernel is generic over the storage scalar ([`Scalar`], implemented
//! for `f32` and `f64`); softmax statistics always accumulate in `f64`.

pub mod compression;
pub mod config;
pub mod counter;
pub mod dense;
pub mod error;
pub mod layout;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod sparse;
pub mod switchable;
pub mod tensor;

pub use compression::{
    compressed_scores, head_group_sum, max_pool_scores, mean_pool_keys, CompressedKeys, ScoreKind,
    ScoreMatrix,
};
pub use config::{validate_config, AttentionConfig, ConfigError};
pub use counter::{OpCounter, OpCounts, Stage, StageKind};
pub use dense::{
    naive_gqa_backward, naive_gqa_forward, naive_probabilities, tiled_gqa_forward, AttentionResult, Gradients,
    Tiles,
};
pub use error::{Error, Result};
pub use rng::{seeded_random_tensor, Normal};
pub use scalar::{Precision, Scalar};
pub use selection::{
    build_block_sets, fused_shared_scores_approx, fused_shared_scores_exact, select_blocks,
    window_coverage_check, BlockSelection, SelectionMode,
};
pub use sparse::{masked_naive_oracle, sparse_backward, sparse_forward, SparseMask};
pub use switchable::{attend, attend_counted, visible_token_budget, AttentionMode, SwitchPolicy};
pub use tensor::{load_tensor, save_tensor, AnyTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AttentionResult32 = AttentionResult<f32>;
pub type AttentionResult64 = AttentionResult<f64>;
pub type Gradients32 = Gradients<f32>;
pub type Gradients64 = Gradients<f64>;
pub type CompressedKeys32 = CompressedKeys<f32>;
pub type CompressedKeys64 = CompressedKeys<f64>;
