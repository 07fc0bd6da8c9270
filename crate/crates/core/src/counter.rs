//! Deterministic operation tallies.
//!
//! Kernels record multiply-accumulates and exponentials per pipeline stage.
//! Counts are integers accumulated with relaxed atomics, so the totals are
//! independent of thread scheduling.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Dense attention.
    Dense,
    /// Mean-pooling of keys into compressed entries.
    Pool,
    /// Normaliser pass of the two-pass shared-score kernel.
    LsePass,
    /// Score pass (or the single pass of the direct path).
    ScorePass,
    /// Block-sparse attention.
    Sparse,
}

/// Coarse grouping of stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Dense,
    Selection,
    Sparse,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Dense,
        Stage::Pool,
        Stage::LsePass,
        Stage::ScorePass,
        Stage::Sparse,
    ];

    pub fn kind(self) -> StageKind {
        match self {
            Stage::Dense => StageKind::Dense,
            Stage::Pool | Stage::LsePass | Stage::ScorePass => StageKind::Selection,
            Stage::Sparse => StageKind::Sparse,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mac_count: u64,
    pub exp_count: u64,
}

impl std::ops::Add for OpCounts {
    type Output = OpCounts;

    fn add(self, rhs: Self) -> Self {
        OpCounts {
            mac_count: self.mac_count + rhs.mac_count,
            exp_count: self.exp_count + rhs.exp_count,
        }
    }
}

#[derive(Debug, Default)]
pub struct OpCounter {
    macs: [AtomicU64; 5],
    exps: [AtomicU64; 5],
    peak_scratch: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&self, stage: Stage, macs: u64, exps: u64) {
        let i = stage.index();
        if macs != 0 {
            self.macs[i].fetch_add(macs, Ordering::Relaxed);
        }
        if exps != 0 {
            self.exps[i].fetch_add(exps, Ordering::Relaxed);
        }
    }

    /// Note a per-worker scratch allocation of `elements` values.
    pub fn note_scratch(&self, elements: usize) {
        self.peak_scratch.fetch_max(elements as u64, Ordering::Relaxed);
    }

    /// Largest per-worker scratch buffer seen, in elements.
    pub fn peak_scratch(&self) -> u64 {
        self.peak_scratch.load(Ordering::Relaxed)
    }

    pub fn stage(&self, stage: Stage) -> OpCounts {
        let i = stage.index();
        OpCounts {
            mac_count: self.macs[i].load(Ordering::Relaxed),
            exp_count: self.exps[i].load(Ordering::Relaxed),
        }
    }

    pub fn kind(&self, kind: StageKind) -> OpCounts {
        Stage::ALL
            .iter()
            .filter(|s| s.kind() == kind)
            .map(|&s| self.stage(s))
            .fold(OpCounts::default(), |a, b| a + b)
    }

    pub fn total(&self) -> OpCounts {
        Stage::ALL
            .iter()
            .map(|&s| self.stage(s))
            .fold(OpCounts::default(), |a, b| a + b)
    }
}
