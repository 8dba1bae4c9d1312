//! Selective state-space (Mamba-style) layers.

mod block;
pub mod conv;
pub mod scan;

use serde::{Deserialize, Serialize};

pub use block::{MambaLayer, MambaStack, MambaState, ScanMode};
pub use scan::{affine_scan, compose, discretize, scan_parallel, scan_sequential, ScanInputs, ScanState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SsmError {
    #[error("discretization step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("evolution parameter entries must be negative, got {0}")]
    NonNegativeA(f64),
    #[error("length mismatch: {0}")]
    Length(String),
}

/// Shape of a stack of selective-scan layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub embed_dim: usize,
    /// State size `N` per channel.
    pub state_size: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub n_layers: usize,
    /// Rank of the Δ projection; `0` means `ceil(embed_dim / 16)`.
    pub dt_rank: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            state_size: 16,
            expand: 2,
            conv_width: 4,
            n_layers: 2,
            dt_rank: 0,
            dt_min: 0.001,
            dt_max: 0.1,
        }
    }
}

impl SsmConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.embed_dim
    }

    pub fn resolved_dt_rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.embed_dim.div_ceil(16)
        } else {
            self.dt_rank
        }
    }
}
