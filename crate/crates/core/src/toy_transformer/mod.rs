// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer with per-head residual-stream capture and
//! per-head rescaling.
//!
//! Each block is pre-norm with attention and MLP reading the same normalized
//! residual (parallel layout):
//!
//! ```text
//! x <- x + sum_h alpha_h * write_h(rms(x) ; g_attn) + mlp(rms(x) ; g_mlp)
//! ```
//!
//! `write_h` is head `h`'s output after its slice of the output projection,
//! i.e. exactly what the head adds to the residual stream. Because the MLP
//! does not see the attention output of its own block, rescaling a head in
//! the last layer changes the final residual by exactly
//! `(alpha - 1) * write_h`. Norms are RMS with a learned gain and no bias;
//! the MLP is `gelu(x W_in) W_out` with hidden width `4 * d_model`.

mod forward;
mod model;
mod planted;
mod vocab;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::head_analysis::{AnalysisError, HeadId};
use crate::io::FormatError;

pub use forward::{
    capture_head_outputs, capture_head_outputs_with, forward, forward_traced, generate_greedy, CaptureRequest,
    ForwardOutput, ForwardTrace,
};
pub use model::{init_model, LayerWeights, ModelBundle, Weights};
pub use planted::{
    build_planted_model, probe_prompts, study_config, study_planted, PlantedFixture, FIXTURE_COLOURS,
    STUDY_EVAL_PROMPTS, STUDY_MAX_NEW, STUDY_PROMPT_WORDS, STUDY_SEED, STUDY_SELECTION_PROMPTS, STUDY_STRENGTH,
};
pub use vocab::Vocab;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_SCALE: f64 = 0.02;
/// RMS norm epsilon.
pub const NORM_EPS: f64 = 1e-6;
/// Token id 0 is the sequence-start token.
pub const BOS_TOKEN: usize = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("intervention scale for {0} is not finite")]
    NonFiniteScale(HeadId),
    #[error("head {0} is outside the model grid")]
    HeadOutOfRange(HeadId),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.max_seq_len == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn contains(&self, id: HeadId) -> bool {
        id.layer < self.n_layers && id.head < self.n_heads
    }
}

/// Per-head residual-write scales. Heads not listed use 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSpec {
    scales: BTreeMap<HeadId, f64>,
}

impl InterventionSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Entries equal to 1 are dropped.
    pub fn new(scales: impl IntoIterator<Item = (HeadId, f64)>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (id, alpha) in scales {
            if !alpha.is_finite() {
                return Err(ModelError::NonFiniteScale(id));
            }
            if alpha != 1.0 {
                out.insert(id, alpha);
            } else {
                out.remove(&id);
            }
        }
        Ok(Self { scales: out })
    }

    /// The same `alpha` on every head in `heads`.
    pub fn uniform(heads: &[HeadId], alpha: f64) -> Result<Self> {
        Self::new(heads.iter().map(|&h| (h, alpha)))
    }

    pub fn scale(&self, id: HeadId) -> f64 {
        self.scales.get(&id).copied().unwrap_or(1.0)
    }

    pub fn is_identity(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scales(&self) -> &BTreeMap<HeadId, f64> {
        &self.scales
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        for id in self.scales.keys() {
            if !config.contains(*id) {
                return Err(ModelError::HeadOutOfRange(*id));
            }
        }
        Ok(())
    }
}
