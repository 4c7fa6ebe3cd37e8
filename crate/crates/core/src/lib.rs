// SPDX-License-Identifier: MIT OR Apache-2.0

//! # headpursuit
//!
//! Finds attention heads that specialize in a concept and checks the finding
//! by intervening on them.
//!
//! - [`sparse_recovery`]: matching pursuit, OMP and simultaneous OMP over a
//!   fixed dictionary, with least-squares refits and explained variance.
//! - [`head_analysis`]: head activation sets, keyword-restricted dictionaries,
//!   head scoring and ranking, matched random controls.
//! - [`toy_transformer`]: a small decoder-only model with per-head capture
//!   and per-head residual rescaling, plus planted-head fixtures.
//! - [`evaluation`]: F1, exact match, keyword counts and report aggregation.
//! - [`io`]: the `HPT1` tensor container, keyword lists and run configs.

pub mod evaluation;
pub mod head_analysis;
pub mod io;
pub mod sparse_recovery;
pub mod toy_transformer;

pub use head_analysis::{HeadActivationSet, HeadId, HeadRanking, ScoringMethod};
pub use sparse_recovery::{Dictionary, SignalMatrix, SompResult, SupportSet};
pub use toy_transformer::{InterventionSpec, ModelBundle, ModelConfig};
