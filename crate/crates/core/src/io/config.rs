// SPDX-License-Identifier: MIT OR Apache-2.0

//! `key = value` run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::head_analysis::{Aggregation, ScoringMethod, DEFAULT_N_ITERS};

/// Scale applied to selected heads to suppress a concept.
pub const INHIBIT_ALPHA: f64 = -1.0;
/// Scale applied to selected heads to promote a concept.
pub const ENHANCE_ALPHA: f64 = 5.0;
pub const DEFAULT_CONTROL_RUNS: usize = 10;
pub const DEFAULT_K: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {value}")]
    BadValue { line: usize, key: String, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub keywords: Option<PathBuf>,
    pub n_iters: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub controls: usize,
    pub method: ScoringMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            keywords: None,
            n_iters: DEFAULT_N_ITERS,
            k: DEFAULT_K,
            alpha: INHIBIT_ALPHA,
            seed: 0,
            aggregation: Aggregation::MeanAllTokens,
            controls: DEFAULT_CONTROL_RUNS,
            method: ScoringMethod::SompVariance,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "keywords" => cfg.keywords = Some(PathBuf::from(value)),
                "n_iters" => cfg.n_iters = parse_value(line, key, value)?,
                "k" => cfg.k = parse_value(line, key, value)?,
                "alpha" => {
                    let a: f64 = parse_value(line, key, value)?;
                    if !a.is_finite() {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.into(),
                            value: value.into(),
                        });
                    }
                    cfg.alpha = a;
                }
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "aggregation" => cfg.aggregation = parse_value(line, key, value)?,
                "controls" => cfg.controls = parse_value(line, key, value)?,
                "method" => cfg.method = parse_value(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
