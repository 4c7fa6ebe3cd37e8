// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text metrics for intervention runs and their summary reports.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no values for {0}")]
    EmptyInput(&'static str),
    #[error("non-finite metric value")]
    NonFinite,
}

/// Lowercase, drop punctuation, split on whitespace.
fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-overlap F1 with multiset counts.
///
/// Both sides are lowercased, stripped of punctuation and split on
/// whitespace. Two empty token lists score 1, one empty list scores 0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_tokens(prediction);
    let gold = normalize_tokens(gold);
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Case-insensitive equality after trimming and collapsing whitespace runs.
pub fn exact_match(prediction: &str, gold_label: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    norm(prediction) == norm(gold_label)
}

/// Words are maximal runs of alphanumeric characters (plus `'`), compared
/// lowercase.
fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Number of whole-word, case-insensitive keyword occurrences in `text`,
/// counted with multiplicity.
pub fn keyword_count(text: &str, keywords: &BTreeSet<String>) -> usize {
    let lowered: BTreeSet<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    words(text).filter(|w| lowered.contains(w)).count()
}

/// Linear-interpolation quantile of sorted data: position `p * (n - 1)`,
/// interpolated between its neighbours.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One metric under baseline, intervention and (optionally) random controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    /// Mean baseline value.
    pub baseline: f64,
    /// Mean value under the intervention.
    pub intervened: f64,
    /// `intervened / baseline`, or `intervened` itself when the baseline mean
    /// is not positive (see `absolute`).
    pub normalized: f64,
    /// Set when normalization was impossible and values are absolute.
    #[serde(default)]
    pub absolute: bool,
    /// Median over control runs of the (normalized) per-run mean.
    pub control_median: Option<f64>,
    /// 25% and 75% quantiles of the same.
    pub control_iqr: Option<(f64, f64)>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Summarizes a metric. Each control run is reduced to its mean, normalized
/// by the baseline mean like the intervened value, and the median and IQR
/// are taken across runs with [`quantile_sorted`].
pub fn aggregate_report(
    name: &str,
    baseline_values: &[f64],
    intervened_values: &[f64],
    control_runs: &[Vec<f64>],
) -> Result<MetricReport, EvalError> {
    if baseline_values.is_empty() {
        return Err(EvalError::EmptyInput("baseline"));
    }
    if intervened_values.is_empty() {
        return Err(EvalError::EmptyInput("intervened"));
    }
    let all = baseline_values
        .iter()
        .chain(intervened_values)
        .chain(control_runs.iter().flatten());
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let baseline = mean(baseline_values);
    let intervened = mean(intervened_values);
    let absolute = baseline <= 0.0;
    let norm = |v: f64| if absolute { v } else { v / baseline };

    let (control_median, control_iqr) = if control_runs.is_empty() {
        (None, None)
    } else {
        let mut per_run = Vec::with_capacity(control_runs.len());
        for run in control_runs {
            if run.is_empty() {
                return Err(EvalError::EmptyInput("control run"));
            }
            per_run.push(norm(mean(run)));
        }
        per_run.sort_by(f64::total_cmp);
        (
            quantile_sorted(&per_run, 0.5),
            Some((
                quantile_sorted(&per_run, 0.25).unwrap_or_default(),
                quantile_sorted(&per_run, 0.75).unwrap_or_default(),
            )),
        )
    };

    Ok(MetricReport {
        name: name.to_string(),
        baseline,
        intervened,
        normalized: norm(intervened),
        absolute,
        control_median,
        control_iqr,
    })
}

/// Fixed-width table of reports.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<20} {:>10} {:>10} {:>10} {:>10} {:>21}\n",
        "metric", "baseline", "intervened", "normalized", "ctrl_med", "ctrl_iqr"
    );
    for r in reports {
        let med = r
            .control_median
            .map(|m| format!("{m:.4}"))
            .unwrap_or_else(|| "-".into());
        let iqr = r
            .control_iqr
            .map(|(a, b)| format!("[{a:.4}, {b:.4}]"))
            .unwrap_or_else(|| "-".into());
        let flag = if r.absolute { "*" } else { "" };
        out.push_str(&format!(
            "{:<20} {:>10.4} {:>10.4} {:>9.4}{:1} {:>10} {:>21}\n",
            r.name, r.baseline, r.intervened, r.normalized, flag, med, iqr
        ));
    }
    out
}
