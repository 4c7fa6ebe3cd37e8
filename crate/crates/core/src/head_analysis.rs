// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head scoring against a concept-restricted dictionary.
//!
//! Each attention head is represented by the matrix of its residual-stream
//! writes, one token-aggregated row per prompt. A head is scored by how much
//! of that matrix's energy a pursuit over the concept atoms can explain, or
//! by the logit-lens baseline (mean inner product with the concept atoms).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse_recovery::{self, Dictionary, SignalMatrix, SparseError};

/// Iteration count used when none is given.
pub const DEFAULT_N_ITERS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("aggregation mask selects no tokens")]
    EmptyMask,
    #[error("mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("no keyword matched a single vocabulary token")]
    NoKeywordMatched,
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("k = {k} exceeds the {available} rankable heads")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("layer {layer} has {selected} selected heads but only {pool} others")]
    InsufficientPool { layer: usize, selected: usize, pool: usize },
    #[error("head {0} is outside the model grid")]
    HeadOutOfRange(HeadId),
    #[error("activation set is empty")]
    EmptyActivations,
    #[error("head {head} has shape {actual:?}, expected {expected:?}")]
    InconsistentShape {
        head: HeadId,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("activation set is missing head {0}")]
    IncompleteGrid(HeadId),
    #[error("unknown {kind} '{value}'")]
    Parse { kind: &'static str, value: String },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// (layer, head) coordinate. Orders by layer first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Accepts `L3H5`, `3:5` and `3.5`.
impl FromStr for HeadId {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        let err = || AnalysisError::Parse {
            kind: "head id",
            value: s.to_string(),
        };
        let t = s.trim();
        let (l, h) = if let Some(rest) = t.strip_prefix('L').or_else(|| t.strip_prefix('l')) {
            let pos = rest.find(['H', 'h']).ok_or_else(err)?;
            (&rest[..pos], &rest[pos + 1..])
        } else {
            t.split_once([':', '.']).ok_or_else(err)?
        };
        Ok(HeadId::new(
            l.parse().map_err(|_| err())?,
            h.parse().map_err(|_| err())?,
        ))
    }
}

/// How per-token head writes are collapsed into one row per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanAllTokens,
    MeanImageTokens,
    LastToken,
}

impl Aggregation {
    pub fn code(self) -> u32 {
        match self {
            Aggregation::MeanAllTokens => 0,
            Aggregation::MeanImageTokens => 1,
            Aggregation::LastToken => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Aggregation::MeanAllTokens),
            1 => Some(Aggregation::MeanImageTokens),
            2 => Some(Aggregation::LastToken),
            _ => None,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MeanAllTokens => "mean_all_tokens",
            Aggregation::MeanImageTokens => "mean_image_tokens",
            Aggregation::LastToken => "last_token",
        })
    }
}

impl FromStr for Aggregation {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "mean_all_tokens" | "mean" => Ok(Aggregation::MeanAllTokens),
            "mean_image_tokens" | "image" => Ok(Aggregation::MeanImageTokens),
            "last_token" | "last" => Ok(Aggregation::LastToken),
            _ => Err(AnalysisError::Parse {
                kind: "aggregation",
                value: s.to_string(),
            }),
        }
    }
}

/// Collapses `per_token` (T x d) into one row.
///
/// Mean modes average the rows where `mask` is true; `LastToken` takes the
/// last masked row.
pub fn aggregate_tokens(per_token: &DMatrix<f64>, mask: &[bool], mode: Aggregation) -> Result<Vec<f64>> {
    if mask.len() != per_token.nrows() {
        return Err(AnalysisError::MaskLength {
            mask: mask.len(),
            tokens: per_token.nrows(),
        });
    }
    let selected: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    let Some(&last) = selected.last() else {
        return Err(AnalysisError::EmptyMask);
    };
    let d = per_token.ncols();
    match mode {
        Aggregation::LastToken => Ok(per_token.row(last).iter().copied().collect()),
        Aggregation::MeanAllTokens | Aggregation::MeanImageTokens => {
            let mut out = vec![0.0; d];
            for &t in &selected {
                for (o, x) in out.iter_mut().zip(per_token.row(t).iter()) {
                    *o += x;
                }
            }
            let count = selected.len() as f64;
            out.iter_mut().for_each(|o| *o /= count);
            Ok(out)
        }
    }
}

/// Aggregated activation matrices for a full (layer x head) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivationSet {
    entries: BTreeMap<HeadId, SignalMatrix>,
    n_layers: usize,
    n_heads: usize,
    n_samples: usize,
    d_model: usize,
    aggregation: Aggregation,
}

impl HeadActivationSet {
    /// Requires a complete rectangular grid `0..L x 0..H` of equally shaped
    /// matrices.
    pub fn new(entries: BTreeMap<HeadId, SignalMatrix>, aggregation: Aggregation) -> Result<Self> {
        let first = entries.values().next().ok_or(AnalysisError::EmptyActivations)?;
        let shape = (first.n_samples(), first.dim());
        let n_layers = entries.keys().map(|h| h.layer).max().unwrap_or(0) + 1;
        let n_heads = entries.keys().map(|h| h.head).max().unwrap_or(0) + 1;
        for layer in 0..n_layers {
            for head in 0..n_heads {
                let id = HeadId::new(layer, head);
                let m = entries.get(&id).ok_or(AnalysisError::IncompleteGrid(id))?;
                let actual = (m.n_samples(), m.dim());
                if actual != shape {
                    return Err(AnalysisError::InconsistentShape {
                        head: id,
                        expected: shape,
                        actual,
                    });
                }
            }
        }
        Ok(Self {
            entries,
            n_layers,
            n_heads,
            n_samples: shape.0,
            d_model: shape.1,
            aggregation,
        })
    }

    pub fn get(&self, id: HeadId) -> Option<&SignalMatrix> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HeadId, &SignalMatrix)> {
        self.entries.iter()
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.entries.keys().copied()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    /// Every matrix multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(id, m)| Ok((*id, m.scaled(factor)?)))
            .collect::<Result<_>>()?;
        Self::new(entries, self.aggregation)
    }
}

/// The unembedding restricted to the rows of a keyword list.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDictionary {
    base: Dictionary,
    kept_rows: Vec<usize>,
    restricted: Dictionary,
    keywords: Vec<String>,
    unmatched_keywords: Vec<String>,
}

impl ConceptDictionary {
    pub fn base(&self) -> &Dictionary {
        &self.base
    }

    /// Ascending indices into the base dictionary.
    pub fn kept_rows(&self) -> &[usize] {
        &self.kept_rows
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn unmatched_keywords(&self) -> &[String] {
        &self.unmatched_keywords
    }

    /// The kept rows as a standalone dictionary.
    pub fn restricted(&self) -> &Dictionary {
        &self.restricted
    }

    pub fn len(&self) -> usize {
        self.kept_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_rows.is_empty()
    }
}

/// Token strings a keyword may appear as: itself, lowercased, and each with
/// the plain-space, byte-level (`Ġ`) and sentencepiece (`▁`) word prefix.
fn canonical_forms(keyword: &str) -> Vec<String> {
    let mut bases = vec![keyword.to_string()];
    let lower = keyword.to_lowercase();
    if lower != keyword {
        bases.push(lower);
    }
    let mut forms = Vec::new();
    for b in bases {
        for prefix in ["", " ", "\u{0120}", "\u{2581}"] {
            forms.push(format!("{prefix}{b}"));
        }
    }
    forms
}

/// Keeps the dictionary rows whose token string is a canonical form of some
/// keyword. Keywords containing whitespace cannot be single tokens and are
/// reported as unmatched.
pub fn restrict_dictionary(
    dict: &Dictionary,
    keywords: &[String],
    vocab: &HashMap<String, usize>,
) -> Result<ConceptDictionary> {
    if vocab.is_empty() {
        return Err(AnalysisError::EmptyVocab);
    }
    let unique: BTreeSet<&str> = keywords.iter().map(|k| k.trim()).filter(|k| !k.is_empty()).collect();
    let mut kept = BTreeSet::new();
    let mut unmatched = Vec::new();
    for kw in &unique {
        let mut hit = false;
        if !kw.contains(char::is_whitespace) {
            for form in canonical_forms(kw) {
                if let Some(&idx) = vocab.get(&form) {
                    if idx < dict.n_atoms() {
                        kept.insert(idx);
                        hit = true;
                    }
                }
            }
        }
        if !hit {
            unmatched.push(kw.to_string());
        }
    }
    if kept.is_empty() {
        return Err(AnalysisError::NoKeywordMatched);
    }
    let kept_rows: Vec<usize> = kept.into_iter().collect();
    let restricted = dict.select_rows(&kept_rows)?;
    Ok(ConceptDictionary {
        base: dict.clone(),
        kept_rows,
        restricted,
        keywords: unique.into_iter().map(str::to_string).collect(),
        unmatched_keywords: unmatched,
    })
}

/// Final explained variance of a pursuit over the concept atoms.
///
/// `n_iters` above the concept size is clamped with a warning.
pub fn score_head_somp(head_activations: &SignalMatrix, concept: &ConceptDictionary, n_iters: usize) -> Result<f64> {
    let atoms = concept.len();
    let iters = if n_iters > atoms {
        log::warn!("n_iters {n_iters} exceeds {atoms} concept atoms; clamping");
        atoms
    } else {
        n_iters
    };
    let result = sparse_recovery::somp(head_activations, concept.restricted(), iters)?;
    Ok(sparse_recovery::explained_variance(
        head_activations,
        &result.reconstruction,
    )?)
}

/// Mean over samples and concept atoms of `<D[j], h_i>`.
pub fn score_head_logit_lens(head_activations: &SignalMatrix, concept: &ConceptDictionary) -> Result<f64> {
    let dict = concept.restricted();
    if dict.dim() != head_activations.dim() {
        return Err(SparseError::DimensionMismatch {
            expected: dict.dim(),
            actual: head_activations.dim(),
        }
        .into());
    }
    let logits = dict.data() * head_activations.data().transpose();
    Ok(logits.sum() / (logits.nrows() * logits.ncols()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    #[default]
    SompVariance,
    LogitLensMean,
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMethod::SompVariance => "somp_variance",
            ScoringMethod::LogitLensMean => "logit_lens_mean",
        })
    }
}

impl FromStr for ScoringMethod {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "somp_variance" | "somp" => Ok(ScoringMethod::SompVariance),
            "logit_lens_mean" | "logit_lens" | "ll" => Ok(ScoringMethod::LogitLensMean),
            _ => Err(AnalysisError::Parse {
                kind: "scoring method",
                value: s.to_string(),
            }),
        }
    }
}

/// Heads ordered by descending score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadRanking {
    pub scores: BTreeMap<HeadId, f64>,
    /// Scoreable heads, best first; ties by (layer, head) ascending.
    pub ordered: Vec<HeadId>,
    /// Heads whose activations were numerically zero. Never in `ordered`.
    pub unscoreable: Vec<HeadId>,
    pub method: ScoringMethod,
    pub n_iters: usize,
}

impl HeadRanking {
    pub fn score(&self, id: HeadId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    /// 1-based rank of `id` among the scoreable heads.
    pub fn rank_of(&self, id: HeadId) -> Option<usize> {
        self.ordered.iter().position(|h| *h == id).map(|p| p + 1)
    }
}

/// Scores every head and sorts. Heads are evaluated in parallel; the result
/// does not depend on the thread count.
pub fn rank_heads(
    acts: &HeadActivationSet,
    concept: &ConceptDictionary,
    method: ScoringMethod,
    n_iters: usize,
) -> Result<HeadRanking> {
    if acts.is_empty() {
        return Err(AnalysisError::EmptyActivations);
    }
    let n_iters = match method {
        ScoringMethod::SompVariance if n_iters > concept.len() => {
            log::warn!("n_iters {n_iters} exceeds {} concept atoms; clamping", concept.len());
            concept.len()
        }
        _ => n_iters,
    };
    let heads: Vec<(HeadId, &SignalMatrix)> = acts.iter().map(|(id, m)| (*id, m)).collect();
    let outcomes: Vec<(HeadId, Result<f64>)> = heads
        .par_iter()
        .map(|(id, m)| {
            let score = match method {
                ScoringMethod::SompVariance => score_head_somp(m, concept, n_iters),
                ScoringMethod::LogitLensMean => score_head_logit_lens(m, concept),
            };
            (*id, score)
        })
        .collect();

    let mut scores = BTreeMap::new();
    let mut unscoreable = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(s) => {
                scores.insert(id, s);
            }
            Err(AnalysisError::Sparse(SparseError::ZeroSignal(_))) => {
                log::warn!("head {id} has zero activation energy; ranked last");
                unscoreable.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    let mut ordered: Vec<HeadId> = scores.keys().copied().collect();
    ordered.sort_by(|a, b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(b)));

    Ok(HeadRanking {
        scores,
        ordered,
        unscoreable,
        method,
        n_iters: match method {
            ScoringMethod::SompVariance => n_iters.min(concept.len()),
            ScoringMethod::LogitLensMean => 0,
        },
    })
}

pub fn top_k(ranking: &HeadRanking, k: usize) -> Result<Vec<HeadId>> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    if k > ranking.ordered.len() {
        return Err(AnalysisError::KTooLarge {
            k,
            available: ranking.ordered.len(),
        });
    }
    Ok(ranking.ordered[..k].to_vec())
}

/// Draws a head set with the same per-layer counts as `selected` and no
/// overlap with it. Each layer samples uniformly without replacement from
/// its unselected heads, in ascending layer order, from one generator
/// seeded with `seed`. Output is sorted.
pub fn sample_random_control(selected: &[HeadId], model_shape: (usize, usize), seed: u64) -> Result<Vec<HeadId>> {
    let (n_layers, heads_per_layer) = model_shape;
    let chosen: BTreeSet<HeadId> = selected.iter().copied().collect();
    let mut per_layer: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for id in &chosen {
        if id.layer >= n_layers || id.head >= heads_per_layer {
            return Err(AnalysisError::HeadOutOfRange(*id));
        }
        per_layer.entry(id.layer).or_default().insert(id.head);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut control = Vec::with_capacity(chosen.len());
    for (layer, taken) in per_layer {
        let pool: Vec<usize> = (0..heads_per_layer).filter(|h| !taken.contains(h)).collect();
        if taken.len() > pool.len() {
            return Err(AnalysisError::InsufficientPool {
                layer,
                selected: taken.len(),
                pool: pool.len(),
            });
        }
        for i in sample(&mut rng, pool.len(), taken.len()) {
            control.push(HeadId::new(layer, pool[i]));
        }
    }
    control.sort();
    Ok(control)
}

/// `|a ∩ b| / |a ∪ b|`, 1.0 for two empty sets.
pub fn jaccard(a: &BTreeSet<HeadId>, b: &BTreeSet<HeadId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Per-layer head counts.
pub fn layer_histogram(heads: &[HeadId]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for h in heads {
        *hist.entry(h.layer).or_insert(0) += 1;
    }
    hist
}
