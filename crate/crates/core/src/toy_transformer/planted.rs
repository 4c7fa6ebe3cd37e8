// SPDX-License-Identifier: MIT OR Apache-2.0

//! Models with heads that are known, by construction, to write concept
//! tokens into the residual stream.
//!
//! A planted head reads a single direction, the sequence-start token's
//! normalized input at its layer with the concept direction projected out,
//! and writes along the normalized sum of the
//! concept tokens' unembedding rows. Since every prompt starts with that
//! token, the head pushes concept logits up at every position, and its
//! captured writes lie exactly in the span of the concept atoms.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    capture_head_outputs, forward_traced, init_model, InterventionSpec, ModelBundle, ModelConfig, ModelError, Result,
    Vocab, BOS_TOKEN,
};
use crate::head_analysis::{Aggregation, HeadId};

/// Concept words used by [`PlantedFixture`].
pub const FIXTURE_COLOURS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "pink", "brown"];

const FILLER: [&str; 40] = [
    "the", "a", "car", "house", "tree", "dog", "cat", "man", "woman", "child", "sees", "has", "near", "under", "big",
    "small", "old", "new", "road", "hill", "river", "boat", "bird", "sky", "street", "door", "window", "table",
    "chair", "ball", "hat", "shirt", "flower", "garden", "city", "park", "train", "bike", "book", "cup",
];

const PROBE_PROMPTS: usize = 16;
const PROBE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Deterministic `<s> w w ...` prompts drawn from the config seed; used to
/// measure head energies while planting.
pub fn probe_prompts(config: &ModelConfig, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PROBE_SEED_SALT);
    let len = config.max_seq_len.min(6);
    (0..count)
        .map(|_| {
            std::iter::once(BOS_TOKEN)
                .chain((1..len).map(|_| rng.random_range(1..config.vocab_size)))
                .collect()
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Initializes a model from `config` and rewires the value/output path of
/// each `planted` head so its write is a positive multiple of the concept
/// direction, with squared-Frobenius energy (mean-aggregated over the probe
/// prompts) equal to `strength` times the median head energy of the
/// unmodified model. All other weights are left as initialized.
pub fn build_planted_model(
    config: ModelConfig,
    concept_token_ids: &[usize],
    planted: &[HeadId],
    strength: f64,
) -> Result<ModelBundle> {
    let mut model = init_model(config)?;
    let bad = |m: String| Err(ModelError::InvalidConfig(m));
    if !strength.is_finite() || strength < 0.0 {
        return bad(format!("strength {strength} must be finite and non-negative"));
    }
    let concepts: BTreeSet<usize> = concept_token_ids.iter().copied().collect();
    if concepts.is_empty() || concepts.len() != concept_token_ids.len() {
        return bad("concept tokens must be non-empty and distinct".into());
    }
    if let Some(&t) = concepts.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: t,
            vocab: config.vocab_size,
        });
    }
    let heads: BTreeSet<HeadId> = planted.iter().copied().collect();
    if heads.len() != planted.len() {
        return bad("planted heads must be distinct".into());
    }
    if let Some(h) = heads.iter().find(|h| !config.contains(**h)) {
        return Err(ModelError::HeadOutOfRange(*h));
    }
    if strength == 0.0 || heads.is_empty() {
        return Ok(model);
    }

    let probes = probe_prompts(&config, PROBE_PROMPTS);
    let energy = |m: &ModelBundle| -> Result<Vec<(HeadId, f64)>> {
        let acts = capture_head_outputs(m, &probes, Aggregation::MeanAllTokens)?;
        Ok(acts.iter().map(|(id, s)| (*id, s.data().norm_squared())).collect())
    };
    let mut base: Vec<f64> = energy(&model)?.into_iter().map(|(_, e)| e).collect();
    let target = strength * median(&mut base);

    let mut concept_dir = DVector::<f64>::zeros(config.d_model);
    for &t in &concepts {
        let row = model.weights.unembedding.row(t).transpose();
        concept_dir += &row / row.norm();
    }
    concept_dir /= concept_dir.norm();

    let dh = config.d_head();
    // ascending layer order: a planted head's read direction depends on
    // everything planted below it
    for id in heads {
        let trace = forward_traced(&model, &[BOS_TOKEN], &InterventionSpec::identity())?;
        let mut read = trace.attention_inputs[id.layer].row(0).transpose();
        // keep the read blind to concept writes from heads planted below
        read -= &concept_dir * read.dot(&concept_dir);
        let norm = read.norm();
        if norm <= f64::EPSILON {
            return bad(format!("read direction for {id} vanished"));
        }
        read /= norm;

        let col = id.head * dh;
        let layer = &mut model.weights.layers[id.layer];
        layer.wv.columns_mut(col, dh).fill(0.0);
        layer.wv.set_column(col, &read);
        layer.wo.rows_mut(col, dh).fill(0.0);
        layer.wo.set_row(col, &concept_dir.transpose());

        // a head's own write scales linearly with its output row
        let unit = energy(&model)?
            .into_iter()
            .find(|(h, _)| *h == id)
            .map(|(_, e)| e)
            .unwrap_or(0.0);
        if unit <= 0.0 {
            return bad(format!("planted head {id} produced no signal"));
        }
        let scale = (target / unit).sqrt();
        let mut row = model.weights.layers[id.layer].wo.row_mut(col);
        row *= scale;
    }
    Ok(model)
}

/// Shape of the reference study: 4 layers of 8 heads, d = 64.
pub fn study_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 8,
        d_model: 64,
        vocab_size: 64,
        max_seq_len: 16,
        seed,
    }
}

pub const STUDY_SEED: u64 = 0;
pub const STUDY_STRENGTH: f64 = 10.0;
pub const STUDY_SELECTION_PROMPTS: usize = 32;
pub const STUDY_EVAL_PROMPTS: usize = 64;
pub const STUDY_PROMPT_WORDS: usize = 3;
/// Tokens generated per eval prompt.
pub const STUDY_MAX_NEW: usize = 8;

/// Heads planted in the reference study.
pub fn study_planted() -> Vec<HeadId> {
    vec![HeadId::new(1, 3), HeadId::new(3, 5)]
}

/// A complete planted-head study: a colour-word vocabulary, a model with
/// planted colour heads, and prompt sets for selection and evaluation.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub model: ModelBundle,
    pub planted: Vec<HeadId>,
    pub concept_ids: Vec<usize>,
    pub keywords: Vec<String>,
    /// Prompts used to capture activations for head selection.
    pub selection_prompts: Vec<Vec<usize>>,
    /// Disjoint prompts used to evaluate generations.
    pub eval_prompts: Vec<Vec<usize>>,
}

impl PlantedFixture {
    /// Vocabulary: `<s>`, the colour words, then filler words (padded with
    /// `w{i}` when the vocabulary is larger than the word list).
    pub fn vocab(size: usize) -> Result<Vocab> {
        let needed = 1 + FIXTURE_COLOURS.len() + 1;
        if size < needed {
            return Err(ModelError::InvalidConfig(format!(
                "fixture vocab needs at least {needed} tokens"
            )));
        }
        let mut tokens = vec!["<s>".to_string()];
        tokens.extend(FIXTURE_COLOURS.iter().map(|s| s.to_string()));
        let fill = size - tokens.len();
        tokens.extend(FILLER.iter().take(fill).map(|s| s.to_string()));
        let extra = size - tokens.len();
        tokens.extend((0..extra).map(|i| format!("w{i}")));
        Vocab::new(tokens)
    }

    /// Builds the study. Prompts are `<s>` followed by `prompt_words` filler
    /// tokens; selection and evaluation prompt sets do not share a prompt.
    pub fn build(
        config: ModelConfig,
        planted: &[HeadId],
        strength: f64,
        n_selection: usize,
        n_eval: usize,
        prompt_words: usize,
    ) -> Result<Self> {
        let vocab = Self::vocab(config.vocab_size)?;
        let concept_ids: Vec<usize> = (1..=FIXTURE_COLOURS.len()).collect();
        let model = build_planted_model(config, &concept_ids, planted, strength)?.with_vocab(vocab)?;

        let fillers: Vec<usize> = (1 + FIXTURE_COLOURS.len()..config.vocab_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut seen = BTreeSet::new();
        let mut draw = |count: usize| -> Vec<Vec<usize>> {
            let mut out = Vec::with_capacity(count);
            let mut attempts = 0usize;
            while out.len() < count {
                let p: Vec<usize> = std::iter::once(BOS_TOKEN)
                    .chain((0..prompt_words).map(|_| *fillers.choose(&mut rng).expect("fillers exist")))
                    .collect();
                attempts += 1;
                if seen.insert(p.clone()) || attempts > 100 * count {
                    out.push(p);
                }
            }
            out
        };
        let selection_prompts = draw(n_selection);
        let eval_prompts = draw(n_eval);

        Ok(Self {
            model,
            planted: planted.to_vec(),
            concept_ids,
            keywords: FIXTURE_COLOURS.iter().map(|s| s.to_string()).collect(),
            selection_prompts,
            eval_prompts,
        })
    }

    /// The reference study with the given seed and strength.
    pub fn study(seed: u64, strength: f64) -> Result<Self> {
        Self::build(
            study_config(seed),
            &study_planted(),
            strength,
            STUDY_SELECTION_PROMPTS,
            STUDY_EVAL_PROMPTS,
            STUDY_PROMPT_WORDS,
        )
    }

    /// Decoded continuation (generated tokens only) for every eval prompt.
    pub fn generate(&self, max_new: usize, intervention: &InterventionSpec) -> Result<Vec<String>> {
        use rayon::prelude::*;
        self.eval_prompts
            .par_iter()
            .map(|p| {
                let out = super::generate_greedy(&self.model, p, max_new, intervention)?;
                Ok(self.model.vocab.decode(&out[p.len()..]))
            })
            .collect()
    }
}
