// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{InterventionSpec, ModelBundle, ModelError, Result, NORM_EPS};
use crate::head_analysis::{aggregate_tokens, Aggregation, HeadActivationSet, HeadId};
use crate::sparse_recovery::SignalMatrix;

type HeadWrites = BTreeMap<HeadId, DMatrix<f64>>;

/// What to capture and how to collapse it to one row per prompt.
///
/// `MeanAllTokens` and `LastToken` use every position; `MeanImageTokens`
/// averages only positions whose token id is in `image_token_ids`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureRequest {
    pub aggregation: Aggregation,
    pub image_token_ids: BTreeSet<usize>,
}

impl CaptureRequest {
    pub fn new(aggregation: Aggregation) -> Self {
        Self {
            aggregation,
            image_token_ids: BTreeSet::new(),
        }
    }

    fn mask(&self, tokens: &[usize]) -> Vec<bool> {
        match self.aggregation {
            Aggregation::MeanAllTokens | Aggregation::LastToken => vec![true; tokens.len()],
            Aggregation::MeanImageTokens => tokens.iter().map(|t| self.image_token_ids.contains(t)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// T x vocab
    pub logits: DMatrix<f64>,
    /// Residual stream before the final norm, T x d.
    pub residual: DMatrix<f64>,
    /// One aggregated row per head, when requested.
    pub capture: Option<HeadActivationSet>,
}

/// Everything a forward pass can expose, per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    /// Unscaled head writes, T x d each.
    pub head_writes: BTreeMap<HeadId, DMatrix<f64>>,
    /// Normalized attention input per layer, T x d.
    pub attention_inputs: Vec<DMatrix<f64>>,
    /// Residual stream entering each layer, T x d.
    pub layer_inputs: Vec<DMatrix<f64>>,
}

fn rms_norm(x: &DMatrix<f64>, gain: &DVector<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v *= inv * g;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Causal softmax attention for one head; returns T x d_head.
fn attend(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let t = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q * k.transpose() * scale;
    for i in 0..t {
        let max = (0..=i).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..t {
            let p = if j <= i { (scores[(i, j)] - max).exp() } else { 0.0 };
            scores[(i, j)] = p;
            total += p;
        }
        for j in 0..=i {
            scores[(i, j)] /= total;
        }
    }
    scores * v
}

fn check_tokens(model: &ModelBundle, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if tokens.len() > model.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: model.config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: model.config.vocab_size,
        });
    }
    Ok(())
}

/// Forward pass keeping every intermediate that analysis needs.
pub fn forward_traced(model: &ModelBundle, tokens: &[usize], intervention: &InterventionSpec) -> Result<ForwardTrace> {
    run(model, tokens, intervention, true)
}

fn run(model: &ModelBundle, tokens: &[usize], intervention: &InterventionSpec, keep: bool) -> Result<ForwardTrace> {
    check_tokens(model, tokens)?;
    intervention.validate(&model.config)?;
    let cfg = &model.config;
    let w = &model.weights;
    let (t, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head());

    let mut x = DMatrix::from_fn(t, d, |i, c| {
        w.token_embedding[(tokens[i], c)] + w.position_embedding[(i, c)]
    });
    let mut head_writes = BTreeMap::new();
    let mut attention_inputs = Vec::new();
    let mut layer_inputs = Vec::new();

    for (l, layer) in w.layers.iter().enumerate() {
        let a = rms_norm(&x, &layer.attn_norm);
        let m = rms_norm(&x, &layer.mlp_norm);
        let mut delta = DMatrix::<f64>::zeros(t, d);
        for h in 0..cfg.n_heads {
            let id = HeadId::new(l, h);
            let cols = h * dh;
            let q = &a * layer.wq.columns(cols, dh);
            let k = &a * layer.wk.columns(cols, dh);
            let v = &a * layer.wv.columns(cols, dh);
            let z = attend(&q, &k, &v);
            let write = z * layer.wo.rows(cols, dh);
            delta += &write * intervention.scale(id);
            if keep {
                head_writes.insert(id, write);
            }
        }
        let hidden = (&m * &layer.w_in).map(gelu);
        let mlp = hidden * &layer.w_out;
        if keep {
            attention_inputs.push(a);
            layer_inputs.push(x.clone());
        }
        x += delta;
        x += mlp;
    }

    let logits = rms_norm(&x, &w.final_norm) * w.unembedding.transpose();
    Ok(ForwardTrace {
        logits,
        residual: x,
        head_writes,
        attention_inputs,
        layer_inputs,
    })
}

/// Runs the model with every head's residual write multiplied by its scale.
/// With a capture request, the *unscaled* writes are aggregated into a
/// one-row-per-head activation set.
pub fn forward(
    model: &ModelBundle,
    tokens: &[usize],
    intervention: &InterventionSpec,
    capture: Option<&CaptureRequest>,
) -> Result<ForwardOutput> {
    let trace = run(model, tokens, intervention, capture.is_some())?;
    let capture = match capture {
        Some(req) => Some(aggregate_capture(&[(tokens, &trace.head_writes)], req)?),
        None => None,
    };
    Ok(ForwardOutput {
        logits: trace.logits,
        residual: trace.residual,
        capture,
    })
}

fn aggregate_capture(runs: &[(&[usize], &HeadWrites)], req: &CaptureRequest) -> Result<HeadActivationSet> {
    let Some((_, first)) = runs.first() else {
        return Err(ModelError::EmptyPrompt);
    };
    let d = first.values().next().map(|m| m.ncols()).unwrap_or(0);
    let mut entries = BTreeMap::new();
    for id in first.keys() {
        let mut rows = Vec::with_capacity(runs.len() * d);
        for (tokens, writes) in runs {
            rows.extend(aggregate_tokens(&writes[id], &req.mask(tokens), req.aggregation)?);
        }
        let m = SignalMatrix::from_rows(runs.len(), d, &rows).map_err(crate::head_analysis::AnalysisError::from)?;
        entries.insert(*id, m);
    }
    Ok(HeadActivationSet::new(entries, req.aggregation)?)
}

/// Greedy decoding; ties go to the lowest token id. Returns prompt plus
/// generated tokens.
pub fn generate_greedy(
    model: &ModelBundle,
    prompt: &[usize],
    max_new: usize,
    intervention: &InterventionSpec,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    check_tokens(model, prompt)?;
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len() + max_new,
            max: model.config.max_seq_len,
        });
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let trace = run(model, &seq, intervention, false)?;
        let last = trace.logits.row(seq.len() - 1);
        let mut best = 0;
        for j in 1..last.len() {
            if last[j] > last[best] {
                best = j;
            }
        }
        seq.push(best);
    }
    Ok(seq)
}

/// One aggregated row per prompt for every head, with no intervention.
pub fn capture_head_outputs(
    model: &ModelBundle,
    prompts: &[Vec<usize>],
    aggregation: Aggregation,
) -> Result<HeadActivationSet> {
    capture_head_outputs_with(
        model,
        prompts,
        &CaptureRequest::new(aggregation),
        &InterventionSpec::identity(),
    )
}

/// Prompts are evaluated in parallel; rows keep prompt order.
pub fn capture_head_outputs_with(
    model: &ModelBundle,
    prompts: &[Vec<usize>],
    request: &CaptureRequest,
    intervention: &InterventionSpec,
) -> Result<HeadActivationSet> {
    if prompts.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let traces: Vec<ForwardTrace> = prompts
        .par_iter()
        .map(|p| run(model, p, intervention, true))
        .collect::<Result<_>>()?;
    let runs: Vec<(&[usize], &HeadWrites)> = prompts
        .iter()
        .zip(&traces)
        .map(|(p, t)| (p.as_slice(), &t.head_writes))
        .collect();
    aggregate_capture(&runs, request)
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig};
    use super::*;

    fn model(n_layers: usize) -> ModelBundle {
        init_model(ModelConfig {
            n_layers,
            n_heads: 2,
            d_model: 8,
            vocab_size: 10,
            max_seq_len: 6,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn identity_intervention_is_bitwise_noop() {
        let m = model(2);
        let toks = [0, 3, 5, 1];
        let base = forward(&m, &toks, &InterventionSpec::identity(), None).unwrap();
        let ones = InterventionSpec::new([(HeadId::new(0, 1), 1.0), (HeadId::new(1, 0), 1.0)]).unwrap();
        let same = forward(&m, &toks, &ones, None).unwrap();
        assert_eq!(base.logits, same.logits);
    }

    #[test]
    fn input_validation() {
        let m = model(1);
        let id = InterventionSpec::identity();
        assert!(matches!(forward(&m, &[], &id, None), Err(ModelError::EmptyPrompt)));
        assert!(matches!(
            forward(&m, &[10], &id, None),
            Err(ModelError::TokenOutOfRange { token: 10, .. })
        ));
        assert!(matches!(
            forward(&m, &[0; 7], &id, None),
            Err(ModelError::SequenceTooLong { len: 7, max: 6 })
        ));
        let bad = InterventionSpec::new([(HeadId::new(3, 0), 0.0)]).unwrap();
        assert!(matches!(
            forward(&m, &[0], &bad, None),
            Err(ModelError::HeadOutOfRange(_))
        ));
    }

    #[test]
    fn attention_is_causal() {
        let m = model(2);
        let id = InterventionSpec::identity();
        let short = forward(&m, &[2, 4], &id, None).unwrap();
        let long = forward(&m, &[2, 4, 7, 1], &id, None).unwrap();
        for c in 0..10 {
            assert!((short.logits[(1, c)] - long.logits[(1, c)]).abs() < 1e-14);
        }
    }

    #[test]
    fn generation_basics() {
        let m = model(2);
        let id = InterventionSpec::identity();
        assert_eq!(generate_greedy(&m, &[1, 2], 0, &id).unwrap(), vec![1, 2]);
        let a = generate_greedy(&m, &[1, 2], 3, &id).unwrap();
        let b = generate_greedy(&m, &[1, 2], 3, &id).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(matches!(generate_greedy(&m, &[], 1, &id), Err(ModelError::EmptyPrompt)));
        assert!(matches!(
            generate_greedy(&m, &[1, 2], 5, &id),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn single_token_capture_equals_head_write() {
        let m = model(2);
        let trace = forward_traced(&m, &[3], &InterventionSpec::identity()).unwrap();
        let acts = capture_head_outputs(&m, &[vec![3]], Aggregation::MeanAllTokens).unwrap();
        assert_eq!(acts.n_samples(), 1);
        for (id, w) in &trace.head_writes {
            assert_eq!(acts.get(*id).unwrap().data(), w);
        }
    }

    #[test]
    fn duplicated_prompts_duplicate_rows() {
        let m = model(1);
        let acts = capture_head_outputs(&m, &[vec![1, 2], vec![1, 2]], Aggregation::MeanAllTokens).unwrap();
        for (_, mat) in acts.iter() {
            assert_eq!(mat.data().row(0), mat.data().row(1));
        }
    }

    #[test]
    fn two_token_mean_matches_per_token_captures() {
        let m = model(2);
        let last = CaptureRequest::new(Aggregation::LastToken);
        let id = InterventionSpec::identity();
        let first = forward(&m, &[5], &id, Some(&last)).unwrap().capture.unwrap();
        let second = forward(&m, &[5, 8], &id, Some(&last)).unwrap().capture.unwrap();
        let mean = capture_head_outputs(&m, &[vec![5, 8]], Aggregation::MeanAllTokens).unwrap();
        for (hid, mat) in mean.iter() {
            for c in 0..8 {
                let expected =
                    0.5 * (first.get(*hid).unwrap().data()[(0, c)] + second.get(*hid).unwrap().data()[(0, c)]);
                assert!((mat.data()[(0, c)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn image_token_mask_restricts_mean() {
        let m = model(1);
        let mut req = CaptureRequest::new(Aggregation::MeanImageTokens);
        req.image_token_ids.insert(7);
        let trace = forward_traced(&m, &[0, 7, 2, 7], &InterventionSpec::identity()).unwrap();
        let acts = capture_head_outputs_with(&m, &[vec![0, 7, 2, 7]], &req, &InterventionSpec::identity()).unwrap();
        let hid = HeadId::new(0, 1);
        let w = &trace.head_writes[&hid];
        for c in 0..8 {
            let expected = (w[(1, c)] + w[(3, c)]) / 2.0;
            assert!((acts.get(hid).unwrap().data()[(0, c)] - expected).abs() < 1e-15);
        }
        req.image_token_ids.clear();
        assert!(capture_head_outputs_with(&m, &[vec![0, 1]], &req, &InterventionSpec::identity()).is_err());
    }
}
