// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use headpursuit::evaluation::{aggregate_report, keyword_count, token_f1};
use headpursuit::head_analysis::{
    layer_histogram, rank_heads, restrict_dictionary, sample_random_control, top_k, Aggregation, HeadId, ScoringMethod,
    DEFAULT_N_ITERS,
};
use headpursuit::io::tensor_file::{decode, encode, Section};
use headpursuit::sparse_recovery::{mp_step, refit, somp};
use headpursuit::toy_transformer::{
    capture_head_outputs, forward_traced, init_model, study_planted, InterventionSpec, ModelConfig, PlantedFixture,
    STUDY_MAX_NEW, STUDY_SEED, STUDY_STRENGTH,
};
use headpursuit::{Dictionary, SignalMatrix, SupportSet};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn somp_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(0x50);
    let mut worst_increase = 0.0f64;
    let mut worst_ortho = 0.0f64;
    for case in 0..200 {
        let v = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let n = rng.random_range(1..=16);
        let dict = random_dict(&mut rng, v, d);
        let signal = random_signal(&mut rng, n, d);
        let iters = rng.random_range(1..=v);
        let res = somp(&signal, &dict, iters).map_err(|e| format!("case {case}: {e}"))?;
        for w in res.residual_norms.windows(2) {
            worst_increase = worst_increase.max(w[1] - w[0]);
        }
        let residual = signal.data() - &res.reconstruction;
        let scale = signal.frobenius_norm();
        for &j in res.support.indices() {
            let atom = dict.data().row(j);
            let corr = (&residual * atom.transpose()).norm() / (atom.norm() * scale);
            worst_ortho = worst_ortho.max(corr);
        }
    }
    check(worst_increase <= 1e-9, || {
        format!("residual norm rose by {worst_increase:e}")
    })?;
    check(worst_ortho <= 1e-6, || format!("residual correlation {worst_ortho:e}"))?;

    let mut worst_recovery = 0.0f64;
    for case in 0..200 {
        let d = rng.random_range(8..=32);
        let v = rng.random_range(8..=d);
        let n = rng.random_range(1..=16);
        let k = rng.random_range(1..=8);
        let atoms = orthonormal_rows(&mut rng, v, d);
        let truth: Vec<usize> = sample(&mut rng, v, k).into_vec();
        let coeffs = DMatrix::from_fn(n, k, |_, _| {
            let m: f64 = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let chosen = DMatrix::from_fn(k, d, |r, c| atoms[(truth[r], c)]);
        let h = &coeffs * chosen;
        let dict = Dictionary::new(atoms, labels(v)).unwrap();
        let res = somp(&SignalMatrix::new(h).unwrap(), &dict, k).map_err(|e| format!("recovery {case}: {e}"))?;
        let got: BTreeSet<usize> = res.support.indices().iter().copied().collect();
        let want: BTreeSet<usize> = truth.iter().copied().collect();
        check(got == want, || format!("recovery {case}: support {got:?} != {want:?}"))?;
        worst_recovery = worst_recovery.max(res.final_residual_norm().unwrap_or(0.0));
    }
    check(worst_recovery <= 1e-8, || {
        format!("recovery residual {worst_recovery:e}")
    })?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "200 random + 200 k-sparse instances; max rise {worst_increase:.1e}, max corr {worst_ortho:.1e}, max recovery residual {worst_recovery:.1e}, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn logit_lens_correspondence() -> Outcome {
    let mut rng = rng(0x11);
    for case in 0..100 {
        let v = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let dict = random_dict(&mut rng, v, d);
        let x = random_signal(&mut rng, 1, d);
        let (mp, _) = mp_step(x.data().row(0).iter().copied().collect::<Vec<_>>().as_slice(), &dict)
            .map_err(|e| e.to_string())?;
        let res = somp(&x, &dict, 1).map_err(|e| e.to_string())?;
        check(res.support.indices() == [mp], || {
            format!("case {case}: somp picked {:?}, mp_step {mp}", res.support.indices())
        })?;
    }
    Ok("100 samples, identical atom every time".into())
}

fn refit_oracle() -> Outcome {
    let mut rng = rng(0x2e);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = rng.random_range(8..=32);
        let v = rng.random_range(d..=64);
        let n = rng.random_range(1..=16);
        let k = rng.random_range(1..=d / 2);
        let dict = random_dict(&mut rng, v, d);
        let signal = random_signal(&mut rng, n, d);
        let support: Vec<usize> = sample(&mut rng, v, k).into_vec();
        let fit = refit(&signal, &dict, &SupportSet::from_indices(support.clone()).unwrap())
            .map_err(|e| format!("case {case}: {e}"))?;
        let oracle = normal_equations(signal.data(), dict.data(), &support);
        worst = worst.max(rel_frobenius(&fit.coefficients, &oracle));
    }
    check(worst <= 1e-8, || format!("relative error {worst:e}"))?;
    Ok(format!("50 instances, max relative Frobenius error {worst:.1e}"))
}

fn intervention_algebra() -> Outcome {
    let config = ModelConfig {
        n_layers: 1,
        n_heads: 4,
        d_model: 16,
        vocab_size: 32,
        max_seq_len: 8,
        seed: 9,
    };
    let model = init_model(config).map_err(|e| e.to_string())?;
    let tokens = [0, 5, 17, 3, 30];
    let base = forward_traced(&model, &tokens, &InterventionSpec::identity()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for h in 0..config.n_heads {
        let id = HeadId::new(0, h);
        let spec = InterventionSpec::new([(id, -1.0)]).map_err(|e| e.to_string())?;
        let inv = forward_traced(&model, &tokens, &spec).map_err(|e| e.to_string())?;
        let expected = &base.head_writes[&id] * -2.0;
        worst = worst.max(rel_frobenius(&(&inv.residual - &base.residual), &expected));
    }
    check(worst <= 1e-9, || format!("relative error {worst:e}"))?;

    let all: Vec<HeadId> = (0..config.n_heads).map(|h| HeadId::new(0, h)).collect();
    let ones = InterventionSpec::uniform(&all, 1.0).map_err(|e| e.to_string())?;
    let same = forward_traced(&model, &tokens, &ones).map_err(|e| e.to_string())?;
    let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&same.logits) == bits(&base.logits), || {
        "alpha = 1 changed the logits".into()
    })?;
    check(bits(&same.residual) == bits(&base.residual), || {
        "alpha = 1 changed the residual".into()
    })?;
    Ok(format!(
        "inversion error {worst:.1e} over 4 heads; alpha = 1 bit-identical"
    ))
}

fn keyword_total(texts: &[String], keywords: &BTreeSet<String>) -> Vec<f64> {
    texts.iter().map(|t| keyword_count(t, keywords) as f64).collect()
}

fn planted_study() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let fx = PlantedFixture::study(STUDY_SEED, STUDY_STRENGTH).map_err(|e| e.to_string())?;
        let acts = capture_head_outputs(&fx.model, &fx.selection_prompts, Aggregation::MeanAllTokens)
            .map_err(|e| e.to_string())?;
        let dict = fx.model.dictionary().map_err(|e| e.to_string())?;
        let concept = restrict_dictionary(&dict, &fx.keywords, fx.model.vocab.index()).map_err(|e| e.to_string())?;
        let ranking = rank_heads(&acts, &concept, ScoringMethod::SompVariance, DEFAULT_N_ITERS)
            .map_err(|e| e.to_string())?;
        let top = top_k(&ranking, 2).map_err(|e| e.to_string())?;
        let top_set: BTreeSet<HeadId> = top.iter().copied().collect();
        let planted: BTreeSet<HeadId> = study_planted().into_iter().collect();
        check(top_set == planted, || format!("(a) top 2 {top:?}, planted {planted:?}"))?;

        let keywords: BTreeSet<String> = fx.keywords.iter().cloned().collect();
        let run = |spec: &InterventionSpec| -> Result<Vec<f64>, String> {
            let texts = fx.generate(STUDY_MAX_NEW, spec).map_err(|e| e.to_string())?;
            Ok(keyword_total(&texts, &keywords))
        };
        let baseline = run(&InterventionSpec::identity())?;
        let inverted = run(&InterventionSpec::uniform(&top, -1.0).map_err(|e| e.to_string())?)?;
        let enhanced = run(&InterventionSpec::uniform(&top, 5.0).map_err(|e| e.to_string())?)?;
        let mut controls = Vec::new();
        for seed in 0..10 {
            let c = sample_random_control(&top, (acts.n_layers(), acts.n_heads()), seed).map_err(|e| e.to_string())?;
            controls.push(run(&InterventionSpec::uniform(&c, -1.0).map_err(|e| e.to_string())?)?);
        }
        let inv = aggregate_report("keyword_count", &baseline, &inverted, &controls).map_err(|e| e.to_string())?;
        let enh = aggregate_report("keyword_count", &baseline, &enhanced, &[]).map_err(|e| e.to_string())?;
        check(!inv.absolute, || "baseline produced no concept tokens".into())?;
        check(inv.normalized <= 0.2, || format!("(b) inversion kept {:.3} of baseline", inv.normalized))?;
        let ctrl = inv.control_median.unwrap_or(f64::NAN);
        check((ctrl - 1.0).abs() <= 0.2, || format!("(c) control median change {:+.3}", ctrl - 1.0))?;
        check(enh.normalized >= 1.5, || format!("(d) enhancement ratio {:.3}", enh.normalized))?;
        let elapsed = start.elapsed();
        check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
        Ok(format!(
            "top 2 = planted {}; baseline {:.3}/prompt, inverted {:+.1}%, control median {:+.1}%, enhanced {:+.1}%; {:.1} s on 1 thread",
            top.iter().map(HeadId::to_string).collect::<Vec<_>>().join(","),
            inv.baseline,
            (inv.normalized - 1.0) * 100.0,
            (ctrl - 1.0) * 100.0,
            (enh.normalized - 1.0) * 100.0,
            elapsed.as_secs_f64()
        ))
    })
}

fn control_protocol() -> Outcome {
    let mut rng = rng(0xc0);
    for seed in 0..100u64 {
        let layers = rng.random_range(1..=6);
        let heads = rng.random_range(2..=8);
        let mut selected = Vec::new();
        for l in 0..layers {
            let take = rng.random_range(0..=heads / 2);
            for h in sample(&mut rng, heads, take) {
                selected.push(HeadId::new(l, h));
            }
        }
        if selected.is_empty() {
            selected.push(HeadId::new(0, 0));
        }
        let control = sample_random_control(&selected, (layers, heads), seed).map_err(|e| e.to_string())?;
        check(layer_histogram(&control) == layer_histogram(&selected), || {
            format!("seed {seed}: histogram mismatch")
        })?;
        let sel: BTreeSet<HeadId> = selected.iter().copied().collect();
        check(control.iter().all(|h| !sel.contains(h)), || {
            format!("seed {seed}: overlap")
        })?;
        let distinct: BTreeSet<HeadId> = control.iter().copied().collect();
        check(distinct.len() == control.len(), || {
            format!("seed {seed}: repeated head")
        })?;
    }
    Ok("100 seeds, histograms equal, no overlap".into())
}

fn metrics() -> Outcome {
    let f1 = token_f1("United States", "United States of America");
    check((f1 - 2.0 / 3.0).abs() <= 1e-12, || format!("f1 {f1}"))?;
    let kw = |words: &[&str]| words.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let cases: [(&str, &[&str], usize); 5] = [
        ("", &["red"], 0),
        ("red red blue", &["red", "blue"], 3),
        ("infrared", &["red"], 0),
        ("Red, RED; red!", &["red"], 3),
        ("reddish bluebird red", &["red", "blue"], 1),
    ];
    for (text, words, want) in cases {
        let got = keyword_count(text, &kw(words));
        check(got == want, || format!("keyword_count({text:?}) = {got}, want {want}"))?;
    }

    let hand = aggregate_report("m", &[1.0], &[1.0], &[vec![0.9], vec![1.0], vec![1.1]]).map_err(|e| e.to_string())?;
    let (q1, q3) = hand.control_iqr.unwrap();
    check(
        (hand.control_median.unwrap() - 1.0).abs() < 1e-12 && (q1 - 0.95).abs() < 1e-12 && (q3 - 1.05).abs() < 1e-12,
        || {
            format!(
                "hand case: median {:?}, iqr {:?}",
                hand.control_median, hand.control_iqr
            )
        },
    )?;

    let mut rng = rng(0x3a);
    for case in 0..200 {
        let runs: Vec<Vec<f64>> = (0..rng.random_range(1..=15))
            .map(|_| {
                (0..rng.random_range(1..=6))
                    .map(|_| rng.random_range(0.0..10.0))
                    .collect()
            })
            .collect();
        let base: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..5.0)).collect();
        let r = aggregate_report("m", &base, &base, &runs).map_err(|e| e.to_string())?;
        let b = base.iter().sum::<f64>() / base.len() as f64;
        let means: Vec<f64> = runs
            .iter()
            .map(|x| x.iter().sum::<f64>() / x.len() as f64 / b)
            .collect();
        let (q1, q3) = r.control_iqr.unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        check(
            close(r.control_median.unwrap(), quantile_oracle(&means, 0.5))
                && close(q1, quantile_oracle(&means, 0.25))
                && close(q3, quantile_oracle(&means, 0.75)),
            || format!("quantile case {case} disagrees with oracle"),
        )?;
    }
    Ok(format!(
        "f1 = {f1:.15}; 5 keyword cases; 200 quantile cases match oracle"
    ))
}

fn sample_sections() -> Vec<Section> {
    let mut rng = rng(0xf1);
    let a: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(-1e3..1e3)).collect();
    let b: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0) as f32 as f64).collect();
    vec![
        Section::f64("act/L0/H0", vec![6, 5], a).unwrap(),
        Section::f32("dict/unembedding", vec![7, 1], b).unwrap(),
        Section::f64("meta/empty", vec![0], vec![]).unwrap(),
        Section::f64("weird", vec![1, 1, 2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
    ]
}

fn file_format() -> Outcome {
    let sections = sample_sections();
    let bytes = encode(&sections).map_err(|e| e.to_string())?;
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    check(
        back.len() == sections.len() && back.iter().zip(&sections).all(|(a, b)| a.bits_eq(b)),
        || "round trip changed a section".into(),
    )?;
    check(encode(&back).map_err(|e| e.to_string())? == bytes, || {
        "re-encoding differs".into()
    })?;

    for pos in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            check(decode(&bad).is_err(), || {
                format!("corruption at byte {pos} (^{flip:#x}) undetected")
            })?;
        }
    }
    for len in 0..bytes.len() {
        check(decode(&bytes[..len]).is_err(), || {
            format!("truncation to {len} bytes undetected")
        })?;
    }

    let mut rng = rng(0xfa);
    let mut panics = 0usize;
    let cases = 20_000;
    for case in 0..cases {
        let mut fuzz = if case % 4 == 0 {
            (0..rng.random_range(0..96)).map(|_| rng.random()).collect::<Vec<u8>>()
        } else {
            bytes.clone()
        };
        let header_end = 64.min(fuzz.len());
        for _ in 0..rng.random_range(1..=6) {
            if header_end == 0 {
                break;
            }
            let at = rng.random_range(0..header_end);
            fuzz[at] = rng.random();
        }
        if case % 2 == 1 && fuzz.len() >= 4 {
            // valid checksum, so the structural checks are what must hold up
            let body = fuzz.len() - 4;
            let crc = crc32(&fuzz[..body]);
            fuzz[body..].copy_from_slice(&crc.to_le_bytes());
        }
        if catch_unwind(AssertUnwindSafe(|| {
            let _ = decode(&fuzz);
        }))
        .is_err()
        {
            panics += 1;
        }
    }
    check(panics == 0, || format!("{panics} fuzz cases panicked"))?;
    Ok(format!(
        "round trip bit-exact; {} corruptions and {} truncations detected; {cases} fuzz cases, no panics",
        bytes.len() * 3,
        bytes.len()
    ))
}

/// Bitwise IEEE CRC-32, independent of the library's checksum code.
fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 8] = [
        ("somp correctness", somp_correctness),
        ("logit lens is one pursuit step", logit_lens_correspondence),
        ("refit matches normal equations", refit_oracle),
        ("intervention algebra", intervention_algebra),
        ("planted-head study", planted_study),
        ("random-control protocol", control_protocol),
        ("metrics", metrics),
        ("tensor file format", file_format),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}
