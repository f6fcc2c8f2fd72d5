//! Accuracy evaluation, the variant ablation grid, and the latent-count
//! sweep.
//!
//! Evaluation decodes each test prompt (with the generator's latents
//! spliced in) `sc_n` times and majority-votes the extracted answers.
//! One draw is greedy and requires temperature zero; several draws
//! require a positive temperature. Sampling streams are keyed by
//! `(sample, draw)`, so results do not depend on the worker count.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::corpus::{canonical_answer, extract_answer, tokenize, ReasoningSample, Vocab};
use crate::error::{Error, Result};
use crate::generator::LatentModel;
use crate::seeded_rng;
use crate::trainer::{train, TrainConfig, Variant};
use crate::variance_lab::measure_latent_variance;

pub const MAX_GENERATED_TOKENS: usize = 64;
const EVAL_STREAM_BASE: u64 = 5_000_000;

/// Vote recorded when a decode contains no extractable answer. Never
/// equal to a canonical answer, so it can only lose or spoil.
pub const NO_ANSWER: &str = "<none>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub expected: String,
    pub votes: Vec<String>,
    pub winner: String,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub sc_n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub n_correct: usize,
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Most frequent vote; ties go to the vote whose first occurrence is
/// earliest.
pub fn majority_vote(votes: &[String]) -> Result<String> {
    if votes.is_empty() {
        return Err(Error::invalid("cannot vote over zero ballots"));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, v) in votes.iter().enumerate() {
        let entry = counts.entry(v).or_insert((0, i));
        entry.0 += 1;
    }
    let winner = counts
        .iter()
        .max_by(|a, b| (a.1 .0, std::cmp::Reverse(a.1 .1)).cmp(&(b.1 .0, std::cmp::Reverse(b.1 .1))))
        .expect("non-empty")
        .0;
    Ok((*winner).to_string())
}

fn validate_decode_args(sc_n: usize, temperature: f64) -> Result<()> {
    if sc_n == 0 {
        return Err(Error::invalid("sc_n must be at least 1"));
    }
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::invalid("temperature must be finite and non-negative"));
    }
    if sc_n == 1 && temperature != 0.0 {
        return Err(Error::invalid(
            "a single decode is greedy; sc_n 1 requires temperature 0",
        ));
    }
    if sc_n > 1 && temperature == 0.0 {
        return Err(Error::invalid(
            "several decodes need diversity; sc_n > 1 requires a positive temperature",
        ));
    }
    Ok(())
}

/// Score a test set given a sampler that produces generated token ids for
/// `(sample index, draw index)`. Split out so scoring can be exercised
/// with stub samplers.
pub fn evaluate_with_sampler<F>(
    testset: &[ReasoningSample],
    vocab: &Vocab,
    sc_n: usize,
    temperature: f64,
    seed: u64,
    sampler: F,
) -> Result<EvalReport>
where
    F: Fn(usize, usize) -> Result<Vec<usize>> + Sync,
{
    let start = Instant::now();
    validate_decode_args(sc_n, temperature)?;
    if testset.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let records: Result<Vec<EvalRecord>> = testset
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let expected = canonical_answer(&sample.answer).ok_or_else(|| {
                Error::invalid(format!("sample {i} has non-numeric answer {:?}", sample.answer))
            })?;
            let mut votes = Vec::with_capacity(sc_n);
            for k in 0..sc_n {
                let ids = sampler(i, k)?;
                let text = vocab.decode(&ids)?;
                votes.push(extract_answer(&text).unwrap_or_else(|| NO_ANSWER.to_string()));
            }
            let winner = majority_vote(&votes)?;
            let correct = winner == expected;
            Ok(EvalRecord {
                index: i,
                expected,
                votes,
                winner,
                correct,
            })
        })
        .collect();
    let records = records?;
    let n_correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        n: records.len(),
        sc_n,
        temperature,
        seed,
        n_correct,
        accuracy: n_correct as f64 / records.len() as f64,
        records,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Decode each test prompt with the generator's latents spliced in and
/// score the majority answer.
pub fn evaluate(
    backbone: &Backbone,
    model: &LatentModel,
    testset: &[ReasoningSample],
    vocab: &Vocab,
    sc_n: usize,
    temperature: f64,
    seed: u64,
) -> Result<EvalReport> {
    validate_decode_args(sc_n, temperature)?;
    if !backbone.frozen {
        return Err(Error::NotFrozen);
    }
    let latent_count = model.config().latent_count;
    let prompts: Result<Vec<Array2<f64>>> = testset
        .par_iter()
        .map(|s| {
            let tok = tokenize(s, vocab, latent_count)?;
            let gen_rows = backbone.embed_ids(&tok.prompt_ids[..tok.latent_span.start])?;
            let (latents, _) = model.latents_plain(&gen_rows, tok.question_span.clone())?;
            backbone.augmented_prompt(&tok, &latents)
        })
        .collect();
    let prompts = prompts?;
    evaluate_with_sampler(testset, vocab, sc_n, temperature, seed, |i, k| {
        let mut rng = seeded_rng(seed, EVAL_STREAM_BASE + (i * sc_n + k) as u64);
        backbone.generate(&prompts[i], MAX_GENERATED_TOKENS, temperature, &mut rng)
    })
}

/// Accuracy (%) of the same recipe at full scale, used as a directional
/// reference next to toy-scale numbers. The toy setup is not expected to
/// reproduce them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAccuracies {
    pub sft_only: f64,
    pub sft_kl: f64,
    pub sft_con: f64,
    pub full: f64,
    pub full_vote_10: f64,
}

impl ReferenceAccuracies {
    pub fn full_scale() -> Self {
        ReferenceAccuracies {
            sft_only: 89.61,
            sft_kl: 91.21,
            sft_con: 91.66,
            full: 93.25,
            full_vote_10: 94.24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub best_dev_total: Option<f64>,
    pub latent_variance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds_ok: usize,
    pub mean_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub mean_latent_variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub sc_n: usize,
    pub temperature: f64,
    pub cells: Vec<AblationCell>,
    pub summaries: Vec<VariantSummary>,
    pub reference_full_scale_percent: ReferenceAccuracies,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Train and evaluate every variant at every seed. A failed cell records
/// its error instead of aborting the grid.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    backbone: &Backbone,
    train_set: &[ReasoningSample],
    dev_set: &[ReasoningSample],
    test_set: &[ReasoningSample],
    vocab: &Vocab,
    base: &TrainConfig,
    seeds: &[u64],
    sc_n: usize,
    temperature: f64,
) -> Result<AblationReport> {
    let start = Instant::now();
    validate_decode_args(sc_n, temperature)?;
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut cells = Vec::new();
    for variant in Variant::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            let outcome = train(backbone, train_set, dev_set, vocab, &cfg).and_then(
                |(model, report)| {
                    let eval =
                        evaluate(backbone, &model, test_set, vocab, sc_n, temperature, seed)?;
                    let variance =
                        measure_latent_variance(backbone, &model, test_set, vocab)?;
                    Ok((eval.accuracy, report.best_dev_total, variance))
                },
            );
            cells.push(match outcome {
                Ok((accuracy, best_dev_total, variance)) => AblationCell {
                    variant: variant.name().to_string(),
                    seed,
                    accuracy: Some(accuracy),
                    best_dev_total: Some(best_dev_total),
                    latent_variance: Some(variance),
                    error: None,
                },
                Err(e) => AblationCell {
                    variant: variant.name().to_string(),
                    seed,
                    accuracy: None,
                    best_dev_total: None,
                    latent_variance: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let summaries = Variant::ALL
        .iter()
        .map(|variant| {
            let ok: Vec<&AblationCell> = cells
                .iter()
                .filter(|c| c.variant == variant.name() && c.error.is_none())
                .collect();
            let accs: Vec<f64> = ok.iter().filter_map(|c| c.accuracy).collect();
            let vars: Vec<f64> = ok.iter().filter_map(|c| c.latent_variance).collect();
            let mean = |xs: &[f64]| {
                if xs.is_empty() {
                    None
                } else {
                    Some(xs.iter().sum::<f64>() / xs.len() as f64)
                }
            };
            VariantSummary {
                variant: variant.name().to_string(),
                seeds_ok: ok.len(),
                mean_accuracy: mean(&accs),
                min_accuracy: accs.iter().cloned().reduce(f64::min),
                max_accuracy: accs.iter().cloned().reduce(f64::max),
                mean_latent_variance: mean(&vars),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        sc_n,
        temperature,
        cells,
        summaries,
        reference_full_scale_percent: ReferenceAccuracies::full_scale(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub latent_count: usize,
    pub accuracy: f64,
    pub best_dev_total: f64,
    pub latent_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub variant: String,
    pub seed: u64,
    pub sc_n: usize,
    pub temperature: f64,
    pub rows: Vec<SweepRow>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Train and evaluate the configured variant once per latent count.
#[allow(clippy::too_many_arguments)]
pub fn sweep_latent_count(
    backbone: &Backbone,
    train_set: &[ReasoningSample],
    dev_set: &[ReasoningSample],
    test_set: &[ReasoningSample],
    vocab: &Vocab,
    base: &TrainConfig,
    counts: &[usize],
    sc_n: usize,
    temperature: f64,
) -> Result<SweepReport> {
    let start = Instant::now();
    validate_decode_args(sc_n, temperature)?;
    if counts.is_empty() {
        return Err(Error::invalid("sweep needs at least one latent count"));
    }
    for (i, c) in counts.iter().enumerate() {
        if *c == 0 {
            return Err(Error::invalid("latent count 0 is not sweepable"));
        }
        if counts[..i].contains(c) {
            return Err(Error::invalid(format!("duplicate latent count {c}")));
        }
    }
    let mut rows = Vec::new();
    for &count in counts {
        let mut cfg = base.clone();
        cfg.generator.latent_count = count;
        let (model, report) = train(backbone, train_set, dev_set, vocab, &cfg)?;
        let eval = evaluate(backbone, &model, test_set, vocab, sc_n, temperature, cfg.seed)?;
        let variance = measure_latent_variance(backbone, &model, test_set, vocab)?;
        rows.push(SweepRow {
            latent_count: count,
            accuracy: eval.accuracy,
            best_dev_total: report.best_dev_total,
            latent_variance: variance,
        });
    }
    Ok(SweepReport {
        variant: base.variant.name().to_string(),
        seed: base.seed,
        sc_n,
        temperature,
        rows,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
