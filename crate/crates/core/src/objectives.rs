//! The three training objectives and their weighted combination.
//!
//! Supervised loss: mean next-token cross-entropy over the target region.
//! Alignment loss: mean KL from the frozen model's next-token distribution
//! at the pooled question representation to its distribution at each
//! latent, with gradient flowing into the latents only. Focus loss: an
//! InfoNCE term pulling the generator's anchor toward the reasoning step
//! most similar to the answer, against the remaining steps.

use std::ops::Range;

use ndarray::{array, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::corpus::TokenizedSample;
use crate::error::{Error, Result};
use crate::tape::{log_softmax_rows, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sft: f64,
    pub lambda_align: f64,
    pub lambda_focus: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sft: 1.0,
            lambda_align: 0.5,
            lambda_focus: 0.5,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_sft, self.lambda_align, self.lambda_focus];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::invalid("tau must be finite and positive"));
        }
        Ok(())
    }
}

/// Unweighted values of the three terms for one sample or batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub sft: f64,
    pub align: f64,
    pub focus: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_sft * self.sft + w.lambda_align * self.align + w.lambda_focus * self.focus
    }
}

/// Mean next-token cross-entropy over the labelled positions.
pub fn sft_loss(tape: &mut Tape, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let targets: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
    let mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
    tape.cross_entropy_rows(logits, &targets, &mask)
}

/// Mean of the question-position embedding rows, `[1 x d]`.
pub fn question_representation(
    prompt_embed: &Array2<f64>,
    question_span: Range<usize>,
) -> Result<Array2<f64>> {
    if question_span.is_empty() || question_span.end > prompt_embed.nrows() {
        return Err(Error::invalid(format!(
            "question span {question_span:?} out of range for {} rows",
            prompt_embed.nrows()
        )));
    }
    let d = prompt_embed.ncols();
    let mut out = Array2::zeros((1, d));
    for r in question_span.clone() {
        for c in 0..d {
            out[[0, c]] += prompt_embed[[r, c]];
        }
    }
    out /= question_span.len() as f64;
    Ok(out)
}

/// Mean KL from the frozen next-token distribution at `e_q` to the one at
/// each latent. `e_q` and `w` are detached internally, so gradient reaches
/// the latents only.
pub fn alignment_loss(tape: &mut Tape, latents: Var, e_q: Var, w: Var) -> Result<Var> {
    let (n, d) = tape.value(latents).dim();
    let (eq_rows, eq_cols) = tape.value(e_q).dim();
    let (_, w_cols) = tape.value(w).dim();
    if n == 0 {
        return Err(Error::invalid("alignment needs at least one latent"));
    }
    if (eq_rows, eq_cols) != (1, d) || w_cols != d {
        return Err(Error::shape(format!(
            "alignment widths disagree: latents {:?}, e_q {:?}, w {:?}",
            tape.value(latents).dim(),
            tape.value(e_q).dim(),
            tape.value(w).dim()
        )));
    }

    let target_logits = tape.value(e_q).dot(&tape.value(w).t());
    let log_p = log_softmax_rows(&target_logits);
    let p = log_p.mapv(f64::exp);
    let neg_entropy = (&p * &log_p).sum();

    let w_frozen = tape.detach(w);
    let q_logits = tape.matmul_nt(latents, w_frozen);
    let log_q = tape.log_softmax_rows(q_logits);
    let mut p_tiled = Array2::zeros((n, p.ncols()));
    for r in 0..n {
        p_tiled.row_mut(r).assign(&p.row(0));
    }
    let p_tiled = tape.constant(p_tiled);
    let weighted = tape.mul(log_q, p_tiled);
    let cross = tape.sum_all(weighted);
    let scaled = tape.scale(cross, -1.0 / n as f64);
    Ok(tape.add_const(scaled, neg_entropy))
}

/// Frozen pooled representations of the reasoning steps and the answer.
#[derive(Debug, Clone)]
pub struct FocusBatch {
    /// One mean-pooled embedding row per step statement, `[M x d]`.
    pub step_reprs: Array2<f64>,
    /// Mean-pooled embedding of the answer tokens, `[1 x d]`.
    pub answer_repr: Array2<f64>,
}

/// Pool frozen embedding rows over each step span and the answer tokens.
pub fn step_representations(backbone: &Backbone, tok: &TokenizedSample) -> Result<FocusBatch> {
    if tok.step_spans.is_empty() {
        return Err(Error::invalid("sample has no step spans"));
    }
    if tok.answer_ids.is_empty() {
        return Err(Error::invalid("sample has no answer tokens"));
    }
    let d = backbone.config.d_b;
    let mut step_reprs = Array2::zeros((tok.step_spans.len(), d));
    for (m, span) in tok.step_spans.iter().enumerate() {
        if span.is_empty() || span.end > tok.target_ids.len() {
            return Err(Error::invalid(format!("step span {span:?} out of range")));
        }
        let rows = backbone.embed_ids(&tok.target_ids[span.clone()])?;
        let pooled = rows.mean_axis(ndarray::Axis(0)).expect("non-empty span");
        step_reprs.row_mut(m).assign(&pooled);
    }
    let ans_rows = backbone.embed_ids(&tok.answer_ids)?;
    let answer_repr = ans_rows
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty answer")
        .insert_axis(ndarray::Axis(0));
    Ok(FocusBatch {
        step_reprs,
        answer_repr,
    })
}

/// Cosine similarity; either vector having zero norm yields -1.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.dot(&b) / (na * nb)
}

/// Choose the positive step for the focus loss. The final step restates
/// the answer, so with two or more steps it is dropped from the pool to
/// keep the positive non-trivial. Returns `(pool_size, positive_index)`;
/// cosine ties resolve to the lowest index.
pub fn select_positive_step(batch: &FocusBatch) -> Result<(usize, usize)> {
    let m = batch.step_reprs.nrows();
    if m == 0 {
        return Err(Error::invalid("empty step pool"));
    }
    let m_prime = if m >= 2 { m - 1 } else { 1 };
    let ans = batch.answer_repr.row(0);
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for j in 0..m_prime {
        let c = cosine(batch.step_reprs.row(j), ans);
        if c > best_cos {
            best_cos = c;
            best = j;
        }
    }
    Ok((m_prime, best))
}

/// InfoNCE over cosine similarities between the anchor and the retained
/// step pool at temperature `tau`. Gradient flows into the anchor only. A
/// pool of one step gives exactly zero; a zero-norm anchor gives the
/// uniform value `ln(pool)` with no gradient.
pub fn focus_loss(tape: &mut Tape, anchor: Var, batch: &FocusBatch, tau: f64) -> Result<Var> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::invalid("tau must be finite and positive"));
    }
    let (rows, d) = tape.value(anchor).dim();
    if rows != 1 || d != batch.step_reprs.ncols() || d != batch.answer_repr.ncols() {
        return Err(Error::shape(format!(
            "focus widths disagree: anchor {:?}, steps {:?}",
            tape.value(anchor).dim(),
            batch.step_reprs.dim()
        )));
    }
    let (m_prime, pos) = select_positive_step(batch)?;
    if m_prime == 1 {
        return Ok(tape.constant(array![[0.0]]));
    }
    let anchor_sq = tape.mul(anchor, anchor);
    let norm_sq = tape.sum_all(anchor_sq);
    if tape.scalar(norm_sq) == 0.0 {
        return Ok(tape.constant(array![[(m_prime as f64).ln()]]));
    }
    let anchor_norm = tape.sqrt(norm_sq);
    let mut sims = Vec::with_capacity(m_prime);
    for j in 0..m_prime {
        let step = batch.step_reprs.row(j);
        let step_norm = step.dot(&step).sqrt();
        if step_norm == 0.0 {
            sims.push(tape.constant(array![[-1.0]]));
            continue;
        }
        let step_row = tape.constant(step.insert_axis(ndarray::Axis(0)).to_owned());
        let dot = tape.matmul_nt(anchor, step_row);
        let denom = tape.scale(anchor_norm, step_norm);
        sims.push(tape.div(dot, denom));
    }
    let sim_row = tape.concat_cols(&sims);
    let logits = tape.scale(sim_row, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.pick(log_probs, 0, pos);
    Ok(tape.scale(picked, -1.0))
}

/// Weighted sum of whichever loss terms are present, on the tape. Terms
/// whose weight is zero may be passed as `None` and are skipped.
pub fn weighted_total(tape: &mut Tape, terms: &[(f64, Option<Var>)]) -> Var {
    let mut acc: Option<Var> = None;
    for (lambda, term) in terms {
        if *lambda == 0.0 {
            continue;
        }
        if let Some(v) = term {
            let scaled = tape.scale(*v, *lambda);
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled),
                None => scaled,
            });
        }
    }
    acc.unwrap_or_else(|| tape.constant(array![[0.0]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::corpus::{generate_corpus, tokenize, CorpusBounds, Vocab};
    use approx::assert_relative_eq;

    #[test]
    fn weights_default_and_validation() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_sft, w.lambda_align, w.lambda_focus, w.tau), (1.0, 0.5, 0.5, 0.1));
        w.validate().unwrap();
        let mut bad = w;
        bad.lambda_align = -0.1;
        assert!(bad.validate().is_err());
        let mut zero = w;
        zero.lambda_sft = 0.0;
        zero.lambda_align = 0.0;
        zero.lambda_focus = 0.0;
        assert!(zero.validate().is_err());
        let mut tau = w;
        tau.tau = 0.0;
        assert!(tau.validate().is_err());
    }

    #[test]
    fn total_combines_components_linearly() {
        let c = LossComponents { sft: 2.0, align: 0.4, focus: 0.6 };
        let w = LossWeights::default();
        assert_relative_eq!(c.total(&w), 2.5, max_relative = 1e-15);
        let sft_only = LossWeights { lambda_sft: 1.0, lambda_align: 0.0, lambda_focus: 0.0, tau: 0.1 };
        assert_relative_eq!(c.total(&sft_only), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn alignment_matches_closed_form_single_latent() {
        let mut tape = Tape::new();
        let latents = tape.leaf(array![[2f64.ln(), 0.0]]);
        let e_q = tape.constant(array![[0.0, 0.0]]);
        let w = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
        assert_relative_eq!(tape.scalar(loss), 3f64.ln() - 1.5 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn alignment_averages_over_latents() {
        let mut tape = Tape::new();
        let latents = tape.leaf(array![[2f64.ln(), 0.0], [0.0, 0.0]]);
        let e_q = tape.constant(array![[0.0, 0.0]]);
        let w = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
        assert_relative_eq!(
            tape.scalar(loss),
            (3f64.ln() - 1.5 * 2f64.ln()) / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn alignment_is_zero_when_latent_matches_question() {
        let mut tape = Tape::new();
        let latents = tape.leaf(array![[0.3, -0.7]]);
        let e_q = tape.constant(array![[0.3, -0.7]]);
        let w = tape.constant(array![[0.5, 1.0], [-1.0, 0.25], [0.0, 2.0]]);
        let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn alignment_gradient_stops_at_question_and_unembedding() {
        let mut tape = Tape::new();
        let latents = tape.leaf(array![[0.5, -0.2]]);
        let e_q = tape.leaf(array![[0.1, 0.4]]);
        let w = tape.leaf(array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
        tape.backward(loss);
        assert!(tape.grad(latents).iter().any(|g| *g != 0.0));
        assert!(tape.grad(e_q).iter().all(|g| *g == 0.0), "gradient leaked into e_q");
        assert!(tape.grad(w).iter().all(|g| *g == 0.0), "gradient leaked into w");
    }

    #[test]
    fn alignment_gradient_checks_against_finite_differences() {
        let base = array![[0.5, -0.2, 0.3], [-0.1, 0.8, 0.05]];
        let e_q_val = array![[0.1, 0.4, -0.3]];
        let w_val = array![[1.0, 0.0, 0.2], [0.0, 1.0, -0.4], [0.5, 0.5, 0.1], [-0.2, 0.3, 0.9]];
        let eval = |m: &Array2<f64>| {
            let mut tape = Tape::new();
            let latents = tape.leaf(m.clone());
            let e_q = tape.constant(e_q_val.clone());
            let w = tape.constant(w_val.clone());
            let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let latents = tape.leaf(base.clone());
        let e_q = tape.constant(e_q_val.clone());
        let w = tape.constant(w_val.clone());
        let loss = alignment_loss(&mut tape, latents, e_q, w).unwrap();
        tape.backward(loss);
        let analytic = tape.grad(latents);
        let h = 1e-6;
        for r in 0..base.nrows() {
            for c in 0..base.ncols() {
                let mut plus = base.clone();
                plus[[r, c]] += h;
                let mut minus = base.clone();
                minus[[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert_relative_eq!(analytic[[r, c]], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn focus_matches_closed_form() {
        let s = |c: f64| [c, (1.0 - c * c).sqrt()];
        let mut steps = Array2::zeros((4, 2));
        steps.row_mut(0).assign(&ndarray::arr1(&s(0.9)));
        steps.row_mut(1).assign(&ndarray::arr1(&s(0.1)));
        steps.row_mut(2).assign(&ndarray::arr1(&s(0.1)));
        steps.row_mut(3).assign(&ndarray::arr1(&[5.0, 5.0]));
        let batch = FocusBatch {
            answer_repr: ndarray::arr1(&s(0.9)).insert_axis(ndarray::Axis(0)).to_owned(),
            step_reprs: steps,
        };
        let (m_prime, pos) = select_positive_step(&batch).unwrap();
        assert_eq!((m_prime, pos), (3, 0));
        let mut tape = Tape::new();
        let anchor = tape.leaf(array![[1.0, 0.0]]);
        let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
        assert_relative_eq!(
            tape.scalar(loss),
            (1.0 + 2.0 * (-8.0f64).exp()).ln(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn focus_uniform_pool_gives_log_pool_size() {
        let mut steps = Array2::zeros((5, 3));
        for r in 0..5 {
            steps.row_mut(r).assign(&ndarray::arr1(&[0.2, -0.4, 0.6]));
        }
        let batch = FocusBatch {
            step_reprs: steps,
            answer_repr: array![[1.0, 0.0, 0.0]],
        };
        let mut tape = Tape::new();
        let anchor = tape.leaf(array![[0.3, 0.3, -0.9]]);
        let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
        assert_relative_eq!(tape.scalar(loss), 4f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn focus_single_step_pool_is_exactly_zero() {
        for rows in [1usize, 2] {
            let mut steps = Array2::zeros((rows, 2));
            for r in 0..rows {
                steps[[r, 0]] = 1.0 + r as f64;
            }
            let batch = FocusBatch {
                step_reprs: steps,
                answer_repr: array![[1.0, 0.0]],
            };
            let mut tape = Tape::new();
            let anchor = tape.leaf(array![[0.4, 0.6]]);
            let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
            assert_eq!(tape.scalar(loss), 0.0, "pool from {rows} steps");
            tape.backward(loss);
            assert!(tape.grad(anchor).iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn focus_zero_anchor_is_uniform_with_no_gradient() {
        let mut steps = Array2::zeros((4, 2));
        for r in 0..4 {
            steps[[r, 0]] = r as f64 + 1.0;
        }
        let batch = FocusBatch {
            step_reprs: steps,
            answer_repr: array![[1.0, 0.0]],
        };
        let mut tape = Tape::new();
        let anchor = tape.leaf(array![[0.0, 0.0]]);
        let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
        assert_relative_eq!(tape.scalar(loss), 3f64.ln(), max_relative = 1e-12);
        tape.backward(loss);
        assert!(tape.grad(anchor).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn focus_gradient_checks_against_finite_differences() {
        let mut steps = Array2::zeros((4, 3));
        steps.row_mut(0).assign(&ndarray::arr1(&[0.9, 0.2, -0.1]));
        steps.row_mut(1).assign(&ndarray::arr1(&[-0.3, 0.8, 0.4]));
        steps.row_mut(2).assign(&ndarray::arr1(&[0.2, -0.6, 0.7]));
        steps.row_mut(3).assign(&ndarray::arr1(&[1.0, 1.0, 1.0]));
        let batch = FocusBatch {
            step_reprs: steps,
            answer_repr: array![[0.8, 0.1, 0.0]],
        };
        let base = array![[0.5, -0.4, 0.3]];
        let eval = |m: &Array2<f64>| {
            let mut tape = Tape::new();
            let anchor = tape.leaf(m.clone());
            let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let anchor = tape.leaf(base.clone());
        let loss = focus_loss(&mut tape, anchor, &batch, 0.1).unwrap();
        tape.backward(loss);
        let analytic = tape.grad(anchor);
        let h = 1e-6;
        for c in 0..3 {
            let mut plus = base.clone();
            plus[[0, c]] += h;
            let mut minus = base.clone();
            minus[[0, c]] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert_relative_eq!(analytic[[0, c]], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn positive_selection_breaks_ties_low_and_handles_all_negative() {
        let batch = FocusBatch {
            step_reprs: array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [0.5, 0.5]],
            answer_repr: array![[1.0, 0.0]],
        };
        assert_eq!(select_positive_step(&batch).unwrap(), (3, 1));
        let tie = FocusBatch {
            step_reprs: array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]],
            answer_repr: array![[1.0, 0.0]],
        };
        assert_eq!(select_positive_step(&tie).unwrap(), (2, 0));
        let zeros = FocusBatch {
            step_reprs: Array2::zeros((3, 2)),
            answer_repr: array![[1.0, 0.0]],
        };
        assert_eq!(select_positive_step(&zeros).unwrap(), (2, 0));
    }

    #[test]
    fn question_representation_is_span_mean() {
        let rows = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let rep = question_representation(&rows, 1..3).unwrap();
        assert_eq!(rep, array![[4.0, 5.0]]);
        assert!(question_representation(&rows, 2..2).is_err());
        assert!(question_representation(&rows, 3..6).is_err());
    }

    #[test]
    fn step_representations_pool_frozen_embeddings() {
        let vocab = Vocab::standard();
        let cfg = BackboneConfig {
            vocab_size: vocab.size(),
            d_b: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            context: 96,
        };
        let backbone = Backbone::init(cfg, 3).unwrap();
        let sample = generate_corpus(11, 1, &CorpusBounds::default()).unwrap().remove(0);
        let tok = tokenize(&sample, &vocab, 2).unwrap();
        let batch = step_representations(&backbone, &tok).unwrap();
        assert_eq!(batch.step_reprs.nrows(), tok.step_spans.len());
        assert_eq!(batch.step_reprs.ncols(), 16);
        assert_eq!(batch.answer_repr.dim(), (1, 16));
        let span = tok.step_spans[0].clone();
        let rows = backbone.embed_ids(&tok.target_ids[span.clone()]).unwrap();
        for c in 0..16 {
            let mean = (0..rows.nrows()).map(|r| rows[[r, c]]).sum::<f64>() / rows.nrows() as f64;
            assert_relative_eq!(batch.step_reprs[[0, c]], mean, max_relative = 1e-12);
        }
    }

    #[test]
    fn weighted_total_skips_zero_weights() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[2.0]]);
        let b = tape.leaf(array![[10.0]]);
        let total = weighted_total(&mut tape, &[(1.0, Some(a)), (0.0, Some(b)), (0.5, None)]);
        assert_eq!(tape.scalar(total), 2.0);
        tape.backward(total);
        assert!(tape.grad(b).iter().all(|g| *g == 0.0));
        let empty = weighted_total(&mut tape, &[(0.0, Some(a))]);
        assert_eq!(tape.scalar(empty), 0.0);
    }
}
