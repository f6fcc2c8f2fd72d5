//! Joint training of a latent generator against a frozen backbone.
//!
//! Each step builds one reverse-mode graph per batch sample: the generator
//! maps the embedded prompt to latent vectors, the latents are spliced
//! into the frozen model's input, and the weighted sum of the supervised,
//! alignment, and focus losses is backpropagated into the generator
//! parameters only. Per-sample graphs run in parallel; gradients are
//! averaged in sample-index order, so results do not depend on the worker
//! count.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::block::to_f64;
use crate::corpus::{tokenize, ReasoningSample, TokenizedSample, Vocab};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, LatentModel, LatentVars};
use crate::objectives::{
    alignment_loss, focus_loss, question_representation, sft_loss, step_representations,
    weighted_total, FocusBatch, LossComponents, LossWeights,
};
use crate::optim::{Adam, CLIP_NORM};
use crate::seeded_rng;
use crate::tape::{Tape, Var};
use crate::variance_lab::mean_dim_variance;

/// Learning rates below this floor stall the joint objective; they are
/// rejected unless explicitly allowed.
pub const LR_FLOOR: f64 = 8e-5;
pub const MAX_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SftOnly,
    SftKl,
    SftCon,
    LinearAssistant,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SftOnly,
        Variant::SftKl,
        Variant::SftCon,
        Variant::LinearAssistant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SftOnly => "sft_only",
            Variant::SftKl => "sft_kl",
            Variant::SftCon => "sft_con",
            Variant::LinearAssistant => "linear_assistant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!(
                    "unknown variant {s:?}, expected one of {}",
                    names.join(", ")
                ))
            })
    }

    /// Zero out the loss terms this variant ablates.
    pub fn effective_weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::Full | Variant::LinearAssistant => *base,
            Variant::SftOnly => LossWeights {
                lambda_align: 0.0,
                lambda_focus: 0.0,
                ..*base
            },
            Variant::SftKl => LossWeights {
                lambda_focus: 0.0,
                ..*base
            },
            Variant::SftCon => LossWeights {
                lambda_align: 0.0,
                ..*base
            },
        }
    }

    pub fn uses_linear_generator(self) -> bool {
        matches!(self, Variant::LinearAssistant)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::parse(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
    pub allow_low_lr: bool,
}

impl TrainConfig {
    pub fn toy(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            weights: LossWeights::default(),
            generator: GeneratorConfig::toy(2),
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            clip: CLIP_NORM,
            seed,
            allow_low_lr: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generator.validate()?;
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be finite and positive"));
        }
        if self.lr < LR_FLOOR && !self.allow_low_lr {
            return Err(Error::invalid(format!(
                "learning rate {} is below the floor {LR_FLOOR}; set allow_low_lr to override",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::invalid(format!(
                "epochs must be between 1 and {MAX_EPOCHS}"
            )));
        }
        if !self.clip.is_finite() || self.clip < 0.0 {
            return Err(Error::invalid("clip must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub sft: f64,
    pub align: f64,
    pub focus: f64,
    pub latent_variance: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_total: f64,
    pub dev_sft: f64,
    pub dev_align: f64,
    pub dev_focus: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub epochs_run: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_total: f64,
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Per-sample data that does not change across steps.
struct Prepared {
    tok: TokenizedSample,
    gen_rows: Array2<f64>,
    e_q: Array2<f64>,
    focus: FocusBatch,
    prefix_ids: Vec<usize>,
    suffix_ids: Vec<usize>,
    labels: Vec<Option<usize>>,
}

fn prepare(
    backbone: &Backbone,
    sample: &ReasoningSample,
    vocab: &Vocab,
    latent_count: usize,
) -> Result<Prepared> {
    let tok = tokenize(sample, vocab, latent_count)?;
    let full = tok.full_ids();
    if full.len() - 1 > backbone.config.context {
        return Err(Error::SequenceTooLong {
            len: full.len() - 1,
            max: backbone.config.context,
        });
    }
    let gen_rows = backbone.embed_ids(&tok.prompt_ids[..tok.latent_span.start])?;
    let e_q = question_representation(&gen_rows, tok.question_span.clone())?;
    let focus = step_representations(backbone, &tok)?;
    let prompt_len = tok.prompt_ids.len();
    let prefix_ids = full[..tok.latent_span.start].to_vec();
    let suffix_ids = full[tok.latent_span.end..full.len() - 1].to_vec();
    let labels = (0..full.len() - 1)
        .map(|t| {
            if t + 1 >= prompt_len {
                Some(full[t + 1])
            } else {
                None
            }
        })
        .collect();
    Ok(Prepared {
        tok,
        gen_rows,
        e_q,
        focus,
        prefix_ids,
        suffix_ids,
        labels,
    })
}

/// Build the full per-sample loss graph. Returns the weighted total, the
/// unweighted component values, and the latents node.
fn sample_graph(
    tape: &mut Tape,
    backbone: &Backbone,
    model: &LatentModel,
    gvars: &LatentVars,
    prep: &Prepared,
    weights: &LossWeights,
) -> Result<(Var, LossComponents, Var)> {
    let gen_rows = tape.constant(prep.gen_rows.clone());
    let (latents, anchor) = model.forward(tape, gvars, gen_rows, prep.tok.question_span.clone())?;
    let bvars = backbone.vars(tape, false);
    let mut comp = LossComponents::default();
    let sft = if weights.lambda_sft > 0.0 {
        let prefix = tape.gather(bvars.embed, &prep.prefix_ids);
        let with_latents = tape.concat_rows(prefix, latents);
        let inputs = if prep.suffix_ids.is_empty() {
            with_latents
        } else {
            let suffix = tape.gather(bvars.embed, &prep.suffix_ids);
            tape.concat_rows(with_latents, suffix)
        };
        let logits = backbone.forward_vars(tape, &bvars, inputs)?;
        let l = sft_loss(tape, logits, &prep.labels)?;
        comp.sft = tape.scalar(l);
        Some(l)
    } else {
        None
    };
    let align = if weights.lambda_align > 0.0 {
        let e_q = tape.constant(prep.e_q.clone());
        let l = alignment_loss(tape, latents, e_q, bvars.embed)?;
        comp.align = tape.scalar(l);
        Some(l)
    } else {
        None
    };
    let focus = if weights.lambda_focus > 0.0 {
        let l = focus_loss(tape, anchor, &prep.focus, weights.tau)?;
        comp.focus = tape.scalar(l);
        Some(l)
    } else {
        None
    };
    let total = weighted_total(
        tape,
        &[
            (weights.lambda_sft, sft),
            (weights.lambda_align, align),
            (weights.lambda_focus, focus),
        ],
    );
    Ok((total, comp, latents))
}

fn sample_loss_grads(
    backbone: &Backbone,
    model: &LatentModel,
    prep: &Prepared,
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<Array2<f64>>, Array2<f64>)> {
    let mut tape = Tape::new();
    let gvars = model.vars(&mut tape, true);
    let (total, comp, latents) = sample_graph(&mut tape, backbone, model, &gvars, prep, weights)?;
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("sample loss is {value}")));
    }
    tape.backward(total);
    let grads = model
        .var_names(&gvars)
        .into_iter()
        .map(|(_, v)| tape.grad(v))
        .collect();
    let latents_value = tape.value(latents).clone();
    Ok((comp, grads, latents_value))
}

fn sample_components(
    backbone: &Backbone,
    model: &LatentModel,
    prep: &Prepared,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let gvars = model.vars(&mut tape, false);
    let (_, comp, _) = sample_graph(&mut tape, backbone, model, &gvars, prep, weights)?;
    Ok(comp)
}

fn mean_components(
    backbone: &Backbone,
    model: &LatentModel,
    prepared: &[Prepared],
    weights: &LossWeights,
) -> Result<LossComponents> {
    let comps: Result<Vec<LossComponents>> = prepared
        .par_iter()
        .map(|p| sample_components(backbone, model, p, weights))
        .collect();
    let comps = comps?;
    let n = comps.len() as f64;
    Ok(LossComponents {
        sft: comps.iter().map(|c| c.sft).sum::<f64>() / n,
        align: comps.iter().map(|c| c.align).sum::<f64>() / n,
        focus: comps.iter().map(|c| c.focus).sum::<f64>() / n,
    })
}

/// Mean unweighted loss components of `model` over raw samples.
pub fn evaluate_loss(
    backbone: &Backbone,
    model: &LatentModel,
    samples: &[ReasoningSample],
    vocab: &Vocab,
    weights: &LossWeights,
) -> Result<LossComponents> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let prepared: Result<Vec<Prepared>> = samples
        .par_iter()
        .map(|s| prepare(backbone, s, vocab, model.config().latent_count))
        .collect();
    mean_components(backbone, model, &prepared?, weights)
}

/// Train a fresh generator of the variant's kind against the frozen
/// backbone, returning the epoch checkpoint with the best dev loss.
pub fn train(
    backbone: &Backbone,
    train_set: &[ReasoningSample],
    dev_set: &[ReasoningSample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(LatentModel, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    if !backbone.frozen {
        return Err(Error::NotFrozen);
    }
    if cfg.generator.d_b != backbone.config.d_b {
        return Err(Error::ConfigMismatch(format!(
            "generator d_b {} does not match backbone d_b {}",
            cfg.generator.d_b, backbone.config.d_b
        )));
    }
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("train and dev splits must be non-empty"));
    }
    let weights = cfg.variant.effective_weights(&cfg.weights);
    weights.validate()?;
    let digest_before = backbone.digest();

    let mut model = if cfg.variant.uses_linear_generator() {
        LatentModel::init_linear(cfg.generator, cfg.seed)?
    } else {
        LatentModel::init_block(cfg.generator, cfg.seed)?
    };
    let param_names: Vec<String> = model.param_refs().into_iter().map(|(n, _)| n).collect();

    let prepared: Result<Vec<Prepared>> = train_set
        .par_iter()
        .map(|s| prepare(backbone, s, vocab, cfg.generator.latent_count))
        .collect();
    let prepared = prepared?;
    let dev_prepared: Result<Vec<Prepared>> = dev_set
        .par_iter()
        .map(|s| prepare(backbone, s, vocab, cfg.generator.latent_count))
        .collect();
    let dev_prepared = dev_prepared?;

    let mut adam = Adam::new(cfg.lr);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, LatentModel)> = None;
    let mut step_no = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, 2_000_000 + epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let results: Result<Vec<_>> = batch
                .par_iter()
                .map(|&i| sample_loss_grads(backbone, &model, &prepared[i], &weights))
                .collect();
            let results = results.map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step: step_no },
                other => other,
            })?;

            let scale = 1.0 / results.len() as f64;
            let mut comp = LossComponents::default();
            let mut grad_map: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let latent_rows: usize = results.iter().map(|(_, _, l)| l.nrows()).sum();
            let mut pool = Array2::zeros((latent_rows, cfg.generator.d_b));
            let mut row = 0;
            for (c, grads, latents) in &results {
                comp.sft += c.sft * scale;
                comp.align += c.align * scale;
                comp.focus += c.focus * scale;
                for (name, g) in param_names.iter().zip(grads) {
                    match grad_map.get_mut(name) {
                        Some(acc) => *acc += g,
                        None => {
                            grad_map.insert(name.clone(), g.clone());
                        }
                    }
                }
                for r in 0..latents.nrows() {
                    pool.row_mut(row).assign(&latents.row(r));
                    row += 1;
                }
            }
            for g in grad_map.values_mut() {
                *g *= scale;
            }
            let total = comp.total(&weights);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step: step_no });
            }
            let mut params = model.param_refs_mut();
            let grad_norm = adam.step(&mut params, &grad_map, cfg.clip);
            drop(params);
            steps.push(StepRecord {
                step: step_no,
                epoch,
                total,
                sft: comp.sft,
                align: comp.align,
                focus: comp.focus,
                latent_variance: mean_dim_variance(&pool.view()),
                grad_norm,
            });
            step_no += 1;
        }

        let dev = mean_components(backbone, &model, &dev_prepared, &weights)?;
        let dev_total = dev.total(&weights);
        if !dev_total.is_finite() {
            return Err(Error::NonFiniteLoss { step: step_no });
        }
        epochs.push(EpochRecord {
            epoch,
            dev_total,
            dev_sft: dev.sft,
            dev_align: dev.align,
            dev_focus: dev.focus,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _)| dev_total < *b);
        if improved {
            best = Some((epoch, dev_total, model.clone()));
        }
    }

    let (best_epoch, best_dev_total, best_model) = best.expect("at least one epoch ran");
    let report = TrainReport {
        variant: cfg.variant.name().to_string(),
        epochs_run: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        steps,
        epochs,
        best_epoch,
        best_dev_total,
        backbone_digest_before: digest_before,
        backbone_digest_after: backbone.digest(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}

pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub coords_checked: usize,
    pub h: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub noise_floor: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Flatten name-keyed matrices in sorted-name, row-major order.
pub fn flatten_params(params: &BTreeMap<String, Array2<f64>>) -> Vec<f64> {
    let mut out = Vec::new();
    for arr in params.values() {
        out.extend(arr.iter().cloned());
    }
    out
}

/// Inverse of [`flatten_params`], taking shapes from `template`.
pub fn unflatten_params(
    flat: &[f64],
    template: &BTreeMap<String, Array2<f64>>,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let expected: usize = template.values().map(|a| a.len()).sum();
    if flat.len() != expected {
        return Err(Error::shape(format!(
            "flat vector has {} entries, template needs {expected}",
            flat.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for (name, arr) in template {
        let n = arr.len();
        let chunk = &flat[offset..offset + n];
        out.insert(
            name.clone(),
            Array2::from_shape_vec(arr.dim(), chunk.to_vec()).expect("sizes agree"),
        );
        offset += n;
    }
    Ok(out)
}

/// Central-difference check of `analytic` against `f` at `theta` over a
/// seeded subset of coordinates.
///
/// The relative-error denominator is floored at the probe's own noise
/// scale: a central difference carries rounding noise of about
/// `|f| * eps / h`, so gradients smaller than that divided by the
/// tolerance cannot be resolved and are judged by absolute agreement at
/// the noise floor instead. Real defects are orders of magnitude above
/// this floor and still fail.
pub fn grad_check_flat<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.is_empty() || theta.len() != analytic.len() {
        return Err(Error::shape(format!(
            "theta has {} entries, analytic has {}",
            theta.len(),
            analytic.len()
        )));
    }
    if !h.is_finite() || h <= 0.0 || max_coords == 0 {
        return Err(Error::invalid("need positive h and at least one coordinate"));
    }
    let coords: Vec<usize> = if max_coords >= theta.len() {
        (0..theta.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..theta.len()).collect();
        all.shuffle(&mut seeded_rng(seed, 4_000_000));
        let mut picked = all[..max_coords].to_vec();
        picked.sort_unstable();
        picked
    };
    let f0 = f(theta)?;
    let fd_noise = f0.abs().max(1.0) * f64::EPSILON / h;
    let noise_floor = (32.0 * fd_noise / GRAD_CHECK_TOL).max(1e-8);
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut probe = theta.to_vec();
    for &c in &coords {
        probe[c] = theta[c] + h;
        let plus = f(&probe)?;
        probe[c] = theta[c] - h;
        let minus = f(&probe)?;
        probe[c] = theta[c];
        let fd = (plus - minus) / (2.0 * h);
        let an = analytic[c];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(noise_floor);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(GradCheckReport {
        param_count: theta.len(),
        coords_checked: coords.len(),
        h,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / coords.len() as f64,
        noise_floor,
        tolerance: GRAD_CHECK_TOL,
        passed: max_rel <= GRAD_CHECK_TOL,
    })
}

/// Check the analytic gradient of the whole per-sample objective with
/// respect to every generator parameter. Probes run on `f64` copies of
/// the parameters, so step `h` is not quantized away.
pub fn grad_check_sample(
    backbone: &Backbone,
    model: &LatentModel,
    sample: &ReasoningSample,
    vocab: &Vocab,
    weights: &LossWeights,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    weights.validate()?;
    if !backbone.frozen {
        return Err(Error::NotFrozen);
    }
    let prep = prepare(backbone, sample, vocab, model.config().latent_count)?;
    let theta_map: BTreeMap<String, Array2<f64>> = model
        .named_params()
        .iter()
        .map(|(n, a)| (n.clone(), to_f64(a)))
        .collect();

    let mut tape = Tape::new();
    let gvars = model.vars_from_f64(&mut tape, &theta_map, true)?;
    let (total, _, _) = sample_graph(&mut tape, backbone, model, &gvars, &prep, weights)?;
    tape.backward(total);
    let grads: BTreeMap<String, Array2<f64>> = model
        .var_names(&gvars)
        .into_iter()
        .map(|(n, v)| (n, tape.grad(v)))
        .collect();

    let theta = flatten_params(&theta_map);
    let analytic = flatten_params(&grads);
    let eval = |flat: &[f64]| -> Result<f64> {
        let values = unflatten_params(flat, &theta_map)?;
        let mut tape = Tape::new();
        let gvars = model.vars_from_f64(&mut tape, &values, false)?;
        let (total, _, _) = sample_graph(&mut tape, backbone, model, &gvars, &prep, weights)?;
        Ok(tape.scalar(total))
    };
    grad_check_flat(eval, &theta, &analytic, GRAD_CHECK_H, max_coords, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::corpus::{generate_corpus, CorpusBounds};

    fn tiny_backbone(frozen: bool) -> (Backbone, Vocab) {
        let vocab = Vocab::standard();
        let cfg = BackboneConfig {
            vocab_size: vocab.size(),
            d_b: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            context: 96,
        };
        let mut b = Backbone::init(cfg, 2).unwrap();
        b.frozen = frozen;
        (b, vocab)
    }

    fn tiny_train_config(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::toy(variant, 5);
        cfg.generator.d_b = 16;
        cfg.generator.d_g = 8;
        cfg.generator.heads = 2;
        cfg.generator.d_ff = 16;
        cfg.generator.context = 96;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("frobnicate").is_err());
        let w = LossWeights::default();
        let sft_only = Variant::SftOnly.effective_weights(&w);
        assert_eq!((sft_only.lambda_align, sft_only.lambda_focus), (0.0, 0.0));
        assert_eq!(sft_only.lambda_sft, 1.0);
        let kl = Variant::SftKl.effective_weights(&w);
        assert_eq!((kl.lambda_align, kl.lambda_focus), (0.5, 0.0));
        let con = Variant::SftCon.effective_weights(&w);
        assert_eq!((con.lambda_align, con.lambda_focus), (0.0, 0.5));
        assert_eq!(Variant::Full.effective_weights(&w), w);
        assert!(Variant::LinearAssistant.uses_linear_generator());
    }

    #[test]
    fn config_enforces_lr_floor_and_epoch_cap() {
        let mut cfg = tiny_train_config(Variant::Full);
        cfg.lr = 5e-5;
        assert!(cfg.validate().is_err());
        cfg.allow_low_lr = true;
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_train_config(Variant::Full);
        cfg.epochs = MAX_EPOCHS + 1;
        assert!(cfg.validate().is_err());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_train_config(Variant::Full);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_requires_a_frozen_backbone() {
        let (backbone, vocab) = tiny_backbone(false);
        let samples = generate_corpus(41, 8, &CorpusBounds::default()).unwrap();
        let cfg = tiny_train_config(Variant::Full);
        let err = train(&backbone, &samples[..6], &samples[6..], &vocab, &cfg).unwrap_err();
        assert!(matches!(err, Error::NotFrozen));
    }

    #[test]
    fn full_variant_trains_and_leaves_backbone_untouched() {
        let (backbone, vocab) = tiny_backbone(true);
        let digest = backbone.digest();
        let samples = generate_corpus(42, 14, &CorpusBounds::default()).unwrap();
        let cfg = tiny_train_config(Variant::Full);
        let (model, report) = train(&backbone, &samples[..10], &samples[10..], &vocab, &cfg).unwrap();
        assert_eq!(model.kind(), "generator_block");
        assert_eq!(report.backbone_digest_before, digest);
        assert_eq!(report.backbone_digest_after, digest);
        assert_eq!(backbone.digest(), digest);
        assert_eq!(report.steps.len(), 2 * 3);
        assert_eq!(report.epochs.len(), 2);
        assert!(report.steps.iter().all(|s| s.total.is_finite()
            && s.sft.is_finite()
            && s.align.is_finite()
            && s.focus.is_finite()));
        assert!(report.steps.iter().all(|s| s.sft > 0.0 && s.align >= 0.0));
        let min_dev = report
            .epochs
            .iter()
            .map(|e| e.dev_total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_dev_total, min_dev);
        assert!(report.epochs.iter().any(|e| e.epoch == report.best_epoch
            && e.dev_total == report.best_dev_total));
    }

    #[test]
    fn ablated_variants_log_zero_for_disabled_terms() {
        let (backbone, vocab) = tiny_backbone(true);
        let samples = generate_corpus(43, 10, &CorpusBounds::default()).unwrap();
        let mut cfg = tiny_train_config(Variant::SftOnly);
        cfg.epochs = 1;
        let (_, report) = train(&backbone, &samples[..8], &samples[8..], &vocab, &cfg).unwrap();
        assert!(report.steps.iter().all(|s| s.align == 0.0 && s.focus == 0.0));
        assert!(report.steps.iter().all(|s| s.sft > 0.0));

        let mut cfg = tiny_train_config(Variant::SftCon);
        cfg.epochs = 1;
        let (_, report) = train(&backbone, &samples[..8], &samples[8..], &vocab, &cfg).unwrap();
        assert!(report.steps.iter().all(|s| s.align == 0.0));
        assert!(report.steps.iter().any(|s| s.focus != 0.0));
    }

    #[test]
    fn linear_variant_uses_the_linear_generator() {
        let (backbone, vocab) = tiny_backbone(true);
        let samples = generate_corpus(44, 10, &CorpusBounds::default()).unwrap();
        let mut cfg = tiny_train_config(Variant::LinearAssistant);
        cfg.epochs = 1;
        let (model, _) = train(&backbone, &samples[..8], &samples[8..], &vocab, &cfg).unwrap();
        assert_eq!(model.kind(), "generator_linear");
    }

    #[test]
    fn training_is_deterministic() {
        let (backbone, vocab) = tiny_backbone(true);
        let samples = generate_corpus(45, 12, &CorpusBounds::default()).unwrap();
        let cfg = tiny_train_config(Variant::Full);
        let (ma, ra) = train(&backbone, &samples[..9], &samples[9..], &vocab, &cfg).unwrap();
        let (mb, rb) = train(&backbone, &samples[..9], &samples[9..], &vocab, &cfg).unwrap();
        assert_eq!(ma.digest(), mb.digest());
        let totals_a: Vec<f64> = ra.steps.iter().map(|s| s.total).collect();
        let totals_b: Vec<f64> = rb.steps.iter().map(|s| s.total).collect();
        assert_eq!(totals_a, totals_b);
        assert_eq!(ra.best_dev_total, rb.best_dev_total);
    }

    #[test]
    fn exploding_parameters_surface_as_non_finite_loss() {
        let (backbone, vocab) = tiny_backbone(true);
        let samples = generate_corpus(46, 10, &CorpusBounds::default()).unwrap();
        let mut cfg = tiny_train_config(Variant::Full);
        cfg.lr = 1e160;
        cfg.clip = 0.0;
        cfg.epochs = 1;
        let err = train(&backbone, &samples[..8], &samples[8..], &vocab, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step } if step >= 1));
    }

    #[test]
    fn evaluate_loss_matches_variant_zeroing() {
        let (backbone, vocab) = tiny_backbone(true);
        let samples = generate_corpus(47, 6, &CorpusBounds::default()).unwrap();
        let model = LatentModel::init_block(tiny_train_config(Variant::Full).generator, 1).unwrap();
        let w = Variant::SftOnly.effective_weights(&LossWeights::default());
        let comp = evaluate_loss(&backbone, &model, &samples, &vocab, &w).unwrap();
        assert_eq!(comp.align, 0.0);
        assert_eq!(comp.focus, 0.0);
        assert!(comp.sft > 0.0);
    }

    #[test]
    fn flatten_round_trips() {
        let mut map = BTreeMap::new();
        map.insert("b".to_string(), Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as f64));
        map.insert("a".to_string(), Array2::from_shape_fn((1, 2), |(_, c)| 10.0 + c as f64));
        let flat = flatten_params(&map);
        assert_eq!(flat.len(), 8);
        assert_eq!(flat[0], 10.0, "sorted name order starts at a");
        let back = unflatten_params(&flat, &map).unwrap();
        assert_eq!(back, map);
        assert!(unflatten_params(&flat[..7], &map).is_err());
    }

    #[test]
    fn grad_check_flat_accepts_exact_gradients_and_rejects_wrong_ones() {
        let theta = vec![0.5, -1.2, 2.0, 0.1];
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let analytic: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let report = grad_check_flat(f, &theta, &analytic, 1e-5, 100, 0).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 4);

        let wrong: Vec<f64> = theta.iter().map(|v| 2.0 * v + 0.3).collect();
        let report = grad_check_flat(f, &theta, &wrong, 1e-5, 100, 0).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn whole_objective_gradients_check_for_both_generators() {
        let (backbone, vocab) = tiny_backbone(true);
        let sample = generate_corpus(48, 1, &CorpusBounds::default()).unwrap().remove(0);
        let weights = LossWeights::default();
        let gcfg = tiny_train_config(Variant::Full).generator;
        for model in [
            LatentModel::init_block(gcfg, 3).unwrap(),
            LatentModel::init_linear(gcfg, 3).unwrap(),
        ] {
            let report =
                grad_check_sample(&backbone, &model, &sample, &vocab, &weights, 60, 12).unwrap();
            assert!(
                report.passed,
                "{}: max rel err {:.3e} over {} coords",
                model.kind(),
                report.max_rel_err,
                report.coords_checked
            );
        }
    }

    #[test]
    fn single_term_gradients_check() {
        let (backbone, vocab) = tiny_backbone(true);
        let sample = generate_corpus(49, 1, &CorpusBounds::default()).unwrap().remove(0);
        let gcfg = tiny_train_config(Variant::Full).generator;
        let model = LatentModel::init_block(gcfg, 4).unwrap();
        let terms = [
            LossWeights { lambda_sft: 1.0, lambda_align: 0.0, lambda_focus: 0.0, tau: 0.1 },
            LossWeights { lambda_sft: 0.0, lambda_align: 1.0, lambda_focus: 0.0, tau: 0.1 },
            LossWeights { lambda_sft: 0.0, lambda_align: 0.0, lambda_focus: 1.0, tau: 0.1 },
        ];
        for (i, w) in terms.iter().enumerate() {
            let report = grad_check_sample(&backbone, &model, &sample, &vocab, w, 40, 21).unwrap();
            assert!(
                report.passed,
                "term {i}: max rel err {:.3e}",
                report.max_rel_err
            );
        }
    }
}
