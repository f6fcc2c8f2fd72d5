//! Frozen decoder-only toy language model.
//!
//! A stack of causal pre-norm blocks over learned token and position
//! embeddings, with the unembedding tied to the embedding table. The
//! backbone is pretrained once on the plain corpus (no latent slots),
//! then frozen; afterwards latent thought vectors are spliced into the
//! placeholder positions of the prompt embedding and gradients flow
//! through the frozen weights into the latents only.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, normal_matrix, to_f64, BlockParams, BlockVars, RMS_EPS};
use crate::checkpoint;
use crate::corpus::{tokenize, ReasoningSample, TokenizedSample, Vocab, EOS};
use crate::error::{Error, Result};
use crate::optim::{Adam, CLIP_NORM};
use crate::seeded_rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_b: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl BackboneConfig {
    pub fn toy(vocab_size: usize) -> Self {
        BackboneConfig {
            vocab_size,
            d_b: 64,
            layers: 4,
            heads: 4,
            d_ff: 256,
            context: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_b == 0 || self.layers == 0 || self.context == 0 {
            return Err(Error::invalid("backbone dims must be positive"));
        }
        if self.heads == 0 || self.d_b % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads {} must divide d_b {}",
                self.heads, self.d_b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub frozen: bool,
    pub embed: Array2<f32>,
    pub pos: Array2<f32>,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Array2<f32>,
}

pub struct BackboneVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
}

impl BackboneVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("embed".to_string(), self.embed),
            ("pos".to_string(), self.pos),
            ("final_gain".to_string(), self.final_gain),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block{i:02}")));
        }
        out
    }
}

const INIT_SCALE: f64 = 0.02;

impl Backbone {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0);
        let embed = normal_matrix(&mut rng, config.vocab_size, config.d_b, INIT_SCALE);
        let pos = normal_matrix(&mut rng, config.context, config.d_b, INIT_SCALE);
        let blocks = (0..config.layers)
            .map(|_| BlockParams::init(config.d_b, config.d_ff, INIT_SCALE, &mut rng))
            .collect();
        Ok(Backbone {
            config,
            frozen: false,
            embed,
            pos,
            blocks,
            final_gain: Array2::ones((1, config.d_b)),
        })
    }

    pub fn param_refs(&self) -> Vec<(String, &Array2<f32>)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("pos".to_string(), &self.pos),
            ("final_gain".to_string(), &self.final_gain),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block{i:02}")));
        }
        out
    }

    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Array2<f32>)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("pos".to_string(), &mut self.pos),
            ("final_gain".to_string(), &mut self.final_gain),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("block{i:02}")));
        }
        out
    }

    pub fn named_params(&self) -> BTreeMap<String, Array2<f32>> {
        self.param_refs()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect()
    }

    /// Content digest of all parameters; invariant while frozen.
    pub fn digest(&self) -> String {
        checkpoint::digest_hex(&self.named_params())
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut put = |a: &Array2<f32>| {
            if trainable {
                tape.leaf(to_f64(a))
            } else {
                tape.constant(to_f64(a))
            }
        };
        BackboneVars {
            embed: put(&self.embed),
            pos: put(&self.pos),
            final_gain: put(&self.final_gain),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars::load(tape, b, trainable))
                .collect(),
        }
    }

    /// Embedding rows for token ids.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.d_b));
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            for c in 0..self.config.d_b {
                out[[i, c]] = self.embed[[id, c]] as f64;
            }
        }
        Ok(out)
    }

    fn check_rows(&self, rows: usize, cols: usize) -> Result<()> {
        if rows == 0 {
            return Err(Error::invalid("forward on empty sequence"));
        }
        if rows > self.config.context {
            return Err(Error::SequenceTooLong {
                len: rows,
                max: self.config.context,
            });
        }
        if cols != self.config.d_b {
            return Err(Error::shape(format!(
                "input width {cols} does not match d_b {}",
                self.config.d_b
            )));
        }
        Ok(())
    }

    /// Forward over already-embedded input rows; adds position embeddings,
    /// runs the causal stack, and returns tied-head logits `[T x V]`.
    pub fn forward_vars(&self, tape: &mut Tape, vars: &BackboneVars, inputs: Var) -> Result<Var> {
        let (t_len, width) = tape.value(inputs).dim();
        self.check_rows(t_len, width)?;
        let pos = tape.slice_rows(vars.pos, 0, t_len);
        let mut x = tape.add(inputs, pos);
        for b in &vars.blocks {
            x = block_forward(tape, b, x, self.config.heads, true);
        }
        let normed = tape.rms_norm(x, vars.final_gain, RMS_EPS);
        Ok(tape.matmul_nt(normed, vars.embed))
    }

    /// Gradient-free forward convenience.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let logits = self.forward_vars(&mut tape, &vars, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Prompt embedding rows with latent vectors spliced into the
    /// placeholder positions.
    pub fn augmented_prompt(
        &self,
        tok: &TokenizedSample,
        latents: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let span = tok.latent_span.clone();
        if latents.dim() != (span.len(), self.config.d_b) {
            return Err(Error::shape(format!(
                "latents {:?} do not fit {} slots of width {}",
                latents.dim(),
                span.len(),
                self.config.d_b
            )));
        }
        let mut rows = self.embed_ids(&tok.prompt_ids)?;
        for (offset, r) in span.enumerate() {
            for c in 0..self.config.d_b {
                rows[[r, c]] = latents[[offset, c]];
            }
        }
        Ok(rows)
    }

    /// Training view of one sample: input rows for every position except the
    /// last token, and per-position next-token labels masked to the target
    /// region.
    pub fn build_augmented_input(
        &self,
        tok: &TokenizedSample,
        latents: &Array2<f64>,
    ) -> Result<AugmentedSample> {
        let ids = tok.full_ids();
        if ids.len() < 2 {
            return Err(Error::invalid("sample too short to train on"));
        }
        let prompt_rows = self.augmented_prompt(tok, latents)?;
        let target_rows = self.embed_ids(&tok.target_ids[..tok.target_ids.len() - 1])?;
        let inputs = concatenate(Axis(0), &[prompt_rows.view(), target_rows.view()])
            .expect("widths match");
        let prompt_len = tok.prompt_ids.len();
        let labels = (0..inputs.nrows())
            .map(|t| {
                if t + 1 >= prompt_len {
                    Some(ids[t + 1])
                } else {
                    None
                }
            })
            .collect();
        Ok(AugmentedSample {
            inputs,
            labels,
            latent_rows: tok.latent_span.clone(),
        })
    }

    /// Sample token ids after the prompt until EOS, `max_new`, or the
    /// context limit. Temperature 0 is greedy argmax (ties to the lowest
    /// id); positive temperatures sample the scaled softmax.
    pub fn generate(
        &self,
        prompt_rows: &Array2<f64>,
        max_new: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        if temperature < 0.0 {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        self.check_rows(prompt_rows.nrows(), prompt_rows.ncols())?;
        let mut rows = prompt_rows.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if rows.nrows() >= self.config.context {
                break;
            }
            let logits = self.forward(&rows)?;
            let last = logits.row(logits.nrows() - 1);
            let id = if temperature == 0.0 {
                let mut best = 0;
                for (i, v) in last.iter().enumerate() {
                    if *v > last[best] {
                        best = i;
                    }
                }
                best
            } else {
                let scaled: Vec<f64> = last.iter().map(|v| v / temperature).collect();
                let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let u = rand::Rng::random::<f64>(rng) * total;
                let mut cum = 0.0;
                let mut picked = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    cum += w;
                    if u < cum {
                        picked = i;
                        break;
                    }
                }
                picked
            };
            if id == EOS {
                break;
            }
            out.push(id);
            let next_row = self.embed_ids(&[id])?;
            rows = concatenate(Axis(0), &[rows.view(), next_row.view()]).expect("widths match");
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        checkpoint::save(
            path,
            "backbone",
            serde_json::to_value(self.config)?,
            seed,
            self.frozen,
            &self.named_params(),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut params) = checkpoint::load(path)?;
        if meta.kind != "backbone" {
            return Err(Error::ConfigMismatch(format!(
                "expected a backbone checkpoint, found kind {:?}",
                meta.kind
            )));
        }
        let config: BackboneConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::ConfigMismatch(format!("bad backbone config: {e}")))?;
        config.validate()?;
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
            let arr = params
                .remove(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name:?}")))?;
            if arr.dim() != (rows, cols) {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name:?} has shape {:?}, expected ({rows}, {cols})",
                    arr.dim()
                )));
            }
            Ok(arr)
        };
        let embed = take("embed", config.vocab_size, config.d_b)?;
        let pos = take("pos", config.context, config.d_b)?;
        let final_gain = take("final_gain", 1, config.d_b)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("block{i:02}");
            blocks.push(BlockParams {
                attn_gain: take(&format!("{p}.attn_gain"), 1, config.d_b)?,
                wq: take(&format!("{p}.wq"), config.d_b, config.d_b)?,
                wk: take(&format!("{p}.wk"), config.d_b, config.d_b)?,
                wv: take(&format!("{p}.wv"), config.d_b, config.d_b)?,
                wo: take(&format!("{p}.wo"), config.d_b, config.d_b)?,
                ffn_gain: take(&format!("{p}.ffn_gain"), 1, config.d_b)?,
                w1: take(&format!("{p}.w1"), config.d_ff, config.d_b)?,
                w2: take(&format!("{p}.w2"), config.d_b, config.d_ff)?,
            });
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::ConfigMismatch(format!(
                "unexpected parameter {extra:?} in checkpoint"
            )));
        }
        Ok(Backbone {
            config,
            frozen: meta.frozen,
            embed,
            pos,
            blocks,
            final_gain,
        })
    }
}

/// One sample prepared for supervised training through the backbone.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub inputs: Array2<f64>,
    /// `labels[t]` is the id to predict from input row `t`; `None` outside
    /// the target region (latent slots are never predicted).
    pub labels: Vec<Option<usize>>,
    pub latent_rows: Range<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: BackboneConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        PretrainConfig {
            model: BackboneConfig::toy(vocab_size),
            epochs: 4,
            lr: 1e-3,
            batch_size: 16,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_train_ce: Vec<f64>,
    pub epoch_dev_ce: Vec<f64>,
    pub final_dev_ce: f64,
    /// Pass bar for pretraining: uniform-prediction CE minus a fixed margin.
    pub dev_ce_bar: f64,
}

/// `ln(vocab) - 0.5`: the dev cross-entropy a pretrained backbone must beat.
pub fn dev_ce_bar(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln() - 0.5
}

fn plain_ce(backbone: &Backbone, ids: &[usize], trainable: bool) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut tape = Tape::new();
    let vars = backbone.vars(&mut tape, trainable);
    let inputs = tape.gather(vars.embed, &ids[..ids.len() - 1]);
    let logits = backbone.forward_vars(&mut tape, &vars, inputs)?;
    let targets: Vec<usize> = ids[1..].to_vec();
    let mask = vec![true; targets.len()];
    let loss = tape.cross_entropy_rows(logits, &targets, &mask)?;
    let value = tape.scalar(loss);
    let mut grads = BTreeMap::new();
    if trainable {
        tape.backward(loss);
        for (name, var) in vars.named() {
            grads.insert(name, tape.grad(var));
        }
    }
    Ok((value, grads))
}

/// Mean per-sample next-token CE over a split, without latent slots.
pub fn mean_dev_ce(backbone: &Backbone, samples: &[ReasoningSample], vocab: &Vocab) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("dev split is empty"));
    }
    let ces: Result<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let tok = tokenize(s, vocab, 0)?;
            plain_ce(backbone, &tok.full_ids(), false).map(|(ce, _)| ce)
        })
        .collect();
    let ces = ces?;
    Ok(ces.iter().sum::<f64>() / ces.len() as f64)
}

/// Next-token pretraining over the plain corpus. Returns the backbone
/// already frozen.
pub fn pretrain(
    train: &[ReasoningSample],
    dev: &[ReasoningSample],
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be positive"));
    }
    let mut backbone = Backbone::init(cfg.model, cfg.seed)?;
    let token_cache: Result<Vec<Vec<usize>>> = train
        .iter()
        .map(|s| tokenize(s, vocab, 0).map(|t| t.full_ids()))
        .collect();
    let token_cache = token_cache?;
    for ids in &token_cache {
        if ids.len() > cfg.model.context {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: cfg.model.context,
            });
        }
    }

    let mut adam = Adam::new(cfg.lr);
    let mut report = PretrainReport {
        epoch_train_ce: Vec::new(),
        epoch_dev_ce: Vec::new(),
        final_dev_ce: f64::NAN,
        dev_ce_bar: dev_ce_bar(cfg.model.vocab_size),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, 1_000_000 + epoch as u64));
        let mut epoch_ce = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Result<Vec<_>> = batch
                .par_iter()
                .map(|&i| plain_ce(&backbone, &token_cache[i], true))
                .collect();
            let results = results?;
            let scale = 1.0 / results.len() as f64;
            let mut batch_ce = 0.0;
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            for (ce, sample_grads) in results {
                batch_ce += ce * scale;
                for (name, g) in sample_grads {
                    match grads.get_mut(&name) {
                        Some(acc) => *acc += &g,
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            for g in grads.values_mut() {
                *g *= scale;
            }
            if !batch_ce.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            epoch_ce += batch_ce * batch.len() as f64;
            let mut params = backbone.param_refs_mut();
            adam.step(&mut params, &grads, CLIP_NORM);
            step += 1;
        }
        report.epoch_train_ce.push(epoch_ce / train.len() as f64);
        report
            .epoch_dev_ce
            .push(mean_dev_ce(&backbone, dev, vocab)?);
    }
    backbone.frozen = true;
    report.final_dev_ce = *report.epoch_dev_ce.last().expect("epochs >= 1");
    Ok((backbone, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusBounds, LATENT};

    fn tiny_config(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            d_b: 16,
            layers: 2,
            heads: 2,
            d_ff: 32,
            context: 96,
        }
    }

    fn tiny_backbone() -> (Backbone, Vocab) {
        let vocab = Vocab::standard();
        let backbone = Backbone::init(tiny_config(vocab.size()), 7).unwrap();
        (backbone, vocab)
    }

    #[test]
    fn config_validation_rejects_bad_heads() {
        let mut cfg = tiny_config(100);
        cfg.heads = 3;
        assert!(Backbone::init(cfg, 0).is_err());
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let (backbone, vocab) = tiny_backbone();
        let err = backbone.embed_ids(&[vocab.size()]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { .. }));
    }

    #[test]
    fn forward_rejects_overlong_and_empty_sequences() {
        let (backbone, _) = tiny_backbone();
        let too_long = Array2::zeros((backbone.config.context + 1, backbone.config.d_b));
        assert!(matches!(
            backbone.forward(&too_long).unwrap_err(),
            Error::SequenceTooLong { .. }
        ));
        let empty = Array2::zeros((0, backbone.config.d_b));
        assert!(backbone.forward(&empty).is_err());
        let at_limit = Array2::zeros((backbone.config.context, backbone.config.d_b));
        assert!(backbone.forward(&at_limit).is_ok());
    }

    #[test]
    fn forward_is_causal_end_to_end() {
        let (backbone, _) = tiny_backbone();
        let ids_a = vec![5, 9, 17, 30, 12];
        let mut ids_b = ids_a.clone();
        ids_b[4] = 77;
        let la = backbone.forward(&backbone.embed_ids(&ids_a).unwrap()).unwrap();
        let lb = backbone.forward(&backbone.embed_ids(&ids_b).unwrap()).unwrap();
        for t in 0..4 {
            for v in 0..backbone.config.vocab_size {
                assert_eq!(la[[t, v]], lb[[t, v]], "logits[{t}] changed");
            }
        }
        assert!((0..backbone.config.vocab_size).any(|v| la[[4, v]] != lb[[4, v]]));
    }

    #[test]
    fn augmented_input_layout_and_masking() {
        let (backbone, vocab) = tiny_backbone();
        let sample = generate_corpus(3, 1, &CorpusBounds::default()).unwrap().remove(0);
        let tok = tokenize(&sample, &vocab, 2).unwrap();
        let latents = Array2::from_elem((2, backbone.config.d_b), 0.25);
        let aug = backbone.build_augmented_input(&tok, &latents).unwrap();

        let ids = tok.full_ids();
        assert_eq!(aug.inputs.nrows(), ids.len() - 1);
        for t in 0..aug.inputs.nrows() {
            if aug.latent_rows.contains(&t) {
                for c in 0..backbone.config.d_b {
                    assert_eq!(aug.inputs[[t, c]], 0.25);
                }
            } else {
                let row = backbone.embed_ids(&[ids[t]]).unwrap();
                for c in 0..backbone.config.d_b {
                    assert_eq!(aug.inputs[[t, c]], row[[0, c]], "row {t} not an embedding row");
                }
            }
        }
        let prompt_len = tok.prompt_ids.len();
        for (t, label) in aug.labels.iter().enumerate() {
            if t + 1 >= prompt_len {
                assert_eq!(*label, Some(ids[t + 1]));
            } else {
                assert_eq!(*label, None);
            }
        }
    }

    #[test]
    fn latent_token_embeddings_reproduce_plain_embedding() {
        let (backbone, vocab) = tiny_backbone();
        let sample = generate_corpus(4, 1, &CorpusBounds::default()).unwrap().remove(0);
        let tok = tokenize(&sample, &vocab, 3).unwrap();
        let latent_rows = backbone.embed_ids(&[LATENT, LATENT, LATENT]).unwrap();
        let aug = backbone.build_augmented_input(&tok, &latent_rows).unwrap();
        let ids = tok.full_ids();
        let plain = backbone.embed_ids(&ids[..ids.len() - 1]).unwrap();
        assert_eq!(aug.inputs, plain);
    }

    #[test]
    fn perturbing_one_latent_changes_exactly_one_row() {
        let (backbone, vocab) = tiny_backbone();
        let sample = generate_corpus(5, 1, &CorpusBounds::default()).unwrap().remove(0);
        let tok = tokenize(&sample, &vocab, 2).unwrap();
        let latents = Array2::from_elem((2, backbone.config.d_b), 0.1);
        let mut perturbed = latents.clone();
        perturbed[[1, 0]] += 0.5;
        let a = backbone.build_augmented_input(&tok, &latents).unwrap();
        let b = backbone.build_augmented_input(&tok, &perturbed).unwrap();
        let changed: Vec<usize> = (0..a.inputs.nrows())
            .filter(|&t| (0..backbone.config.d_b).any(|c| a.inputs[[t, c]] != b.inputs[[t, c]]))
            .collect();
        assert_eq!(changed, vec![tok.latent_span.start + 1]);
    }

    #[test]
    fn augmented_input_rejects_wrong_latent_shape() {
        let (backbone, vocab) = tiny_backbone();
        let sample = generate_corpus(6, 1, &CorpusBounds::default()).unwrap().remove(0);
        let tok = tokenize(&sample, &vocab, 2).unwrap();
        let wrong = Array2::zeros((3, backbone.config.d_b));
        assert!(backbone.build_augmented_input(&tok, &wrong).is_err());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let (backbone, _) = tiny_backbone();
        let prompt = backbone.embed_ids(&[1, 10, 20]).unwrap();
        let mut rng1 = seeded_rng(0, 0);
        let mut rng2 = seeded_rng(0, 0);
        let a = backbone.generate(&prompt, 12, 0.0, &mut rng1).unwrap();
        let b = backbone.generate(&prompt, 12, 0.0, &mut rng2).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
    }

    #[test]
    fn sampled_generation_is_seed_reproducible() {
        let (backbone, _) = tiny_backbone();
        let prompt = backbone.embed_ids(&[1, 10, 20]).unwrap();
        let a = backbone
            .generate(&prompt, 12, 0.7, &mut seeded_rng(9, 1))
            .unwrap();
        let b = backbone
            .generate(&prompt, 12, 0.7, &mut seeded_rng(9, 1))
            .unwrap();
        assert_eq!(a, b);
        assert!(backbone.generate(&prompt, 4, -0.5, &mut seeded_rng(0, 0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let (mut backbone, _) = tiny_backbone();
        backbone.frozen = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ckpt");
        backbone.save(&path, 7).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(loaded.config, backbone.config);
        assert!(loaded.frozen);
        assert_eq!(loaded.digest(), backbone.digest());
        for ((na, a), (nb, b)) in backbone.param_refs().iter().zip(loaded.param_refs().iter()) {
            assert_eq!(na, nb);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na} not bit-equal");
            }
        }
    }

    #[test]
    fn pretrain_reduces_dev_ce_below_uniform() {
        let vocab = Vocab::standard();
        let train = generate_corpus(21, 48, &CorpusBounds::default()).unwrap();
        let dev = generate_corpus(22, 12, &CorpusBounds::default()).unwrap();
        let cfg = PretrainConfig {
            model: tiny_config(vocab.size()),
            epochs: 2,
            lr: 2e-3,
            batch_size: 16,
            seed: 3,
        };
        let (backbone, report) = pretrain(&train, &dev, &vocab, &cfg).unwrap();
        assert!(backbone.frozen);
        assert_eq!(report.epoch_dev_ce.len(), 2);
        let uniform = (vocab.size() as f64).ln();
        assert!(
            report.final_dev_ce < uniform,
            "dev CE {} did not beat uniform {uniform}",
            report.final_dev_ce
        );
        assert!(report.epoch_dev_ce[1] <= report.epoch_dev_ce[0]);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let vocab = Vocab::standard();
        let train = generate_corpus(31, 24, &CorpusBounds::default()).unwrap();
        let dev = generate_corpus(32, 8, &CorpusBounds::default()).unwrap();
        let cfg = PretrainConfig {
            model: tiny_config(vocab.size()),
            epochs: 1,
            lr: 1e-3,
            batch_size: 8,
            seed: 11,
        };
        let (a, ra) = pretrain(&train, &dev, &vocab, &cfg).unwrap();
        let (b, rb) = pretrain(&train, &dev, &vocab, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(ra.epoch_dev_ce, rb.epoch_dev_ce);
    }
}
