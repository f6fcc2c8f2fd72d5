//! Latent thought generators.
//!
//! The block generator projects the embedded prompt into its own width,
//! appends learned query rows, runs one bidirectional pre-norm block, and
//! reads the query-row outputs back out as latent vectors in backbone
//! width. Pooling the question-row outputs gives an anchor vector used by
//! the contrastive objective. A linear variant maps the mean-pooled prompt
//! embedding straight to the latent block as a floor to compare against.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, normal_matrix, to_f64, BlockParams, BlockVars};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Backbone embedding width (latents are emitted at this width).
    pub d_b: usize,
    /// Internal width of the block generator.
    pub d_g: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub latent_count: usize,
    /// Maximum number of prompt rows the generator accepts.
    pub context: usize,
    pub init_scale: f64,
    /// Add learned position embeddings to the projected prompt rows.
    /// Disabled, the block generator treats the prompt as a set.
    pub positional: bool,
}

impl GeneratorConfig {
    pub fn toy(latent_count: usize) -> Self {
        GeneratorConfig {
            d_b: 64,
            d_g: 64,
            heads: 4,
            d_ff: 256,
            latent_count,
            context: 256,
            init_scale: 0.02,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_b == 0 || self.d_g == 0 || self.d_ff == 0 || self.context == 0 {
            return Err(Error::invalid("generator dims must be positive"));
        }
        if self.latent_count == 0 {
            return Err(Error::invalid("latent_count must be at least 1"));
        }
        if self.heads == 0 || self.d_g % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads {} must divide d_g {}",
                self.heads, self.d_g
            )));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::invalid("init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockGenerator {
    pub config: GeneratorConfig,
    pub in_proj: Array2<f32>,
    pub pos: Array2<f32>,
    pub queries: Array2<f32>,
    pub block: BlockParams,
    pub out_proj: Array2<f32>,
}

pub struct BlockGeneratorVars {
    pub in_proj: Var,
    pub pos: Var,
    pub queries: Var,
    pub block: BlockVars,
    pub out_proj: Var,
}

#[derive(Debug, Clone)]
pub struct LinearGenerator {
    pub config: GeneratorConfig,
    pub weight: Array2<f32>,
    pub bias: Array2<f32>,
}

pub struct LinearGeneratorVars {
    pub weight: Var,
    pub bias: Var,
}

/// Either generator behind one interface.
#[derive(Debug, Clone)]
pub enum LatentModel {
    Block(BlockGenerator),
    Linear(LinearGenerator),
}

pub enum LatentVars {
    Block(BlockGeneratorVars),
    Linear(LinearGeneratorVars),
}

impl LatentModel {
    pub fn init_block(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 1);
        let s = config.init_scale;
        Ok(LatentModel::Block(BlockGenerator {
            in_proj: normal_matrix(&mut rng, config.d_g, config.d_b, s),
            pos: normal_matrix(&mut rng, config.context, config.d_g, s),
            queries: normal_matrix(&mut rng, config.latent_count, config.d_g, s),
            block: BlockParams::init(config.d_g, config.d_ff, s, &mut rng),
            out_proj: normal_matrix(&mut rng, config.d_b, config.d_g, s),
            config,
        }))
    }

    pub fn init_linear(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 2);
        let out = config.latent_count * config.d_b;
        Ok(LatentModel::Linear(LinearGenerator {
            weight: normal_matrix(&mut rng, out, config.d_b, config.init_scale),
            bias: Array2::zeros((1, out)),
            config,
        }))
    }

    pub fn config(&self) -> &GeneratorConfig {
        match self {
            LatentModel::Block(g) => &g.config,
            LatentModel::Linear(g) => &g.config,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LatentModel::Block(_) => "generator_block",
            LatentModel::Linear(_) => "generator_linear",
        }
    }

    pub fn param_refs(&self) -> Vec<(String, &Array2<f32>)> {
        match self {
            LatentModel::Block(g) => {
                let mut out = vec![
                    ("in_proj".to_string(), &g.in_proj),
                    ("out_proj".to_string(), &g.out_proj),
                    ("pos".to_string(), &g.pos),
                    ("queries".to_string(), &g.queries),
                ];
                out.extend(g.block.named("block"));
                out
            }
            LatentModel::Linear(g) => vec![
                ("bias".to_string(), &g.bias),
                ("weight".to_string(), &g.weight),
            ],
        }
    }

    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Array2<f32>)> {
        match self {
            LatentModel::Block(g) => {
                let mut out = vec![
                    ("in_proj".to_string(), &mut g.in_proj),
                    ("out_proj".to_string(), &mut g.out_proj),
                    ("pos".to_string(), &mut g.pos),
                    ("queries".to_string(), &mut g.queries),
                ];
                out.extend(g.block.named_mut("block"));
                out
            }
            LatentModel::Linear(g) => vec![
                ("bias".to_string(), &mut g.bias),
                ("weight".to_string(), &mut g.weight),
            ],
        }
    }

    pub fn named_params(&self) -> BTreeMap<String, Array2<f32>> {
        self.param_refs()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect()
    }

    pub fn digest(&self) -> String {
        checkpoint::digest_hex(&self.named_params())
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> LatentVars {
        let mut put = |a: &Array2<f32>| {
            if trainable {
                tape.leaf(to_f64(a))
            } else {
                tape.constant(to_f64(a))
            }
        };
        match self {
            LatentModel::Block(g) => LatentVars::Block(BlockGeneratorVars {
                in_proj: put(&g.in_proj),
                pos: put(&g.pos),
                queries: put(&g.queries),
                out_proj: put(&g.out_proj),
                block: BlockVars::load(tape, &g.block, trainable),
            }),
            LatentModel::Linear(g) => LatentVars::Linear(LinearGeneratorVars {
                weight: put(&g.weight),
                bias: put(&g.bias),
            }),
        }
    }

    /// Build vars from explicit `f64` values keyed like [`Self::named_params`].
    /// Used by finite-difference probes, which need parameter perturbations
    /// below `f32` resolution.
    pub fn vars_from_f64(
        &self,
        tape: &mut Tape,
        values: &BTreeMap<String, Array2<f64>>,
        trainable: bool,
    ) -> Result<LatentVars> {
        for (name, arr) in self.param_refs() {
            let got = values
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing value for parameter {name:?}")))?;
            if got.dim() != arr.dim() {
                return Err(Error::shape(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    got.dim(),
                    arr.dim()
                )));
            }
        }
        let mut put = |name: &str| {
            let arr = values[name].clone();
            if trainable {
                tape.leaf(arr)
            } else {
                tape.constant(arr)
            }
        };
        Ok(match self {
            LatentModel::Block(_) => LatentVars::Block(BlockGeneratorVars {
                in_proj: put("in_proj"),
                pos: put("pos"),
                queries: put("queries"),
                out_proj: put("out_proj"),
                block: BlockVars {
                    attn_gain: put("block.attn_gain"),
                    wq: put("block.wq"),
                    wk: put("block.wk"),
                    wv: put("block.wv"),
                    wo: put("block.wo"),
                    ffn_gain: put("block.ffn_gain"),
                    w1: put("block.w1"),
                    w2: put("block.w2"),
                },
            }),
            LatentModel::Linear(_) => LatentVars::Linear(LinearGeneratorVars {
                weight: put("weight"),
                bias: put("bias"),
            }),
        })
    }

    pub fn var_names(&self, vars: &LatentVars) -> Vec<(String, Var)> {
        match (self, vars) {
            (LatentModel::Block(_), LatentVars::Block(v)) => {
                let mut out = vec![
                    ("in_proj".to_string(), v.in_proj),
                    ("out_proj".to_string(), v.out_proj),
                    ("pos".to_string(), v.pos),
                    ("queries".to_string(), v.queries),
                ];
                out.extend(v.block.named("block"));
                out
            }
            (LatentModel::Linear(_), LatentVars::Linear(v)) => vec![
                ("bias".to_string(), v.bias),
                ("weight".to_string(), v.weight),
            ],
            _ => panic!("vars built from a different model variant"),
        }
    }

    /// Produce latent vectors `[L x d_b]` and an anchor `[1 x d_b]` from
    /// embedded prompt rows (instruction and question, without the latent
    /// placeholder slots). `question_span` indexes rows of `prompt_embed`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &LatentVars,
        prompt_embed: Var,
        question_span: Range<usize>,
    ) -> Result<(Var, Var)> {
        let (p_rows, width) = tape.value(prompt_embed).dim();
        let cfg = self.config();
        if p_rows == 0 {
            return Err(Error::invalid("generator needs at least one prompt row"));
        }
        if width != cfg.d_b {
            return Err(Error::shape(format!(
                "prompt width {width} does not match d_b {}",
                cfg.d_b
            )));
        }
        if question_span.is_empty() || question_span.end > p_rows {
            return Err(Error::invalid(format!(
                "question span {question_span:?} out of range for {p_rows} prompt rows"
            )));
        }
        match (self, vars) {
            (LatentModel::Block(g), LatentVars::Block(v)) => {
                if p_rows > cfg.context {
                    return Err(Error::SequenceTooLong {
                        len: p_rows,
                        max: cfg.context,
                    });
                }
                let mut x = tape.matmul_nt(prompt_embed, v.in_proj);
                if g.config.positional {
                    let pos = tape.slice_rows(v.pos, 0, p_rows);
                    x = tape.add(x, pos);
                }
                let h = tape.concat_rows(x, v.queries);
                let y = block_forward(tape, &v.block, h, cfg.heads, false);
                let query_rows = tape.slice_rows(y, p_rows, cfg.latent_count);
                let latents = tape.matmul_nt(query_rows, v.out_proj);
                let q_rows = tape.slice_rows(y, question_span.start, question_span.len());
                let pooled = tape.mean_rows(q_rows);
                let anchor = tape.matmul_nt(pooled, v.out_proj);
                Ok((latents, anchor))
            }
            (LatentModel::Linear(_), LatentVars::Linear(v)) => {
                let pooled = tape.mean_rows(prompt_embed);
                let affine = tape.matmul_nt(pooled, v.weight);
                let flat = tape.add(affine, v.bias);
                let latents = tape.reshape(flat, cfg.latent_count, cfg.d_b);
                let anchor = tape.mean_rows(latents);
                Ok((latents, anchor))
            }
            _ => Err(Error::invalid("vars built from a different model variant")),
        }
    }

    /// Gradient-free forward convenience.
    pub fn latents_plain(
        &self,
        prompt_embed: &Array2<f64>,
        question_span: Range<usize>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false);
        let x = tape.constant(prompt_embed.clone());
        let (l, a) = self.forward(&mut tape, &vars, x, question_span)?;
        Ok((tape.value(l).clone(), tape.value(a).clone()))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        checkpoint::save(
            path,
            self.kind(),
            serde_json::to_value(self.config())?,
            seed,
            false,
            &self.named_params(),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut params) = checkpoint::load(path)?;
        let config: GeneratorConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::ConfigMismatch(format!("bad generator config: {e}")))?;
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
        let model = match meta.kind.as_str() {
            "generator_block" => LatentModel::Block(BlockGenerator {
                in_proj: take("in_proj", config.d_g, config.d_b)?,
                pos: take("pos", config.context, config.d_g)?,
                queries: take("queries", config.latent_count, config.d_g)?,
                out_proj: take("out_proj", config.d_b, config.d_g)?,
                block: BlockParams {
                    attn_gain: take("block.attn_gain", 1, config.d_g)?,
                    wq: take("block.wq", config.d_g, config.d_g)?,
                    wk: take("block.wk", config.d_g, config.d_g)?,
                    wv: take("block.wv", config.d_g, config.d_g)?,
                    wo: take("block.wo", config.d_g, config.d_g)?,
                    ffn_gain: take("block.ffn_gain", 1, config.d_g)?,
                    w1: take("block.w1", config.d_ff, config.d_g)?,
                    w2: take("block.w2", config.d_g, config.d_ff)?,
                },
                config,
            }),
            "generator_linear" => LatentModel::Linear(LinearGenerator {
                weight: take("weight", config.latent_count * config.d_b, config.d_b)?,
                bias: take("bias", 1, config.latent_count * config.d_b)?,
                config,
            }),
            other => {
                return Err(Error::ConfigMismatch(format!(
                    "expected a generator checkpoint, found kind {other:?}"
                )))
            }
        };
        if let Some(extra) = params.keys().next() {
            return Err(Error::ConfigMismatch(format!(
                "unexpected parameter {extra:?} in checkpoint"
            )));
        }
        Ok(model)
    }
}
