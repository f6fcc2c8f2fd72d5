//! Implementations of the `lta` subcommands. Each resolves its settings
//! (flag, then config file, then built-in default), runs one library
//! operation, writes machine-readable outputs that echo the effective
//! settings, and prints a one-line summary.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use rayon::prelude::*;
use serde_json::json;

use lta_core::backbone::{pretrain as run_pretrain, Backbone, BackboneConfig, PretrainConfig};
use lta_core::corpus::{
    generate_corpus, generate_split_corpora, write_jsonl, CorpusBounds, ReasoningSample, Vocab,
};
use lta_core::eval::{ablate as run_ablate, evaluate, sweep_latent_count};
use lta_core::generator::{GeneratorConfig, LatentModel};
use lta_core::objectives::LossWeights;
use lta_core::optim::CLIP_NORM;
use lta_core::trainer::{grad_check_sample, train as run_train, TrainConfig, Variant};
use lta_core::variance_lab::{kl_gaussian, lemma_trial, verify_variance_ordering, GaussianSpec};

use crate::cfg::{or, parse_list, FileConfig};
use crate::io::{
    csv_writer, ensure_dir, load_backbone, load_corpus, load_generator, write_json, OutTree,
};

#[derive(Args)]
pub struct LossFlags {
    /// Weight of the supervised next-token term.
    #[arg(long)]
    lambda_sft: Option<f64>,

    /// Weight of the vocabulary-distribution alignment term.
    #[arg(long)]
    lambda_align: Option<f64>,

    /// Weight of the contrastive focus term.
    #[arg(long)]
    lambda_focus: Option<f64>,

    /// Similarity temperature of the focus term.
    #[arg(long)]
    tau: Option<f64>,
}

impl LossFlags {
    fn resolve(&self, file: &FileConfig) -> Result<LossWeights> {
        let d = LossWeights::default();
        Ok(LossWeights {
            lambda_sft: or(self.lambda_sft, file.f64("lambda_sft")?, d.lambda_sft),
            lambda_align: or(self.lambda_align, file.f64("lambda_align")?, d.lambda_align),
            lambda_focus: or(self.lambda_focus, file.f64("lambda_focus")?, d.lambda_focus),
            tau: or(self.tau, file.f64("tau")?, d.tau),
        })
    }
}

#[derive(Args)]
pub struct GeneratorFlags {
    /// Latent thought vectors appended to each prompt.
    #[arg(long)]
    ln: Option<usize>,

    /// Generator working width.
    #[arg(long)]
    d_g: Option<usize>,

    /// Generator attention heads.
    #[arg(long)]
    g_heads: Option<usize>,

    /// Generator feed-forward width.
    #[arg(long)]
    g_d_ff: Option<usize>,

    /// Scale of the generator's random initialization.
    #[arg(long)]
    init_scale: Option<f64>,

    /// Drop the learned positional offsets on projected prompt rows.
    #[arg(long)]
    no_positional: bool,
}

impl GeneratorFlags {
    fn resolve(
        &self,
        file: &FileConfig,
        d_b: usize,
        context: usize,
        shape_default: (usize, usize, usize),
    ) -> Result<GeneratorConfig> {
        let positional = if self.no_positional {
            false
        } else {
            file.bool("positional")?.unwrap_or(true)
        };
        Ok(GeneratorConfig {
            d_b,
            d_g: or(self.d_g, file.usize("d_g")?, shape_default.0),
            heads: or(self.g_heads, file.usize("g_heads")?, shape_default.1),
            d_ff: or(self.g_d_ff, file.usize("g_d_ff")?, shape_default.2),
            latent_count: or(self.ln, file.usize("ln")?, 2),
            context,
            init_scale: or(self.init_scale, file.f64("init_scale")?, 0.02),
            positional,
        })
    }
}

#[derive(Args)]
pub struct TrainKnobs {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,

    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Samples per optimizer step.
    #[arg(long)]
    batch: Option<usize>,

    /// Accept learning rates below the safety floor.
    #[arg(long)]
    allow_low_lr: bool,
}

impl TrainKnobs {
    fn resolve(&self, file: &FileConfig, default_epochs: usize) -> Result<(usize, f64, usize, bool)> {
        Ok((
            or(self.epochs, file.usize("epochs")?, default_epochs),
            or(self.lr, file.f64("lr")?, 1e-3),
            or(self.batch, file.usize("batch")?, 16),
            self.allow_low_lr || file.bool("allow_low_lr")?.unwrap_or(false),
        ))
    }
}

fn resolve_variant(flag: Option<Variant>, file: &FileConfig) -> Result<Variant> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.string("variant")? {
        Some(s) => Ok(Variant::parse(&s)?),
        None => Ok(Variant::Full),
    }
}

fn resolve_data_dir(flag: Option<PathBuf>, file: &FileConfig, out: &OutTree) -> Result<PathBuf> {
    Ok(or(flag, file.path("data")?, out.data_dir()))
}

fn resolve_backbone_path(
    flag: Option<PathBuf>,
    file: &FileConfig,
    out: &OutTree,
) -> Result<PathBuf> {
    Ok(or(flag, file.path("backbone")?, out.backbone_path()))
}

fn check_vocab(backbone: &Backbone, vocab: &Vocab) -> Result<()> {
    if backbone.config.vocab_size != vocab.size() {
        bail!(
            "vocabulary has {} tokens but the backbone expects {}",
            vocab.size(),
            backbone.config.vocab_size
        );
    }
    Ok(())
}

/// Default sampling temperature: greedy for a single decode, diversity
/// for a vote.
fn default_temperature(sc_n: usize) -> f64 {
    if sc_n > 1 {
        0.7
    } else {
        0.0
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Seed governing the whole corpus.
    #[arg(long)]
    seed: Option<u64>,

    /// Training samples to generate.
    #[arg(long)]
    n_samples: Option<usize>,

    /// Dev samples to generate.
    #[arg(long)]
    n_dev: Option<usize>,

    /// Test samples to generate.
    #[arg(long)]
    n_test: Option<usize>,

    /// Minimum chain operations per question.
    #[arg(long)]
    steps_min: Option<usize>,

    /// Maximum chain operations per question.
    #[arg(long)]
    steps_max: Option<usize>,
}

pub fn gen_data(out: &OutTree, file: &FileConfig, args: GenDataArgs) -> Result<()> {
    let seed = or(args.seed, file.u64("seed")?, 0);
    let n_samples = or(args.n_samples, file.usize("n_samples")?, 2000);
    let n_dev = or(args.n_dev, file.usize("n_dev")?, 200);
    let n_test = or(args.n_test, file.usize("n_test")?, 200);
    let steps_min = or(args.steps_min, file.usize("steps_min")?, 2);
    let steps_max = or(args.steps_max, file.usize("steps_max")?, 4);

    let bounds = CorpusBounds { steps_min, steps_max };
    let (train, dev, test) = generate_split_corpora(seed, n_samples, n_dev, n_test, &bounds)?;
    let vocab = Vocab::standard();

    let dir = out.data_dir();
    ensure_dir(&dir)?;
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("dev.jsonl"), &dev)?;
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    vocab.save(&dir.join("vocab.txt"))?;

    let echo = json!({
        "seed": seed,
        "n_samples": n_samples,
        "n_dev": n_dev,
        "n_test": n_test,
        "steps_min": steps_min,
        "steps_max": steps_max,
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("gen_data.json"),
        &json!({
            "config": echo,
            "counts": { "train": train.len(), "dev": dev.len(), "test": test.len() },
            "vocab_size": vocab.size(),
        }),
    )?;
    println!(
        "wrote {} train / {} dev / {} test samples under {}",
        train.len(),
        dev.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,

    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,

    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Samples per optimizer step.
    #[arg(long)]
    batch: Option<usize>,

    /// Backbone embedding width.
    #[arg(long)]
    d_b: Option<usize>,

    /// Backbone transformer layers.
    #[arg(long)]
    layers: Option<usize>,

    /// Backbone attention heads.
    #[arg(long)]
    heads: Option<usize>,

    /// Backbone feed-forward width.
    #[arg(long)]
    d_ff: Option<usize>,

    /// Maximum sequence length.
    #[arg(long)]
    context: Option<usize>,

    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
}

pub fn pretrain(out: &OutTree, file: &FileConfig, args: PretrainArgs) -> Result<()> {
    let seed = or(args.seed, file.u64("seed")?, 0);
    let epochs = or(args.epochs, file.usize("epochs")?, 4);
    let lr = or(args.lr, file.f64("lr")?, 1e-3);
    let batch = or(args.batch, file.usize("batch")?, 16);
    let data = resolve_data_dir(args.data, file, out)?;
    let corpus = load_corpus(&data)?;

    let model = BackboneConfig {
        vocab_size: corpus.vocab.size(),
        d_b: or(args.d_b, file.usize("d_b")?, 64),
        layers: or(args.layers, file.usize("layers")?, 4),
        heads: or(args.heads, file.usize("heads")?, 4),
        d_ff: or(args.d_ff, file.usize("d_ff")?, 256),
        context: or(args.context, file.usize("context")?, 256),
    };
    let cfg = PretrainConfig { model, epochs, lr, batch_size: batch, seed };
    let (backbone, report) = run_pretrain(&corpus.train, &corpus.dev, &corpus.vocab, &cfg)?;

    ensure_dir(&out.ckpt_dir())?;
    let ckpt = out.backbone_path();
    backbone.save(&ckpt, seed)?;

    let echo = json!({
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "batch": batch,
        "model": model,
        "data": data.display().to_string(),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("pretrain.json"),
        &json!({
            "config": echo,
            "checkpoint": ckpt.display().to_string(),
            "digest": backbone.digest(),
            "report": report,
        }),
    )?;
    println!(
        "final dev cross-entropy {:.4} (bar {:.4}); frozen checkpoint at {}",
        report.final_dev_ce,
        report.dev_ce_bar,
        ckpt.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Objective variant to train.
    #[arg(long)]
    variant: Option<Variant>,

    /// Seed for generator init and batch order.
    #[arg(long)]
    seed: Option<u64>,

    #[command(flatten)]
    knobs: TrainKnobs,

    #[command(flatten)]
    gen: GeneratorFlags,

    #[command(flatten)]
    loss: LossFlags,

    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Frozen backbone checkpoint (default: <out>/ckpt/backbone.ckpt).
    #[arg(long)]
    backbone: Option<PathBuf>,
}

pub fn train(out: &OutTree, file: &FileConfig, args: TrainArgs) -> Result<()> {
    let variant = resolve_variant(args.variant, file)?;
    let seed = or(args.seed, file.u64("seed")?, 0);
    let (epochs, lr, batch, allow_low_lr) = args.knobs.resolve(file, 3)?;
    let data = resolve_data_dir(args.data, file, out)?;
    let bpath = resolve_backbone_path(args.backbone, file, out)?;

    let corpus = load_corpus(&data)?;
    let backbone = load_backbone(&bpath)?;
    check_vocab(&backbone, &corpus.vocab)?;
    let generator = args
        .gen
        .resolve(file, backbone.config.d_b, backbone.config.context, (64, 4, 256))?;
    let weights = args.loss.resolve(file)?;

    let cfg = TrainConfig {
        variant,
        weights,
        generator,
        epochs,
        lr,
        batch_size: batch,
        clip: CLIP_NORM,
        seed,
        allow_low_lr,
    };
    let (model, report) = run_train(&backbone, &corpus.train, &corpus.dev, &corpus.vocab, &cfg)?;

    ensure_dir(&out.ckpt_dir())?;
    let gpath = out.generator_path(variant.name(), seed);
    model.save(&gpath, seed)?;

    let stem = format!("train-{}-s{}", variant.name(), seed);
    let csv_path = out.reports_dir().join(format!("{stem}.csv"));
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["step", "epoch", "total", "sft", "align", "focus", "latent_variance"])?;
    for s in &report.steps {
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            s.total.to_string(),
            s.sft.to_string(),
            s.align.to_string(),
            s.focus.to_string(),
            s.latent_variance.to_string(),
        ])?;
    }
    w.flush()?;

    let echo = json!({
        "variant": variant.name(),
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "batch": batch,
        "allow_low_lr": allow_low_lr,
        "weights": cfg.weights,
        "generator": cfg.generator,
        "data": data.display().to_string(),
        "backbone": bpath.display().to_string(),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join(format!("{stem}.json")),
        &json!({
            "config": echo,
            "checkpoint": gpath.display().to_string(),
            "metrics_csv": csv_path.display().to_string(),
            "report": report,
        }),
    )?;
    println!(
        "{}: best dev total {:.6} at epoch {}; checkpoint at {}",
        variant.name(),
        report.best_dev_total,
        report.best_epoch,
        gpath.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Variant label used to locate the default generator checkpoint.
    #[arg(long)]
    variant: Option<Variant>,

    /// Seed for decoding (and the default checkpoint name).
    #[arg(long)]
    seed: Option<u64>,

    /// Decodes per question for the majority vote.
    #[arg(long)]
    sc_n: Option<usize>,

    /// Sampling temperature; 0 decodes greedily and is required when sc-n is 1.
    #[arg(long)]
    temperature: Option<f64>,

    /// Corpus split to score: train, dev, or test.
    #[arg(long)]
    split: Option<String>,

    /// Generator checkpoint (default: <out>/ckpt/generator-<variant>-s<seed>.ckpt).
    #[arg(long)]
    generator: Option<PathBuf>,

    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Frozen backbone checkpoint (default: <out>/ckpt/backbone.ckpt).
    #[arg(long)]
    backbone: Option<PathBuf>,
}

pub fn eval(out: &OutTree, file: &FileConfig, args: EvalArgs) -> Result<()> {
    let variant = resolve_variant(args.variant, file)?;
    let seed = or(args.seed, file.u64("seed")?, 0);
    let sc_n = or(args.sc_n, file.usize("sc_n")?, 1);
    let temperature = or(args.temperature, file.f64("temperature")?, default_temperature(sc_n));
    let split = or(args.split, file.string("split")?, "test".to_string());
    let data = resolve_data_dir(args.data, file, out)?;
    let bpath = resolve_backbone_path(args.backbone, file, out)?;
    let gpath = or(
        args.generator,
        file.path("generator")?,
        out.generator_path(variant.name(), seed),
    );

    let corpus = load_corpus(&data)?;
    let backbone = load_backbone(&bpath)?;
    check_vocab(&backbone, &corpus.vocab)?;
    let model = load_generator(&gpath)?;
    let samples = match split.as_str() {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test" => &corpus.test,
        other => bail!("unknown split {other:?}, expected train, dev, or test"),
    };
    let report = evaluate(&backbone, &model, samples, &corpus.vocab, sc_n, temperature, seed)?;

    let stem = format!("eval-{}-s{}-sc{}", variant.name(), seed, sc_n);
    let csv_path = out.reports_dir().join(format!("{stem}.csv"));
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["index", "expected", "winner", "correct", "votes"])?;
    for r in &report.records {
        w.write_record([
            r.index.to_string(),
            r.expected.clone(),
            r.winner.clone(),
            r.correct.to_string(),
            r.votes.join(" "),
        ])?;
    }
    w.flush()?;

    let echo = json!({
        "variant": variant.name(),
        "seed": seed,
        "sc_n": sc_n,
        "temperature": temperature,
        "split": split,
        "generator": gpath.display().to_string(),
        "data": data.display().to_string(),
        "backbone": bpath.display().to_string(),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join(format!("{stem}.json")),
        &json!({ "config": echo, "report": report }),
    )?;
    println!(
        "accuracy {:.4} ({} of {} correct) on {} split",
        report.accuracy, report.n_correct, report.n, split
    );
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    /// Comma-separated seeds; every variant is trained once per seed.
    #[arg(long)]
    seeds: Option<String>,

    #[command(flatten)]
    knobs: TrainKnobs,

    #[command(flatten)]
    gen: GeneratorFlags,

    #[command(flatten)]
    loss: LossFlags,

    /// Decodes per question for the majority vote.
    #[arg(long)]
    sc_n: Option<usize>,

    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,

    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Frozen backbone checkpoint (default: <out>/ckpt/backbone.ckpt).
    #[arg(long)]
    backbone: Option<PathBuf>,
}

pub fn ablate(out: &OutTree, file: &FileConfig, args: AblateArgs) -> Result<()> {
    let seeds_text = or(args.seeds, file.string("seeds")?, "0,1,2".to_string());
    let seeds: Vec<u64> = parse_list(&seeds_text, "seed")?;
    let (epochs, lr, batch, allow_low_lr) = args.knobs.resolve(file, 3)?;
    let sc_n = or(args.sc_n, file.usize("sc_n")?, 1);
    let temperature = or(args.temperature, file.f64("temperature")?, default_temperature(sc_n));
    let data = resolve_data_dir(args.data, file, out)?;
    let bpath = resolve_backbone_path(args.backbone, file, out)?;

    let corpus = load_corpus(&data)?;
    let backbone = load_backbone(&bpath)?;
    check_vocab(&backbone, &corpus.vocab)?;
    let generator = args
        .gen
        .resolve(file, backbone.config.d_b, backbone.config.context, (64, 4, 256))?;
    let weights = args.loss.resolve(file)?;

    let base = TrainConfig {
        variant: Variant::Full,
        weights,
        generator,
        epochs,
        lr,
        batch_size: batch,
        clip: CLIP_NORM,
        seed: 0,
        allow_low_lr,
    };
    let report = run_ablate(
        &backbone,
        &corpus.train,
        &corpus.dev,
        &corpus.test,
        &corpus.vocab,
        &base,
        &seeds,
        sc_n,
        temperature,
    )?;

    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let cells_path = out.reports_dir().join("ablation-cells.csv");
    let mut w = csv_writer(&cells_path)?;
    w.write_record(["variant", "seed", "accuracy", "best_dev_total", "latent_variance", "error"])?;
    for c in &report.cells {
        w.write_record([
            c.variant.clone(),
            c.seed.to_string(),
            opt(c.accuracy),
            opt(c.best_dev_total),
            opt(c.latent_variance),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let summary_path = out.reports_dir().join("ablation-summary.csv");
    let mut w = csv_writer(&summary_path)?;
    w.write_record([
        "variant",
        "seeds_ok",
        "mean_accuracy",
        "min_accuracy",
        "max_accuracy",
        "mean_latent_variance",
    ])?;
    for s in &report.summaries {
        w.write_record([
            s.variant.clone(),
            s.seeds_ok.to_string(),
            opt(s.mean_accuracy),
            opt(s.min_accuracy),
            opt(s.max_accuracy),
            opt(s.mean_latent_variance),
        ])?;
    }
    w.flush()?;

    let echo = json!({
        "seeds": seeds,
        "epochs": epochs,
        "lr": lr,
        "batch": batch,
        "allow_low_lr": allow_low_lr,
        "sc_n": sc_n,
        "temperature": temperature,
        "weights": base.weights,
        "generator": base.generator,
        "data": data.display().to_string(),
        "backbone": bpath.display().to_string(),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("ablation.json"),
        &json!({ "config": echo, "report": report }),
    )?;

    for s in &report.summaries {
        println!(
            "{:<17} seeds_ok {}  mean acc {}  range [{}, {}]",
            s.variant,
            s.seeds_ok,
            opt(s.mean_accuracy),
            opt(s.min_accuracy),
            opt(s.max_accuracy),
        );
    }
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} ablation cells failed", report.cells.len());
    }
    Ok(())
}

#[derive(Args)]
pub struct SweepLnArgs {
    /// Comma-separated latent counts to sweep.
    #[arg(long)]
    counts: Option<String>,

    /// Objective variant to train at each count.
    #[arg(long)]
    variant: Option<Variant>,

    /// Seed for generator init and batch order.
    #[arg(long)]
    seed: Option<u64>,

    #[command(flatten)]
    knobs: TrainKnobs,

    #[command(flatten)]
    gen: GeneratorFlags,

    #[command(flatten)]
    loss: LossFlags,

    /// Decodes per question for the majority vote.
    #[arg(long)]
    sc_n: Option<usize>,

    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,

    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Frozen backbone checkpoint (default: <out>/ckpt/backbone.ckpt).
    #[arg(long)]
    backbone: Option<PathBuf>,
}

pub fn sweep_ln(out: &OutTree, file: &FileConfig, args: SweepLnArgs) -> Result<()> {
    let counts_text = or(args.counts, file.string("counts")?, "1,2,4,8".to_string());
    let counts: Vec<usize> = parse_list(&counts_text, "latent count")?;
    let variant = resolve_variant(args.variant, file)?;
    let seed = or(args.seed, file.u64("seed")?, 0);
    let (epochs, lr, batch, allow_low_lr) = args.knobs.resolve(file, 3)?;
    let sc_n = or(args.sc_n, file.usize("sc_n")?, 1);
    let temperature = or(args.temperature, file.f64("temperature")?, default_temperature(sc_n));
    let data = resolve_data_dir(args.data, file, out)?;
    let bpath = resolve_backbone_path(args.backbone, file, out)?;

    let corpus = load_corpus(&data)?;
    let backbone = load_backbone(&bpath)?;
    check_vocab(&backbone, &corpus.vocab)?;
    let generator = args
        .gen
        .resolve(file, backbone.config.d_b, backbone.config.context, (64, 4, 256))?;
    let weights = args.loss.resolve(file)?;

    let base = TrainConfig {
        variant,
        weights,
        generator,
        epochs,
        lr,
        batch_size: batch,
        clip: CLIP_NORM,
        seed,
        allow_low_lr,
    };
    let report = sweep_latent_count(
        &backbone,
        &corpus.train,
        &corpus.dev,
        &corpus.test,
        &corpus.vocab,
        &base,
        &counts,
        sc_n,
        temperature,
    )?;

    let csv_path = out.reports_dir().join("sweep_ln.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["latent_count", "accuracy", "best_dev_total", "latent_variance"])?;
    for r in &report.rows {
        w.write_record([
            r.latent_count.to_string(),
            r.accuracy.to_string(),
            r.best_dev_total.to_string(),
            r.latent_variance.to_string(),
        ])?;
    }
    w.flush()?;

    let echo = json!({
        "counts": counts,
        "variant": variant.name(),
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "batch": batch,
        "allow_low_lr": allow_low_lr,
        "sc_n": sc_n,
        "temperature": temperature,
        "weights": base.weights,
        "generator": base.generator,
        "data": data.display().to_string(),
        "backbone": bpath.display().to_string(),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("sweep_ln.json"),
        &json!({ "config": echo, "report": report }),
    )?;
    for r in &report.rows {
        println!(
            "ln {:>2}: accuracy {:.4}, best dev total {:.6}, latent variance {:.6}",
            r.latent_count, r.accuracy, r.best_dev_total, r.latent_variance
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct VarlabArgs {
    /// Mean of the reference Gaussian.
    #[arg(long)]
    mean: Option<f64>,

    /// Variance of the reference Gaussian.
    #[arg(long)]
    var_p: Option<f64>,

    /// Variance of the narrow, perturbation-built candidate.
    #[arg(long)]
    var_q1: Option<f64>,

    /// Variance of the wide, directly drawn candidate.
    #[arg(long)]
    var_q2: Option<f64>,

    /// Monte-Carlo trials.
    #[arg(long)]
    trials: Option<usize>,

    /// Draws per candidate per trial.
    #[arg(long)]
    samples: Option<usize>,

    /// Seed for the trial streams.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn varlab(out: &OutTree, file: &FileConfig, args: VarlabArgs) -> Result<()> {
    let mean = or(args.mean, file.f64("mean")?, 0.0);
    let var_p = or(args.var_p, file.f64("var_p")?, 1.0);
    let var_q1 = or(args.var_q1, file.f64("var_q1")?, 0.1);
    let var_q2 = or(args.var_q2, file.f64("var_q2")?, 0.5);
    let trials = or(args.trials, file.usize("trials")?, 1000);
    let samples = or(args.samples, file.usize("samples")?, 10_000);
    let seed = or(args.seed, file.u64("seed")?, 0);

    let p = GaussianSpec::new(mean, var_p)?;
    let report = verify_variance_ordering(&p, var_q1, var_q2, trials, samples, seed)?;
    let rows: Result<Vec<(f64, f64)>, lta_core::Error> = (0..trials as u64)
        .into_par_iter()
        .map(|t| lemma_trial(&p, var_q1, var_q2, samples, seed, t))
        .collect();
    let rows = rows?;

    let csv_path = out.reports_dir().join("varlab.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["trial", "kl_q1", "kl_q2", "holds"])?;
    for (t, (kl1, kl2)) in rows.iter().enumerate() {
        w.write_record([
            t.to_string(),
            kl1.to_string(),
            kl2.to_string(),
            (kl2 < kl1).to_string(),
        ])?;
    }
    w.flush()?;

    let echo = json!({
        "mean": mean,
        "var_p": var_p,
        "var_q1": var_q1,
        "var_q2": var_q2,
        "trials": trials,
        "samples": samples,
        "seed": seed,
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("varlab.json"),
        &json!({
            "config": echo,
            "closed_form": {
                "kl_to_narrow": kl_gaussian(&p, &GaussianSpec::new(mean, var_q1)?),
                "kl_to_wide": kl_gaussian(&p, &GaussianSpec::new(mean, var_q2)?),
            },
            "report": report,
        }),
    )?;
    println!(
        "ordering held in {} of {} trials ({:.4}); mean KL narrow {:.6}, wide {:.6}",
        report.holds, trials, report.holds_fraction, report.mean_kl_q1, report.mean_kl_q2
    );
    if !report.passed {
        bail!("ordering held in only {} of {trials} trials", report.holds);
    }
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seed for models, samples, and coordinate choice.
    #[arg(long)]
    seed: Option<u64>,

    /// Independent sample instances to check.
    #[arg(long)]
    instances: Option<usize>,

    /// Random parameter coordinates probed per instance.
    #[arg(long)]
    coords: Option<usize>,

    /// Objective variant whose gradients are checked.
    #[arg(long)]
    variant: Option<Variant>,

    #[command(flatten)]
    gen: GeneratorFlags,

    #[command(flatten)]
    loss: LossFlags,

    /// Frozen backbone checkpoint; a small fresh one is built when absent.
    #[arg(long)]
    backbone: Option<PathBuf>,

    /// Corpus directory; samples are generated on the fly when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

pub fn gradcheck(out: &OutTree, file: &FileConfig, args: GradcheckArgs) -> Result<()> {
    let seed = or(args.seed, file.u64("seed")?, 0);
    let instances = or(args.instances, file.usize("instances")?, 4);
    let coords = or(args.coords, file.usize("coords")?, 200);
    let variant = resolve_variant(args.variant, file)?;
    let weights = variant.effective_weights(&args.loss.resolve(file)?);

    let data_flag = args.data.or(file.path("data")?);
    let (vocab, samples): (Vocab, Vec<ReasoningSample>) = match &data_flag {
        Some(dir) => {
            let corpus = load_corpus(dir)?;
            if corpus.train.len() < instances {
                bail!(
                    "corpus has {} training samples but {instances} instances were requested",
                    corpus.train.len()
                );
            }
            (corpus.vocab, corpus.train[..instances].to_vec())
        }
        None => (
            Vocab::standard(),
            generate_corpus(seed, instances, &CorpusBounds::default())?,
        ),
    };

    let backbone_flag = args.backbone.or(file.path("backbone")?);
    let backbone = match &backbone_flag {
        Some(path) => load_backbone(path)?,
        None => {
            let cfg = BackboneConfig {
                vocab_size: vocab.size(),
                d_b: 32,
                layers: 1,
                heads: 2,
                d_ff: 64,
                context: 192,
            };
            let mut fresh = Backbone::init(cfg, seed)?;
            fresh.frozen = true;
            fresh
        }
    };
    check_vocab(&backbone, &vocab)?;

    let gcfg = args
        .gen
        .resolve(file, backbone.config.d_b, backbone.config.context, (16, 2, 32))?;
    let model = if variant.uses_linear_generator() {
        LatentModel::init_linear(gcfg, seed)?
    } else {
        LatentModel::init_block(gcfg, seed)?
    };

    let mut reports = Vec::with_capacity(instances);
    for (i, sample) in samples.iter().enumerate() {
        let r = grad_check_sample(
            &backbone,
            &model,
            sample,
            &vocab,
            &weights,
            coords,
            seed.wrapping_add(i as u64),
        )?;
        println!(
            "instance {i}: max rel err {:.3e} over {} coords{}",
            r.max_rel_err,
            r.coords_checked,
            if r.passed { "" } else { " [FAILED]" }
        );
        reports.push(r);
    }

    let csv_path = out.reports_dir().join("gradcheck.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["instance", "param_count", "coords_checked", "max_rel_err", "mean_rel_err", "passed"])?;
    for (i, r) in reports.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.param_count.to_string(),
            r.coords_checked.to_string(),
            r.max_rel_err.to_string(),
            r.mean_rel_err.to_string(),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;

    let all_passed = reports.iter().all(|r| r.passed);
    let echo = json!({
        "seed": seed,
        "instances": instances,
        "coords": coords,
        "variant": variant.name(),
        "weights": weights,
        "generator": gcfg,
        "backbone": backbone_flag.as_ref().map(|p| p.display().to_string()),
        "data": data_flag.as_ref().map(|p| p.display().to_string()),
        "out": out.root.display().to_string(),
    });
    write_json(
        &out.reports_dir().join("gradcheck.json"),
        &json!({ "config": echo, "instances": reports, "passed": all_passed }),
    )?;
    if !all_passed {
        let failures = reports.iter().filter(|r| !r.passed).count();
        bail!("gradient check failed on {failures} of {instances} instances");
    }
    Ok(())
}
