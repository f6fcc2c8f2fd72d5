//! Output-tree layout and file helpers shared by all subcommands.
//!
//! Everything a command writes lands under one root directory:
//! `data/` for corpora, `ckpt/` for model archives, `reports/` for JSON
//! and CSV results. The root comes from `--out`, falling back to the
//! `LTA_OUT` environment variable, falling back to `./runs`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lta_core::backbone::Backbone;
use lta_core::corpus::{read_jsonl, ReasoningSample, Vocab};
use lta_core::generator::LatentModel;

pub const ENV_OUT: &str = "LTA_OUT";

pub fn default_out() -> PathBuf {
    std::env::var_os(ENV_OUT)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub struct OutTree {
    pub root: PathBuf,
}

impl OutTree {
    pub fn new(root: PathBuf) -> Self {
        OutTree { root }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.ckpt_dir().join("backbone.ckpt")
    }

    pub fn generator_path(&self, variant: &str, seed: u64) -> PathBuf {
        self.ckpt_dir().join(format!("generator-{variant}-s{seed}.ckpt"))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline; keys are emitted in sorted order,
/// so identical values give identical bytes.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    ensure_parent(path)?;
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

pub struct LoadedCorpus {
    pub train: Vec<ReasoningSample>,
    pub dev: Vec<ReasoningSample>,
    pub test: Vec<ReasoningSample>,
    pub vocab: Vocab,
}

pub fn load_corpus(data_dir: &Path) -> Result<LoadedCorpus> {
    let read = |name: &str| -> Result<Vec<ReasoningSample>> {
        let path = data_dir.join(name);
        read_jsonl(&path).with_context(|| format!("reading corpus file {}", path.display()))
    };
    let vocab_path = data_dir.join("vocab.txt");
    Ok(LoadedCorpus {
        train: read("train.jsonl")?,
        dev: read("dev.jsonl")?,
        test: read("test.jsonl")?,
        vocab: Vocab::load(&vocab_path)
            .with_context(|| format!("reading vocabulary file {}", vocab_path.display()))?,
    })
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    Backbone::load(path)
        .with_context(|| format!("loading backbone checkpoint {}", path.display()))
}

pub fn load_generator(path: &Path) -> Result<LatentModel> {
    LatentModel::load(path)
        .with_context(|| format!("loading generator checkpoint {}", path.display()))
}
