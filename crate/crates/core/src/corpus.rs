//! Synthetic chained integer arithmetic corpus.
//!
//! Every sample is a fixed instruction, a question describing a chain of
//! integer operations ("start with 7 then add 3 then multiply by 2"), the
//! worked steps ("s1 = 7 + 3 ; s2 = 10 * 2 ; answer = 20"), and the final
//! answer as a canonical decimal string. Generation is seeded per sample
//! index on independent RNG streams, so parallel and serial generation
//! produce identical corpora.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const LATENT: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<latent>"];

/// Largest whole-number token in the vocabulary.
const MAX_NUMBER_TOKEN: i64 = 149;
/// Generated intermediate values stay within this range so every step and
/// answer tokenizes.
const VALUE_MIN: i64 = 0;
const VALUE_MAX: i64 = 99;

const INSTRUCTION: &str = "compute the chain and state the answer";

/// One reasoning sample: instruction, question, worked steps, final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub instruction: String,
    pub question: String,
    pub steps: Vec<String>,
    pub answer: String,
}

/// Bounds on the number of chained operations per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusBounds {
    pub steps_min: usize,
    pub steps_max: usize,
}

impl Default for CorpusBounds {
    fn default() -> Self {
        CorpusBounds {
            steps_min: 2,
            steps_max: 4,
        }
    }
}

impl CorpusBounds {
    pub fn validate(&self) -> Result<()> {
        if self.steps_min < 2 || self.steps_min > self.steps_max || self.steps_max > 8 {
            return Err(Error::invalid(format!(
                "step bounds must satisfy 2 <= min <= max <= 8, got {}..{}",
                self.steps_min, self.steps_max
            )));
        }
        Ok(())
    }
}

/// Whitespace-token vocabulary with fixed special ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::invalid("vocabulary missing special tokens"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::invalid(format!(
                    "special token {i} must be {s:?}, got {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// The fixed vocabulary covering everything this corpus can emit.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for n in 0..=MAX_NUMBER_TOKEN {
            tokens.push(n.to_string());
        }
        for t in ["=", "+", "-", "*", ";"] {
            tokens.push(t.to_string());
        }
        for i in 1..=8 {
            tokens.push(format!("s{i}"));
        }
        for w in [
            "answer", "start", "with", "then", "add", "subtract", "multiply", "by", "compute",
            "the", "chain", "and", "state",
        ] {
            tokens.push(w.to_string());
        }
        Vocab::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownWord {
            word: word.to_string(),
        })
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// Whitespace-split encoding; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined decoding; specials render as their angle-bracket names.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }

    /// Token-per-line file, starting with the four special tokens.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for line in file.lines() {
            tokens.push(line?);
        }
        while tokens.last().is_some_and(String::is_empty) {
            tokens.pop();
        }
        Vocab::from_tokens(tokens)
    }
}

#[derive(Clone, Copy)]
enum ChainOp {
    Add(i64),
    Sub(i64),
    Mul(i64),
}

impl ChainOp {
    fn apply(&self, v: i64) -> i64 {
        match self {
            ChainOp::Add(k) => v + k,
            ChainOp::Sub(k) => v - k,
            ChainOp::Mul(k) => v * k,
        }
    }

    fn question_phrase(&self) -> String {
        match self {
            ChainOp::Add(k) => format!("add {k}"),
            ChainOp::Sub(k) => format!("subtract {k}"),
            ChainOp::Mul(k) => format!("multiply by {k}"),
        }
    }

    fn symbol_and_operand(&self) -> (&'static str, i64) {
        match self {
            ChainOp::Add(k) => ("+", *k),
            ChainOp::Sub(k) => ("-", *k),
            ChainOp::Mul(k) => ("*", *k),
        }
    }
}

/// Deterministically generate the sample at `index` under `seed`.
pub fn generate_sample(seed: u64, index: u64, bounds: &CorpusBounds) -> Result<ReasoningSample> {
    bounds.validate()?;
    let mut rng = seeded_rng(seed, index);
    let n_ops = rng.random_range(bounds.steps_min..=bounds.steps_max);
    let start = rng.random_range(2..=20i64);

    let mut value = start;
    let mut question = format!("start with {start}");
    let mut steps = Vec::with_capacity(n_ops + 1);
    for i in 0..n_ops {
        let op = loop {
            let candidate = match rng.random_range(0..3u8) {
                0 => ChainOp::Add(rng.random_range(1..=9)),
                1 => ChainOp::Sub(rng.random_range(1..=9)),
                _ => ChainOp::Mul(rng.random_range(2..=3)),
            };
            let next = candidate.apply(value);
            if (VALUE_MIN..=VALUE_MAX).contains(&next) {
                break candidate;
            }
        };
        let (sym, k) = op.symbol_and_operand();
        steps.push(format!("s{} = {} {} {}", i + 1, value, sym, k));
        question.push_str(&format!(" then {}", op.question_phrase()));
        value = op.apply(value);
    }
    steps.push(format!("answer = {value}"));

    Ok(ReasoningSample {
        instruction: INSTRUCTION.to_string(),
        question,
        steps,
        answer: value.to_string(),
    })
}

/// Generate `n` samples in parallel; identical to the serial indexed loop.
pub fn generate_corpus(seed: u64, n: usize, bounds: &CorpusBounds) -> Result<Vec<ReasoningSample>> {
    bounds.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(seed, i, bounds))
        .collect()
}

/// Train/dev/test corpora from disjoint RNG index ranges, with dev and test
/// filtered so no question collides with an earlier split.
pub fn generate_split_corpora(
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    bounds: &CorpusBounds,
) -> Result<(Vec<ReasoningSample>, Vec<ReasoningSample>, Vec<ReasoningSample>)> {
    bounds.validate()?;
    let train = generate_corpus(seed, n_train, bounds)?;
    let mut seen: HashSet<String> = train.iter().map(|s| s.question.clone()).collect();

    let mut fill = |base: u64, n: usize| -> Result<Vec<ReasoningSample>> {
        let mut out = Vec::with_capacity(n);
        let limit = base + 64 * (n as u64 + 16);
        let mut index = base;
        while out.len() < n {
            if index >= limit {
                return Err(Error::invalid(
                    "could not draw enough distinct samples; widen the step bounds",
                ));
            }
            let sample = generate_sample(seed, index, bounds)?;
            index += 1;
            if seen.insert(sample.question.clone()) {
                out.push(sample);
            }
        }
        Ok(out)
    };

    let dev = fill(1 << 32, n_dev)?;
    let test = fill(1 << 33, n_test)?;
    Ok((train, dev, test))
}

/// Token-level view of one sample, with the spans the objectives need.
#[derive(Debug, Clone)]
pub struct TokenizedSample {
    /// `[BOS] instruction question [LATENT x latent_count]`
    pub prompt_ids: Vec<usize>,
    /// steps joined with ";" then `[EOS]`
    pub target_ids: Vec<usize>,
    pub instruction_span: Range<usize>,
    pub question_span: Range<usize>,
    /// Placeholder positions within `prompt_ids` that receive latent vectors.
    pub latent_span: Range<usize>,
    /// Statement token ranges within `target_ids`, separators excluded.
    pub step_spans: Vec<Range<usize>>,
    /// Token ids of the answer string itself.
    pub answer_ids: Vec<usize>,
}

impl TokenizedSample {
    pub fn full_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.target_ids);
        ids
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len() + self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encode a sample, reserving `latent_count` placeholder positions at the
/// end of the prompt.
pub fn tokenize(sample: &ReasoningSample, vocab: &Vocab, latent_count: usize) -> Result<TokenizedSample> {
    let mut prompt_ids = vec![BOS];
    let inst = vocab.encode(&sample.instruction)?;
    let instruction_span = 1..1 + inst.len();
    prompt_ids.extend_from_slice(&inst);
    let q = vocab.encode(&sample.question)?;
    let question_span = prompt_ids.len()..prompt_ids.len() + q.len();
    prompt_ids.extend_from_slice(&q);
    let latent_span = prompt_ids.len()..prompt_ids.len() + latent_count;
    prompt_ids.extend(std::iter::repeat_n(LATENT, latent_count));

    if sample.steps.is_empty() {
        return Err(Error::invalid("sample has no steps"));
    }
    let sep = vocab.id(";")?;
    let mut target_ids = Vec::new();
    let mut step_spans = Vec::with_capacity(sample.steps.len());
    for (i, step) in sample.steps.iter().enumerate() {
        if i > 0 {
            target_ids.push(sep);
        }
        let ids = vocab.encode(step)?;
        step_spans.push(target_ids.len()..target_ids.len() + ids.len());
        target_ids.extend_from_slice(&ids);
    }
    target_ids.push(EOS);

    let answer_ids = vocab.encode(&sample.answer)?;
    Ok(TokenizedSample {
        prompt_ids,
        target_ids,
        instruction_span,
        question_span,
        latent_span,
        step_spans,
        answer_ids,
    })
}

/// Canonical base-10 integer form of an answer string, if it is one.
pub fn canonical_answer(text: &str) -> Option<String> {
    text.trim().parse::<i64>().ok().map(|v| v.to_string())
}

/// Pull the answered value out of decoded model output: the numeric literal
/// after the last `answer =` marker.
pub fn extract_answer(text: &str) -> Option<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let marker = words
        .windows(2)
        .rposition(|w| w[0] == "answer" && w[1] == "=")?;
    words[marker + 2..]
        .iter()
        .find_map(|w| canonical_answer(w))
}

pub fn write_jsonl(path: &Path, samples: &[ReasoningSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReasoningSample>> {
    let file = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ReasoningSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if canonical_answer(&sample.answer).as_deref() != Some(sample.answer.as_str()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("answer {:?} is not a canonical integer", sample.answer),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}
