//! Synthetic corpus and toy tasks.
//!
//! Token ids below [`FIRST_ORDINARY`] are reserved: padding, the leading `[CLS]`, the
//! `[MASK]` symbol and six marker tokens the toy tasks plant.

use std::io::BufRead;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const FIRST_MARKER: usize = 3;
pub const FIRST_ORDINARY: usize = 9;

/// Hidden states of the order-2 chain; the pair of previous tokens hashes to one.
pub const CHAIN_STATES: usize = 16;
const PREFERRED: usize = 8;
const NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    pub vocab_size: usize,
    /// Tokens after the leading `[CLS]`.
    pub seq_len: usize,
}

impl DataConfig {
    pub fn check(&self) -> Result<()> {
        if self.vocab_size < FIRST_ORDINARY + PREFERRED {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves too few ordinary tokens",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::Config("sequences need at least 4 tokens".into()));
        }
        Ok(())
    }
}

/// The seeded order-2 Markov source.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    seed: u64,
    vocab_size: usize,
    /// `CHAIN_STATES x vocab_size` next-token probabilities.
    table: Vec<Vec<f64>>,
    dists: Vec<WeightedIndex<f64>>,
}

impl MarkovSource {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let ordinary: Vec<usize> = (FIRST_ORDINARY..vocab_size).collect();
        let noise = NOISE / ordinary.len() as f64;
        let table = (0..CHAIN_STATES)
            .map(|_| {
                let mut row = vec![0.0; vocab_size];
                for &t in &ordinary {
                    row[t] = noise;
                }
                let picks = sample(&mut rng, ordinary.len(), PREFERRED);
                let weights: Vec<f64> =
                    (0..PREFERRED).map(|_| rng.random_range(0.5..1.5)).collect();
                let wsum: f64 = weights.iter().sum();
                for (k, i) in picks.iter().enumerate() {
                    row[ordinary[i]] += (1.0 - NOISE) * weights[k] / wsum;
                }
                row
            })
            .collect::<Vec<Vec<f64>>>();
        let dists = table
            .iter()
            .map(|row| WeightedIndex::new(row).expect("positive weights"))
            .collect();
        MarkovSource {
            seed,
            vocab_size,
            table,
            dists,
        }
    }

    pub fn state(&self, prev2: usize, prev1: usize) -> usize {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [prev2 as u64, prev1 as u64] {
            h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 29;
        }
        (h % CHAIN_STATES as u64) as usize
    }

    /// Next-token distribution of a chain state.
    pub fn transition(&self, state: usize) -> &[f64] {
        &self.table[state]
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let (mut a, mut b) = (
            rng.random_range(FIRST_ORDINARY..self.vocab_size),
            rng.random_range(FIRST_ORDINARY..self.vocab_size),
        );
        for _ in 0..len {
            let next = self.dists[self.state(a, b)].sample(rng);
            out.push(next);
            (a, b) = (b, next);
        }
        out
    }
}

/// Unlabeled sequences, each `[CLS]` followed by `seq_len` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub config: DataConfig,
    pub sequences: Vec<Vec<usize>>,
}

pub fn gen_corpus(seed: u64, size: usize, cfg: &DataConfig) -> Result<Corpus> {
    cfg.check()?;
    if size == 0 {
        return Err(Error::Input("corpus size must be positive".into()));
    }
    let src = MarkovSource::new(seed, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..size)
        .map(|_| {
            let mut s = vec![CLS];
            s.extend(src.sample_sequence(cfg.seq_len, &mut rng));
            s
        })
        .collect();
    Ok(Corpus {
        seed,
        config: *cfg,
        sequences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

/// The built-in toy tasks; each plants marker tokens into chain text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Binary: is marker 0 present?
    Presence,
    /// Three classes: which of markers 1, 2, 3 was planted.
    Which,
    /// Regression: occurrences of marker 4, in quarters (0 to 4 copies).
    Count,
}

impl ToyTask {
    pub const ALL: [ToyTask; 3] = [ToyTask::Presence, ToyTask::Which, ToyTask::Count];

    pub fn name(self) -> &'static str {
        match self {
            ToyTask::Presence => "presence",
            ToyTask::Which => "which",
            ToyTask::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Option<ToyTask> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn kind(self) -> TaskKind {
        match self {
            ToyTask::Presence => TaskKind::Classification { classes: 2 },
            ToyTask::Which => TaskKind::Classification { classes: 3 },
            ToyTask::Count => TaskKind::Regression,
        }
    }

    /// Output width of a prediction head for this task.
    pub fn head_width(self) -> usize {
        match self.kind() {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    /// Rule that recovers the label from the tokens alone.
    pub fn oracle_label(self, tokens: &[usize]) -> f64 {
        let count = |m: usize| tokens.iter().filter(|&&t| t == FIRST_MARKER + m).count();
        match self {
            ToyTask::Presence => (count(0) > 0) as u8 as f64,
            ToyTask::Which => (1..=3)
                .find(|&m| count(m) > 0)
                .map_or(0.0, |m| (m - 1) as f64),
            ToyTask::Count => count(4) as f64 / 4.0,
        }
    }

    fn plant<R: Rng + ?Sized>(self, body: &mut [usize], rng: &mut R) {
        let positions = |k: usize, rng: &mut R| sample(rng, body.len(), k).into_vec();
        match self {
            ToyTask::Presence => {
                if rng.random_bool(0.5) {
                    let p = positions(1, rng)[0];
                    body[p] = FIRST_MARKER;
                }
            }
            ToyTask::Which => {
                let m = rng.random_range(1..=3);
                let p = positions(1, rng)[0];
                body[p] = FIRST_MARKER + m;
            }
            ToyTask::Count => {
                let k = rng.random_range(0..=4);
                for p in positions(k, rng) {
                    body[p] = FIRST_MARKER + 4;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: ToyTask,
    pub seed: u64,
    pub train: Vec<Example>,
    pub holdout: Vec<Example>,
}

impl TaskDataset {
    pub fn name(&self) -> &'static str {
        self.task.name()
    }

    pub fn kind(&self) -> TaskKind {
        self.task.kind()
    }
}

/// Generates `size` labeled sequences and splits them `train_fraction` / rest.
pub fn gen_task(
    seed: u64,
    task: ToyTask,
    cfg: &DataConfig,
    size: usize,
    train_fraction: f64,
) -> Result<TaskDataset> {
    cfg.check()?;
    if size < 2 || !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Input(
            "need size >= 2 and 0 < train_fraction < 1".into(),
        ));
    }
    let src = MarkovSource::new(seed, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(task as u64 + 1));
    let mut all: Vec<Example> = (0..size)
        .map(|_| {
            let mut body = src.sample_sequence(cfg.seq_len, &mut rng);
            task.plant(&mut body, &mut rng);
            let mut tokens = vec![CLS];
            tokens.extend(body);
            let label = task.oracle_label(&tokens);
            Example { tokens, label }
        })
        .collect();
    all.shuffle(&mut rng);
    let n_train = ((size as f64 * train_fraction).round() as usize).clamp(1, size - 1);
    let holdout = all.split_off(n_train);
    Ok(TaskDataset {
        task,
        seed,
        train: all,
        holdout,
    })
}

/// A token batch with its prediction targets: `Some(id)` at masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub tokens: TokenBatch,
    pub targets: Vec<Option<usize>>,
}

/// Shuffled passes over the corpus; each position after `[CLS]` is replaced by `[MASK]`
/// with probability `mask_prob`. Yields `ceil(len / batch)` batches per pass.
pub fn mlm_batches<'c, R: Rng + 'c>(
    corpus: &'c Corpus,
    mask_prob: f64,
    batch: usize,
    rng: R,
) -> Result<impl Iterator<Item = MlmBatch> + 'c> {
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::Input(format!(
            "mask probability {mask_prob} outside [0, 1)"
        )));
    }
    if batch == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut rng = rng;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    Ok(std::iter::from_fn(move || {
        if cursor >= order.len() {
            order = (0..corpus.sequences.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch).min(order.len());
        let mut rows = Vec::with_capacity(end - cursor);
        let mut targets = Vec::new();
        for &i in &order[cursor..end] {
            let mut row = corpus.sequences[i].clone();
            for (p, tok) in row.iter_mut().enumerate() {
                if p > 0 && mask_prob > 0.0 && rng.random_bool(mask_prob) {
                    targets.push(Some(*tok));
                    *tok = MASK;
                } else {
                    targets.push(None);
                }
            }
            rows.push(row);
        }
        cursor = end;
        Some(MlmBatch {
            tokens: TokenBatch::new(&rows).expect("corpus rows are rectangular"),
            targets,
        })
    }))
}

/// Labeled examples as a token batch and label vector.
pub fn example_batch(examples: &[Example]) -> Result<(TokenBatch, Vec<f64>)> {
    let rows: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
    Ok((
        TokenBatch::new(&rows)?,
        examples.iter().map(|e| e.label).collect(),
    ))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Hex SHA-256 of a fixture's bytes.
pub fn fixture_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
