//! Synthetic corpora: an order-2 Markov chain with a seeded transition
//! table, and a modular-arithmetic alternative. Sequences never contain the
//! reserved mask token (the top vocabulary id), and generation is
//! deterministic from the seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Order-2 Markov chain: the previous two tokens pick one of 256
    /// context classes, each with four weighted successor tokens.
    Markov,
    /// Additive recurrence `x_t = (x_{t-1} + x_{t-2} + c) mod (V-1)` with a
    /// per-sequence constant.
    Modular,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub generator: Generator,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 18 {
            bail!("vocab must be at least 18 (one id is reserved for the mask token)");
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            bail!(
                "length range [{}, {}] must satisfy 3 <= min <= max",
                self.min_len,
                self.max_len
            );
        }
        if self.count == 0 {
            bail!("corpus needs at least one sequence");
        }
        Ok(())
    }
}

const SUCCESSORS: usize = 4;
const WEIGHTS: [f64; SUCCESSORS] = [0.7, 0.15, 0.1, 0.05];
const CLASSES: usize = 256;

/// Seeded order-2 transition table. The class of a bigram `(a, b)` is
/// `(a mod 16)·16 + (b mod 16)`; every class owns four distinct successor
/// tokens with fixed weights, so the chain is predictable enough to learn
/// yet never degenerate.
pub struct MarkovTable {
    successors: Vec<[usize; SUCCESSORS]>,
}

impl MarkovTable {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = vocab - 1; // token ids 0..vocab-1 excluding the mask id
        let successors = (0..CLASSES)
            .map(|_| {
                let mut picks = [0usize; SUCCESSORS];
                let mut used = Vec::with_capacity(SUCCESSORS);
                for slot in picks.iter_mut() {
                    let mut t = rng.gen_range(0..real);
                    while used.contains(&t) {
                        t = rng.gen_range(0..real);
                    }
                    used.push(t);
                    *slot = t;
                }
                picks
            })
            .collect();
        MarkovTable { successors }
    }

    pub fn class(a: usize, b: usize) -> usize {
        (a % 16) * 16 + (b % 16)
    }

    pub fn successors(&self, class: usize) -> &[usize; SUCCESSORS] {
        &self.successors[class]
    }

    pub fn weights() -> &'static [f64; SUCCESSORS] {
        &WEIGHTS
    }

    fn step(&self, a: usize, b: usize, rng: &mut ChaCha8Rng) -> usize {
        let picks = &self.successors[Self::class(a, b)];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (slot, w) in WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                return picks[slot];
            }
        }
        picks[SUCCESSORS - 1]
    }
}

/// Generates the full corpus for a spec. Every token id is below
/// `vocab - 1`; the mask token never appears.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let real = spec.vocab - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = match spec.generator {
        Generator::Markov => Some(MarkovTable::new(spec.vocab, spec.seed ^ 0x7461_626c)),
        Generator::Modular => None,
    };
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut seq = Vec::with_capacity(len);
        seq.push(rng.gen_range(0..real));
        seq.push(rng.gen_range(0..real));
        match &table {
            Some(table) => {
                while seq.len() < len {
                    let next = table.step(seq[seq.len() - 2], seq[seq.len() - 1], &mut rng);
                    seq.push(next);
                }
            }
            None => {
                let c = rng.gen_range(1..real);
                while seq.len() < len {
                    let next = (seq[seq.len() - 1] + seq[seq.len() - 2] + c) % real;
                    seq.push(next);
                }
            }
        }
        out.push(seq);
    }
    Ok(out)
}

/// One JSON array of token ids per line.
pub fn write_jsonl(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for seq in seqs {
        serde_json::to_writer(&mut w, seq)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Vec<usize>>> {
    let r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<usize> = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not a token array", path.display(), i + 1))?;
        out.push(seq);
    }
    if out.is_empty() {
        bail!("{}: empty corpus", path.display());
    }
    Ok(out)
}
