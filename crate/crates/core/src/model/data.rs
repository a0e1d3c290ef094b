use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::{ModelConfig, TaskHead};

pub const DEFAULT_TOKEN_A: u32 = 7;
pub const DEFAULT_TOKEN_B: u32 = 3;

/// A block of equal-length sequences.
///
/// `targets` holds one class id per sequence for classification, or one
/// next-token id per position (row-major, `batch_size * seq_len`) for
/// language modelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn sequences(&self) -> std::slice::Chunks<'_, u32> {
        self.tokens.chunks(self.seq_len)
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::dim("empty batch"));
        }
        if self.tokens.len() != self.batch_size * self.seq_len {
            return Err(Error::dim(format!(
                "{} tokens for a {}x{} batch",
                self.tokens.len(),
                self.batch_size,
                self.seq_len
            )));
        }
        if self.seq_len > cfg.max_seq_len {
            return Err(Error::dim(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len, cfg.max_seq_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::dim(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let expected = match cfg.task_head {
            TaskHead::Classification { .. } => self.batch_size,
            TaskHead::LanguageModel => self.tokens.len(),
        };
        if self.targets.len() != expected {
            return Err(Error::dim(format!(
                "expected {expected} targets, got {}",
                self.targets.len()
            )));
        }
        let n_out = cfg.n_outputs();
        if let Some(&bad) = self.targets.iter().find(|&&y| y as usize >= n_out) {
            return Err(Error::dim(format!("target {bad} outside {n_out} outputs")));
        }
        Ok(())
    }
}

/// One sequence and its targets.
pub type Example = (Vec<u32>, Vec<u32>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub task: TaskHead,
    pub batches: Vec<Batch>,
    /// Total number of sequences.
    pub n_samples: usize,
    /// Analytic perplexity floor of the generating chain, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity_floor: Option<f64>,
}

impl Dataset {
    pub fn new(task: TaskHead, batches: Vec<Batch>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::domain("dataset has no batches"));
        }
        let n_samples = batches.iter().map(|b| b.batch_size).sum();
        Ok(Self {
            task,
            batches,
            n_samples,
            perplexity_floor: None,
        })
    }

    /// Group examples into batches of at most `batch_size`, in order.
    pub fn from_examples(task: TaskHead, examples: &[Example], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::domain("batch size must be >= 1"));
        }
        let seq_len = examples
            .first()
            .ok_or_else(|| Error::domain("no examples"))?
            .0
            .len();
        let mut batches = Vec::new();
        for chunk in examples.chunks(batch_size) {
            let mut tokens = Vec::with_capacity(chunk.len() * seq_len);
            let mut targets = Vec::new();
            for (x, y) in chunk {
                if x.len() != seq_len {
                    return Err(Error::dim("examples have different lengths"));
                }
                tokens.extend_from_slice(x);
                targets.extend_from_slice(y);
            }
            batches.push(Batch {
                batch_size: chunk.len(),
                seq_len,
                tokens,
                targets,
            });
        }
        Self::new(task, batches)
    }

    pub fn examples(&self) -> Vec<Example> {
        let mut out = Vec::with_capacity(self.n_samples);
        for b in &self.batches {
            let per = b.targets.len() / b.batch_size;
            for (i, seq) in b.sequences().enumerate() {
                out.push((seq.to_vec(), b.targets[i * per..(i + 1) * per].to_vec()));
            }
        }
        out
    }

    /// Largest batch size present.
    pub fn batch_size(&self) -> usize {
        self.batches.iter().map(|b| b.batch_size).max().unwrap_or(1)
    }

    pub fn seq_len(&self) -> usize {
        self.batches[0].seq_len
    }

    /// A copy holding only the first `n` sequences (all when `n >= n_samples`).
    pub fn take(&self, n: usize) -> Result<Self> {
        if n >= self.n_samples {
            return Ok(self.clone());
        }
        let examples = self.examples();
        let mut ds = Self::from_examples(self.task, &examples[..n], self.batch_size())?;
        ds.perplexity_floor = self.perplexity_floor;
        Ok(ds)
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.task != cfg.task_head {
            return Err(Error::domain("dataset task does not match the model head"));
        }
        self.batches.iter().try_for_each(|b| b.validate_for(cfg))
    }
}

/// 1 when token `a` occurs more often than token `b`, else 0.
pub fn count_label(seq: &[u32], a: u32, b: u32) -> u32 {
    let ca = seq.iter().filter(|&&t| t == a).count();
    let cb = seq.iter().filter(|&&t| t == b).count();
    u32::from(ca > cb)
}

/// Binary "more A than B" task with A = 7 and B = 3.
pub fn gen_classification(
    rng: &mut Rng,
    n: usize,
    seq_len: usize,
    vocab: usize,
    batch_size: usize,
) -> Result<Dataset> {
    gen_classification_with(
        rng,
        n,
        seq_len,
        vocab,
        batch_size,
        DEFAULT_TOKEN_A,
        DEFAULT_TOKEN_B,
    )
}

/// Sequences of uniform tokens labelled by [`count_label`].
///
/// Each example first draws its label uniformly, then rejection-samples a
/// sequence with that label, so classes are balanced in expectation.
pub fn gen_classification_with(
    rng: &mut Rng,
    n: usize,
    seq_len: usize,
    vocab: usize,
    batch_size: usize,
    token_a: u32,
    token_b: u32,
) -> Result<Dataset> {
    if n == 0 || seq_len == 0 {
        return Err(Error::domain(
            "classification set needs n >= 1 and seq_len >= 1",
        ));
    }
    if token_a == token_b || token_a as usize >= vocab || token_b as usize >= vocab {
        return Err(Error::domain(format!(
            "marker tokens {token_a}, {token_b} must be distinct and below vocab {vocab}"
        )));
    }
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let want = rng.below(2) as u32;
        loop {
            let seq: Vec<u32> = (0..seq_len)
                .map(|_| rng.below(vocab as u64) as u32)
                .collect();
            if count_label(&seq, token_a, token_b) == want {
                examples.push((seq, vec![want]));
                break;
            }
        }
    }
    Dataset::from_examples(
        TaskHead::Classification { n_classes: 2 },
        &examples,
        batch_size,
    )
}

/// Order-2 Markov chain over `vocab` symbols; row `(a, b)` is the
/// distribution of the token following the pair `a, b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    vocab: usize,
    probs: Vec<f64>,
}

impl MarkovChain {
    /// Rows are `vocab * vocab` distributions of length `vocab`, flattened.
    pub fn from_probs(vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab < 2 || probs.len() != vocab * vocab * vocab {
            return Err(Error::dim("transition table must be vocab^3 entries"));
        }
        for row in probs.chunks(vocab) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::domain("transition rows must be probability vectors"));
            }
        }
        Ok(Self { vocab, probs })
    }

    /// Rows drawn from a symmetric Dirichlet(`alpha`).
    pub fn dirichlet(rng: &mut Rng, vocab: usize, alpha: f64) -> Result<Self> {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::domain(e.to_string()))?;
        let mut probs = Vec::with_capacity(vocab * vocab * vocab);
        for _ in 0..vocab * vocab {
            let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|p| *p /= s);
            } else {
                row.iter_mut().for_each(|p| *p = 1.0 / vocab as f64);
            }
            probs.extend(row);
        }
        Self::from_probs(vocab, probs)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn prob(&self, a: u32, b: u32, next: u32) -> f64 {
        let v = self.vocab;
        self.probs[(a as usize * v + b as usize) * v + next as usize]
    }

    fn row(&self, a: usize, b: usize) -> &[f64] {
        let v = self.vocab;
        &self.probs[(a * v + b) * v..(a * v + b + 1) * v]
    }

    /// Stationary distribution over pair states `(a, b)`, by power iteration
    /// on the lazy chain `(I + P) / 2` (same fixed point, always aperiodic).
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        let mut pi = vec![1.0 / (v * v) as f64; v * v];
        let mut next = vec![0.0; v * v];
        for _ in 0..100_000 {
            next.iter_mut().zip(&pi).for_each(|(n, p)| *n = 0.5 * p);
            for a in 0..v {
                for b in 0..v {
                    let w = 0.5 * pi[a * v + b];
                    if w == 0.0 {
                        continue;
                    }
                    for (c, &p) in self.row(a, b).iter().enumerate() {
                        next[b * v + c] += w * p;
                    }
                }
            }
            let change: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if change < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: stationary-weighted mean row entropy.
    pub fn entropy_rate(&self) -> f64 {
        let v = self.vocab;
        let pi = self.stationary();
        let mut h = 0.0;
        for a in 0..v {
            for b in 0..v {
                let row_h: f64 = self
                    .row(a, b)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                h += pi[a * v + b] * row_h;
            }
        }
        h
    }

    /// Lowest perplexity any model can reach on the chain's output.
    pub fn perplexity_floor(&self) -> f64 {
        self.entropy_rate().exp()
    }

    /// `n` tokens; the first two are uniform.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Vec<u32> {
        let v = self.vocab as u64;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n.min(2) {
            out.push(rng.below(v) as u32);
        }
        while out.len() < n {
            let (a, b) = (out[out.len() - 2] as usize, out[out.len() - 1] as usize);
            let row = self.row(a, b);
            let u = rng.next_f64();
            let mut acc = 0.0;
            let mut pick = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            for (c, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            out.push(pick as u32);
        }
        out
    }
}

/// Cut a token stream into next-token examples of length `seq_len`.
///
/// Windows of `seq_len + 1` tokens start every `seq_len` positions, so a
/// stream of `m` tokens yields `(m - 1) / seq_len` sequences.
pub fn lm_dataset_from_stream(
    stream: &[u32],
    seq_len: usize,
    batch_size: usize,
) -> Result<Dataset> {
    if seq_len == 0 {
        return Err(Error::domain("seq_len must be >= 1"));
    }
    let n = stream.len().saturating_sub(1) / seq_len;
    if n == 0 {
        return Err(Error::domain(format!(
            "{} tokens are too few for one sequence of length {seq_len}",
            stream.len()
        )));
    }
    let examples: Vec<Example> = (0..n)
        .map(|i| {
            let s = i * seq_len;
            (
                stream[s..s + seq_len].to_vec(),
                stream[s + 1..s + seq_len + 1].to_vec(),
            )
        })
        .collect();
    Dataset::from_examples(TaskHead::LanguageModel, &examples, batch_size)
}

/// Language-model corpus from a seeded order-2 chain with Dirichlet(0.3)
/// rows. The chain's perplexity floor is stored on the dataset.
pub fn gen_lm(
    rng: &mut Rng,
    n_tokens: usize,
    vocab: usize,
    seq_len: usize,
    batch_size: usize,
) -> Result<Dataset> {
    let chain = MarkovChain::dirichlet(rng, vocab, 0.3)?;
    let stream = chain.sample(rng, n_tokens);
    let mut ds = lm_dataset_from_stream(&stream, seq_len, batch_size)?;
    ds.perplexity_floor = Some(chain.perplexity_floor());
    Ok(ds)
}
