//! Entropy of embedding matrices, token perplexity and multiple-choice
//! accuracy.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, DenseMatrix};
use crate::transformer::Model;

/// Gaussian plug-in estimate of the differential entropy (bits) of a
/// scalar: `½·log₂(2πe·σ̂²)` with the unbiased sample variance.
pub fn kappa_gaussian(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy estimate needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    // sorted so the estimate does not depend on the layout of the samples
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Numerical(
            "zero sample variance: differential entropy is -inf".into(),
        ));
    }
    Ok(0.5 * (2.0 * PI * E * var).log2())
}

/// Entropy of an `[l × d]` embedding matrix under the i.i.d.-coordinate
/// model: every entry shares the unit entropy `kappa`, so `H = l·d·kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub kappa: f64,
    pub l: usize,
    pub d: usize,
    pub h_bits: f64,
}

impl EntropyEstimate {
    pub fn new(kappa: f64, l: usize, d: usize) -> Self {
        Self {
            kappa,
            l,
            d,
            h_bits: (l * d) as f64 * kappa,
        }
    }
}

pub fn embedding_entropy(e: &DenseMatrix) -> Result<EntropyEstimate> {
    let kappa = kappa_gaussian(e.as_slice())?;
    Ok(EntropyEstimate::new(kappa, e.rows(), e.cols()))
}

/// `log₂ PPL(E)`, which is just `H(E)`. `2^H` itself overflows for any
/// realistic `l·d`, so perplexity of embeddings stays in the log domain.
pub fn log2_embedding_ppl(est: &EntropyEstimate) -> f64 {
    est.h_bits
}

/// `H(E_sliced) / H(E)` for a column-sliced copy of `E`.
pub fn entropy_ratio(e_sliced: &DenseMatrix, e: &DenseMatrix) -> Result<f64> {
    if e_sliced.rows() != e.rows() || e_sliced.cols() > e.cols() {
        return Err(Error::shape("entropy_ratio", e_sliced.shape(), e.shape()));
    }
    let full = embedding_entropy(e)?;
    if full.h_bits == 0.0 {
        return Err(Error::Numerical("reference entropy is zero".into()));
    }
    Ok(embedding_entropy(e_sliced)?.h_bits / full.h_bits)
}

/// Anything that produces causal next-token logits.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `[l × vocab]`; row `t` scores the token at position `t + 1`.
    fn logits(&self, tokens: &[usize]) -> Result<DenseMatrix>;
}

impl CausalLm for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<DenseMatrix> {
        self.forward(tokens)
    }
}

/// Mean next-token negative log-likelihood (nats) and its exponential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplResult {
    pub mean_nll: f64,
    pub ppl: f64,
    pub token_count: usize,
}

impl PplResult {
    fn from_sum(nll_sum: f64, token_count: usize) -> Self {
        let mean_nll = nll_sum / token_count as f64;
        Self {
            mean_nll,
            ppl: mean_nll.exp(),
            token_count,
        }
    }

    /// Token-weighted merge. Parts are summed in a canonical order so the
    /// result does not depend on the order they arrive in.
    pub fn combine(parts: &[PplResult]) -> Result<PplResult> {
        let mut sorted: Vec<(f64, usize)> = parts.iter().map(|p| (p.mean_nll, p.token_count)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let count: usize = sorted.iter().map(|p| p.1).sum();
        if count == 0 {
            return Err(Error::InvalidArgument("no tokens to score".into()));
        }
        let sum: f64 = sorted.iter().map(|(m, c)| m * *c as f64).sum();
        Ok(Self::from_sum(sum, count))
    }
}

/// Negative log-likelihood of `target` under the logit row.
fn nll(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

/// Perplexity of one sequence: tokens `2..=l` scored by the logits at
/// positions `1..l`.
pub fn token_perplexity(lm: &impl CausalLm, tokens: &[usize]) -> Result<PplResult> {
    if tokens.len() < 2 {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            min: 2,
            max: lm.max_seq_len(),
        });
    }
    let logits = lm.logits(tokens)?;
    let sum: f64 = (1..tokens.len())
        .map(|t| nll(logits.row(t - 1), tokens[t]))
        .sum();
    Ok(PplResult::from_sum(sum, tokens.len() - 1))
}

/// Perplexity of a token stream split into non-overlapping chunks of
/// `max_seq_len`; a trailing chunk shorter than two tokens is dropped.
pub fn stream_perplexity(lm: &impl CausalLm, stream: &[usize]) -> Result<PplResult> {
    let parts = stream
        .chunks(lm.max_seq_len())
        .filter(|c| c.len() >= 2)
        .map(|c| token_perplexity(lm, c))
        .collect::<Result<Vec<_>>>()?;
    PplResult::combine(&parts)
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub context: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
    pub gold_index: usize,
}

impl McItem {
    pub fn new(context: Vec<usize>, choices: Vec<Vec<usize>>, gold_index: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InvalidArgument("multiple-choice context is empty".into()));
        }
        if choices.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "multiple-choice item needs at least 2 choices, got {}",
                choices.len()
            )));
        }
        if choices.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty choice".into()));
        }
        if gold_index >= choices.len() {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold_index} out of range for {} choices",
                choices.len()
            )));
        }
        Ok(Self {
            context,
            choices,
            gold_index,
        })
    }
}

/// Sum of log-probabilities of `choice` following `context`. When the pair
/// exceeds the model's window, the context is cut from the left.
pub fn choice_log_prob(lm: &impl CausalLm, context: &[usize], choice: &[usize]) -> Result<f64> {
    let max = lm.max_seq_len();
    if choice.len() + 1 > max {
        return Err(Error::SequenceLength {
            len: choice.len() + 1,
            min: 2,
            max,
        });
    }
    let keep = context.len().min(max - choice.len());
    let ctx = &context[context.len() - keep..];
    let seq: Vec<usize> = ctx.iter().chain(choice).copied().collect();
    let logits = lm.logits(&seq)?;
    Ok(choice
        .iter()
        .enumerate()
        .map(|(j, &tok)| -nll(logits.row(ctx.len() + j - 1), tok))
        .sum())
}

/// Index of the best-scoring choice; ties go to the lowest index.
pub fn predict_choice(lm: &impl CausalLm, item: &McItem) -> Result<usize> {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in item.choices.iter().enumerate() {
        let score = choice_log_prob(lm, &item.context, c)?;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Exact-match accuracy over `items`.
pub fn mc_accuracy(lm: &impl CausalLm, items: &[McItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no multiple-choice items".into()));
    }
    let mut correct = 0usize;
    for item in items {
        if predict_choice(lm, item)? == item.gold_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
