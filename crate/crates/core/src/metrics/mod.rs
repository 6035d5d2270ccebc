//! Text-similarity metrics for generated change descriptions.
//!
//! Every metric works on [`TokenSequence`]s produced by [`tokenize`]. Scores
//! are computed against a single reference per candidate.

mod corpus;
mod embed;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{evaluate_corpus, read_paired_files, read_tsv, write_tsv, EvalReport, MeanScores, PairScores};
pub use embed::{EmbeddingProvider, EmbeddingTable, HashProjection, OneHot};

/// Normalized tokens of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercases, splits on Unicode whitespace and trims every character that is
/// not alphanumeric from both ends of each piece. Pieces left empty are
/// dropped, so internal punctuation ("don't", "3.5") survives.
pub fn tokenize(text: &str) -> TokenSequence {
    let tokens = text
        .to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    TokenSequence { tokens }
}

/// Precision, recall and their harmonic mean. The mean is 0 unless both
/// have the same sign, which keeps it within [-1, 1] for embedding scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision * recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap count and total candidate n-grams.
fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, candidate.len().saturating_sub(n - 1))
}

/// ROUGE-N with clipped counts.
pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::param("ROUGE-N needs n >= 1"));
    }
    let (overlap, cand_total) = clipped_overlap(&candidate.tokens, &reference.tokens, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    Ok(Prf::new(ratio(overlap, cand_total), ratio(overlap, ref_total)))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> Prf {
    let l = lcs_len(&candidate.tokens, &reference.tokens);
    Prf::new(ratio(l, candidate.len()), ratio(l, reference.len()))
}

/// BLEU order and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 2,
            weights: vec![0.5, 0.5],
        }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(Error::param(format!(
                "BLEU needs max_n >= 1 weights, got max_n {} with {} weights",
                self.max_n,
                self.weights.len()
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!(
                "BLEU weights must be non-negative and sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// Brevity penalty: 1 for candidates longer than the reference, otherwise
/// `exp(1 - |ref|/|cand|)`. Zero for an empty candidate.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Sentence BLEU without smoothing: any zero n-gram precision gives 0.
pub fn bleu(candidate: &TokenSequence, reference: &TokenSequence, cfg: &BleuConfig) -> Result<f64> {
    cfg.validate()?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (i, w) in cfg.weights.iter().enumerate() {
        let (overlap, total) = clipped_overlap(&candidate.tokens, &reference.tokens, i + 1);
        if overlap == 0 {
            return Ok(0.0);
        }
        log_sum += w * (overlap as f64 / total as f64).ln();
    }
    Ok(brevity_penalty(candidate.len(), reference.len()) * log_sum.exp())
}

/// Greedy-matching BERTScore over unit-normalized token embeddings.
///
/// Recall averages, over reference tokens, the best cosine against any
/// candidate token; precision is the mirror image. Tokens that are equal as
/// strings score exactly 1. Returns all zeros if either side is empty.
pub fn bert_score(candidate: &TokenSequence, reference: &TokenSequence, emb: &dyn EmbeddingProvider) -> Result<Prf> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(Prf::default());
    }
    let embed_all = |seq: &TokenSequence| -> Result<Vec<Vec<f64>>> {
        seq.tokens.iter().map(|t| embed::unit_embedding(emb, t)).collect()
    };
    let ce = embed_all(candidate)?;
    let re = embed_all(reference)?;
    let sim = |i: usize, j: usize| -> f64 {
        if candidate.tokens[i] == reference.tokens[j] {
            1.0
        } else {
            ce[i].iter().zip(&re[j]).map(|(a, b)| a * b).sum()
        }
    };
    let (nc, nr) = (candidate.len(), reference.len());
    let recall = (0..nr)
        .map(|j| (0..nc).map(|i| sim(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / nr as f64;
    let precision = (0..nc)
        .map(|i| (0..nr).map(|j| sim(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / nc as f64;
    Ok(Prf::new(precision, recall))
}
