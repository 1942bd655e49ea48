//! Codebook utilization metrics.

use serde::{Deserialize, Serialize};

use super::CodeStack;
use crate::error::{Error, Result};

/// Per-depth code counts over an evaluation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeHistogram {
    vocab: usize,
    counts: Vec<Vec<u64>>,
}

impl CodeHistogram {
    pub fn new(depth: usize, vocab: usize) -> Self {
        CodeHistogram {
            vocab,
            counts: vec![vec![0; vocab]; depth],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let vocab = counts.first().map(|c| c.len()).unwrap_or(0);
        if counts.is_empty() || vocab == 0 || counts.iter().any(|c| c.len() != vocab) {
            return Err(Error::usage("histogram must be a non-empty depth x vocab table"));
        }
        Ok(CodeHistogram { vocab, counts })
    }

    pub fn observe(&mut self, stack: &CodeStack) {
        for (d, &c) in stack.codes().iter().enumerate() {
            self.counts[d][c] += 1;
        }
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthUsage {
    /// Fraction of codewords observed at least once.
    pub usage: f64,
    /// `exp(entropy) / V` of the empirical code distribution.
    pub perplexity: f64,
}

pub fn utilization(hist: &CodeHistogram) -> Result<Vec<DepthUsage>> {
    if hist.depth() == 0 {
        return Err(Error::usage("empty histogram"));
    }
    let v = hist.vocab() as f64;
    hist.counts
        .iter()
        .enumerate()
        .map(|(d, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::usage(format!("no observations at depth {d}")));
            }
            let used = row.iter().filter(|&&c| c > 0).count() as f64;
            let entropy: f64 = row
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            Ok(DepthUsage {
                usage: used / v,
                perplexity: entropy.exp() / v,
            })
        })
        .collect()
}

/// Depth range of quartile `q` (0..4). Shallow codebooks reuse depths so that
/// every quartile is non-empty.
pub fn quartile_depths(depth: usize, q: usize) -> std::ops::Range<usize> {
    let start = (q * depth / 4).min(depth - 1);
    let end = ((q + 1) * depth / 4).max(start + 1).min(depth);
    start..end
}

/// Mean usage fraction over the deepest quartile of depths.
pub fn deep_quartile_mean(usage: &[DepthUsage]) -> f64 {
    let range = quartile_depths(usage.len(), 3);
    let n = range.len() as f64;
    usage[range].iter().map(|u| u.usage).sum::<f64>() / n
}
