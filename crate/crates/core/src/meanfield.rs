//! Exact small-instance references for the quantizer's posterior.
//!
//! Everything here enumerates code combinations: coordinate-ascent mean-field
//! inference with the expectation over the other depths computed exactly, the
//! ELBO, and the full joint posterior. Codes are assumed uniform a priori.
//! These exist to check the pointwise approximation, not to scale.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::math::{self, LN_2PI};
use crate::quantizer::{CodeStack, Codebook, EmbeddingTable};

/// Limit on `V^(D-1)` for one coordinate update.
pub const MAX_CONDITIONAL_COMBINATIONS: u128 = 4096;
/// Limit on `V^D` for the ELBO and the joint table.
pub const MAX_JOINT_COMBINATIONS: u128 = 65536;

/// Fully factorized posterior, one distribution per depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPosterior {
    q: Vec<Vec<f64>>,
}

impl FactorizedPosterior {
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = q.first().map(|r| r.len()).unwrap_or(0);
        if q.is_empty() || vocab == 0 || q.iter().any(|r| r.len() != vocab) {
            return Err(Error::usage("posterior must be a non-empty depth x vocab table"));
        }
        for (d, row) in q.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::usage(format!("depth {d} is not a distribution")));
            }
        }
        Ok(FactorizedPosterior { q })
    }

    pub fn uniform(depth: usize, vocab: usize) -> Self {
        FactorizedPosterior {
            q: vec![vec![1.0 / vocab as f64; vocab]; depth],
        }
    }

    pub fn point_mass(stack: &CodeStack, vocab: usize) -> Self {
        let q = stack
            .codes()
            .iter()
            .map(|&c| {
                let mut row = vec![0.0; vocab];
                row[c] = 1.0;
                row
            })
            .collect();
        FactorizedPosterior { q }
    }

    pub fn depth(&self) -> usize {
        self.q.len()
    }

    pub fn vocab(&self) -> usize {
        self.q[0].len()
    }

    pub fn at(&self, d: usize) -> &[f64] {
        &self.q[d]
    }

    /// Sup-norm distance between two posteriors of the same shape.
    pub fn sup_distance(&self, other: &FactorizedPosterior) -> f64 {
        self.q
            .iter()
            .flatten()
            .zip(other.q.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn entropy(&self) -> f64 {
        self.q
            .iter()
            .flatten()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

fn combinations(vocab: usize, depth: usize) -> u128 {
    (vocab as u128).saturating_pow(depth as u32)
}

fn check_capacity(combos: u128, limit: u128) -> Result<()> {
    if combos > limit {
        return Err(Error::Capacity {
            combinations: combos,
            limit,
        });
    }
    Ok(())
}

fn check_shape(cb: &Codebook, z: &DVector<f64>, q: Option<&FactorizedPosterior>) -> Result<()> {
    if z.len() != cb.dim() {
        return Err(Error::usage("latent length does not match codebook dim"));
    }
    if let Some(q) = q {
        if q.depth() != cb.depth() || q.vocab() != cb.vocab() {
            return Err(Error::usage("posterior shape does not match codebook"));
        }
    }
    Ok(())
}

/// Mixed-radix counter over code combinations.
fn for_each_combination(depth: usize, vocab: usize, mut f: impl FnMut(&[usize])) {
    let mut codes = vec![0usize; depth];
    loop {
        f(&codes);
        let mut i = depth;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            codes[i] += 1;
            if codes[i] < vocab {
                break;
            }
            codes[i] = 0;
        }
    }
}

fn log_likelihood(table: &EmbeddingTable, log_sigma: f64, z: &DVector<f64>, codes: &[usize]) -> f64 {
    let m = table.dim();
    let mut r = z.clone();
    for (d, &c) in codes.iter().enumerate() {
        for (ri, e) in r.iter_mut().zip(table.embedding(d, c)) {
            *ri -= e;
        }
    }
    let sigma2 = (2.0 * log_sigma).exp();
    -r.norm_squared() / (2.0 * sigma2) - 0.5 * m as f64 * LN_2PI - m as f64 * log_sigma
}

/// One coordinate update of depth `d`:
/// `q_d(c) ∝ exp(E_{q_{-d}}[log p(z | c_d = c, c_{-d})])`.
pub fn update_depth(
    cb: &Codebook,
    z: &DVector<f64>,
    q: &FactorizedPosterior,
    d: usize,
) -> Result<Vec<f64>> {
    check_shape(cb, z, Some(q))?;
    if d >= cb.depth() {
        return Err(Error::usage(format!("depth {d} out of range")));
    }
    check_capacity(
        combinations(cb.vocab(), cb.depth() - 1),
        MAX_CONDITIONAL_COMBINATIONS,
    )?;
    let table = cb.embeddings();
    Ok(update_with_table(&table, cb.log_sigma(), z, q, d))
}

fn update_with_table(
    table: &EmbeddingTable,
    log_sigma: f64,
    z: &DVector<f64>,
    q: &FactorizedPosterior,
    d: usize,
) -> Vec<f64> {
    let (depth, vocab) = (table.depth(), table.vocab());
    let sigma2 = (2.0 * log_sigma).exp();
    let mut expected = vec![0.0; vocab];
    let others: Vec<usize> = (0..depth).filter(|&x| x != d).collect();
    for_each_combination(others.len(), vocab, |combo| {
        let mut w = 1.0;
        for (k, &dd) in others.iter().enumerate() {
            w *= q.q[dd][combo[k]];
        }
        if w == 0.0 {
            return;
        }
        let mut base = z.clone();
        for (k, &dd) in others.iter().enumerate() {
            for (b, e) in base.iter_mut().zip(table.embedding(dd, combo[k])) {
                *b -= e;
            }
        }
        for (c, slot) in expected.iter_mut().enumerate() {
            let sq = math::sq_dist(base.as_slice(), table.embedding(d, c));
            *slot += w * (-sq / (2.0 * sigma2));
        }
    });
    // The Gaussian normalizer and the uniform prior are constant in c.
    math::softmax(&expected)
}

/// `E_q[log p(z|c)] + E_q[log p(c)] + H(q)` with `p(c) = V^{-D}`, by enumeration.
pub fn elbo(cb: &Codebook, z: &DVector<f64>, q: &FactorizedPosterior) -> Result<f64> {
    check_shape(cb, z, Some(q))?;
    check_capacity(combinations(cb.vocab(), cb.depth()), MAX_JOINT_COMBINATIONS)?;
    let table = cb.embeddings();
    Ok(elbo_with_table(&table, cb.log_sigma(), z, q))
}

fn elbo_with_table(
    table: &EmbeddingTable,
    log_sigma: f64,
    z: &DVector<f64>,
    q: &FactorizedPosterior,
) -> f64 {
    let (depth, vocab) = (table.depth(), table.vocab());
    let mut expected = 0.0;
    for_each_combination(depth, vocab, |codes| {
        let w: f64 = codes.iter().enumerate().map(|(d, &c)| q.q[d][c]).product();
        if w > 0.0 {
            expected += w * log_likelihood(table, log_sigma, z, codes);
        }
    });
    let log_prior = -(depth as f64) * (vocab as f64).ln();
    expected + log_prior + q.entropy()
}

/// Coordinate ascent in ascending depth order. Returns the final posterior and
/// the ELBO after each sweep.
pub fn coordinate_ascent(
    cb: &Codebook,
    z: &DVector<f64>,
    sweeps: usize,
    init: FactorizedPosterior,
) -> Result<(FactorizedPosterior, Vec<f64>)> {
    check_shape(cb, z, Some(&init))?;
    check_capacity(
        combinations(cb.vocab(), cb.depth() - 1),
        MAX_CONDITIONAL_COMBINATIONS,
    )?;
    check_capacity(combinations(cb.vocab(), cb.depth()), MAX_JOINT_COMBINATIONS)?;
    let table = cb.embeddings();
    let mut q = init;
    let mut trace = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        for d in 0..cb.depth() {
            q.q[d] = update_with_table(&table, cb.log_sigma(), z, &q, d);
        }
        trace.push(elbo_with_table(&table, cb.log_sigma(), z, &q));
    }
    Ok((q, trace))
}

/// Exact posterior over all `V^D` code combinations, uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    depth: usize,
    vocab: usize,
    probs: Vec<f64>,
    log_evidence: f64,
}

impl JointPosterior {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `log p(z)`, marginalizing codes under the uniform prior.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// Flat index of a code combination (first depth most significant).
    pub fn index(&self, codes: &[usize]) -> usize {
        codes.iter().fold(0, |acc, &c| acc * self.vocab + c)
    }

    pub fn codes(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.depth];
        for d in (0..self.depth).rev() {
            out[d] = index % self.vocab;
            index /= self.vocab;
        }
        out
    }

    pub fn prob(&self, codes: &[usize]) -> f64 {
        self.probs[self.index(codes)]
    }

    /// Most probable combination; ties go to the lowest flat index.
    pub fn map(&self) -> Vec<usize> {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.codes(best)
    }

    /// 0-based rank of `codes`: how many combinations are strictly more probable.
    pub fn rank(&self, codes: &[usize]) -> usize {
        let p = self.prob(codes);
        self.probs.iter().filter(|&&x| x > p).count()
    }

    pub fn marginals(&self) -> FactorizedPosterior {
        let mut q = vec![vec![0.0; self.vocab]; self.depth];
        for (i, &p) in self.probs.iter().enumerate() {
            for (d, c) in self.codes(i).into_iter().enumerate() {
                q[d][c] += p;
            }
        }
        FactorizedPosterior { q }
    }
}

pub fn joint_posterior(cb: &Codebook, z: &DVector<f64>) -> Result<JointPosterior> {
    check_shape(cb, z, None)?;
    check_capacity(combinations(cb.vocab(), cb.depth()), MAX_JOINT_COMBINATIONS)?;
    let table = cb.embeddings();
    let (depth, vocab) = (cb.depth(), cb.vocab());
    let mut logs = Vec::with_capacity(vocab.pow(depth as u32));
    for_each_combination(depth, vocab, |codes| {
        logs.push(log_likelihood(&table, cb.log_sigma(), z, codes));
    });
    let lse = math::log_sum_exp(&logs);
    let probs = logs.iter().map(|l| (l - lse).exp()).collect();
    Ok(JointPosterior {
        depth,
        vocab,
        probs,
        log_evidence: lse - depth as f64 * (vocab as f64).ln(),
    })
}
