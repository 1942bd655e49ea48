//! Per-depth variational posteriors and the codebook objective.
//!
//! For a greedy stack `c*`, the posterior at depth `d` replaces the
//! expectation over the other depths by the point mass at `c*_{-d}`:
//! `q(c | z) ∝ N(z; zhat - e(c*_d; d) + e(c; d), sigma^2 I)`.
//! The codebook loss is the q-weighted Gaussian negative log density summed
//! over depths. Gradients treat the weights as constants.

use nalgebra::{DMatrix, DVector};

use super::{CodeStack, Codebook, EmbeddingTable};
use crate::error::{Error, Result};
use crate::math::{self, LN_2PI};

/// Residual target of each depth: `z - zhat + e(c*_d; d)`.
fn depth_targets(table: &EmbeddingTable, z: &DVector<f64>, stack: &CodeStack) -> Vec<DVector<f64>> {
    let zhat = table.reconstruct(stack);
    let base = z - zhat;
    stack
        .codes()
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            let mut t = base.clone();
            for (ti, e) in t.iter_mut().zip(table.embedding(d, c)) {
                *ti += e;
            }
            t
        })
        .collect()
}

fn posterior_from_target(table: &EmbeddingTable, sigma: f64, d: usize, target: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let logits: Vec<f64> = (0..table.vocab())
        .map(|c| -math::sq_dist(target, table.embedding(d, c)) * inv)
        .collect();
    math::softmax(&logits)
}

/// Posteriors for every depth of one latent.
pub fn depth_posteriors(
    table: &EmbeddingTable,
    sigma: f64,
    z: &DVector<f64>,
    stack: &CodeStack,
) -> Vec<Vec<f64>> {
    depth_targets(table, z, stack)
        .iter()
        .enumerate()
        .map(|(d, t)| posterior_from_target(table, sigma, d, t.as_slice()))
        .collect()
}

fn check_stack(cb: &Codebook, z: &DVector<f64>, stack: &CodeStack) -> Result<()> {
    if z.len() != cb.dim() {
        return Err(Error::usage("latent length does not match codebook dim"));
    }
    if stack.depth() != cb.depth() {
        return Err(Error::usage("code stack depth does not match codebook depth"));
    }
    if stack.codes().iter().any(|&c| c >= cb.vocab()) {
        return Err(Error::usage("code stack entry out of range"));
    }
    Ok(())
}

/// Variational posterior over the codes of depth `d`.
pub fn depth_posterior(
    cb: &Codebook,
    z: &DVector<f64>,
    stack: &CodeStack,
    d: usize,
) -> Result<Vec<f64>> {
    check_stack(cb, z, stack)?;
    if d >= cb.depth() {
        return Err(Error::usage(format!("depth {d} out of range")));
    }
    let table = cb.embeddings();
    let targets = depth_targets(&table, z, stack);
    Ok(posterior_from_target(&table, cb.sigma(), d, targets[d].as_slice()))
}

/// Gradient with respect to the effective embeddings and `log_sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    pub tables: Vec<DMatrix<f64>>,
    pub log_sigma: f64,
}

impl EmbeddingGrad {
    pub fn zeros(depth: usize, vocab: usize, dim: usize) -> Self {
        EmbeddingGrad {
            tables: vec![DMatrix::zeros(dim, vocab); depth],
            log_sigma: 0.0,
        }
    }
}

/// Gradient with respect to every codebook parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookGrad {
    pub directions: Vec<DMatrix<f64>>,
    pub scale_logits: Vec<f64>,
    pub max_scale_logit: f64,
    pub log_sigma: f64,
}

impl CodebookGrad {
    /// Same layout as [`Codebook::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.directions {
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(&self.scale_logits);
        out.push(self.max_scale_logit);
        out.push(self.log_sigma);
        out
    }
}

/// Adds `scale * dLoss/d(embeddings)` into `acc` and returns the unscaled loss.
fn accumulate(
    table: &EmbeddingTable,
    log_sigma: f64,
    z: &DVector<f64>,
    stack: &CodeStack,
    weights: &[Vec<f64>],
    scale: f64,
    acc: Option<&mut EmbeddingGrad>,
) -> f64 {
    let (depth, vocab, m) = (table.depth(), table.vocab(), table.dim());
    let sigma2 = (2.0 * log_sigma).exp();
    let inv = 1.0 / (2.0 * sigma2);
    let norm_const = 0.5 * m as f64 * LN_2PI + m as f64 * log_sigma;
    let targets = depth_targets(table, z, stack);

    let mut loss = 0.0;
    let mut quad = 0.0;
    let mut weight_mass = 0.0;
    // Weighted mean residual of each depth.
    let mut mean_delta = vec![DVector::<f64>::zeros(m); depth];
    let mut acc = acc;
    for d in 0..depth {
        let t = targets[d].as_slice();
        for c in 0..vocab {
            let w = weights[d][c];
            if w == 0.0 {
                continue;
            }
            let e = table.embedding(d, c);
            let mut sq = 0.0;
            for i in 0..m {
                let delta = t[i] - e[i];
                sq += delta * delta;
                mean_delta[d][i] += w * delta;
            }
            quad += w * sq;
            weight_mass += w;
            if let Some(acc) = acc.as_deref_mut() {
                let g = acc.tables[d].as_mut_slice();
                let k = -2.0 * inv * w * scale;
                for i in 0..m {
                    g[c * m + i] += k * (t[i] - e[i]);
                }
            }
        }
    }
    loss += quad * inv + weight_mass * norm_const;

    if let Some(acc) = acc {
        // The target of depth d contains the greedy embeddings of all other
        // depths, so each selected codeword also moves every other target.
        let mut total = DVector::<f64>::zeros(m);
        for md in &mean_delta {
            total += md;
        }
        for (d, &c) in stack.codes().iter().enumerate() {
            let g = acc.tables[d].as_mut_slice();
            let k = -2.0 * inv * scale;
            for i in 0..m {
                g[c * m + i] += k * (total[i] - mean_delta[d][i]);
            }
        }
        acc.log_sigma += scale * (-2.0 * inv * quad + m as f64 * weight_mass);
    }
    loss
}

impl Codebook {
    /// Pull an embedding-space gradient back to the direction/scale parameters.
    pub fn chain_grad(&self, eg: &EmbeddingGrad) -> CodebookGrad {
        let scales = self.scales();
        let p = math::softmax(self.scale_logits());
        let base = self.max_scale_logit().exp();
        let depth = self.depth();
        let mut grad_alpha = vec![0.0; depth];
        let mut directions = Vec::with_capacity(depth);
        for d in 0..depth {
            let dirs = &self.directions()[d];
            let ge = &eg.tables[d];
            let mut gdir = DMatrix::zeros(dirs.nrows(), dirs.ncols());
            for c in 0..dirs.ncols() {
                let raw = dirs.column(c);
                let norm = raw.norm();
                let u = raw / norm;
                let g = ge.column(c);
                let proj = u.dot(&g);
                grad_alpha[d] += proj;
                let tangent = (g - &u * proj) * (scales[d] / norm);
                gdir.set_column(c, &tangent);
            }
            directions.push(gdir);
        }
        // alpha_d = base * S_d with S_d the tail mass from depth d.
        let tails: Vec<f64> = scales.iter().map(|a| a / base).collect();
        let weighted: f64 = grad_alpha.iter().zip(&tails).map(|(g, s)| g * s).sum();
        let mut prefix = 0.0;
        let mut scale_logits = vec![0.0; depth];
        for j in 0..depth {
            prefix += grad_alpha[j];
            scale_logits[j] = base * p[j] * (prefix - weighted);
        }
        let max_scale_logit = grad_alpha.iter().zip(&scales).map(|(g, a)| g * a).sum();
        CodebookGrad {
            directions,
            scale_logits,
            max_scale_logit,
            log_sigma: eg.log_sigma,
        }
    }
}

/// Codebook loss with caller-supplied expectation weights.
pub fn codebook_loss_with_weights(
    cb: &Codebook,
    z: &DVector<f64>,
    stack: &CodeStack,
    weights: &[Vec<f64>],
) -> Result<f64> {
    check_stack(cb, z, stack)?;
    check_weights(cb, weights)?;
    Ok(accumulate(&cb.embeddings(), cb.log_sigma(), z, stack, weights, 1.0, None))
}

/// Sum over depths of the posterior-weighted Gaussian negative log density.
pub fn codebook_loss(cb: &Codebook, z: &DVector<f64>, stack: &CodeStack) -> Result<f64> {
    check_stack(cb, z, stack)?;
    let table = cb.embeddings();
    let weights = depth_posteriors(&table, cb.sigma(), z, stack);
    Ok(accumulate(&table, cb.log_sigma(), z, stack, &weights, 1.0, None))
}

fn check_weights(cb: &Codebook, weights: &[Vec<f64>]) -> Result<()> {
    if weights.len() != cb.depth() || weights.iter().any(|w| w.len() != cb.vocab()) {
        return Err(Error::usage("weights must be depth x vocab"));
    }
    Ok(())
}

/// Analytic gradient of the codebook loss with the given weights held fixed.
pub fn codebook_grad_with_weights(
    cb: &Codebook,
    z: &DVector<f64>,
    stack: &CodeStack,
    weights: &[Vec<f64>],
) -> Result<CodebookGrad> {
    check_stack(cb, z, stack)?;
    check_weights(cb, weights)?;
    let table = cb.embeddings();
    let mut eg = EmbeddingGrad::zeros(cb.depth(), cb.vocab(), cb.dim());
    accumulate(&table, cb.log_sigma(), z, stack, weights, 1.0, Some(&mut eg));
    Ok(cb.chain_grad(&eg))
}

/// Gradient of [`codebook_loss`]; posterior weights are not differentiated.
pub fn codebook_grad(cb: &Codebook, z: &DVector<f64>, stack: &CodeStack) -> Result<CodebookGrad> {
    let table = cb.embeddings();
    let weights = depth_posteriors(&table, cb.sigma(), z, stack);
    codebook_grad_with_weights(cb, z, stack, &weights)
}

/// Mean codebook loss and gradient over a batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grad: CodebookGrad,
}

impl BatchObjective {
    /// `pairs` must come from quantizing against `table`, the embeddings of `cb`.
    pub fn evaluate(
        cb: &Codebook,
        table: &EmbeddingTable,
        pairs: &[(&DVector<f64>, &CodeStack)],
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let scale = 1.0 / pairs.len() as f64;
        let sigma = cb.sigma();
        let mut eg = EmbeddingGrad::zeros(cb.depth(), cb.vocab(), cb.dim());
        let mut loss = 0.0;
        for (z, stack) in pairs {
            let weights = depth_posteriors(table, sigma, z, stack);
            loss += scale * accumulate(table, cb.log_sigma(), z, stack, &weights, scale, Some(&mut eg));
        }
        Ok(BatchObjective {
            loss,
            grad: cb.chain_grad(&eg),
        })
    }
}
