//! Gaussian-mixture output head.
//!
//! Component means are predicted in a low-rank space and lifted by a shared
//! projection `M` (`m x n`). Squared distances to the target latent are
//! evaluated through the expansion `z'z + mu' (M'M) mu - 2 (M'z)' mu`, so only
//! `M'M` and `M'z` are ever formed.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};

pub const POWER_ITERATIONS: usize = 30;
pub const POWER_TOLERANCE: f64 = 1e-8;

/// Top singular value by power iteration on `M'M`, refining `start` in place.
///
/// The operator is squared after every step, so step `k` applies
/// `(M'M)^(2^k)` to the running vector. A fixed budget of plain steps leaves
/// errors of order `(s2/s1)^(4k)` when the top two singular values are close;
/// with squaring the budget covers any gap that double precision resolves.
pub fn top_singular_value(m: &DMatrix<f64>, start: &mut DVector<f64>) -> Result<f64> {
    if m.ncols() != start.len() {
        return Err(Error::usage("start vector length must equal column count"));
    }
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::data("cannot normalize a zero matrix"));
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::data("matrix contains non-finite values"));
    }
    let mut v = start.clone();
    if v.norm() == 0.0 {
        v.fill(1.0);
    }
    v.normalize_mut();
    let mut op = m.transpose() * m;
    op /= op.amax();
    let mut sigma = (m * &v).norm();
    for _ in 0..POWER_ITERATIONS {
        let w = &op * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // Start was orthogonal to the row space; any basis axis will do.
            v.fill(0.0);
            let axis = m.column_iter().position(|c| c.norm() > 0.0).unwrap_or(0);
            v[axis] = 1.0;
            sigma = (m * &v).norm();
            continue;
        }
        v = w / norm;
        let next = (m * &v).norm();
        let change = (next - sigma).abs() / next;
        sigma = next;
        if change < POWER_TOLERANCE {
            break;
        }
        op = &op * &op;
        let scale = op.amax();
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        op /= scale;
    }
    *start = v;
    Ok(sigma)
}

/// `M / sigma_max(M)` with a seeded power-iteration start.
pub fn spectral_normalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut r = rng::stream(0, &[rng::ids::SPECTRAL, m.nrows() as u64, m.ncols() as u64]);
    let mut v = DVector::from_fn(m.ncols(), |_, _| StandardNormal.sample(&mut r));
    let sigma = top_singular_value(m, &mut v)?;
    Ok(m / sigma)
}

pub fn project_mean(projection: &DMatrix<f64>, lowrank: &DVector<f64>) -> Result<DVector<f64>> {
    if projection.ncols() != lowrank.len() {
        return Err(Error::usage(format!(
            "projection is {}x{}, low-rank mean has length {}",
            projection.nrows(),
            projection.ncols(),
            lowrank.len()
        )));
    }
    Ok(projection * lowrank)
}

/// Precomputed `M'M`, `M'z` and `z'z` for one target latent.
#[derive(Debug, Clone)]
pub struct LowRankCache {
    pub gram: DMatrix<f64>,
    pub projected_target: DVector<f64>,
    pub target_sq_norm: f64,
}

impl LowRankCache {
    pub fn new(projection: &DMatrix<f64>, target: &DVector<f64>) -> Result<Self> {
        let gram = projection.transpose() * projection;
        LowRankCache::with_gram(projection, gram, target)
    }

    /// Reuse a Gram matrix shared by several targets.
    pub fn with_gram(
        projection: &DMatrix<f64>,
        gram: DMatrix<f64>,
        target: &DVector<f64>,
    ) -> Result<Self> {
        if projection.nrows() != target.len() {
            return Err(Error::usage("target length must equal projection rows"));
        }
        Ok(LowRankCache {
            gram,
            projected_target: projection.tr_mul(target),
            target_sq_norm: target.norm_squared(),
        })
    }

    pub fn lowrank_dim(&self) -> usize {
        self.projected_target.len()
    }
}

/// `|z - M mu|^2` from the cached expansion.
pub fn lowrank_sqdist(cache: &LowRankCache, lowrank: &DVector<f64>) -> Result<f64> {
    if lowrank.len() != cache.lowrank_dim() {
        return Err(Error::usage("low-rank mean length does not match the cache"));
    }
    Ok(sqdist_unchecked(cache, lowrank.as_slice()))
}

fn sqdist_unchecked(cache: &LowRankCache, mu: &[f64]) -> f64 {
    let n = mu.len();
    let mut quad = 0.0;
    for j in 0..n {
        let mut row = 0.0;
        for i in 0..n {
            row += cache.gram[(i, j)] * mu[i];
        }
        quad += row * mu[j];
    }
    let cross: f64 = cache
        .projected_target
        .iter()
        .zip(mu)
        .map(|(a, b)| a * b)
        .sum();
    (cache.target_sq_norm + quad - 2.0 * cross).max(0.0)
}

/// KL divergence between two Gaussians sharing covariance `sigma^2 I`.
pub fn gaussian_kl_equal_cov(
    mean_a: &DVector<f64>,
    mean_b: &DVector<f64>,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::usage("sigma must be positive"));
    }
    if mean_a.len() != mean_b.len() {
        return Err(Error::usage("means must have equal length"));
    }
    Ok((mean_a - mean_b).norm_squared() / (2.0 * sigma * sigma))
}

/// `q(k) ∝ exp(-KL_k)` from squared distances.
pub fn responsibilities_from_sqdist(sqdist: &[f64], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let logits: Vec<f64> = sqdist.iter().map(|d| -d * inv).collect();
    math::softmax(&logits)
}

pub fn mixture_responsibilities(
    target: &DVector<f64>,
    means: &[DVector<f64>],
    sigma: f64,
) -> Result<Vec<f64>> {
    if means.is_empty() {
        return Err(Error::usage("need at least one mixture component"));
    }
    let kls = means
        .iter()
        .map(|mu| gaussian_kl_equal_cov(target, mu, sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(math::softmax(&kls.iter().map(|k| -k).collect::<Vec<_>>()))
}

/// Loss value and gradients of the variational bound for one step.
#[derive(Debug, Clone)]
pub struct VbOutput {
    pub loss: f64,
    pub grad_logits: DVector<f64>,
    /// `n x K`, one column per component.
    pub grad_means: DMatrix<f64>,
    pub grad_projection: DMatrix<f64>,
    /// Responsibilities used as constant weights.
    pub responsibilities: Vec<f64>,
}

fn check_vb_shapes(
    logits: &DVector<f64>,
    means: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    target: &DVector<f64>,
    sigma: f64,
) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::usage("need at least one mixture component"));
    }
    if means.ncols() != logits.len() {
        return Err(Error::usage("means must have one column per mixture logit"));
    }
    if means.nrows() != projection.ncols() || projection.nrows() != target.len() {
        return Err(Error::usage("projection shape does not conform"));
    }
    if !(sigma > 0.0) {
        return Err(Error::usage("sigma must be positive"));
    }
    Ok(())
}

/// Variational bound with responsibilities computed from the current means.
///
/// `loss = sum_k q_k KL_k + KL(qbar || softmax(logits))`, where
/// `qbar = (1 - eps) q + eps / K`. Gradients hold `q` constant.
pub fn vb_loss(
    logits: &DVector<f64>,
    means: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    target: &DVector<f64>,
    sigma: f64,
    label_smoothing: f64,
) -> Result<VbOutput> {
    check_vb_shapes(logits, means, projection, target, sigma)?;
    let cache = LowRankCache::new(projection, target)?;
    vb_loss_cached(logits, means, projection, &cache, target, sigma, label_smoothing, None)
}

/// As [`vb_loss`] with the responsibilities supplied by the caller.
pub fn vb_loss_with_weights(
    logits: &DVector<f64>,
    means: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    target: &DVector<f64>,
    sigma: f64,
    label_smoothing: f64,
    responsibilities: &[f64],
) -> Result<VbOutput> {
    check_vb_shapes(logits, means, projection, target, sigma)?;
    if responsibilities.len() != logits.len() {
        return Err(Error::usage("one responsibility per component"));
    }
    let cache = LowRankCache::new(projection, target)?;
    vb_loss_cached(
        logits,
        means,
        projection,
        &cache,
        target,
        sigma,
        label_smoothing,
        Some(responsibilities),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn vb_loss_cached(
    logits: &DVector<f64>,
    means: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    cache: &LowRankCache,
    target: &DVector<f64>,
    sigma: f64,
    label_smoothing: f64,
    fixed_q: Option<&[f64]>,
) -> Result<VbOutput> {
    let k = logits.len();
    let n = means.nrows();
    let sigma2 = sigma * sigma;
    let sqdist: Vec<f64> = (0..k)
        .map(|j| sqdist_unchecked(cache, means.column(j).as_slice()))
        .collect();
    let q = match fixed_q {
        Some(q) => q.to_vec(),
        None => responsibilities_from_sqdist(&sqdist, sigma),
    };
    let qbar: Vec<f64> = q
        .iter()
        .map(|&x| (1.0 - label_smoothing) * x + label_smoothing / k as f64)
        .collect();
    let log_p: Vec<f64> = {
        let lse = math::log_sum_exp(logits.as_slice());
        logits.iter().map(|l| l - lse).collect()
    };

    let mut loss = 0.0;
    for j in 0..k {
        loss += q[j] * sqdist[j] / (2.0 * sigma2);
        if qbar[j] > 0.0 {
            loss += qbar[j] * (qbar[j].ln() - log_p[j]);
        }
    }
    if !loss.is_finite() {
        return Err(Error::data("variational bound is not finite"));
    }

    let qbar_mass: f64 = qbar.iter().sum();
    let grad_logits =
        DVector::from_fn(k, |j, _| log_p[j].exp() * qbar_mass - qbar[j]);

    // d/dmu_k = q_k (M'M mu_k - M'z) / sigma^2
    let mut grad_means = &cache.gram * means;
    for j in 0..k {
        let mut col = grad_means.column_mut(j);
        col -= &cache.projected_target;
        col *= q[j] / sigma2;
    }

    // d/dM = (M S - z s') / sigma^2 with S = sum q mu mu', s = sum q mu.
    let mut second = DMatrix::<f64>::zeros(n, n);
    let mut first = DVector::<f64>::zeros(n);
    for j in 0..k {
        if q[j] == 0.0 {
            continue;
        }
        let mu = means.column(j);
        second.ger(q[j], &mu, &mu, 1.0);
        first.axpy(q[j], &mu, 1.0);
    }
    let mut grad_projection = projection * second;
    grad_projection.ger(-1.0, target, &first, 1.0);
    grad_projection /= sigma2;

    Ok(VbOutput {
        loss,
        grad_logits,
        grad_means,
        grad_projection,
        responsibilities: q,
    })
}

/// Binary cross-entropy on the EOS logit. Returns `(loss, dloss/dlogit)`.
pub fn eos_loss(logit: f64, is_end: bool) -> (f64, f64) {
    let y = if is_end { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, math::sigmoid(logit) - y)
}

/// Shared projection and its power-iteration state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureHead {
    pub mixtures: usize,
    pub projection: DMatrix<f64>,
    power_vector: DVector<f64>,
}

impl MixtureHead {
    pub fn new(mixtures: usize, latent_dim: usize, lowrank_dim: usize, rng: &mut Rng) -> Result<Self> {
        if mixtures == 0 || lowrank_dim == 0 || latent_dim == 0 {
            return Err(Error::usage("mixture head dimensions must be positive"));
        }
        if lowrank_dim > latent_dim {
            return Err(Error::usage(format!(
                "low-rank dim {lowrank_dim} exceeds latent dim {latent_dim}"
            )));
        }
        let projection = DMatrix::from_fn(latent_dim, lowrank_dim, |_, _| {
            StandardNormal.sample(rng)
        });
        MixtureHead::from_projection(mixtures, projection)
    }

    pub fn from_projection(mixtures: usize, projection: DMatrix<f64>) -> Result<Self> {
        if mixtures == 0 {
            return Err(Error::usage("need at least one mixture component"));
        }
        if projection.ncols() > projection.nrows() {
            return Err(Error::usage("low-rank dim exceeds latent dim"));
        }
        let mut r = rng::stream(0, &[rng::ids::SPECTRAL]);
        let power_vector =
            DVector::from_fn(projection.ncols(), |_, _| StandardNormal.sample(&mut r));
        let mut head = MixtureHead {
            mixtures,
            projection,
            power_vector,
        };
        head.normalize()?;
        Ok(head)
    }

    /// Restores a head whose projection is already normalized, keeping its
    /// values bit for bit.
    pub fn from_stored_projection(mixtures: usize, projection: DMatrix<f64>) -> Result<Self> {
        if mixtures == 0 || projection.ncols() == 0 {
            return Err(Error::usage("mixture head dimensions must be positive"));
        }
        if projection.ncols() > projection.nrows() {
            return Err(Error::usage("low-rank dim exceeds latent dim"));
        }
        if !projection.iter().all(|x| x.is_finite()) {
            return Err(Error::data("projection contains non-finite values"));
        }
        let mut r = rng::stream(0, &[rng::ids::SPECTRAL]);
        let power_vector =
            DVector::from_fn(projection.ncols(), |_, _| StandardNormal.sample(&mut r));
        Ok(MixtureHead {
            mixtures,
            projection,
            power_vector,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn lowrank_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Rescale the projection to unit spectral norm, warm-starting the power
    /// iteration from the previous call.
    pub fn normalize(&mut self) -> Result<f64> {
        let sigma = top_singular_value(&self.projection, &mut self.power_vector)?;
        self.projection /= sigma;
        Ok(sigma)
    }
}
