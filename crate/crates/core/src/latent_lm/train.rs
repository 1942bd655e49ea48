//! Teacher-forced objective and optimizer step for the latent LM.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::{ContextEncoder, HeadGrad};
use super::head::{eos_loss, vb_loss_cached, LowRankCache, MixtureHead};
use super::FrozenQuantizer;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::quantizer::{depth_posteriors, CodeStack};
use crate::rng::Rng;

/// One conditioning string with its ground-truth code stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<u8>,
    pub stacks: Vec<CodeStack>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vb: f64,
    pub eos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmGrad {
    pub theta: Vec<f64>,
    pub projection: DMatrix<f64>,
}

/// Responsibilities per sequence, per step, per component.
pub type StepWeights = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct LmObjective {
    pub loss: LossBreakdown,
    pub grad: LmGrad,
    pub responsibilities: StepWeights,
}

/// Batch-mean objective. Each sequence of length `T` contributes the mean
/// of its `T` bound terms plus the mean of `T + 1` EOS terms; the extra EOS
/// term is a terminal step that sees the whole sequence as history. Labels
/// are positive at the last real step and at the terminal step.
///
/// With `fixed_q` the responsibilities are taken as given instead of being
/// recomputed from the current means.
pub fn lm_objective<E: ContextEncoder>(
    enc: &E,
    head: &MixtureHead,
    quantizer: &FrozenQuantizer,
    batch: &[LmExample],
    label_smoothing: f64,
    fixed_q: Option<&StepWeights>,
) -> Result<LmObjective> {
    if batch.is_empty() {
        return Err(Error::usage("empty LM batch"));
    }
    if batch.iter().any(|ex| ex.stacks.is_empty()) {
        return Err(Error::usage("LM sequences must have at least one step"));
    }
    if enc.latent_dim() != quantizer.table.dim() || head.latent_dim() != enc.latent_dim() {
        return Err(Error::usage("LM and quantizer latent dims differ"));
    }
    if head.lowrank_dim() != enc.lowrank_dim() || head.mixtures != enc.mixtures() {
        return Err(Error::usage("mixture head and encoder shapes differ"));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::usage("label smoothing must lie in [0, 1)"));
    }
    if let Some(q) = fixed_q {
        if q.len() != batch.len() || q.iter().zip(batch).any(|(a, b)| a.len() != b.stacks.len()) {
            return Err(Error::usage("fixed responsibilities do not match the batch"));
        }
    }

    let sigma = quantizer.sigma;
    let gram = head.projection.transpose() * &head.projection;
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = LmGrad {
        theta: vec![0.0; enc.params().len()],
        projection: DMatrix::zeros(head.latent_dim(), head.lowrank_dim()),
    };
    let mut all_q = Vec::with_capacity(batch.len());

    for (b, ex) in batch.iter().enumerate() {
        let targets: Vec<DVector<f64>> = ex
            .stacks
            .iter()
            .map(|s| {
                if s.depth() != quantizer.table.depth()
                    || s.codes().iter().any(|&c| c >= quantizer.table.vocab())
                {
                    Err(Error::usage("code stack does not fit the quantizer"))
                } else {
                    Ok(quantizer.table.reconstruct(s))
                }
            })
            .collect::<Result<_>>()?;
        let t_len = targets.len();
        let w_vb = inv_b / t_len as f64;
        let w_eos = inv_b / (t_len + 1) as f64;
        let mut seq_q = Vec::with_capacity(t_len);

        for t in 0..=t_len {
            let history = &targets[..t];
            let out = enc.forward(&ex.tokens, history)?;
            let (eos_val, eos_grad) = eos_loss(out.eos_logit, t + 1 >= t_len);
            loss.eos += w_eos * eos_val;
            let mut upstream = HeadGrad {
                logits: DVector::zeros(head.mixtures),
                means: DMatrix::zeros(head.lowrank_dim(), head.mixtures),
                eos_logit: w_eos * eos_grad,
            };
            if t < t_len {
                let cache =
                    LowRankCache::with_gram(&head.projection, gram.clone(), &targets[t])?;
                let q_fixed = fixed_q.map(|q| q[b][t].as_slice());
                let vb = vb_loss_cached(
                    &out.logits,
                    &out.means,
                    &head.projection,
                    &cache,
                    &targets[t],
                    sigma,
                    label_smoothing,
                    q_fixed,
                )?;
                loss.vb += w_vb * vb.loss;
                upstream.logits = vb.grad_logits * w_vb;
                upstream.means = vb.grad_means * w_vb;
                grad.projection += vb.grad_projection * w_vb;
                seq_q.push(vb.responsibilities);
            }
            enc.backward(&ex.tokens, history, &upstream, &mut grad.theta)?;
        }
        all_q.push(seq_q);
    }
    loss.total = loss.vb + loss.eos;
    Ok(LmObjective {
        loss,
        grad,
        responsibilities: all_q,
    })
}

/// Adam state for the encoder parameters and the shared projection.
#[derive(Debug, Clone)]
pub struct LmOptimizer {
    theta: Adam,
    projection: Adam,
    steps: usize,
}

impl LmOptimizer {
    pub fn new<E: ContextEncoder>(enc: &E, head: &MixtureHead, config: AdamConfig) -> Self {
        LmOptimizer {
            theta: Adam::new(config, enc.params().len()),
            projection: Adam::new(config, head.projection.len()),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One optimizer update. The projection is re-normalized to unit spectral
/// norm after every step.
pub fn lm_train_step<E: ContextEncoder>(
    enc: &mut E,
    head: &mut MixtureHead,
    quantizer: &FrozenQuantizer,
    batch: &[LmExample],
    label_smoothing: f64,
    opt: &mut LmOptimizer,
) -> Result<LossBreakdown> {
    let obj = lm_objective(enc, head, quantizer, batch, label_smoothing, None)?;
    let finite = obj.loss.total.is_finite()
        && obj.grad.theta.iter().all(|g| g.is_finite())
        && obj.grad.projection.iter().all(|g| g.is_finite());
    if !finite {
        return Err(Error::Numeric {
            step: opt.steps,
            batch_index: 0,
            detail: format!("non-finite LM loss or gradient (loss {})", obj.loss.total),
        });
    }
    opt.theta.step(enc.params_mut(), &obj.grad.theta);
    opt.projection
        .step(head.projection.as_mut_slice(), obj.grad.projection.as_slice());
    head.normalize()?;
    opt.steps += 1;
    Ok(obj.loss)
}

/// Monte Carlo estimate of `E_{z ~ N(zhat(c), sigma^2 I)} [log q(c | z)]`
/// per step, where `q` is the product of the per-depth pointwise posteriors.
/// It does not depend on the LM parameters and is reported for monitoring.
pub fn code_likelihood_diagnostic(
    quantizer: &FrozenQuantizer,
    stacks: &[CodeStack],
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if stacks.is_empty() || samples == 0 {
        return Err(Error::usage("diagnostic needs stacks and samples"));
    }
    let table = &quantizer.table;
    let sigma = quantizer.sigma;
    let mut total = 0.0;
    for stack in stacks {
        let zhat = table.reconstruct(stack);
        for _ in 0..samples {
            let z = DVector::from_fn(zhat.len(), |i, _| {
                let e: f64 = StandardNormal.sample(rng);
                zhat[i] + sigma * e
            });
            let greedy = table.quantize(&z)?.stack;
            let post = depth_posteriors(table, sigma, &z, &greedy);
            total += stack
                .codes()
                .iter()
                .zip(&post)
                .map(|(&c, q)| q[c].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>();
        }
    }
    Ok(total / (stacks.len() * samples) as f64)
}
