//! Nucleus filtering and autoregressive generation.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::ContextEncoder;
use super::head::MixtureHead;
use super::FrozenQuantizer;
use crate::error::{Error, Result};
use crate::math;
use crate::quantizer::CodeStack;
use crate::rng::Rng;

const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Keeps the shortest descending-probability prefix reaching mass `p` and
/// renormalizes. Equal probabilities are ordered by index.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::usage(format!("top-p {p} must lie in (0, 1]")));
    }
    if probs.is_empty() || probs.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::usage("not a probability distribution"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::usage(format!("probabilities sum to {total}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= p {
            break;
        }
    }
    if kept == probs.len() {
        return Ok(probs.to_vec());
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..kept] {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub top_p: f64,
    /// Multiplier on the quantizer noise scale when drawing latents.
    pub temperature: f64,
    pub max_steps: usize,
    pub eos_threshold: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.5,
            temperature: 2.6,
            max_steps: 64,
            eos_threshold: 0.5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::usage("top_p must lie in (0, 1]"));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::usage("temperature must be non-negative"));
        }
        if self.max_steps == 0 {
            return Err(Error::usage("max_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eos_threshold) {
            return Err(Error::usage("eos_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub stack: CodeStack,
    pub quantized: DVector<f64>,
    pub eos: bool,
    pub component: usize,
}

/// Draws an index from `probs` by inverse CDF.
fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// One generation step: pick a component, draw a latent around its mean,
/// quantize it and read the EOS head.
#[allow(clippy::too_many_arguments)]
pub fn sample_step<E: ContextEncoder>(
    enc: &E,
    head: &MixtureHead,
    quantizer: &FrozenQuantizer,
    tokens: &[u8],
    history: &[DVector<f64>],
    cfg: &GenerationConfig,
    rng: &mut Rng,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if history.len() >= cfg.max_steps {
        return Err(Error::usage("history already reached max_steps"));
    }
    let out = enc.forward(tokens, history)?;
    let probs = top_p_filter(&math::softmax(out.logits.as_slice()), cfg.top_p)?;
    let component = draw(&probs, rng);
    let mean = &head.projection * out.means.column(component);
    let std = cfg.temperature * quantizer.sigma;
    let z = DVector::from_fn(mean.len(), |i, _| {
        let e: f64 = StandardNormal.sample(rng);
        mean[i] + std * e
    });
    let q = quantizer.table.quantize(&z)?;
    Ok(SampleOutput {
        stack: q.stack,
        quantized: q.quantized,
        eos: math::sigmoid(out.eos_logit) > cfg.eos_threshold,
        component,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub stacks: Vec<CodeStack>,
    pub latents: Vec<DVector<f64>>,
    pub stop_reason: StopReason,
}

pub fn generate<E: ContextEncoder>(
    enc: &E,
    head: &MixtureHead,
    quantizer: &FrozenQuantizer,
    tokens: &[u8],
    cfg: &GenerationConfig,
    rng: &mut Rng,
) -> Result<Generation> {
    let mut stacks = Vec::new();
    let mut latents = Vec::new();
    loop {
        let step = sample_step(enc, head, quantizer, tokens, &latents, cfg, rng)?;
        stacks.push(step.stack);
        latents.push(step.quantized);
        if step.eos {
            return Ok(Generation {
                stacks,
                latents,
                stop_reason: StopReason::Eos,
            });
        }
        if latents.len() >= cfg.max_steps {
            return Ok(Generation {
                stacks,
                latents,
                stop_reason: StopReason::MaxSteps,
            });
        }
    }
}
