//! Synthetic mel-like sequences: drifting Gaussian ridges over white noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;

const CLIP: f64 = 4.0;
const RIDGE_WIDTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_bins: usize,
    pub frames: usize,
    pub harmonics: usize,
    /// Inverse of the per-frame random-walk step of each ridge centre.
    pub smoothness: f64,
    pub noise: f64,
    pub frame_rate: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bins: 16,
            frames: 64,
            harmonics: 3,
            smoothness: 4.0,
            noise: 0.1,
            frame_rate: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.frames == 0 {
            return Err(Error::usage("synth needs positive bins and frames"));
        }
        if !(self.smoothness > 0.0) || !self.smoothness.is_finite() {
            return Err(Error::usage("smoothness must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::usage("noise level must be non-negative"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::usage("frame rate must be positive"));
        }
        Ok(())
    }
}

pub fn synth_sequence(cfg: &SynthConfig, rng: &mut Rng) -> Result<FeatureSequence> {
    cfg.validate()?;
    let bins = cfg.n_bins as f64;
    let step = Normal::new(0.0, 1.0 / cfg.smoothness).map_err(|e| Error::usage(e.to_string()))?;
    let mut centres: Vec<f64> = (0..cfg.harmonics)
        .map(|_| rng.random_range(0.0..bins))
        .collect();
    let amps: Vec<f64> = (0..cfg.harmonics).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut data = Vec::with_capacity(cfg.frames * cfg.n_bins);
    for _ in 0..cfg.frames {
        for b in 0..cfg.n_bins {
            let mut v = 0.0;
            for (c, a) in centres.iter().zip(&amps) {
                let d = (b as f64 - c) / RIDGE_WIDTH;
                v += a * (-0.5 * d * d).exp();
            }
            let e: f64 = StandardNormal.sample(rng);
            v += cfg.noise * e;
            data.push(v.clamp(-CLIP, CLIP) as f32);
        }
        for c in &mut centres {
            *c = (*c + step.sample(rng)).clamp(0.0, bins - 1.0);
        }
    }
    FeatureSequence::new(cfg.frames, cfg.n_bins, cfg.frame_rate, data)
}
