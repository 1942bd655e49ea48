//! Linear encoder/decoder over windows of `f` frames.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;

pub const ALLOWED_FACTORS: [usize; 3] = [4, 8, 16];

/// `f` consecutive frames flattened row-major; frames past the end of the
/// sequence are zero and excluded from the reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: DVector<f64>,
    pub valid_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    pub factor: usize,
    pub bins: usize,
    /// `m x (f * bins)`.
    pub enc_weight: DMatrix<f64>,
    pub enc_bias: DVector<f64>,
    /// `(f * bins) x m`.
    pub dec_weight: DMatrix<f64>,
    pub dec_bias: DVector<f64>,
}

impl LinearCodec {
    pub fn new(factor: usize, bins: usize, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        check_dims(factor, bins, latent_dim)?;
        let width = factor * bins;
        let enc_scale = 1.0 / (width as f64).sqrt();
        let dec_scale = 1.0 / (latent_dim as f64).sqrt();
        let mut normal = |s: f64| -> f64 {
            let x: f64 = StandardNormal.sample(rng);
            x * s
        };
        let enc_weight = DMatrix::from_fn(latent_dim, width, |_, _| normal(enc_scale));
        let dec_weight = DMatrix::from_fn(width, latent_dim, |_, _| normal(dec_scale));
        Ok(LinearCodec {
            factor,
            bins,
            enc_weight,
            enc_bias: DVector::zeros(latent_dim),
            dec_weight,
            dec_bias: DVector::zeros(width),
        })
    }

    pub fn from_parts(
        factor: usize,
        bins: usize,
        enc_weight: DMatrix<f64>,
        enc_bias: DVector<f64>,
        dec_weight: DMatrix<f64>,
        dec_bias: DVector<f64>,
    ) -> Result<Self> {
        let m = enc_weight.nrows();
        check_dims(factor, bins, m)?;
        let width = factor * bins;
        if enc_weight.ncols() != width
            || enc_bias.len() != m
            || dec_weight.shape() != (width, m)
            || dec_bias.len() != width
        {
            return Err(Error::usage("codec parameter shapes are inconsistent"));
        }
        Ok(LinearCodec {
            factor,
            bins,
            enc_weight,
            enc_bias,
            dec_weight,
            dec_bias,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_weight.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.factor * self.bins
    }

    pub fn num_latents(&self, frames: usize) -> usize {
        frames.div_ceil(self.factor)
    }

    /// Splits `y` into zero-padded windows of `f` frames.
    pub fn windows(&self, y: &FeatureSequence) -> Result<Vec<Window>> {
        if y.bins() != self.bins {
            return Err(Error::usage(format!(
                "codec expects {} bins, features have {}",
                self.bins,
                y.bins()
            )));
        }
        let n = self.num_latents(y.frames());
        Ok((0..n)
            .map(|w| {
                let start = w * self.factor;
                let valid = (y.frames() - start).min(self.factor);
                let mut data = DVector::zeros(self.window_len());
                for (i, v) in y.data()[start * self.bins..(start + valid) * self.bins]
                    .iter()
                    .enumerate()
                {
                    data[i] = *v as f64;
                }
                Window {
                    data,
                    valid_frames: valid,
                }
            })
            .collect())
    }

    pub fn encode_window(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.enc_weight * x + &self.enc_bias
    }

    pub fn decode_latent(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.dec_weight * z + &self.dec_bias
    }

    pub fn encode(&self, y: &FeatureSequence) -> Result<Vec<DVector<f64>>> {
        Ok(self
            .windows(y)?
            .iter()
            .map(|w| self.encode_window(&w.data))
            .collect())
    }

    /// Expands each latent to `f` frames; `frames` truncates the result to
    /// the original length when it is known.
    pub fn decode(
        &self,
        latents: &[DVector<f64>],
        frames: Option<usize>,
        frame_rate: f32,
    ) -> Result<FeatureSequence> {
        if latents.is_empty() {
            return Err(Error::usage("nothing to decode"));
        }
        if latents.iter().any(|z| z.len() != self.latent_dim()) {
            return Err(Error::usage("latent dimension does not match the codec"));
        }
        let full = latents.len() * self.factor;
        let keep = frames.unwrap_or(full);
        if keep == 0 || keep > full {
            return Err(Error::usage(format!(
                "cannot keep {keep} frames from {} latents",
                latents.len()
            )));
        }
        let mut data = Vec::with_capacity(keep * self.bins);
        for z in latents {
            let y = self.decode_latent(z);
            data.extend(y.iter().map(|&v| v as f32));
        }
        data.truncate(keep * self.bins);
        FeatureSequence::new(keep, self.bins, frame_rate, data)
    }

    pub fn num_params(&self) -> usize {
        self.enc_weight.len() + self.enc_bias.len() + self.dec_weight.len() + self.dec_bias.len()
    }
}

fn check_dims(factor: usize, bins: usize, latent_dim: usize) -> Result<()> {
    if !ALLOWED_FACTORS.contains(&factor) {
        return Err(Error::usage(format!(
            "downsample factor {factor} must be one of {ALLOWED_FACTORS:?}"
        )));
    }
    if bins == 0 || latent_dim == 0 {
        return Err(Error::usage("codec dimensions must be positive"));
    }
    Ok(())
}

/// Mean absolute error over all entries.
pub fn recon_loss(y: &FeatureSequence, y_hat: &FeatureSequence) -> Result<f64> {
    if y.frames() != y_hat.frames() || y.bins() != y_hat.bins() {
        return Err(Error::usage("feature shapes differ"));
    }
    let total: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(total / y.data().len() as f64)
}

/// Mean squared error over all latent entries.
pub fn commitment_loss(z: &[DVector<f64>], z_hat: &[DVector<f64>]) -> Result<f64> {
    if z.is_empty() || z.len() != z_hat.len() || z.iter().zip(z_hat).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::usage("latent sequences differ in shape"));
    }
    let n: usize = z.iter().map(|v| v.len()).sum();
    let total: f64 = z
        .iter()
        .zip(z_hat)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            commitment: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecGrad {
    pub enc_weight: DMatrix<f64>,
    pub enc_bias: DVector<f64>,
    pub dec_weight: DMatrix<f64>,
    pub dec_bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecLoss {
    pub total: f64,
    pub recon: f64,
    pub commitment: f64,
    pub grad: CodecGrad,
}

/// `w_r * L1(x, G zhat + c) + w_c * MSE(E x + b, zhat)` over a batch of
/// windows. `zhat` is a constant input: the decoder sees it as data and the
/// encoder is reached only through the commitment term.
pub fn combined_loss(
    codec: &LinearCodec,
    windows: &[Window],
    quantized: &[DVector<f64>],
    weights: LossWeights,
) -> Result<CodecLoss> {
    if windows.is_empty() || windows.len() != quantized.len() {
        return Err(Error::usage("need one quantized latent per window"));
    }
    let m = codec.latent_dim();
    let width = codec.window_len();
    if windows.iter().any(|w| w.data.len() != width) || quantized.iter().any(|z| z.len() != m) {
        return Err(Error::usage("window or latent shape does not match the codec"));
    }
    let valid: usize = windows.iter().map(|w| w.valid_frames * codec.bins).sum();
    if valid == 0 {
        return Err(Error::usage("windows contain no valid frames"));
    }
    let inv_valid = 1.0 / valid as f64;
    let inv_latent = 1.0 / (windows.len() * m) as f64;

    let mut grad = CodecGrad {
        enc_weight: DMatrix::zeros(m, width),
        enc_bias: DVector::zeros(m),
        dec_weight: DMatrix::zeros(width, m),
        dec_bias: DVector::zeros(width),
    };
    let mut recon = 0.0;
    let mut commit = 0.0;
    for (w, zq) in windows.iter().zip(quantized) {
        let y_hat = codec.decode_latent(zq);
        let limit = w.valid_frames * codec.bins;
        let mut dy = DVector::zeros(width);
        for i in 0..limit {
            let diff = y_hat[i] - w.data[i];
            recon += diff.abs();
            dy[i] = weights.recon * inv_valid * sign(diff);
        }
        grad.dec_weight.ger(1.0, &dy, zq, 1.0);
        grad.dec_bias += &dy;

        let z = codec.encode_window(&w.data);
        let diff = &z - zq;
        commit += diff.norm_squared();
        let dz = diff * (2.0 * weights.commitment * inv_latent);
        grad.enc_weight.ger(1.0, &dz, &w.data, 1.0);
        grad.enc_bias += &dz;
    }
    let recon = recon * inv_valid;
    let commitment = commit * inv_latent;
    Ok(CodecLoss {
        total: weights.recon * recon + weights.commitment * commitment,
        recon,
        commitment,
        grad,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adam over the four codec tensors.
#[derive(Debug, Clone)]
pub struct CodecOptimizer {
    enc_weight: Adam,
    enc_bias: Adam,
    dec_weight: Adam,
    dec_bias: Adam,
}

impl CodecOptimizer {
    pub fn new(codec: &LinearCodec, config: AdamConfig) -> Self {
        CodecOptimizer {
            enc_weight: Adam::new(config, codec.enc_weight.len()),
            enc_bias: Adam::new(config, codec.enc_bias.len()),
            dec_weight: Adam::new(config, codec.dec_weight.len()),
            dec_bias: Adam::new(config, codec.dec_bias.len()),
        }
    }

    pub fn step(&mut self, codec: &mut LinearCodec, grad: &CodecGrad) {
        self.enc_weight
            .step(codec.enc_weight.as_mut_slice(), grad.enc_weight.as_slice());
        self.enc_bias
            .step(codec.enc_bias.as_mut_slice(), grad.enc_bias.as_slice());
        self.dec_weight
            .step(codec.dec_weight.as_mut_slice(), grad.dec_weight.as_slice());
        self.dec_bias
            .step(codec.dec_bias.as_mut_slice(), grad.dec_bias.as_slice());
    }

    /// Updates only the decoder, leaving the encoder untouched.
    pub fn step_decoder(&mut self, codec: &mut LinearCodec, grad: &CodecGrad) {
        self.dec_weight
            .step(codec.dec_weight.as_mut_slice(), grad.dec_weight.as_slice());
        self.dec_bias
            .step(codec.dec_bias.as_mut_slice(), grad.dec_bias.as_slice());
    }
}
