//! Context encoders producing the per-step mixture head inputs.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TOKEN_VOCAB: usize = 256;

/// Raw outputs for one autoregressive step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: DVector<f64>,
    /// `n x K`, column `k` is the low-rank mean of component `k`.
    pub means: DMatrix<f64>,
    pub eos_logit: f64,
}

/// Upstream gradient with the same layout as [`HeadOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub logits: DVector<f64>,
    pub means: DMatrix<f64>,
    pub eos_logit: f64,
}

pub trait ContextEncoder {
    fn mixtures(&self) -> usize;
    fn lowrank_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;

    /// `history` holds the quantized latents of earlier steps, oldest first.
    fn forward(&self, tokens: &[u8], history: &[DVector<f64>]) -> Result<HeadOutput>;

    /// Adds `d loss / d theta` into `grad` given `d loss / d outputs`.
    fn backward(
        &self,
        tokens: &[u8],
        history: &[DVector<f64>],
        upstream: &HeadGrad,
        grad: &mut [f64],
    ) -> Result<()>;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub mixtures: usize,
    pub lowrank_dim: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub window: usize,
}

impl EncoderShape {
    pub fn features(&self) -> usize {
        self.token_dim + self.window * self.latent_dim
    }

    fn offsets(&self) -> Offsets {
        let f = self.features();
        let k = self.mixtures;
        let kn = k * self.lowrank_dim;
        let emb = 0;
        let w_logit = emb + TOKEN_VOCAB * self.token_dim;
        let b_logit = w_logit + k * f;
        let w_mean = b_logit + k;
        let b_mean = w_mean + kn * f;
        let w_eos = b_mean + kn;
        let b_eos = w_eos + f;
        Offsets {
            emb,
            w_logit,
            b_logit,
            w_mean,
            b_mean,
            w_eos,
            b_eos,
            total: b_eos + 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    emb: usize,
    w_logit: usize,
    b_logit: usize,
    w_mean: usize,
    b_mean: usize,
    w_eos: usize,
    b_eos: usize,
    total: usize,
}

/// Mean-pooled byte embeddings concatenated with the last `W` latents (most
/// recent first, zero-padded), followed by one affine map per output head.
///
/// Parameters live in a single flat vector laid out as
/// `[emb 256 x e | W_logit K x F | b_logit | W_mean Kn x F | b_mean | w_eos | b_eos]`
/// with row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    shape: EncoderShape,
    theta: Vec<f64>,
}

impl ReferenceEncoder {
    pub fn new(shape: EncoderShape, rng: &mut Rng) -> Result<Self> {
        validate(&shape)?;
        let o = shape.offsets();
        let f = shape.features() as f64;
        let mut theta = vec![0.0; o.total];
        let mut normal = |scale: f64| -> f64 {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        };
        for v in &mut theta[o.emb..o.w_logit] {
            *v = normal(1.0);
        }
        for v in &mut theta[o.w_logit..o.b_logit] {
            *v = normal(0.1 / f.sqrt());
        }
        for v in &mut theta[o.w_mean..o.b_mean] {
            *v = normal(1.0 / f.sqrt());
        }
        for v in &mut theta[o.w_eos..o.b_eos] {
            *v = normal(0.1 / f.sqrt());
        }
        Ok(ReferenceEncoder { shape, theta })
    }

    pub fn from_params(shape: EncoderShape, theta: Vec<f64>) -> Result<Self> {
        validate(&shape)?;
        if theta.len() != shape.num_params() {
            return Err(Error::usage(format!(
                "encoder expects {} parameters, got {}",
                shape.num_params(),
                theta.len()
            )));
        }
        Ok(ReferenceEncoder { shape, theta })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Named parameter blocks as `(name, shape, range into params)`, in
    /// storage order. Matrices are row-major.
    pub fn segments(&self) -> Vec<(&'static str, Vec<usize>, std::ops::Range<usize>)> {
        let s = &self.shape;
        let o = s.offsets();
        let f = s.features();
        let kn = s.mixtures * s.lowrank_dim;
        vec![
            ("token_embedding", vec![TOKEN_VOCAB, s.token_dim], o.emb..o.w_logit),
            ("logit.weight", vec![s.mixtures, f], o.w_logit..o.b_logit),
            ("logit.bias", vec![s.mixtures], o.b_logit..o.w_mean),
            ("mean.weight", vec![kn, f], o.w_mean..o.b_mean),
            ("mean.bias", vec![kn], o.b_mean..o.w_eos),
            ("eos.weight", vec![f], o.w_eos..o.b_eos),
            ("eos.bias", vec![1], o.b_eos..o.total),
        ]
    }

    /// Sets the EOS bias, e.g. to force or suppress stopping.
    pub fn set_eos_bias(&mut self, bias: f64) {
        let o = self.shape.offsets();
        self.theta[o.b_eos] = bias;
    }

    fn features(&self, tokens: &[u8], history: &[DVector<f64>]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::usage("token string must be non-empty"));
        }
        let s = &self.shape;
        let mut feat = vec![0.0; s.features()];
        let scale = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let row = &self.theta[t as usize * s.token_dim..(t as usize + 1) * s.token_dim];
            for (f, e) in feat.iter_mut().zip(row) {
                *f += e * scale;
            }
        }
        for (slot, z) in history.iter().rev().take(s.window).enumerate() {
            if z.len() != s.latent_dim {
                return Err(Error::usage("history latent has the wrong dimension"));
            }
            let start = s.token_dim + slot * s.latent_dim;
            feat[start..start + s.latent_dim].copy_from_slice(z.as_slice());
        }
        Ok(feat)
    }

    fn affine(&self, w: usize, b: usize, rows: usize, feat: &[f64]) -> Vec<f64> {
        let f = feat.len();
        (0..rows)
            .map(|r| {
                let wr = &self.theta[w + r * f..w + (r + 1) * f];
                self.theta[b + r] + wr.iter().zip(feat).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }
}

fn validate(shape: &EncoderShape) -> Result<()> {
    if shape.mixtures == 0
        || shape.lowrank_dim == 0
        || shape.latent_dim == 0
        || shape.token_dim == 0
        || shape.window == 0
    {
        return Err(Error::usage("encoder dimensions must be positive"));
    }
    Ok(())
}

impl ContextEncoder for ReferenceEncoder {
    fn mixtures(&self) -> usize {
        self.shape.mixtures
    }

    fn lowrank_dim(&self) -> usize {
        self.shape.lowrank_dim
    }

    fn latent_dim(&self) -> usize {
        self.shape.latent_dim
    }

    fn forward(&self, tokens: &[u8], history: &[DVector<f64>]) -> Result<HeadOutput> {
        let s = &self.shape;
        let o = s.offsets();
        let feat = self.features(tokens, history)?;
        let logits = self.affine(o.w_logit, o.b_logit, s.mixtures, &feat);
        let means = self.affine(o.w_mean, o.b_mean, s.mixtures * s.lowrank_dim, &feat);
        let eos = self.affine(o.w_eos, o.b_eos, 1, &feat)[0];
        Ok(HeadOutput {
            logits: DVector::from_vec(logits),
            means: DMatrix::from_vec(s.lowrank_dim, s.mixtures, means),
            eos_logit: eos,
        })
    }

    fn backward(
        &self,
        tokens: &[u8],
        history: &[DVector<f64>],
        upstream: &HeadGrad,
        grad: &mut [f64],
    ) -> Result<()> {
        let s = &self.shape;
        let o = s.offsets();
        if grad.len() != o.total {
            return Err(Error::usage("gradient buffer has the wrong length"));
        }
        if upstream.logits.len() != s.mixtures
            || upstream.means.shape() != (s.lowrank_dim, s.mixtures)
        {
            return Err(Error::usage("upstream gradient has the wrong shape"));
        }
        let feat = self.features(tokens, history)?;
        let f = feat.len();
        let mut grad_feat = vec![0.0; f];
        let mut push = |w: usize, b: usize, g: &[f64], grad: &mut [f64]| {
            for (r, &gr) in g.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                grad[b + r] += gr;
                let row = w + r * f;
                for i in 0..f {
                    grad[row + i] += gr * feat[i];
                    grad_feat[i] += gr * self.theta[row + i];
                }
            }
        };
        push(o.w_logit, o.b_logit, upstream.logits.as_slice(), grad);
        push(o.w_mean, o.b_mean, upstream.means.as_slice(), grad);
        push(o.w_eos, o.b_eos, &[upstream.eos_logit], grad);

        let scale = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let start = t as usize * s.token_dim;
            for i in 0..s.token_dim {
                grad[start + i] += grad_feat[i] * scale;
            }
        }
        Ok(())
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}
