//! Gaussian-mixture latent language model.
//!
//! At step `t` a context encoder reads the conditioning tokens and the
//! quantized latents of earlier steps and emits mixture logits, one low-rank
//! mean per component and an EOS logit. Component `k` models the next latent
//! as `N(M mu_k, sigma^2 I)` with `sigma` borrowed from the frozen quantizer.

mod encoder;
mod head;
mod sampling;
mod train;

pub use encoder::{ContextEncoder, EncoderShape, HeadGrad, HeadOutput, ReferenceEncoder, TOKEN_VOCAB};
pub use head::{
    eos_loss, gaussian_kl_equal_cov, lowrank_sqdist, mixture_responsibilities, project_mean,
    responsibilities_from_sqdist, spectral_normalize, top_singular_value, vb_loss,
    vb_loss_with_weights, LowRankCache, MixtureHead, VbOutput, POWER_ITERATIONS, POWER_TOLERANCE,
};
pub use sampling::{
    generate, sample_step, top_p_filter, Generation, GenerationConfig, SampleOutput, StopReason,
};
pub use train::{
    code_likelihood_diagnostic, lm_objective, lm_train_step, LmExample, LmGrad, LmObjective,
    LmOptimizer, LossBreakdown, StepWeights,
};

use crate::quantizer::{Codebook, EmbeddingTable};

/// Read-only view of a trained quantizer used by the LM.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuantizer {
    pub table: EmbeddingTable,
    pub sigma: f64,
}

impl FrozenQuantizer {
    pub fn new(cb: &Codebook) -> Self {
        FrozenQuantizer {
            table: cb.embeddings(),
            sigma: cb.sigma(),
        }
    }
}
