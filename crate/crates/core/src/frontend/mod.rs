//! Desk-scale data path: synthetic mel-like features, a linear codec and the
//! binary feature/code file formats.

mod codec;
mod io;
mod synth;

pub use codec::{
    combined_loss, commitment_loss, recon_loss, CodecGrad, CodecLoss, CodecOptimizer,
    LinearCodec, LossWeights, Window, ALLOWED_FACTORS,
};
pub use io::{
    decode_codes, decode_features, encode_codes, encode_features, read_codes, read_features,
    write_atomic, write_codes, write_features, CODES_MAGIC, FEATURES_MAGIC, FORMAT_VERSION,
    HEADER_LEN,
};
pub use synth::{synth_sequence, SynthConfig};

use crate::error::{Error, Result};
use crate::quantizer::CodeStack;

/// Mel-like frames stored row-major as `frames x bins` single-precision values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    bins: usize,
    frame_rate: f32,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, bins: usize, frame_rate: f32, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(Error::usage("feature sequences need at least one frame and bin"));
        }
        if data.len() != frames * bins {
            return Err(Error::usage(format!(
                "expected {} values for {frames}x{bins} frames, got {}",
                frames * bins,
                data.len()
            )));
        }
        if !(frame_rate > 0.0) || !frame_rate.is_finite() {
            return Err(Error::usage("frame rate must be positive and finite"));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::data(format!("non-finite feature value at index {i}")));
        }
        Ok(FeatureSequence {
            frames,
            bins,
            frame_rate,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// A `T x D` table of codes, each below `vocab`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    len: usize,
    depth: usize,
    vocab: usize,
    codes: Vec<u32>,
}

impl CodeSequence {
    pub fn new(len: usize, depth: usize, vocab: usize, codes: Vec<u32>) -> Result<Self> {
        if len == 0 || depth == 0 || vocab == 0 {
            return Err(Error::usage("code sequences need positive T, D and V"));
        }
        if vocab > u16::MAX as usize {
            return Err(Error::usage(format!("vocab {vocab} does not fit in 16 bits")));
        }
        if codes.len() != len * depth {
            return Err(Error::usage("code table size does not match T x D"));
        }
        if let Some(i) = codes.iter().position(|&c| c as usize >= vocab) {
            return Err(Error::usage(format!("code at position {i} is out of range")));
        }
        Ok(CodeSequence {
            len,
            depth,
            vocab,
            codes,
        })
    }

    pub fn from_stacks(stacks: &[CodeStack], vocab: usize) -> Result<Self> {
        let depth = stacks.first().map(|s| s.depth()).unwrap_or(0);
        if stacks.iter().any(|s| s.depth() != depth) {
            return Err(Error::usage("code stacks have inconsistent depths"));
        }
        let codes = stacks
            .iter()
            .flat_map(|s| s.codes().iter().map(|&c| c as u32))
            .collect();
        CodeSequence::new(stacks.len(), depth, vocab, codes)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn stack(&self, t: usize) -> CodeStack {
        let row = &self.codes[t * self.depth..(t + 1) * self.depth];
        CodeStack::new(row.iter().map(|&c| c as usize).collect(), self.vocab)
            .expect("validated on construction")
    }

    pub fn stacks(&self) -> Vec<CodeStack> {
        (0..self.len).map(|t| self.stack(t)).collect()
    }
}
