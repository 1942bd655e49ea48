//! Training and held-out corpora.

use crate::error::{Error, Result};
use crate::frontend::{read_features, synth_sequence, FeatureSequence, LinearCodec, SynthConfig, Window};
use crate::rng::{self, ids};

use super::config::{RunConfig, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<FeatureSequence>,
    /// Conditioning bytes naming the generator settings and sequence index.
    pub tokens: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn windows(&self, codec: &LinearCodec) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for s in &self.sequences {
            out.extend(codec.windows(s)?);
        }
        Ok(out)
    }
}

pub fn token_string(cfg: &RunConfig, split: Split, index: usize) -> String {
    let d = &cfg.data;
    let tag = match split {
        Split::Train => "t",
        Split::Heldout => "h",
    };
    format!(
        "harmonics={} smooth={} noise={} {tag}{index}",
        d.harmonics, d.smoothness, d.noise
    )
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        n_bins: cfg.data.bins,
        frames: cfg.data.frames,
        harmonics: cfg.data.harmonics,
        smoothness: cfg.data.smoothness,
        noise: cfg.data.noise,
        frame_rate: cfg.data.frame_rate,
        seed: cfg.seed,
    }
}

pub fn synth_corpus(cfg: &RunConfig, split: Split) -> Result<Corpus> {
    let (count, id) = match split {
        Split::Train => (cfg.data.train_sequences, ids::DATASET),
        Split::Heldout => (cfg.data.heldout_sequences, ids::HELDOUT),
    };
    if count == 0 {
        return Err(Error::usage("dataset is empty"));
    }
    let sc = synth_config(cfg);
    let mut sequences = Vec::with_capacity(count);
    let mut tokens = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(cfg.seed, &[id, i as u64]);
        sequences.push(synth_sequence(&sc, &mut r)?);
        tokens.push(token_string(cfg, split, i).into_bytes());
    }
    Ok(Corpus { sequences, tokens })
}

/// Training split: the configured feature files if any, otherwise synthetic.
pub fn training_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.features.is_empty() {
        return synth_corpus(cfg, Split::Train);
    }
    let mut sequences = Vec::new();
    let mut tokens = Vec::new();
    for (i, path) in cfg.features.iter().enumerate() {
        let seq = read_features(path)?;
        if seq.bins() != cfg.data.bins {
            return Err(Error::data(format!(
                "{} has {} bins, config expects {}",
                path.display(),
                seq.bins(),
                cfg.data.bins
            )));
        }
        sequences.push(seq);
        tokens.push(format!("file{i}").into_bytes());
    }
    Ok(Corpus { sequences, tokens })
}

pub fn corpus(cfg: &RunConfig, split: Split) -> Result<Corpus> {
    match split {
        Split::Train => training_corpus(cfg),
        Split::Heldout => synth_corpus(cfg, Split::Heldout),
    }
}
