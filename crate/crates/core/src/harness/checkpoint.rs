//! Checkpoint files: `CLMK`, a `u32` manifest length, a JSON manifest and a
//! blob of little-endian `f32` tensors laid out in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use crate::error::{Error, FormatError, Result};
use crate::frontend::{write_atomic, LinearCodec};
use crate::latent_lm::{EncoderShape, MixtureHead, ReferenceEncoder};
use crate::quantizer::Codebook;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CLMK";
pub const SCHEMA_VERSION: u32 = 1;

/// Every tensor name a checkpoint may carry. Anything else in a manifest is
/// corruption, since a renamed tensor would otherwise load and then vanish.
pub const KNOWN_TENSORS: [&str; 16] = [
    "codec.decoder.bias",
    "codec.decoder.weight",
    "codec.encoder.bias",
    "codec.encoder.weight",
    "lm.eos.bias",
    "lm.eos.weight",
    "lm.logit.bias",
    "lm.logit.weight",
    "lm.mean.bias",
    "lm.mean.weight",
    "lm.projection",
    "lm.token_embedding",
    "quantizer.directions",
    "quantizer.log_sigma",
    "quantizer.max_scale_logit",
    "quantizer.scale_logits",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
    pub metrics: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub metrics: Value,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &RunConfig, metrics: Value) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            metrics,
            tensors: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) -> Result<()> {
        if !KNOWN_TENSORS.contains(&name) {
            return Err(Error::usage(format!("unknown tensor name {name:?}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::usage(format!("tensor {name}: shape does not match data")));
        }
        let data = values.iter().map(|&v| v as f32).collect();
        self.tensors.insert(name.to_string(), Tensor { shape, data });
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("checkpoint has no tensor {name:?}")))
    }

    fn values(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.shape != shape {
            return Err(Error::data(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::data(format!("checkpoint config echo is invalid: {e}")))
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = 4 * t.data.len();
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
            metrics: self.metrics.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated {
                needed: 8,
                available: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let blob_start = 8usize
            .checked_add(len)
            .ok_or_else(|| FormatError::Manifest("length overflow".into()))?;
        if bytes.len() < blob_start {
            return Err(FormatError::Truncated {
                needed: blob_start,
                available: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..blob_start])
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(FormatError::BadVersion {
                expected: SCHEMA_VERSION,
                found: manifest.schema_version,
            });
        }
        let blob = &bytes[blob_start..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0usize;
        let mut previous: Option<&str> = None;
        for e in &manifest.tensors {
            if previous.is_some_and(|p| p >= e.name.as_str()) {
                return Err(FormatError::Manifest(format!(
                    "tensor {} is out of lexicographic order",
                    e.name
                )));
            }
            previous = Some(&e.name);
            if !KNOWN_TENSORS.contains(&e.name.as_str()) {
                return Err(FormatError::Manifest(format!("unknown tensor {:?}", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::Manifest("shape overflow".into()))?;
            if count.checked_mul(4) != Some(e.nbytes) {
                return Err(FormatError::Manifest(format!(
                    "tensor {} spans {} bytes but has {count} elements",
                    e.name, e.nbytes
                )));
            }
            if e.offset != expected_offset {
                return Err(FormatError::Manifest(format!(
                    "tensor {} starts at {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let end = e.offset + e.nbytes;
            if end > blob.len() {
                return Err(FormatError::Truncated {
                    needed: blob_start + end,
                    available: bytes.len(),
                });
            }
            let mut data = Vec::with_capacity(count);
            for (i, chunk) in blob[e.offset..end].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(FormatError::NonFinite(i));
                }
                data.push(v);
            }
            tensors.insert(
                e.name.clone(),
                Tensor {
                    shape: e.shape.clone(),
                    data,
                },
            );
            expected_offset = end;
        }
        if blob.len() != expected_offset {
            return Err(FormatError::TrailingBytes {
                expected: blob_start + expected_offset,
                actual: bytes.len(),
            });
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            config: manifest.config,
            metrics: manifest.metrics,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::data(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn put_codebook(&mut self, cb: &Codebook) -> Result<()> {
        let (d, v, m) = (cb.depth(), cb.vocab(), cb.dim());
        let dirs: Vec<f64> = cb.directions().iter().flat_map(|t| t.iter().copied()).collect();
        self.insert("quantizer.directions", vec![d, v, m], &dirs)?;
        self.insert("quantizer.scale_logits", vec![d], cb.scale_logits())?;
        self.insert("quantizer.max_scale_logit", vec![1], &[cb.max_scale_logit()])?;
        self.insert("quantizer.log_sigma", vec![1], &[cb.log_sigma()])
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let shape = self.tensor("quantizer.directions")?.shape.clone();
        if shape.len() != 3 {
            return Err(Error::data("quantizer.directions must be three-dimensional"));
        }
        let (d, v, m) = (shape[0], shape[1], shape[2]);
        let flat = self.values("quantizer.directions", &shape)?;
        let directions = flat
            .chunks_exact(v * m)
            .map(|c| DMatrix::from_column_slice(m, v, c))
            .collect();
        let logits = self.values("quantizer.scale_logits", &[d])?;
        let max = self.values("quantizer.max_scale_logit", &[1])?[0];
        let log_sigma = self.values("quantizer.log_sigma", &[1])?[0];
        Codebook::from_raw_parts(directions, logits, max, log_sigma)
    }

    pub fn put_codec(&mut self, codec: &LinearCodec) -> Result<()> {
        let (m, w) = (codec.latent_dim(), codec.window_len());
        self.insert("codec.encoder.weight", vec![m, w], &row_major(&codec.enc_weight))?;
        self.insert("codec.encoder.bias", vec![m], codec.enc_bias.as_slice())?;
        self.insert("codec.decoder.weight", vec![w, m], &row_major(&codec.dec_weight))?;
        self.insert("codec.decoder.bias", vec![w], codec.dec_bias.as_slice())
    }

    pub fn codec(&self, factor: usize, bins: usize) -> Result<LinearCodec> {
        let shape = self.tensor("codec.encoder.weight")?.shape.clone();
        if shape.len() != 2 || shape[1] != factor * bins {
            return Err(Error::data("codec tensors do not match the configured factor and bins"));
        }
        let (m, w) = (shape[0], shape[1]);
        let ew = self.values("codec.encoder.weight", &[m, w])?;
        let eb = self.values("codec.encoder.bias", &[m])?;
        let dw = self.values("codec.decoder.weight", &[w, m])?;
        let db = self.values("codec.decoder.bias", &[w])?;
        LinearCodec::from_parts(
            factor,
            bins,
            DMatrix::from_row_slice(m, w, &ew),
            DVector::from_vec(eb),
            DMatrix::from_row_slice(w, m, &dw),
            DVector::from_vec(db),
        )
    }

    pub fn put_lm(&mut self, enc: &ReferenceEncoder, head: &MixtureHead) -> Result<()> {
        use crate::latent_lm::ContextEncoder;
        let theta = enc.params();
        for (name, shape, range) in enc.segments() {
            self.insert(&format!("lm.{name}"), shape, &theta[range])?;
        }
        self.insert(
            "lm.projection",
            vec![head.latent_dim(), head.lowrank_dim()],
            &row_major(&head.projection),
        )
    }

    pub fn lm(&self, shape: EncoderShape) -> Result<(ReferenceEncoder, MixtureHead)> {
        let template = ReferenceEncoder::from_params(shape, vec![0.0; shape.num_params()])?;
        let mut theta = vec![0.0; shape.num_params()];
        for (name, dims, range) in template.segments() {
            let v = self.values(&format!("lm.{name}"), &dims)?;
            theta[range].copy_from_slice(&v);
        }
        let (m, n) = (shape.latent_dim, shape.lowrank_dim);
        let proj = self.values("lm.projection", &[m, n])?;
        let head = MixtureHead::from_stored_projection(
            shape.mixtures,
            DMatrix::from_row_slice(m, n, &proj),
        )?;
        Ok((ReferenceEncoder::from_params(shape, theta)?, head))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}
