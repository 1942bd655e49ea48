//! Run configuration: presets, JSON overlays and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::frontend::{LossWeights, ALLOWED_FACTORS};
use crate::latent_lm::GenerationConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SynthData,
    TrainQuantizer,
    TrainLm,
    Eval,
    CompareRvq,
    Generate,
    InspectCheckpoint,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SynthData => "synth-data",
            Task::TrainQuantizer => "train-quantizer",
            Task::TrainLm => "train-lm",
            Task::Eval => "eval",
            Task::CompareRvq => "compare-rvq",
            Task::Generate => "generate",
            Task::InspectCheckpoint => "inspect-checkpoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperScale,
    Overfit,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper-scale" => Ok(Preset::PaperScale),
            "overfit" => Ok(Preset::Overfit),
            other => Err(Error::usage(format!("unknown preset {other:?}"))),
        }
    }
}

/// Synthetic corpus shape. Sequence `i` of the training split is drawn from
/// the stream `(seed, dataset, i)`, held-out sequences from `(seed, heldout, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub bins: usize,
    pub frames: usize,
    pub harmonics: usize,
    pub smoothness: f64,
    pub noise: f64,
    pub frame_rate: f32,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Train the encoder with the commitment loss in each arm instead of
    /// sharing a frozen random encoder.
    pub joint_training: bool,
    pub usage_checkpoints: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub preset: Preset,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub depth: usize,
    pub vocab: usize,
    pub latent_dim: usize,
    pub factor: usize,
    pub mixtures: usize,
    pub lowrank_dim: usize,
    pub window: usize,
    pub token_dim: usize,
    pub quantizer_optimizer: AdamConfig,
    pub codec_optimizer: AdamConfig,
    pub lm_optimizer: AdamConfig,
    pub loss_weights: LossWeights,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub label_smoothing: f64,
    pub data: DataConfig,
    pub metrics_every: usize,
    pub diagnostic_samples: usize,
    pub compare: CompareConfig,
    pub generation: GenerationConfig,
    pub eval_split: Split,
    /// Record elapsed seconds in metrics; off by default so artifacts are
    /// byte-reproducible.
    pub record_wall_time: bool,
    /// Test hook: saturate the EOS head before generating.
    pub force_eos: bool,
    pub tokens: Option<String>,
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    #[serde(default, skip_serializing)]
    pub quantizer_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub lm_checkpoint: Option<PathBuf>,
    /// External CLMF files used instead of the synthetic training split.
    #[serde(default, skip_serializing)]
    pub features: Vec<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        let desk = RunConfig {
            task: None,
            preset: Preset::Desk,
            seed: 7,
            steps: 20_000,
            batch_size: 32,
            depth: 8,
            vocab: 64,
            latent_dim: 16,
            factor: 8,
            mixtures: 32,
            lowrank_dim: 16,
            window: 4,
            token_dim: 16,
            quantizer_optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            codec_optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            lm_optimizer: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            label_smoothing: 0.01,
            data: DataConfig {
                bins: 16,
                frames: 64,
                harmonics: 3,
                smoothness: 4.0,
                noise: 0.1,
                frame_rate: 100.0,
                train_sequences: 64,
                heldout_sequences: 16,
            },
            metrics_every: 100,
            diagnostic_samples: 64,
            compare: CompareConfig {
                joint_training: false,
                usage_checkpoints: 5,
            },
            generation: GenerationConfig::default(),
            eval_split: Split::Heldout,
            record_wall_time: false,
            force_eos: false,
            tokens: None,
            out: default_out(),
            quantizer_checkpoint: None,
            lm_checkpoint: None,
            features: Vec::new(),
        };
        match preset {
            Preset::Desk => desk,
            Preset::PaperScale => RunConfig {
                preset: Preset::PaperScale,
                depth: 32,
                vocab: 1024,
                latent_dim: 512,
                mixtures: 2048,
                lowrank_dim: 64,
                data: DataConfig {
                    bins: 100,
                    ..desk.data
                },
                lm_optimizer: AdamConfig::default(),
                ..desk
            },
            Preset::Overfit => RunConfig {
                preset: Preset::Overfit,
                steps: 2000,
                batch_size: 4,
                // A shallow stack keeps greedy quantization of a stack's own
                // reconstruction close to idempotent, which exact
                // reproduction at temperature 0 depends on.
                depth: 4,
                vocab: 16,
                lm_optimizer: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                data: DataConfig {
                    train_sequences: 4,
                    heldout_sequences: 4,
                    ..desk.data
                },
                generation: GenerationConfig {
                    temperature: 0.0,
                    max_steps: 16,
                    ..GenerationConfig::default()
                },
                eval_split: Split::Train,
                ..desk
            },
        }
    }

    /// Preset overlaid with a JSON object. The preset is taken from
    /// `preset_override`, else from the overlay's own `preset` key, else desk.
    pub fn from_overlay(overlay: &Value, preset_override: Option<Preset>) -> Result<RunConfig> {
        let obj = overlay
            .as_object()
            .ok_or_else(|| Error::usage("config must be a JSON object"))?;
        let preset = match (preset_override, obj.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone())
                .map_err(|e| Error::usage(format!("bad preset: {e}")))?,
            (None, None) => Preset::Desk,
        };
        let mut base = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut base, overlay);
        base["preset"] = serde_json::to_value(preset)?;
        serde_json::from_value(base).map_err(|e| Error::usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("config {} is not JSON: {e}", path.display())))?;
        RunConfig::from_overlay(&value, preset_override)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("depth", self.depth),
            ("vocab", self.vocab),
            ("latent_dim", self.latent_dim),
            ("mixtures", self.mixtures),
            ("lowrank_dim", self.lowrank_dim),
            ("window", self.window),
            ("token_dim", self.token_dim),
            ("data.bins", self.data.bins),
            ("data.frames", self.data.frames),
            ("data.train_sequences", self.data.train_sequences),
            ("data.heldout_sequences", self.data.heldout_sequences),
            ("metrics_every", self.metrics_every),
            ("diagnostic_samples", self.diagnostic_samples),
            ("compare.usage_checkpoints", self.compare.usage_checkpoints),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be positive")));
            }
        }
        if !ALLOWED_FACTORS.contains(&self.factor) {
            return Err(Error::usage(format!("factor must be one of {ALLOWED_FACTORS:?}")));
        }
        if self.lowrank_dim > self.latent_dim {
            return Err(Error::usage("lowrank_dim must not exceed latent_dim"));
        }
        if self.vocab > u16::MAX as usize {
            return Err(Error::usage("vocab must fit in 16 bits"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::usage("ema_decay must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::usage("label_smoothing must lie in [0, 1)"));
        }
        for (name, opt) in [
            ("quantizer_optimizer", &self.quantizer_optimizer),
            ("codec_optimizer", &self.codec_optimizer),
            ("lm_optimizer", &self.lm_optimizer),
        ] {
            if !(opt.lr > 0.0) || !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
                return Err(Error::usage(format!("{name} has invalid hyperparameters")));
            }
        }
        self.generation.validate()?;
        Ok(())
    }

    /// Training at paper scale is out of reach on a desk machine; the preset
    /// exists so configurations and checkpoints of that shape can be loaded.
    pub fn ensure_trainable(&self) -> Result<()> {
        if self.preset == Preset::PaperScale {
            return Err(Error::usage(
                "the paper-scale preset is load-only; training is not supported at that size",
            ));
        }
        Ok(())
    }

    pub fn windows_per_sequence(&self) -> usize {
        self.data.frames.div_ceil(self.factor)
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
