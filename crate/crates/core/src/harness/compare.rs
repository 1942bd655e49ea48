//! Probabilistic RVQ against the EMA baseline on identical latent streams.

use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Split};
use super::data;
use super::metrics::{Cell, MetricsLog, COMPARE_COLUMNS};
use super::quantizer_run::{batch_indices, evaluate_windows, initial_codebook, initial_codec, QuantizerEval};
use crate::error::Result;
use crate::frontend::{combined_loss, CodecOptimizer, LinearCodec, LossWeights, Window};
use crate::quantizer::{
    deep_quartile_mean, BatchObjective, Codebook, CodebookOptimizer, EmaQuantizer, EmbeddingTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Probabilistic,
    Ema,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Probabilistic => "probabilistic",
            Arm::Ema => "ema",
        }
    }
}

enum ArmQuantizer {
    Probabilistic {
        codebook: Codebook,
        optimizer: CodebookOptimizer,
    },
    Ema(EmaQuantizer),
}

struct ArmState {
    arm: Arm,
    quantizer: ArmQuantizer,
    codec: LinearCodec,
    optimizer: CodecOptimizer,
    hasher: Sha256,
}

impl ArmState {
    fn table(&self) -> EmbeddingTable {
        match &self.quantizer {
            ArmQuantizer::Probabilistic { codebook, .. } => codebook.embeddings(),
            ArmQuantizer::Ema(q) => q.table().clone(),
        }
    }

    fn log_sigma(&self) -> f64 {
        match &self.quantizer {
            ArmQuantizer::Probabilistic { codebook, .. } => codebook.log_sigma(),
            ArmQuantizer::Ema(_) => 0.0,
        }
    }

    fn step(&mut self, windows: &[Window], joint: bool, weights: LossWeights) -> Result<()> {
        let z: Vec<DVector<f64>> = windows
            .iter()
            .map(|w| self.codec.encode_window(&w.data))
            .collect();
        for v in &z {
            for x in v.iter() {
                self.hasher.update(x.to_le_bytes());
            }
        }
        let table = self.table();
        let quantized: Vec<_> = z.iter().map(|v| table.quantize(v)).collect::<Result<_>>()?;
        match &mut self.quantizer {
            ArmQuantizer::Probabilistic {
                codebook,
                optimizer,
            } => {
                let pairs: Vec<_> = z.iter().zip(&quantized).map(|(v, q)| (v, &q.stack)).collect();
                let obj = BatchObjective::evaluate(codebook, &table, &pairs)?;
                optimizer.step(codebook, &obj.grad);
            }
            ArmQuantizer::Ema(q) => {
                let batch: Vec<_> = z
                    .iter()
                    .zip(&quantized)
                    .map(|(v, r)| (v.clone(), r.stack.clone()))
                    .collect();
                q.update(&batch)?;
            }
        }
        let zhat: Vec<DVector<f64>> = quantized.into_iter().map(|q| q.quantized).collect();
        let loss = combined_loss(&self.codec, windows, &zhat, weights)?;
        if joint {
            self.optimizer.step(&mut self.codec, &loss.grad);
        } else {
            self.optimizer.step_decoder(&mut self.codec, &loss.grad);
        }
        Ok(())
    }

    fn evaluate(&self, windows: &[Window]) -> Result<QuantizerEval> {
        evaluate_windows(&self.codec, &self.table(), self.log_sigma(), windows)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub checkpoints: Vec<(usize, QuantizerEval)>,
    pub deep_quartile_usage: f64,
    pub final_recon_l1: f64,
    pub stream_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub seed: u64,
    pub steps: usize,
    pub joint_training: bool,
    pub probabilistic: ArmReport,
    pub ema: ArmReport,
    pub streams_identical: bool,
    pub usage_pass: bool,
    pub recon_pass: bool,
}

impl CompareReport {
    pub fn to_json(&self) -> Value {
        json!({
            "seed": self.seed,
            "steps": self.steps,
            "joint_training": self.joint_training,
            "streams_identical": self.streams_identical,
            "usage_pass": self.usage_pass,
            "recon_pass": self.recon_pass,
            "probabilistic": arm_json(&self.probabilistic),
            "ema": arm_json(&self.ema),
        })
    }
}

fn arm_json(r: &ArmReport) -> Value {
    json!({
        "deep_quartile_usage": r.deep_quartile_usage,
        "final_recon_l1": r.final_recon_l1,
        "stream_hash": r.stream_hash,
        "checkpoints": r.checkpoints.iter().map(|(s, e)| json!({
            "step": s,
            "recon_l1": e.recon_l1,
            "usage": e.usage.iter().map(|u| u.usage).collect::<Vec<_>>(),
            "perplexity": e.usage.iter().map(|u| u.perplexity).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

/// Step counts at which usage is recorded: `k` evenly spaced points ending
/// at `steps`.
pub fn checkpoint_steps(steps: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|i| i * steps / k).collect()
}

pub fn run_compare(cfg: &RunConfig) -> Result<(CompareReport, MetricsLog)> {
    cfg.validate()?;
    cfg.ensure_trainable()?;
    let train = data::training_corpus(cfg)?;
    let heldout = data::synth_corpus(cfg, Split::Heldout)?;
    let cb = initial_codebook(cfg)?;
    let codec = initial_codec(cfg)?;
    let train_windows = train.windows(&codec)?;
    let eval_windows = heldout.windows(&codec)?;

    let mut arms = vec![
        ArmState {
            arm: Arm::Probabilistic,
            quantizer: ArmQuantizer::Probabilistic {
                optimizer: CodebookOptimizer::new(&cb, cfg.quantizer_optimizer),
                codebook: cb.clone(),
            },
            optimizer: CodecOptimizer::new(&codec, cfg.codec_optimizer),
            codec: codec.clone(),
            hasher: Sha256::new(),
        },
        ArmState {
            arm: Arm::Ema,
            quantizer: ArmQuantizer::Ema(EmaQuantizer::from_codebook(
                &cb,
                cfg.ema_decay,
                cfg.ema_epsilon,
            )?),
            optimizer: CodecOptimizer::new(&codec, cfg.codec_optimizer),
            codec,
            hasher: Sha256::new(),
        },
    ];

    let marks = checkpoint_steps(cfg.steps, cfg.compare.usage_checkpoints);
    let mut log = MetricsLog::new(&COMPARE_COLUMNS);
    let mut records = vec![Vec::new(), Vec::new()];
    let clock = Instant::now();
    let mut next_mark = 0;
    type Records = Vec<Vec<(usize, QuantizerEval)>>;
    let record = |done: usize,
                  arms: &[ArmState],
                  records: &mut Records,
                  log: &mut MetricsLog,
                  next: &mut usize|
     -> Result<()> {
        while *next < marks.len() && marks[*next] == done {
            for (a, arm) in arms.iter().enumerate() {
                let e = arm.evaluate(&eval_windows)?;
                let wall = if cfg.record_wall_time {
                    clock.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                for (d, u) in e.usage.iter().enumerate() {
                    log.push(
                        done,
                        vec![
                            Cell::from(arm.arm.name()),
                            done.into(),
                            d.into(),
                            u.usage.into(),
                            u.perplexity.into(),
                            e.recon_l1.into(),
                            wall.into(),
                        ],
                    )?;
                }
                records[a].push((done, e));
            }
            *next += 1;
        }
        Ok(())
    };

    record(0, &arms, &mut records, &mut log, &mut next_mark)?;
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg, step, train_windows.len());
        let windows: Vec<Window> = idx.iter().map(|&i| train_windows[i].clone()).collect();
        for arm in &mut arms {
            arm.step(&windows, cfg.compare.joint_training, cfg.loss_weights)?;
        }
        record(step + 1, &arms, &mut records, &mut log, &mut next_mark)?;
    }

    let mut reports = arms.into_iter().zip(records).map(|(arm, checkpoints)| {
        let last = &checkpoints.last().expect("at least one checkpoint").1;
        ArmReport {
            arm: arm.arm,
            deep_quartile_usage: deep_quartile_mean(&last.usage),
            final_recon_l1: last.recon_l1,
            stream_hash: hex::encode(arm.hasher.finalize()),
            checkpoints,
        }
    });
    let probabilistic = reports.next().expect("two arms");
    let ema = reports.next().expect("two arms");
    let report = CompareReport {
        seed: cfg.seed,
        steps: cfg.steps,
        joint_training: cfg.compare.joint_training,
        streams_identical: probabilistic.stream_hash == ema.stream_hash,
        usage_pass: probabilistic.deep_quartile_usage >= ema.deep_quartile_usage,
        recon_pass: probabilistic.final_recon_l1 <= ema.final_recon_l1,
        probabilistic,
        ema,
    };
    Ok((report, log))
}
