//! Latent LM training, generation and evaluation.

use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{self, Corpus};
use super::metrics::{Cell, MetricsLog, LM_COLUMNS};
use super::quantizer_run::{batch_indices, evaluate_quantizer};
use crate::error::{Error, Result};
use crate::frontend::{write_codes, write_features, CodeSequence, FeatureSequence, LinearCodec};
use crate::latent_lm::{
    code_likelihood_diagnostic, generate, lm_objective, lm_train_step, EncoderShape,
    FrozenQuantizer, Generation, LmExample, LmOptimizer, LossBreakdown, MixtureHead,
    ReferenceEncoder,
};
use crate::quantizer::{quartile_depths, utilization, CodeHistogram, Codebook};
use crate::rng::{self, ids};

pub fn encoder_shape(cfg: &RunConfig) -> EncoderShape {
    EncoderShape {
        mixtures: cfg.mixtures,
        lowrank_dim: cfg.lowrank_dim,
        latent_dim: cfg.latent_dim,
        token_dim: cfg.token_dim,
        window: cfg.window,
    }
}

/// Trained quantizer state restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedQuantizer {
    pub config: RunConfig,
    pub codebook: Codebook,
    pub codec: LinearCodec,
}

pub fn load_quantizer(ck: &Checkpoint) -> Result<LoadedQuantizer> {
    ck.expect_kind("quantizer")?;
    let config = ck.run_config()?;
    let codebook = ck.codebook()?;
    let codec = ck.codec(config.factor, config.data.bins)?;
    Ok(LoadedQuantizer {
        config,
        codebook,
        codec,
    })
}

fn check_compatible(cfg: &RunConfig, q: &LoadedQuantizer) -> Result<()> {
    if cfg.latent_dim != q.codebook.dim() || cfg.data.bins != q.codec.bins {
        return Err(Error::usage(format!(
            "config (m={}, bins={}) does not match the quantizer checkpoint (m={}, bins={})",
            cfg.latent_dim,
            cfg.data.bins,
            q.codebook.dim(),
            q.codec.bins
        )));
    }
    Ok(())
}

/// Encodes and quantizes every sequence.
pub fn lm_examples(q: &LoadedQuantizer, corpus: &Corpus) -> Result<Vec<LmExample>> {
    let table = q.codebook.embeddings();
    corpus
        .sequences
        .iter()
        .zip(&corpus.tokens)
        .map(|(seq, tokens)| {
            let stacks = q
                .codec
                .encode(seq)?
                .iter()
                .map(|z| table.quantize(z).map(|r| r.stack))
                .collect::<Result<Vec<_>>>()?;
            Ok(LmExample {
                tokens: tokens.clone(),
                stacks,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LmRun {
    pub encoder: ReferenceEncoder,
    pub head: MixtureHead,
    pub metrics: MetricsLog,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
    pub b_diagnostic: f64,
    pub examples: Vec<LmExample>,
}

impl LmRun {
    pub fn summary(&self) -> Value {
        json!({
            "initial": self.initial,
            "final": self.last,
            "b_diagnostic": self.b_diagnostic,
        })
    }
}

pub fn run_train_lm(cfg: &RunConfig, quantizer: &LoadedQuantizer) -> Result<LmRun> {
    cfg.validate()?;
    cfg.ensure_trainable()?;
    check_compatible(cfg, quantizer)?;
    let corpus = data::training_corpus(cfg)?;
    let examples = lm_examples(quantizer, &corpus)?;
    let frozen = FrozenQuantizer::new(&quantizer.codebook);

    let mut r = rng::stream(cfg.seed, &[ids::LM_INIT]);
    let mut encoder = ReferenceEncoder::new(encoder_shape(cfg), &mut r)?;
    let mut head = MixtureHead::new(cfg.mixtures, cfg.latent_dim, cfg.lowrank_dim, &mut r)?;
    let mut opt = LmOptimizer::new(&encoder, &head, cfg.lm_optimizer);

    let all_stacks: Vec<_> = examples.iter().flat_map(|e| e.stacks.iter().cloned()).collect();
    let b_diagnostic = code_likelihood_diagnostic(
        &frozen,
        &all_stacks,
        cfg.diagnostic_samples,
        &mut rng::stream(cfg.seed, &[ids::DIAGNOSTIC]),
    )?;
    let mut hist = CodeHistogram::new(frozen.table.depth(), frozen.table.vocab());
    for s in &all_stacks {
        hist.observe(s);
    }
    let usage = utilization(&hist)?;
    let quartiles: Vec<f64> = (0..4)
        .map(|q| {
            let r = quartile_depths(usage.len(), q);
            let n = r.len() as f64;
            usage[r].iter().map(|u| u.usage).sum::<f64>() / n
        })
        .collect();

    let full = |enc: &ReferenceEncoder, head: &MixtureHead| -> Result<LossBreakdown> {
        Ok(lm_objective(enc, head, &frozen, &examples, cfg.label_smoothing, None)?.loss)
    };
    let initial = full(&encoder, &head)?;
    let mut last = initial;
    let mut metrics = MetricsLog::new(&LM_COLUMNS);
    let clock = Instant::now();

    for step in 0..cfg.steps {
        let idx = batch_indices(cfg, step, examples.len());
        let batch: Vec<LmExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        lm_train_step(&mut encoder, &mut head, &frozen, &batch, cfg.label_smoothing, &mut opt)
            .map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::Numeric {
                    step,
                    batch_index: idx.first().copied().unwrap_or(0),
                    detail,
                },
                other => other,
            })?;
        let done = step + 1;
        if done % cfg.metrics_every == 0 || done == cfg.steps {
            last = full(&encoder, &head)?;
            let wall = if cfg.record_wall_time {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            };
            metrics.push(
                done,
                vec![
                    Cell::from(done),
                    last.total.into(),
                    last.vb.into(),
                    last.eos.into(),
                    b_diagnostic.into(),
                    quartiles[0].into(),
                    quartiles[1].into(),
                    quartiles[2].into(),
                    quartiles[3].into(),
                    wall.into(),
                ],
            )?;
        }
    }
    Ok(LmRun {
        encoder,
        head,
        metrics,
        initial,
        last,
        b_diagnostic,
        examples,
    })
}

pub fn lm_checkpoint(cfg: &RunConfig, run: &LmRun, quantizer: &LoadedQuantizer) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("lm", cfg, run.summary())?;
    ck.put_lm(&run.encoder, &run.head)?;
    ck.put_codebook(&quantizer.codebook)?;
    Ok(ck)
}

pub fn write_lm_artifacts(
    cfg: &RunConfig,
    run: &LmRun,
    quantizer: &LoadedQuantizer,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    lm_checkpoint(cfg, run, quantizer)?.save(&out.join("model.ckpt"))?;
    run.metrics.save(&out.join("metrics.csv"))?;
    super::write_json(&out.join("summary.json"), &run.summary())
}

pub fn load_lm(ck: &Checkpoint) -> Result<(RunConfig, ReferenceEncoder, MixtureHead)> {
    ck.expect_kind("lm")?;
    let config = ck.run_config()?;
    let (enc, head) = ck.lm(encoder_shape(&config))?;
    Ok((config, enc, head))
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub generation: Generation,
    pub codes: CodeSequence,
    pub features: FeatureSequence,
}

pub fn run_generate(
    cfg: &RunConfig,
    lm: &Checkpoint,
    quantizer: &LoadedQuantizer,
    tokens: &str,
) -> Result<GenerateOutput> {
    cfg.generation.validate()?;
    if tokens.is_empty() {
        return Err(Error::usage("token string must be non-empty"));
    }
    let (lm_cfg, mut enc, head) = load_lm(lm)?;
    check_compatible(&lm_cfg, quantizer)?;
    if cfg.force_eos {
        enc.set_eos_bias(1e3);
    }
    let frozen = FrozenQuantizer::new(&quantizer.codebook);
    let mut r = rng::stream(cfg.seed, &[ids::SAMPLING]);
    let generation = generate(&enc, &head, &frozen, tokens.as_bytes(), &cfg.generation, &mut r)?;
    let codes = CodeSequence::from_stacks(&generation.stacks, quantizer.codebook.vocab())?;
    let frames = generation.latents.len() * quantizer.codec.factor;
    let features = quantizer.codec.decode(
        &generation.latents,
        Some(frames),
        quantizer.config.data.frame_rate,
    )?;
    Ok(GenerateOutput {
        generation,
        codes,
        features,
    })
}

pub fn write_generate_artifacts(out_dir: &Path, g: &GenerateOutput) -> Result<Value> {
    std::fs::create_dir_all(out_dir)?;
    write_codes(&out_dir.join("codes.clmc"), &g.codes)?;
    write_features(&out_dir.join("features.clmf"), &g.features)?;
    let summary = json!({
        "steps": g.generation.stacks.len(),
        "stop_reason": g.generation.stop_reason,
    });
    super::write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reconstruction, code usage and (with an LM) the bound on one split.
pub fn run_eval(cfg: &RunConfig, quantizer: &LoadedQuantizer, lm: Option<&Checkpoint>) -> Result<Value> {
    cfg.validate()?;
    check_compatible(cfg, quantizer)?;
    let corpus = data::corpus(cfg, cfg.eval_split)?;
    if corpus.is_empty() {
        return Err(Error::usage("evaluation dataset is empty"));
    }
    let windows = corpus.windows(&quantizer.codec)?;
    let q = evaluate_quantizer(&quantizer.codec, &quantizer.codebook, &windows)?;
    let mut report = json!({
        "split": cfg.eval_split,
        "sequences": corpus.len(),
        "recon_l1": q.recon_l1,
        "recon_mse": q.recon_mse,
        "commitment": q.commitment,
        "codebook_loss": q.codebook_loss,
        "usage": q.usage,
    });
    if let Some(ck) = lm {
        let (lm_cfg, enc, head) = load_lm(ck)?;
        check_compatible(&lm_cfg, quantizer)?;
        let examples = lm_examples(quantizer, &corpus)?;
        let frozen = FrozenQuantizer::new(&quantizer.codebook);
        let obj = lm_objective(&enc, &head, &frozen, &examples, lm_cfg.label_smoothing, None)?;
        let steps: usize = examples.iter().map(|e| e.stacks.len()).sum();
        let mut per_step_vb = 0.0;
        for ex in &examples {
            let one = lm_objective(&enc, &head, &frozen, std::slice::from_ref(ex), lm_cfg.label_smoothing, None)?;
            per_step_vb += one.loss.vb * ex.stacks.len() as f64;
        }
        report["lm"] = json!({
            "loss": obj.loss.total,
            "vb": obj.loss.vb,
            "eos": obj.loss.eos,
            "mean_step_vb": per_step_vb / steps as f64,
        });
    }
    Ok(report)
}
