//! Quantizer + codec training and evaluation.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use super::data::{self, Corpus};
use super::metrics::{Cell, MetricsLog, QUANTIZER_COLUMNS};
use crate::error::{Error, Result};
use crate::frontend::{combined_loss, CodecOptimizer, LinearCodec, Window};
use crate::math;
use crate::quantizer::{
    codebook_loss_with_weights, depth_posteriors, quartile_depths, utilization, BatchObjective,
    CodeHistogram, CodeStack, Codebook, CodebookOptimizer, DepthUsage, EmbeddingTable,
};
use crate::rng::{self, ids};

/// Reconstruction and code statistics over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizerEval {
    pub recon_l1: f64,
    pub recon_mse: f64,
    pub commitment: f64,
    pub codebook_loss: f64,
    pub usage: Vec<DepthUsage>,
}

impl QuantizerEval {
    pub fn quartile_usage(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (q, slot) in out.iter_mut().enumerate() {
            let r = quartile_depths(self.usage.len(), q);
            let n = r.len() as f64;
            *slot = self.usage[r].iter().map(|u| u.usage).sum::<f64>() / n;
        }
        out
    }
}

pub fn initial_codebook(cfg: &RunConfig) -> Result<Codebook> {
    Codebook::random(
        cfg.depth,
        cfg.vocab,
        cfg.latent_dim,
        &mut rng::stream(cfg.seed, &[ids::CODEBOOK_INIT]),
    )
}

pub fn initial_codec(cfg: &RunConfig) -> Result<LinearCodec> {
    LinearCodec::new(
        cfg.factor,
        cfg.data.bins,
        cfg.latent_dim,
        &mut rng::stream(cfg.seed, &[ids::CODEC_INIT]),
    )
}

/// Window indices of one training step.
pub fn batch_indices(cfg: &RunConfig, step: usize, population: usize) -> Vec<usize> {
    if cfg.batch_size >= population {
        return (0..population).collect();
    }
    let mut r = rng::stream(cfg.seed, &[ids::BATCHES, step as u64]);
    (0..cfg.batch_size)
        .map(|_| r.random_range(0..population))
        .collect()
}

/// Evaluates reconstructions of `windows` through `table`; the codebook
/// loss uses `sigma` with the same table.
pub fn evaluate_windows(
    codec: &LinearCodec,
    table: &EmbeddingTable,
    log_sigma: f64,
    windows: &[Window],
) -> Result<QuantizerEval> {
    if windows.is_empty() {
        return Err(Error::usage("no windows to evaluate"));
    }
    let sigma = log_sigma.exp();
    let mut hist = CodeHistogram::new(table.depth(), table.vocab());
    let (mut l1, mut l2, mut entries) = (0.0, 0.0, 0usize);
    let (mut commit, mut cb_loss) = (0.0, 0.0);
    for w in windows {
        let z = codec.encode_window(&w.data);
        let q = table.quantize(&z)?;
        hist.observe(&q.stack);
        let y = codec.decode_latent(&q.quantized);
        for i in 0..w.valid_frames * codec.bins {
            let d = y[i] - w.data[i];
            l1 += d.abs();
            l2 += d * d;
        }
        entries += w.valid_frames * codec.bins;
        commit += (&z - &q.quantized).norm_squared();
        let weights = depth_posteriors(table, sigma, &z, &q.stack);
        cb_loss += stack_loss(table, log_sigma, &z, &q.stack, &weights);
    }
    let n = windows.len() as f64;
    Ok(QuantizerEval {
        recon_l1: l1 / entries as f64,
        recon_mse: l2 / entries as f64,
        commitment: commit / (n * codec.latent_dim() as f64),
        codebook_loss: cb_loss / n,
        usage: utilization(&hist)?,
    })
}

fn stack_loss(
    table: &EmbeddingTable,
    log_sigma: f64,
    z: &DVector<f64>,
    stack: &CodeStack,
    weights: &[Vec<f64>],
) -> f64 {
    let m = z.len() as f64;
    let sigma2 = (2.0 * log_sigma).exp();
    let zhat = table.reconstruct(stack);
    let base = z - zhat;
    let mut total = 0.0;
    for (d, &c_star) in stack.codes().iter().enumerate() {
        let mut target = base.clone();
        for (t, e) in target.iter_mut().zip(table.embedding(d, c_star)) {
            *t += e;
        }
        for (c, &w) in weights[d].iter().enumerate() {
            let sq = math::sq_dist(target.as_slice(), table.embedding(d, c));
            total += w * (sq / (2.0 * sigma2) + 0.5 * m * (math::LN_2PI + 2.0 * log_sigma));
        }
    }
    total
}

pub fn evaluate_quantizer(
    codec: &LinearCodec,
    cb: &Codebook,
    windows: &[Window],
) -> Result<QuantizerEval> {
    evaluate_windows(codec, &cb.embeddings(), cb.log_sigma(), windows)
}

/// Outcome of a quantizer training run.
#[derive(Debug, Clone)]
pub struct QuantizerRun {
    pub codebook: Codebook,
    pub codec: LinearCodec,
    pub metrics: MetricsLog,
    pub initial: QuantizerEval,
    pub last: QuantizerEval,
}

impl QuantizerRun {
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "initial": self.initial,
            "final": self.last,
            "deep_quartile_usage": self.last.quartile_usage()[3],
        })
    }
}

fn numeric_abort(cfg: &RunConfig, step: usize, batch_index: usize, detail: String, z: &[DVector<f64>]) -> Error {
    let dump = json!({
        "step": step,
        "batch_index": batch_index,
        "detail": detail,
        "latents": z.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
    });
    if std::fs::create_dir_all(&cfg.out).is_ok() {
        let _ = std::fs::write(
            cfg.out.join("numeric_dump.json"),
            serde_json::to_vec_pretty(&dump).unwrap_or_default(),
        );
    }
    Error::Numeric {
        step,
        batch_index,
        detail,
    }
}

/// Alternating updates: codebook step on its own objective, then a codec
/// step on reconstruction plus commitment with the quantized latents held
/// fixed. Metrics on the held-out split every `metrics_every` steps.
pub fn run_train_quantizer(cfg: &RunConfig) -> Result<QuantizerRun> {
    cfg.validate()?;
    cfg.ensure_trainable()?;
    let train = data::training_corpus(cfg)?;
    let heldout = data::synth_corpus(cfg, super::config::Split::Heldout)?;
    train_on(cfg, &train, &heldout)
}

pub fn train_on(cfg: &RunConfig, train: &Corpus, heldout: &Corpus) -> Result<QuantizerRun> {
    let mut cb = initial_codebook(cfg)?;
    let mut codec = initial_codec(cfg)?;
    let train_windows = train.windows(&codec)?;
    let eval_windows = heldout.windows(&codec)?;
    let mut cb_opt = CodebookOptimizer::new(&cb, cfg.quantizer_optimizer);
    let mut codec_opt = CodecOptimizer::new(&codec, cfg.codec_optimizer);
    let mut metrics = MetricsLog::new(&QUANTIZER_COLUMNS);
    let initial = evaluate_quantizer(&codec, &cb, &eval_windows)?;
    let mut last = initial.clone();
    let clock = Instant::now();

    for step in 0..cfg.steps {
        let idx = batch_indices(cfg, step, train_windows.len());
        let windows: Vec<Window> = idx.iter().map(|&i| train_windows[i].clone()).collect();
        let z: Vec<DVector<f64>> = windows.iter().map(|w| codec.encode_window(&w.data)).collect();
        if let Some(bad) = z.iter().position(|v| !math::all_finite(v)) {
            return Err(numeric_abort(cfg, step, bad, "non-finite latent".into(), &z));
        }
        let table = cb.embeddings();
        let quantized: Vec<_> = z.iter().map(|v| table.quantize(v)).collect::<Result<_>>()?;
        let pairs: Vec<_> = z.iter().zip(&quantized).map(|(v, q)| (v, &q.stack)).collect();
        let obj = BatchObjective::evaluate(&cb, &table, &pairs)?;
        let zhat: Vec<DVector<f64>> = quantized.iter().map(|q| q.quantized.clone()).collect();
        let codec_loss = combined_loss(&codec, &windows, &zhat, cfg.loss_weights)?;
        if !obj.loss.is_finite() || !codec_loss.total.is_finite() {
            let bad = (0..z.len())
                .find(|&i| {
                    let w = depth_posteriors(&table, cb.sigma(), &z[i], &quantized[i].stack);
                    !codebook_loss_with_weights(&cb, &z[i], &quantized[i].stack, &w)
                        .map(f64::is_finite)
                        .unwrap_or(false)
                })
                .unwrap_or(0);
            return Err(numeric_abort(
                cfg,
                step,
                bad,
                format!("codebook loss {} codec loss {}", obj.loss, codec_loss.total),
                &z,
            ));
        }
        cb_opt.step(&mut cb, &obj.grad);
        codec_opt.step(&mut codec, &codec_loss.grad);

        let done = step + 1;
        if done % cfg.metrics_every == 0 || done == cfg.steps {
            last = evaluate_quantizer(&codec, &cb, &eval_windows)?;
            let q = last.quartile_usage();
            let wall = if cfg.record_wall_time {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let total = cfg.loss_weights.recon * last.recon_l1
                + cfg.loss_weights.commitment * last.commitment
                + last.codebook_loss;
            metrics.push(
                done,
                vec![
                    Cell::from(done),
                    total.into(),
                    last.recon_l1.into(),
                    last.commitment.into(),
                    last.codebook_loss.into(),
                    q[0].into(),
                    q[1].into(),
                    q[2].into(),
                    q[3].into(),
                    wall.into(),
                ],
            )?;
        }
    }
    Ok(QuantizerRun {
        codebook: cb,
        codec,
        metrics,
        initial,
        last,
    })
}

pub fn quantizer_checkpoint(cfg: &RunConfig, run: &QuantizerRun) -> Result<super::Checkpoint> {
    let mut ck = super::Checkpoint::new("quantizer", cfg, run.summary())?;
    ck.put_codebook(&run.codebook)?;
    ck.put_codec(&run.codec)?;
    Ok(ck)
}

pub fn write_quantizer_artifacts(cfg: &RunConfig, run: &QuantizerRun, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    quantizer_checkpoint(cfg, run)?.save(&out.join("model.ckpt"))?;
    run.metrics.save(&out.join("metrics.csv"))?;
    super::write_json(&out.join("summary.json"), &run.summary())
}
