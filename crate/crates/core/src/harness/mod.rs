//! Seeded experiment orchestration behind the command line.

mod checkpoint;
mod compare;
mod config;
mod data;
mod lm_run;
mod metrics;
mod quantizer_run;

pub use checkpoint::{Checkpoint, Manifest, Tensor, TensorEntry, CHECKPOINT_MAGIC, SCHEMA_VERSION};
pub use compare::{checkpoint_steps, run_compare, Arm, ArmReport, CompareReport};
pub use config::{CompareConfig, DataConfig, Preset, RunConfig, Split, Task};
pub use data::{corpus, synth_corpus, synth_config, token_string, training_corpus, Corpus};
pub use lm_run::{
    encoder_shape, lm_checkpoint, lm_examples, load_lm, load_quantizer, run_eval, run_generate,
    run_train_lm, write_generate_artifacts, write_lm_artifacts, GenerateOutput, LmRun,
    LoadedQuantizer,
};
pub use metrics::{Cell, MetricsLog, COMPARE_COLUMNS, LM_COLUMNS, QUANTIZER_COLUMNS};
pub use quantizer_run::{
    batch_indices, evaluate_quantizer, evaluate_windows, initial_codebook, initial_codec,
    quantizer_checkpoint, run_train_quantizer, train_on, write_quantizer_artifacts,
    QuantizerEval, QuantizerRun,
};

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::frontend::{write_atomic, write_features};

pub(crate) fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::usage(format!("{what} checkpoint path is required")))
}

/// Runs one task and returns the summary that is also written to
/// `summary.json` (where the task writes one).
pub fn run_task(task: Task, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    match task {
        Task::SynthData => {
            let corpus = synth_corpus(cfg, Split::Train)?;
            std::fs::create_dir_all(out)?;
            let mut files = Vec::new();
            for (i, seq) in corpus.sequences.iter().enumerate() {
                let name = format!("seq_{i:04}.clmf");
                write_features(&out.join(&name), seq)?;
                files.push(json!({
                    "file": name,
                    "tokens": String::from_utf8_lossy(&corpus.tokens[i]),
                }));
            }
            let summary = json!({ "sequences": files });
            write_json(&out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Task::TrainQuantizer => {
            let run = run_train_quantizer(cfg)?;
            write_quantizer_artifacts(cfg, &run, out)?;
            Ok(run.summary())
        }
        Task::TrainLm => {
            let q = load_quantizer(&Checkpoint::load(&required(&cfg.quantizer_checkpoint, "quantizer")?)?)?;
            let run = run_train_lm(cfg, &q)?;
            write_lm_artifacts(cfg, &run, &q, out)?;
            Ok(run.summary())
        }
        Task::CompareRvq => {
            let (report, log) = run_compare(cfg)?;
            std::fs::create_dir_all(out)?;
            log.save(&out.join("metrics.csv"))?;
            let summary = report.to_json();
            write_json(&out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Task::Generate => {
            let q = load_quantizer(&Checkpoint::load(&required(&cfg.quantizer_checkpoint, "quantizer")?)?)?;
            let lm = Checkpoint::load(&required(&cfg.lm_checkpoint, "lm")?)?;
            let tokens = cfg
                .tokens
                .as_deref()
                .ok_or_else(|| Error::usage("generate needs a token string"))?;
            let g = run_generate(cfg, &lm, &q, tokens)?;
            write_generate_artifacts(out, &g)
        }
        Task::Eval => {
            let q = load_quantizer(&Checkpoint::load(&required(&cfg.quantizer_checkpoint, "quantizer")?)?)?;
            let lm = match &cfg.lm_checkpoint {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            let report = run_eval(cfg, &q, lm.as_ref())?;
            std::fs::create_dir_all(out)?;
            write_json(&out.join("summary.json"), &report)?;
            Ok(report)
        }
        Task::InspectCheckpoint => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .or_else(|| cfg.lm_checkpoint.clone())
                .or_else(|| cfg.quantizer_checkpoint.clone())
                .ok_or_else(|| Error::usage("inspect-checkpoint needs a checkpoint path"))?;
            let ck = Checkpoint::load(&path)?;
            Ok(serde_json::to_value(ck.manifest())?)
        }
    }
}
