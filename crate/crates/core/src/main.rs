use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use clam::harness::{run_task, Preset, RunConfig, Task};
use clam::Result;

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic training split as CLMF files.
    SynthData,
    /// Train the codec and probabilistic RVQ codebook.
    TrainQuantizer,
    /// Train the latent LM on a frozen quantizer.
    TrainLm,
    /// Reconstruction, usage and (optionally) LM bound on one split.
    Eval,
    /// Probabilistic RVQ against the EMA baseline.
    CompareRvq,
    /// Sample codes and features from a trained LM.
    Generate,
    /// Print a checkpoint manifest.
    InspectCheckpoint,
}

#[derive(clap::Args, Debug)]
struct Args {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Quantizer checkpoint for train-lm, eval and generate.
    #[arg(long, global = true)]
    quantizer: Option<PathBuf>,
    /// LM checkpoint for eval and generate.
    #[arg(long, global = true)]
    lm: Option<PathBuf>,
    /// Checkpoint to inspect.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Conditioning string for generate.
    #[arg(long, global = true)]
    tokens: Option<String>,
    #[arg(long, global = true)]
    force_eos: bool,
}

#[derive(Parser, Debug)]
#[command(name = "clam", version, about = "Probabilistic RVQ and latent mixture LM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    args: Args,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PresetArg {
    Desk,
    PaperScale,
    Overfit,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

impl From<Command> for Task {
    fn from(c: Command) -> Task {
        match c {
            Command::SynthData => Task::SynthData,
            Command::TrainQuantizer => Task::TrainQuantizer,
            Command::TrainLm => Task::TrainLm,
            Command::Eval => Task::Eval,
            Command::CompareRvq => Task::CompareRvq,
            Command::Generate => Task::Generate,
            Command::InspectCheckpoint => Task::InspectCheckpoint,
        }
    }
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperScale => Preset::PaperScale,
            PresetArg::Overfit => Preset::Overfit,
        }
    }
}

fn build_config(task: Task, args: &Args) -> Result<RunConfig> {
    let preset = args.preset.map(Preset::from);
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::from_overlay(&Value::Object(Default::default()), preset)?,
    };
    cfg.task = Some(task);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(q) = &args.quantizer {
        cfg.quantizer_checkpoint = Some(q.clone());
    }
    if let Some(lm) = &args.lm {
        cfg.lm_checkpoint = Some(lm.clone());
    }
    if let Some(t) = &args.tokens {
        cfg.tokens = Some(t.clone());
    }
    cfg.force_eos |= args.force_eos;
    Ok(cfg)
}

/// Flattens nested JSON into `key,value` rows with dotted keys.
fn csv_rows(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                csv_rows(&key, x, out);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                csv_rows(&format!("{prefix}.{i}"), x, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix},{s}")),
        other => out.push(format!("{prefix},{other}")),
    }
}

fn run(task: Task, args: &Args) -> Result<()> {
    let cfg = build_config(task, args)?;
    log::info!("{} seed={} steps={} out={}", task.name(), cfg.seed, cfg.steps, cfg.out.display());
    let summary = run_task(task, &cfg, args.checkpoint.as_deref())?;
    if task == Task::Generate {
        let steps = summary["steps"].as_u64().unwrap_or(0);
        let reason = summary["stop_reason"].as_str().unwrap_or("");
        println!("steps={steps} stop_reason={reason}");
        return Ok(());
    }
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        Format::Csv => {
            let mut rows = vec!["key,value".to_string()];
            csv_rows("", &summary, &mut rows);
            println!("{}", rows.join("\n"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command.into(), &cli.args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
