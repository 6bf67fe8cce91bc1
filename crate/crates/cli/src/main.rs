//! `dvbf`: data generation, training, evaluation and exports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvbf_core::environments::{generate_dataset, load_split, read_container, EnvKind, Manifest};
use dvbf_core::evaluation::{evaluate, export_latents, export_rollouts, write_report, EvalReport};
use dvbf_core::model::checkpoint::{self, CheckpointManifest};
use dvbf_core::model::Model;
use dvbf_core::trainer::{preset, train, OptimizerKind, TrainConfig, PRESETS};
use dvbf_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dvbf", version, about = "Deep variational Bayes filters on pixel sequences")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate train/val/test splits for an environment.
    GenerateData(GenerateArgs),
    /// Train a model from a JSON config or a named preset.
    Train(TrainArgs),
    /// Latent regressions and the held-out bound, written as JSON.
    Evaluate(EvaluateArgs),
    /// Ground truth, filtered and generative frames for test sequences.
    Rollout(RolloutArgs),
    /// Latent CSV, rollout strips and the evaluation report in one directory.
    ExportFigures(ExportArgs),
    /// Print a built-in training config as JSON.
    ShowPreset {
        /// One of the built-in names; omit to list them.
        name: Option<String>,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// pendulum, ball or two-balls.
    #[arg(long)]
    env: EnvKind,
    /// Output directory; receives train/, val/ and test/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequences per split.
    #[arg(long, default_value_t = 500)]
    sequences: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 15)]
    steps: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in config name.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    anneal_iterations: Option<u64>,
    #[arg(long)]
    anneal_period: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    val_every: Option<u64>,
    /// Split each batch into this many gradient shards.
    #[arg(long)]
    shards: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    report: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Seed for latent samples and process noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Generated steps; at least the sequence length.
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated test sequence indices.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    sequences: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    sequences: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error kind=invalid_argument message=\"cannot set thread count: {e}\"");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData(a) => {
            if a.sequences == 0 || a.steps == 0 {
                return Err(Error::InvalidArgument("--sequences and --steps must be positive".into()));
            }
            generate_dataset(a.env, a.sequences, a.steps, a.seed, &a.out)?;
            println!("wrote {} ({} sequences x {} steps per split)", a.out.display(), a.sequences, a.steps);
            Ok(())
        }
        Command::Train(a) => run_train(a),
        Command::ShowPreset { name: None } => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::ShowPreset { name: Some(name) } => {
            let cfg = named_preset(&name)?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
        Command::Evaluate(a) => {
            let (model, manifest) = load_checkpoint(&a.checkpoint)?;
            let report = evaluate_split(&model, &manifest, &a.data, &a.split, a.seed)?;
            write_report(&a.report, &report)?;
            for e in &report.regression.entries {
                println!("r2 {} {:.4}", e.target, e.fit.r2);
            }
            println!(
                "bound {:.3} recon {:.3} kl {:.3}",
                report.elbo.bound, report.elbo.recon, report.elbo.kl
            );
            Ok(())
        }
        Command::Rollout(a) => {
            let (model, manifest) = load_checkpoint(&a.checkpoint)?;
            let batch = load_for(&a.data, &a.split, manifest.env)?;
            let s = export_rollouts(&model, &batch, &a.sequences, a.horizon, a.seed, &a.out)?;
            let last = s.observed_steps - 1;
            println!(
                "wrote {} sequences; mse at step {last}: filtered {:.5} generative {:.5}",
                s.sequences.len(),
                s.mse_filtered[last],
                s.mse_generative[last]
            );
            Ok(())
        }
        Command::ExportFigures(a) => {
            let (model, manifest) = load_checkpoint(&a.checkpoint)?;
            let batch = load_for(&a.data, &a.split, manifest.env)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            let train_size = train_size(&a.data, batch.n);
            let rows = export_latents(&model, &batch, a.seed, train_size, &a.out.join("latents.csv"))?;
            export_rollouts(&model, &batch, &a.sequences, a.horizon, a.seed, &a.out.join("rollouts"))?;
            let report = evaluate_split(&model, &manifest, &a.data, &a.split, a.seed)?;
            write_report(&a.out.join("report.json"), &report)?;
            println!("wrote {} ({rows} latent rows)", a.out.display());
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(name)) => named_preset(name)?,
        (None, None) => unreachable!("clap requires one of --config/--preset"),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.step_rate {
        cfg.optimizer.step_rate = v;
    }
    if let Some(v) = &a.optimizer {
        cfg.optimizer.kind = match v.as_str() {
            "adadelta" => OptimizerKind::Adadelta,
            "adam" => OptimizerKind::Adam,
            other => return Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        };
    }
    if let Some(v) = a.anneal_iterations {
        cfg.anneal_iterations = v;
    }
    if let Some(v) = a.anneal_period {
        cfg.anneal_period = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    if let Some(v) = a.shards {
        cfg.shards = v;
    }
    cfg.validate()?;

    let train_set = load_for(&a.data, "train", cfg.env)?;
    let val_path = a.data.join("val");
    let val_set = if val_path.exists() { Some(read_container(&val_path)?) } else { None };
    let out = train(&cfg, &train_set, val_set.as_ref(), &a.out, a.resume)?;
    match out.validation.last() {
        Some(v) => println!(
            "trained {} iterations; validation bound {:.3} (recon {:.3}, kl {:.3})",
            out.iterations,
            v.elbo.bound(),
            v.elbo.recon,
            v.elbo.kl()
        ),
        None => println!("trained {} iterations", out.iterations),
    }
    Ok(())
}

fn named_preset(name: &str) -> Result<TrainConfig> {
    preset(name).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown preset `{name}`; available: {}", PRESETS.join(", ")))
    })
}

/// Accepts a run directory (with `checkpoint/`) or a checkpoint directory.
fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let nested = path.join("checkpoint");
    if !path.join("manifest.json").exists() && nested.join("manifest.json").exists() {
        checkpoint::load(&nested)
    } else {
        checkpoint::load(path)
    }
}

fn load_for(data: &Path, split: &str, env: EnvKind) -> Result<dvbf_core::environments::SequenceBatch> {
    let batch = load_split(data, split)?;
    if batch.env() != env {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} data, expected {env}",
            data.join(split).display(),
            batch.env()
        )));
    }
    Ok(batch)
}

/// Size of the training split next to the evaluated one, if present.
fn train_size(data: &Path, fallback: usize) -> usize {
    let path = data.join("train").join("manifest.json");
    std::fs::read_to_string(path)
        .ok()
        .and_then(|s| serde_json::from_str::<Manifest>(&s).ok())
        .map_or(fallback, |m| m.n_sequences)
}

fn evaluate_split(model: &Model, manifest: &CheckpointManifest, data: &Path, split: &str, seed: u64) -> Result<EvalReport> {
    let batch = load_for(data, split, manifest.env)?;
    evaluate(
        model,
        manifest.env,
        manifest.step,
        &batch,
        train_size(data, batch.n),
        seed,
    )
}
