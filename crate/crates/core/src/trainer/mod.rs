//! Annealed stochastic-gradient training of the latent models.

pub mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{
    adadelta_step, adam_step, clip_global_norm, optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState,
};

use crate::autodiff::Tensor;
use crate::environments::{EnvKind, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, read_tensors, write_tensors};
use crate::model::{
    elbo_inputs, sample_noise, time_major, ElboComponents, ElboGraph, Model, ModelConfig, NoiseMode,
};
use crate::stream_rng;

/// Inverse temperature `min(1, 0.01 + i / t_a)`.
pub fn anneal(i: u64, t_a: u64) -> f64 {
    assert!(t_a > 0, "annealing length must be positive");
    (0.01 + i as f64 / t_a as f64).min(1.0)
}

/// [`anneal`] held constant within blocks of `period` iterations.
pub fn anneal_held(i: u64, t_a: u64, period: u64) -> f64 {
    assert!(period > 0, "c-update period must be positive");
    anneal(i - i % period, t_a)
}

fn default_clip() -> f64 {
    10.0
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub iterations: u64,
    /// Iterations until the inverse temperature reaches 1.
    pub anneal_iterations: u64,
    /// Iterations between inverse-temperature updates.
    pub anneal_period: u64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 saves only the initial and final state.
    pub checkpoint_every: u64,
    /// Iterations between validation passes; 0 validates only at the start and end.
    #[serde(default)]
    pub val_every: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Batch shards evaluated in parallel per update.
    #[serde(default = "default_one")]
    pub shards: usize,
    /// Required gain of the final over the initial validation bound per sequence.
    #[serde(default)]
    pub min_val_improvement: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("anneal_iterations", self.anneal_iterations),
            ("anneal_period", self.anneal_period),
            ("shards", self.shards as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("train config: {name} must be positive")));
            }
        }
        if self.shards > self.batch_size {
            return Err(Error::invalid("train config: more shards than sequences per batch"));
        }
        if !(self.optimizer.step_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("train config: step_rate and clip_norm must be positive"));
        }
        if self.model.obs_dim() != self.env.obs_dim() || self.model.ctrl_dim() != self.env.ctrl_dim() {
            return Err(Error::invalid(format!(
                "train config: model dims do not match environment `{}`",
                self.env
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn c_at(&self, iteration: u64) -> f64 {
        anneal_held(iteration, self.anneal_iterations, self.anneal_period)
    }
}

/// Header of `metrics.csv`. Bound terms are per-sequence batch averages.
pub const METRICS_HEADER: &str = "iteration,c,recon,kl_w,kl_v,annealed_total,wall_clock_s";
/// Header of `validation.csv`. Values are per-sequence averages at `c = 1`.
pub const VALIDATION_HEADER: &str = "iteration,bound,recon,kl_w,kl_v";

/// RNG stream offset for per-epoch shuffles; noise uses the iteration index.
const SHUFFLE_STREAM: u64 = 1 << 48;

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationPoint {
    pub iteration: u64,
    pub elbo: ElboComponents,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub iterations: u64,
    pub last: Option<ElboComponents>,
    pub validation: Vec<ValidationPoint>,
}

impl TrainOutcome {
    /// Final minus initial validation bound per sequence.
    pub fn val_improvement(&self) -> Option<f64> {
        let first = self.validation.first()?;
        let last = self.validation.last()?;
        Some(last.elbo.bound() - first.elbo.bound())
    }
}

/// Output layout of a training run.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn initial_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint-initial")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn validation(&self) -> PathBuf {
        self.root.join("validation.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

fn validation_pass(model: &Model, val: &SequenceBatch, train_n: usize) -> Result<ElboComponents> {
    let out = model.filter(val, NoiseMode::Mean, train_n)?;
    Ok(out.elbo.scaled(1.0 / val.n as f64))
}

/// Sequence-major per-sequence noise for a batch plus batch-shared noise.
struct BatchNoise {
    per_seq: BTreeMap<String, Tensor>,
    shared: BTreeMap<String, Tensor>,
}

fn draw_batch_noise(cfg: &ModelConfig, rows: usize, t: usize, seed: u64, iteration: u64) -> BatchNoise {
    let mut rng = stream_rng(seed, iteration);
    let mut per_seq = BTreeMap::new();
    let mut shared = BTreeMap::new();
    for (name, shape) in cfg.noise_shapes(rows, t) {
        let draw = sample_noise(&[(name, shape.clone())], &mut rng).remove(name).unwrap();
        if name == "noise.v" {
            shared.insert(name.to_string(), draw);
        } else {
            per_seq.insert(name.to_string(), draw);
        }
    }
    BatchNoise { per_seq, shared }
}

impl BatchNoise {
    /// Time-major noise for batch positions `start..start + rows`.
    fn shard(&self, start: usize, rows: usize, t: usize) -> BTreeMap<String, Tensor> {
        let mut out = self.shared.clone();
        for (name, x) in &self.per_seq {
            let d = x.dims2().unwrap().1;
            let mut data = Vec::with_capacity(rows * t * d);
            for step in 0..t {
                for b in start..start + rows {
                    data.extend_from_slice(x.row(b * t + step));
                }
            }
            out.insert(name.clone(), Tensor::matrix(rows * t, d, data));
        }
        out
    }
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Drops log rows past `iteration` so a resumed run continues cleanly.
fn truncate_log(path: &Path, last_kept: Option<u64>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || match (line.split(',').next().and_then(|v| v.parse::<u64>().ok()), last_kept) {
                (Some(it), Some(k)) => it <= k,
                _ => false,
            };
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a SequenceBatch,
    graphs: BTreeMap<usize, ElboGraph>,
    bounds: Vec<(usize, usize)>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, train: &'a SequenceBatch, model: &Model) -> Self {
        let b = cfg.batch_size.min(train.n);
        let per = b.div_ceil(cfg.shards);
        let mut bounds = Vec::new();
        let mut start = 0;
        while start < b {
            let rows = per.min(b - start);
            bounds.push((start, rows));
            start += rows;
        }
        let mut graphs = BTreeMap::new();
        for &(_, rows) in &bounds {
            graphs
                .entry(rows)
                .or_insert_with(|| model.config.build_elbo_graph(&model.params, rows, train.t));
        }
        Trainer {
            cfg,
            train,
            graphs,
            bounds,
        }
    }

    fn batch_rows(&self) -> usize {
        self.cfg.batch_size.min(self.train.n)
    }

    fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        let n = self.train.n;
        let b = self.batch_rows();
        let per_epoch = (n / b).max(1) as u64;
        let epoch = iteration / per_epoch;
        let slot = (iteration % per_epoch) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream_rng(self.cfg.seed, SHUFFLE_STREAM + epoch));
        perm[slot * b..(slot + 1) * b].to_vec()
    }

    /// Bound terms summed over the batch and gradients of `-annealed_total / B`.
    fn step_gradients(&self, model: &Model, iteration: u64, c: f64) -> Result<(ElboComponents, BTreeMap<String, Tensor>)> {
        let indices = self.batch_indices(iteration);
        let b = indices.len();
        let t = self.train.t;
        let noise = draw_batch_noise(&model.config, b, t, self.cfg.seed, iteration);
        let kl_v_scale = b as f64 / self.train.n as f64 / self.bounds.len() as f64;
        let run = |&(start, rows): &(usize, usize)| {
            let idx = &indices[start..start + rows];
            let (obs, ctrl) = time_major(self.train, idx, t);
            let inputs = elbo_inputs(obs, ctrl, noise.shard(start, rows, t), c, kl_v_scale);
            self.graphs[&rows].gradients(&model.params, &inputs)
        };
        let parts: Vec<Result<_>> = if self.bounds.len() > 1 {
            self.bounds.par_iter().map(run).collect()
        } else {
            self.bounds.iter().map(run).collect()
        };
        let mut total: Option<ElboComponents> = None;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for part in parts {
            let (comp, g) = part.map_err(|e| diverged(iteration, e))?;
            match total.as_mut() {
                Some(t) => t.accumulate(&comp),
                None => total = Some(comp),
            }
            for (name, gt) in g.into_map() {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&gt),
                    None => {
                        grads.insert(name, gt);
                    }
                }
            }
        }
        let inv_b = 1.0 / b as f64;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= inv_b;
            }
        }
        Ok((total.expect("at least one shard"), grads))
    }
}

fn diverged(iteration: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => Error::Diverged {
            iteration,
            detail: format!("non-finite value in `{node}` ({op})"),
        },
        other => other,
    }
}

/// Trains from scratch, or from `run/checkpoint` when `resume` is set.
///
/// Writes `config.json`, `metrics.csv`, `validation.csv`,
/// `checkpoint-initial/` and `checkpoint/` (with `optim.bin`) under `out`.
/// A non-finite bound or gradient aborts with [`Error::Diverged`] and leaves
/// the last checkpoint untouched.
pub fn train(
    cfg: &TrainConfig,
    train_set: &SequenceBatch,
    val_set: Option<&SequenceBatch>,
    out: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.env() != cfg.env || train_set.obs_dim != cfg.env.obs_dim() {
        return Err(Error::invalid(format!(
            "training data is `{}`, config expects `{}`",
            train_set.env(),
            cfg.env
        )));
    }
    let run = RunDir::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (mut model, mut opt_state, start) = if resume {
        let (model, manifest) = checkpoint::load(&run.checkpoint())?;
        if model.config != cfg.model {
            return Err(Error::invalid("checkpoint model config differs from the training config"));
        }
        let opt_path = run.checkpoint().join("optim.bin");
        let state = if opt_path.exists() {
            OptimizerState::from_tensors(read_tensors(&opt_path)?)?
        } else {
            OptimizerState::new()
        };
        (model, state, manifest.step)
    } else {
        (Model::new(cfg.model.clone(), cfg.seed)?, OptimizerState::new(), 0)
    };

    let config_path = run.config();
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;

    let last_logged = start.checked_sub(1);
    if resume {
        truncate_log(&run.metrics(), last_logged)?;
        truncate_log(&run.validation(), Some(start))?;
    }
    let mut metrics = open_log(&run.metrics(), METRICS_HEADER, resume)?;
    let mut val_log = open_log(&run.validation(), VALIDATION_HEADER, resume)?;
    let mut validation = Vec::new();

    let validate = |model: &Model, it: u64, log: &mut BufWriter<File>, hist: &mut Vec<ValidationPoint>| -> Result<()> {
        let Some(val) = val_set else { return Ok(()) };
        let e = validation_pass(model, val, train_set.n)?;
        writeln!(
            log,
            "{it},{},{},{},{}",
            fmt(e.bound()),
            fmt(e.recon),
            fmt(e.kl_w),
            fmt(e.kl_v)
        )
        .and_then(|_| log.flush())
        .map_err(|err| Error::io(&run.validation(), err))?;
        hist.push(ValidationPoint { iteration: it, elbo: e });
        Ok(())
    };

    let save = |model: &Model, state: &OptimizerState, step: u64| -> Result<()> {
        let dir = run.checkpoint();
        checkpoint::save(&dir, model, cfg.env, step, cfg.c_at(step.saturating_sub(1)), cfg.seed)?;
        let tmp = dir.join("optim.bin.tmp");
        write_tensors(&tmp, &state.to_tensors())?;
        let dst = dir.join("optim.bin");
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    };

    if !resume {
        checkpoint::save(&run.initial_checkpoint(), &model, cfg.env, 0, cfg.c_at(0), cfg.seed)?;
        save(&model, &opt_state, 0)?;
        validate(&model, 0, &mut val_log, &mut validation)?;
    }

    let trainer = Trainer::new(cfg, train_set, &model);
    let clock = Instant::now();
    let b = trainer.batch_rows() as f64;
    let mut last = None;
    for it in start..cfg.iterations {
        let c = cfg.c_at(it);
        let (comp, mut grads) = trainer.step_gradients(&model, it, c)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite gradient for `{name}`"),
            });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        optimizer_step(&cfg.optimizer, &mut model.params, &grads, &mut opt_state)?;
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        let avg = comp.scaled(1.0 / b);
        writeln!(
            metrics,
            "{it},{},{},{},{},{},{:.3}",
            fmt(c),
            fmt(avg.recon),
            fmt(avg.kl_w),
            fmt(avg.kl_v),
            fmt(avg.annealed_total),
            clock.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&run.metrics(), e))?;
        last = Some(avg);

        let done = it + 1;
        if cfg.val_every > 0 && done % cfg.val_every == 0 && done < cfg.iterations {
            validate(&model, done, &mut val_log, &mut validation)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            metrics.flush().map_err(|e| Error::io(&run.metrics(), e))?;
            save(&model, &opt_state, done)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&run.metrics(), e))?;
    if cfg.iterations > start {
        validate(&model, cfg.iterations, &mut val_log, &mut validation)?;
        save(&model, &opt_state, cfg.iterations)?;
    }
    Ok(TrainOutcome {
        model,
        iterations: cfg.iterations.max(start),
        last,
        validation,
    })
}

/// Example configurations shipped with the command-line tool.
pub fn preset(name: &str) -> Option<TrainConfig> {
    use crate::model::{DkfConfig, DvbfConfig};
    let adadelta = OptimizerConfig {
        kind: OptimizerKind::Adadelta,
        step_rate: 0.1,
    };
    let base = |env: EnvKind, model: ModelConfig| TrainConfig {
        env,
        model,
        optimizer: adadelta,
        batch_size: 500,
        iterations: 200_000,
        anneal_iterations: 100_000,
        anneal_period: 250,
        seed: 0,
        checkpoint_every: 5_000,
        val_every: 1_000,
        clip_norm: 10.0,
        shards: 1,
        min_val_improvement: 0.0,
    };
    let adam = OptimizerConfig {
        kind: OptimizerKind::Adam,
        step_rate: 0.001,
    };
    let pend = ModelConfig::Dvbf(DvbfConfig::for_env(EnvKind::Pendulum));
    let dkf = ModelConfig::Dkf(DkfConfig::for_env(EnvKind::Pendulum));
    let dkf_base = TrainConfig {
        optimizer: adam,
        anneal_iterations: 2_000,
        anneal_period: 25,
        ..base(EnvKind::Pendulum, dkf)
    };
    Some(match name {
        "pendulum-dvbf" => base(EnvKind::Pendulum, pend),
        "pendulum-dvbf-reduced" => TrainConfig {
            iterations: 30_000,
            anneal_iterations: 10_000,
            checkpoint_every: 1_000,
            val_every: 500,
            ..base(EnvKind::Pendulum, pend)
        },
        "pendulum-dkf" => dkf_base,
        "pendulum-dkf-reduced" => TrainConfig {
            iterations: 6_000,
            checkpoint_every: 1_000,
            val_every: 500,
            ..dkf_base
        },
        "ball-dvbf" => base(EnvKind::Ball, ModelConfig::Dvbf(DvbfConfig::for_env(EnvKind::Ball))),
        "ball-dvbf-reduced" => TrainConfig {
            iterations: 30_000,
            anneal_iterations: 10_000,
            checkpoint_every: 1_000,
            val_every: 500,
            ..base(EnvKind::Ball, ModelConfig::Dvbf(DvbfConfig::for_env(EnvKind::Ball)))
        },
        "two-balls-dvbf" => TrainConfig {
            optimizer: adam,
            batch_size: 80,
            anneal_iterations: 200_000,
            anneal_period: 1,
            iterations: 400_000,
            ..base(EnvKind::TwoBalls, ModelConfig::Dvbf(DvbfConfig::for_env(EnvKind::TwoBalls)))
        },
        "pendulum-dvbf-smoke" => smoke(base(EnvKind::Pendulum, pend)),
        "pendulum-dkf-smoke" => smoke(dkf_base),
        "two-balls-dvbf-smoke" => TrainConfig {
            iterations: 500,
            anneal_iterations: 250,
            checkpoint_every: 250,
            val_every: 100,
            ..preset("two-balls-dvbf")?
        },
        _ => return None,
    })
}

fn smoke(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 50,
        iterations: 500,
        anneal_iterations: 250,
        anneal_period: cfg.anneal_period.min(25),
        checkpoint_every: 250,
        val_every: 100,
        ..cfg
    }
}

pub const PRESETS: [&str; 10] = [
    "pendulum-dvbf",
    "pendulum-dvbf-reduced",
    "pendulum-dkf",
    "pendulum-dkf-reduced",
    "ball-dvbf",
    "ball-dvbf-reduced",
    "two-balls-dvbf",
    "pendulum-dvbf-smoke",
    "pendulum-dkf-smoke",
    "two-balls-dvbf-smoke",
];
