//! Quantitative evaluation of trained models: latent regressions, bound
//! decomposition on held-out data, and CSV/PGM exports for plotting.

mod export;
mod ols;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::environments::{EnvKind, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind, NoiseMode};

pub use export::{
    checkerboard_bin, export_latents, export_rollouts, rollout_branches, write_pgm, RolloutBranches, RolloutSummary,
};
pub use ols::{ols, OlsFit, RIDGE};

/// Stream for the latent samples used by the regressions.
pub const REGRESSION_STREAM: u64 = 1 << 40;
/// Stream for the process noise of the held-out bound.
pub const ELBO_STREAM: u64 = 2 << 40;
/// Stream for generative rollouts.
pub const ROLLOUT_STREAM: u64 = 3 << 40;

/// Regression targets derived from the ground truth of `batch`, one value
/// per `(sequence, step)` in sequence-major order.
pub fn regression_targets(batch: &SequenceBatch) -> Vec<(String, Vec<f64>)> {
    let column = |k: usize| -> Vec<f64> { batch.truth.chunks_exact(batch.truth_dim).map(|r| r[k]).collect() };
    match batch.env() {
        EnvKind::Pendulum => {
            let angle = column(0);
            vec![
                ("sin_angle".into(), angle.iter().map(|a| a.sin()).collect()),
                ("cos_angle".into(), angle.iter().map(|a| a.cos()).collect()),
                ("angular_velocity".into(), column(1)),
            ]
        }
        env => env
            .truth_names()
            .into_iter()
            .enumerate()
            .map(|(k, name)| (name.to_string(), column(k)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionEntry {
    pub target: String,
    #[serde(flatten)]
    pub fit: OlsFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub seed: u64,
    pub entries: Vec<RegressionEntry>,
}

impl RegressionReport {
    pub fn r2(&self, target: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.target == target).map(|e| e.fit.r2)
    }
}

/// Regresses every target on one sampled latent per `(sequence, step)`.
pub fn regress_latents(model: &Model, batch: &SequenceBatch, seed: u64, train_size: usize) -> Result<RegressionReport> {
    if batch.truth_dim == 0 {
        return Err(Error::invalid("dataset carries no ground-truth states"));
    }
    let out = model.filter(
        batch,
        NoiseMode::Sample {
            seed,
            stream: REGRESSION_STREAM,
        },
        train_size,
    )?;
    regress(&out.z, batch, seed)
}

/// Regression of the targets of `batch` on precomputed sequence-major latents.
pub fn regress(z: &Tensor, batch: &SequenceBatch, seed: u64) -> Result<RegressionReport> {
    let entries = regression_targets(batch)
        .into_iter()
        .map(|(target, y)| Ok(RegressionEntry { fit: ols(z, &y)?, target }))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegressionReport { seed, entries })
}

/// Per-sequence averages of the bound at `c = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTable {
    pub n_sequences: usize,
    pub bound: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_w: f64,
    pub kl_v: f64,
}

/// Averages the bound over every sequence of `batch`. The bank term is
/// charged at `kl_v / train_size` per sequence.
pub fn elbo_table(model: &Model, batch: &SequenceBatch, mode: NoiseMode, train_size: usize) -> Result<ElboTable> {
    let total = model.filter(batch, mode, train_size)?.elbo;
    let per = total.scaled(1.0 / batch.n as f64);
    Ok(ElboTable {
        n_sequences: batch.n,
        bound: per.bound(),
        recon: per.recon,
        kl: per.kl(),
        kl_w: per.kl_w,
        kl_v: per.kl_v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvKind,
    pub model: ModelKind,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub train_size: usize,
    pub regression: RegressionReport,
    pub elbo: ElboTable,
}

/// Full report on `test`: regressions plus the bound decomposition.
pub fn evaluate(
    model: &Model,
    env: EnvKind,
    step: u64,
    test: &SequenceBatch,
    train_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if test.env() != env {
        return Err(Error::invalid(format!(
            "checkpoint was trained on {env}, data is {}",
            test.env()
        )));
    }
    let regression = regress_latents(model, test, seed, train_size)?;
    let elbo = elbo_table(
        model,
        test,
        NoiseMode::Sample {
            seed,
            stream: ELBO_STREAM,
        },
        train_size,
    )?;
    Ok(EvalReport {
        env,
        model: model.kind(),
        config: model.config.clone(),
        step,
        seed,
        train_size,
        regression,
        elbo,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
