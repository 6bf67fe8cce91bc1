//! CSV and PGM exports consumed by the plotting scripts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::REGRESSION_STREAM;
use super::ROLLOUT_STREAM;
use crate::autodiff::Tensor;
use crate::environments::{EnvKind, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{time_major, Model, NoiseMode};

/// Cell of a regular 3x3 grid over the unit box, row-major from the origin.
pub fn checkerboard_bin(x: f64, y: f64) -> usize {
    let cell = |v: f64| ((3.0 * v).floor().max(0.0) as usize).min(2);
    3 * cell(y) + cell(x)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one sampled latent per `(sequence, step)` with its ground truth.
/// Ball environments get a `bin` column from the first ball's position.
/// Returns the number of data rows.
pub fn export_latents(model: &Model, batch: &SequenceBatch, seed: u64, train_size: usize, path: &Path) -> Result<usize> {
    let out = model.filter(
        batch,
        NoiseMode::Sample {
            seed,
            stream: REGRESSION_STREAM,
        },
        train_size,
    )?;
    let d = model.config.latent_dim();
    let names = if batch.truth_dim > 0 { batch.env().truth_names() } else { Vec::new() };
    let with_bin = batch.truth_dim > 0 && batch.env() != EnvKind::Pendulum;

    let mut csv = String::from("sequence,t");
    for k in 1..=d {
        write!(csv, ",z{k}").unwrap();
    }
    for n in &names {
        write!(csv, ",{n}").unwrap();
    }
    if with_bin {
        csv.push_str(",bin");
    }
    csv.push('\n');
    for seq in 0..batch.n {
        for t in 0..batch.t {
            write!(csv, "{seq},{t}").unwrap();
            for v in out.z.row(seq * batch.t + t) {
                write!(csv, ",{v}").unwrap();
            }
            if !names.is_empty() {
                let truth = batch.truth_at(seq, t);
                for v in truth {
                    write!(csv, ",{v}").unwrap();
                }
                if with_bin {
                    write!(csv, ",{}", checkerboard_bin(truth[0], truth[1])).unwrap();
                }
            }
            csv.push('\n');
        }
    }
    write_file(path, csv.as_bytes())?;
    Ok(batch.n * batch.t)
}

/// Binary 8-bit greyscale image; values are clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &bytes)
}

/// Ground truth, filtered reconstructions and a generative rollout for a
/// set of sequences, each sequence-major.
#[derive(Clone, Debug)]
pub struct RolloutBranches {
    pub n: usize,
    /// Observed steps per sequence.
    pub t: usize,
    pub horizon: usize,
    pub truth: Tensor,
    pub filtered: Tensor,
    pub generative: Tensor,
    pub z_filtered: Tensor,
    pub z_generative: Tensor,
}

impl RolloutBranches {
    /// Mean squared pixel error against the ground truth at step `t`, over
    /// all sequences, for the filtered and generative branches.
    pub fn mse_at(&self, t: usize) -> (f64, f64) {
        assert!(t < self.t);
        let mse = |x: &Tensor, steps: usize| -> f64 {
            let mut s = 0.0;
            let mut count = 0;
            for seq in 0..self.n {
                let a = x.row(seq * steps + t);
                let b = self.truth.row(seq * self.t + t);
                s += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                count += a.len();
            }
            s / count as f64
        };
        (mse(&self.filtered, self.t), mse(&self.generative, self.horizon))
    }
}

/// Filters the selected sequences and rolls the model forward for `horizon`
/// steps from the same observed frames. Recorded controls drive the
/// rollout while they last; later steps are unactuated.
pub fn rollout_branches(
    model: &Model,
    batch: &SequenceBatch,
    indices: &[usize],
    horizon: usize,
    seed: u64,
) -> Result<RolloutBranches> {
    if horizon < batch.t {
        return Err(Error::invalid(format!(
            "horizon {horizon} is shorter than the {} observed steps",
            batch.t
        )));
    }
    if indices.is_empty() || indices.iter().any(|&i| i >= batch.n) {
        return Err(Error::invalid(format!("sequence indices {indices:?} out of range 0..{}", batch.n)));
    }
    let sel = batch.select(indices);
    let n = sel.n;
    let filtered = model.filter(&sel, NoiseMode::Mean, batch.n)?;
    let (obs, ctrl_obs) = time_major(&sel, &(0..n).collect::<Vec<_>>(), sel.t);
    let mut ctrl = ctrl_obs.into_data();
    ctrl.resize(horizon * n * sel.ctrl_dim, 0.0);
    let ctrl = Tensor::matrix(horizon * n, sel.ctrl_dim, ctrl);
    let gen = model.generate(
        &obs,
        sel.t,
        &ctrl,
        horizon,
        NoiseMode::Sample {
            seed,
            stream: ROLLOUT_STREAM,
        },
    )?;
    Ok(RolloutBranches {
        n,
        t: sel.t,
        horizon,
        truth: Tensor::matrix(n * sel.t, sel.obs_dim, sel.obs.clone()),
        filtered: filtered.recon,
        generative: gen.mean,
        z_filtered: filtered.z,
        z_generative: gen.z,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub sequences: Vec<usize>,
    pub observed_steps: usize,
    pub horizon: usize,
    /// Per observed step, mean squared pixel error of each branch.
    pub mse_filtered: Vec<f64>,
    pub mse_generative: Vec<f64>,
}

/// Writes per sequence a PGM grid (rows: truth, filtered, generative;
/// columns: steps, black where a branch has no frame), `rollouts.csv` with
/// latent trajectories and `summary.json`.
pub fn export_rollouts(
    model: &Model,
    batch: &SequenceBatch,
    indices: &[usize],
    horizon: usize,
    seed: u64,
    out: &Path,
) -> Result<RolloutSummary> {
    let r = rollout_branches(model, batch, indices, horizon, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let side = batch.env().image_side();
    if side * side != batch.obs_dim {
        return Err(Error::invalid(format!("obs_dim {} is not a square image", batch.obs_dim)));
    }

    let width = side * horizon;
    for (k, &seq) in indices.iter().enumerate() {
        let mut img = vec![0.0; 3 * side * width];
        let branches = [(&r.truth, r.t), (&r.filtered, r.t), (&r.generative, r.horizon)];
        for (row, (frames, steps)) in branches.into_iter().enumerate() {
            for t in 0..steps {
                let frame = frames.row(k * steps + t);
                for y in 0..side {
                    let dst = (row * side + y) * width + t * side;
                    img[dst..dst + side].copy_from_slice(&frame[y * side..(y + 1) * side]);
                }
            }
        }
        write_pgm(&out.join(format!("seq{seq:04}.pgm")), width, 3 * side, &img)?;
    }

    let d = model.config.latent_dim();
    let mut csv = String::from("sequence,branch,t");
    for j in 1..=d {
        write!(csv, ",z{j}").unwrap();
    }
    csv.push_str(",mse\n");
    for (k, &seq) in indices.iter().enumerate() {
        for (branch, z, x, steps) in [
            ("filtered", &r.z_filtered, &r.filtered, r.t),
            ("generative", &r.z_generative, &r.generative, r.horizon),
        ] {
            for t in 0..steps {
                write!(csv, "{seq},{branch},{t}").unwrap();
                for v in z.row(k * steps + t) {
                    write!(csv, ",{v}").unwrap();
                }
                if t < r.t {
                    let truth = r.truth.row(k * r.t + t);
                    let e = x
                        .row(k * steps + t)
                        .iter()
                        .zip(truth)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        / truth.len() as f64;
                    write!(csv, ",{e}").unwrap();
                } else {
                    csv.push(',');
                }
                csv.push('\n');
            }
        }
    }
    write_file(&out.join("rollouts.csv"), csv.as_bytes())?;

    let (mse_filtered, mse_generative) = (0..r.t).map(|t| r.mse_at(t)).unzip();
    let summary = RolloutSummary {
        sequences: indices.to_vec(),
        observed_steps: r.t,
        horizon,
        mse_filtered,
        mse_generative,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), (json + "\n").as_bytes())?;
    Ok(summary)
}
