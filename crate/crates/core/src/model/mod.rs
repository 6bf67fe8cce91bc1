//! Latent state-space models trained by maximizing an evidence lower bound.
//!
//! Graphs are time-major: row `t * rows + b` holds sequence `b` at step `t`.

pub mod checkpoint;
pub mod dkf;
pub mod dvbf;
pub mod nn;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor, Values};
use crate::environments::SequenceBatch;
use crate::error::{Error, Result};
use crate::stream_rng;

pub use dkf::DkfConfig;
pub use dvbf::{DvbfConfig, InitialNet};
pub use nn::{Activation, Params};

/// Scalar terms of one evaluation of the bound, summed over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboComponents {
    pub recon: f64,
    pub kl_w: f64,
    pub kl_v: f64,
    pub annealed_total: f64,
    pub c: f64,
}

impl ElboComponents {
    /// Unannealed bound `recon - kl_w - kl_v`.
    pub fn bound(&self) -> f64 {
        self.recon - self.kl_w - self.kl_v
    }

    pub fn kl(&self) -> f64 {
        self.kl_w + self.kl_v
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl_w, self.kl_v, self.annealed_total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl_w", self.kl_w),
            ("kl_v", self.kl_v),
            ("annealed_total", self.annealed_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn scaled(&self, k: f64) -> Self {
        ElboComponents {
            recon: self.recon * k,
            kl_w: self.kl_w * k,
            kl_v: self.kl_v * k,
            annealed_total: self.annealed_total * k,
            c: self.c,
        }
    }

    pub fn accumulate(&mut self, other: &ElboComponents) {
        self.recon += other.recon;
        self.kl_w += other.kl_w;
        self.kl_v += other.kl_v;
        self.annealed_total += other.annealed_total;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboNodes {
    pub recon: NodeId,
    pub kl_w: NodeId,
    pub kl_v: NodeId,
    pub annealed_total: NodeId,
    pub bound: NodeId,
    /// `-annealed_total`.
    pub loss: NodeId,
    /// Latent states, `[t * rows, latent_dim]`.
    pub z: NodeId,
    /// Emission means, `[t * rows, obs_dim]`.
    pub recon_mean: NodeId,
}

/// An unrolled bound for a fixed batch size and sequence length.
pub struct ElboGraph {
    pub graph: Graph,
    pub nodes: ElboNodes,
    pub rows: usize,
    pub t: usize,
}

impl ElboGraph {
    pub fn components(&self, values: &Values, c: f64) -> ElboComponents {
        ElboComponents {
            recon: values.scalar(self.nodes.recon),
            kl_w: values.scalar(self.nodes.kl_w),
            kl_v: values.scalar(self.nodes.kl_v),
            annealed_total: values.scalar(self.nodes.annealed_total),
            c,
        }
    }

    pub fn evaluate(&self, params: &Params, inputs: &BTreeMap<String, Tensor>) -> Result<(ElboComponents, Values)> {
        let c = read_c(inputs)?;
        let values = self.graph.forward(&(inputs, params))?;
        Ok((self.components(&values, c), values))
    }

    /// Bound terms and gradients of `-annealed_total` w.r.t. every parameter.
    pub fn gradients(
        &self,
        params: &Params,
        inputs: &BTreeMap<String, Tensor>,
    ) -> Result<(ElboComponents, Gradients)> {
        let (comp, values) = self.evaluate(params, inputs)?;
        if let Some(term) = comp.non_finite_term() {
            return Err(Error::NonFinite {
                node: term.to_string(),
                op: "elbo",
            });
        }
        let grads = self.graph.backward(&values, self.nodes.loss)?;
        Ok((comp, grads))
    }
}

fn read_c(inputs: &BTreeMap<String, Tensor>) -> Result<f64> {
    let c = inputs
        .get("c")
        .ok_or_else(|| Error::UnboundInput("c".into()))?
        .item();
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!("inverse temperature c = {c} is outside (0, 1]")));
    }
    Ok(c)
}

/// Generative unroll for a fixed batch size and horizon.
pub struct RolloutGraph {
    pub graph: Graph,
    pub z: NodeId,
    pub mean: NodeId,
    pub rows: usize,
    pub horizon: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dvbf,
    Dkf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dvbf => "dvbf",
            ModelKind::Dkf => "dkf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelConfig {
    Dvbf(DvbfConfig),
    Dkf(DkfConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Dvbf(_) => ModelKind::Dvbf,
            ModelConfig::Dkf(_) => ModelKind::Dkf,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ModelConfig::Dvbf(c) => c.obs_dim,
            ModelConfig::Dkf(c) => c.obs_dim,
        }
    }

    pub fn ctrl_dim(&self) -> usize {
        match self {
            ModelConfig::Dvbf(c) => c.ctrl_dim,
            ModelConfig::Dkf(c) => c.ctrl_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ModelConfig::Dvbf(c) => c.latent_dim,
            ModelConfig::Dkf(c) => c.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Dvbf(c) => c.validate(),
            ModelConfig::Dkf(c) => c.validate(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        match self {
            ModelConfig::Dvbf(c) => dvbf::init_params(c, rng),
            ModelConfig::Dkf(c) => dkf::init_params(c, rng),
        }
    }

    pub fn build_elbo_graph(&self, params: &Params, rows: usize, t: usize) -> ElboGraph {
        match self {
            ModelConfig::Dvbf(c) => dvbf::build_elbo_graph(c, params, rows, t),
            ModelConfig::Dkf(c) => dkf::build_elbo_graph(c, params, rows, t),
        }
    }

    pub fn build_generative_graph(&self, params: &Params, rows: usize, obs_frames: usize, horizon: usize) -> RolloutGraph {
        match self {
            ModelConfig::Dvbf(c) => dvbf::build_generative_graph(c, params, rows, obs_frames, horizon),
            ModelConfig::Dkf(c) => dkf::build_generative_graph(c, params, rows, obs_frames, horizon),
        }
    }

    /// Standard-normal inputs consumed by the bound graph.
    pub fn noise_shapes(&self, rows: usize, t: usize) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            ModelConfig::Dvbf(c) => vec![
                ("noise.w", vec![t * rows, c.noise_dim]),
                ("noise.v", vec![c.transitions, c.component_len()]),
            ],
            ModelConfig::Dkf(c) => vec![("noise.z", vec![t * rows, c.latent_dim])],
        }
    }

    /// Standard-normal inputs consumed by the generative graph.
    pub fn rollout_noise_shapes(&self, rows: usize, horizon: usize) -> Vec<(&'static str, Vec<usize>)> {
        self.noise_shapes(rows, horizon)
    }
}

/// How stochastic inputs are set outside training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// All noise zero: recognition means and posterior-mean bank.
    Mean,
    /// Per-step draws from `stream_rng(seed, stream)`; the bank stays at its posterior mean.
    Sample { seed: u64, stream: u64 },
}

/// Draws every tensor in `shapes` from `N(0, 1)` in order.
pub fn sample_noise<R: Rng + ?Sized>(shapes: &[(&'static str, Vec<usize>)], rng: &mut R) -> BTreeMap<String, Tensor> {
    shapes
        .iter()
        .map(|(name, shape)| (name.to_string(), Tensor::randn(shape, 1.0, rng)))
        .collect()
}

fn noise_for_mode(shapes: &[(&'static str, Vec<usize>)], mode: NoiseMode) -> BTreeMap<String, Tensor> {
    match mode {
        NoiseMode::Mean => shapes
            .iter()
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(shape)))
            .collect(),
        NoiseMode::Sample { seed, stream } => {
            let mut rng = stream_rng(seed, stream);
            let mut out = sample_noise(shapes, &mut rng);
            if let Some(v) = out.get_mut("noise.v") {
                *v = Tensor::zeros(v.shape());
            }
            out
        }
    }
}

/// Observations and controls of `indices`, first `t` steps, time-major.
pub fn time_major(batch: &SequenceBatch, indices: &[usize], t: usize) -> (Tensor, Tensor) {
    assert!(t >= 1 && t <= batch.t, "requested {t} steps of {}", batch.t);
    let rows = indices.len();
    let mut obs = Vec::with_capacity(t * rows * batch.obs_dim);
    let mut ctrl = Vec::with_capacity(t * rows * batch.ctrl_dim);
    for step in 0..t {
        for &i in indices {
            obs.extend_from_slice(batch.obs_frame(i, step));
            ctrl.extend_from_slice(batch.ctrl_at(i, step));
        }
    }
    (
        Tensor::matrix(t * rows, batch.obs_dim, obs),
        Tensor::matrix(t * rows, batch.ctrl_dim, ctrl),
    )
}

/// Reorders time-major rows into sequence-major rows (`b * t + step`).
pub fn to_sequence_major(x: &Tensor, rows: usize, t: usize) -> Tensor {
    let (n, d) = x.dims2().expect("rank-2 tensor");
    assert_eq!(n, rows * t);
    let mut out = Vec::with_capacity(n * d);
    for b in 0..rows {
        for step in 0..t {
            out.extend_from_slice(x.row(step * rows + b));
        }
    }
    Tensor::matrix(n, d, out)
}

/// Bound inputs for one batch.
pub fn elbo_inputs(
    obs: Tensor,
    ctrl: Tensor,
    noise: BTreeMap<String, Tensor>,
    c: f64,
    kl_v_scale: f64,
) -> BTreeMap<String, Tensor> {
    let mut m = noise;
    m.insert("obs".into(), obs);
    m.insert("ctrl".into(), ctrl);
    m.insert("c".into(), Tensor::scalar(c));
    m.insert("kl_v_scale".into(), Tensor::scalar(kl_v_scale));
    m
}

/// Filtering results in sequence-major order (`row = seq * t + step`).
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub n: usize,
    pub t: usize,
    pub z: Tensor,
    pub recon: Tensor,
    /// Bound at `c = 1` summed over the filtered sequences.
    pub elbo: ElboComponents,
}

/// Generative rollout in sequence-major order.
#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub n: usize,
    pub horizon: usize,
    pub z: Tensor,
    pub mean: Tensor,
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = u64::MAX;

/// Rows per graph when evaluating large sets.
pub const EVAL_CHUNK: usize = 250;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.init_params(&mut stream_rng(seed, INIT_STREAM));
        Ok(Model { config, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.obs_dim != self.config.obs_dim() || batch.ctrl_dim != self.config.ctrl_dim() {
            return Err(Error::invalid(format!(
                "data has obs_dim {} / ctrl_dim {}, model expects {} / {}",
                batch.obs_dim,
                batch.ctrl_dim,
                self.config.obs_dim(),
                self.config.ctrl_dim()
            )));
        }
        Ok(())
    }

    /// Bound at inverse temperature `c` on `indices` with explicit noise.
    pub fn elbo(
        &self,
        batch: &SequenceBatch,
        indices: &[usize],
        noise: BTreeMap<String, Tensor>,
        c: f64,
        kl_v_scale: f64,
    ) -> Result<ElboComponents> {
        self.check_batch(batch)?;
        let g = self.config.build_elbo_graph(&self.params, indices.len(), batch.t);
        let (obs, ctrl) = time_major(batch, indices, batch.t);
        let inputs = elbo_inputs(obs, ctrl, noise, c, kl_v_scale);
        Ok(g.evaluate(&self.params, &inputs)?.0)
    }

    /// Filters every sequence of `batch`. The bank share of the bound is
    /// `kl_v / train_size` per sequence.
    pub fn filter(&self, batch: &SequenceBatch, mode: NoiseMode, train_size: usize) -> Result<FilterOutput> {
        self.check_batch(batch)?;
        let t = batch.t;
        let d = self.config.latent_dim();
        let mut z = Vec::with_capacity(batch.n * t * d);
        let mut recon = Vec::with_capacity(batch.n * t * batch.obs_dim);
        let mut total = ElboComponents {
            recon: 0.0,
            kl_w: 0.0,
            kl_v: 0.0,
            annealed_total: 0.0,
            c: 1.0,
        };
        let mut cached: Option<ElboGraph> = None;
        for (chunk_idx, start) in (0..batch.n).step_by(EVAL_CHUNK).enumerate() {
            let indices: Vec<usize> = (start..(start + EVAL_CHUNK).min(batch.n)).collect();
            let rows = indices.len();
            if cached.as_ref().is_none_or(|g| g.rows != rows) {
                cached = Some(self.config.build_elbo_graph(&self.params, rows, t));
            }
            let g = cached.as_ref().unwrap();
            let shapes = self.config.noise_shapes(rows, t);
            let mode = match mode {
                NoiseMode::Sample { seed, stream } => NoiseMode::Sample {
                    seed,
                    stream: stream.wrapping_add(chunk_idx as u64),
                },
                m => m,
            };
            let noise = noise_for_mode(&shapes, mode);
            let (obs, ctrl) = time_major(batch, &indices, t);
            let inputs = elbo_inputs(obs, ctrl, noise, 1.0, rows as f64 / train_size.max(1) as f64);
            let (comp, values) = g.evaluate(&self.params, &inputs)?;
            total.accumulate(&comp);
            z.extend_from_slice(to_sequence_major(values.get(g.nodes.z), rows, t).data());
            recon.extend_from_slice(to_sequence_major(values.get(g.nodes.recon_mean), rows, t).data());
        }
        Ok(FilterOutput {
            n: batch.n,
            t,
            z: Tensor::matrix(batch.n * t, d, z),
            recon: Tensor::matrix(batch.n * t, batch.obs_dim, recon),
            elbo: total,
        })
    }

    /// Rolls the model forward for `horizon` steps from the first
    /// `obs_frames` observations of every sequence, with process noise from
    /// the prior. `ctrl` is time-major `[horizon * n, ctrl_dim]`.
    pub fn generate(
        &self,
        obs: &Tensor,
        obs_frames: usize,
        ctrl: &Tensor,
        horizon: usize,
        mode: NoiseMode,
    ) -> Result<RolloutOutput> {
        let rank2 = |t: &Tensor| t.dims2().ok_or_else(|| Error::invalid(format!("expected a matrix, got {:?}", t.shape())));
        let (obs_rows, dx) = rank2(obs)?;
        if dx != self.config.obs_dim() || obs_frames == 0 || obs_rows % obs_frames != 0 {
            return Err(Error::invalid(format!(
                "observation prefix has shape {:?} for {obs_frames} frames",
                obs.shape()
            )));
        }
        let n = obs_rows / obs_frames;
        let ctrl_rows = rank2(ctrl)?.0;
        if horizon == 0 || ctrl_rows != horizon * n {
            return Err(Error::invalid(format!(
                "controls have {ctrl_rows} rows, expected horizon {horizon} x {n} sequences"
            )));
        }
        let g = self.config.build_generative_graph(&self.params, n, obs_frames, horizon);
        let mut inputs = noise_for_mode(&self.config.rollout_noise_shapes(n, horizon), mode);
        inputs.insert("obs".into(), obs.clone());
        inputs.insert("ctrl".into(), ctrl.clone());
        let values = g.graph.forward(&(&inputs, &self.params))?;
        Ok(RolloutOutput {
            n,
            horizon,
            z: to_sequence_major(values.get(g.z), n, horizon),
            mean: to_sequence_major(values.get(g.mean), n, horizon),
        })
    }
}

#[cfg(test)]
mod tests;
