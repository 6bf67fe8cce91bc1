//! First-order optimizers over named parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Params;

pub const ADADELTA_DECAY: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_rate: f64,
}

/// Two accumulators per parameter plus a step counter.
///
/// Adadelta keeps `E[g^2]` and `E[dx^2]`; Adam keeps the first and second
/// moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    fn slots(&mut self, name: &str, shape: &[usize]) -> Result<(&mut Tensor, &mut Tensor)> {
        for map in [&mut self.first, &mut self.second] {
            let slot = map.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape));
            if slot.shape() != shape {
                return Err(Error::invalid(format!(
                    "optimizer state for `{name}` has shape {:?}, parameter has {shape:?}",
                    slot.shape()
                )));
            }
        }
        Ok((
            self.first.get_mut(name).unwrap(),
            self.second.get_mut(name).unwrap(),
        ))
    }

    /// Flattens into named tensors (`first/NAME`, `second/NAME`, `step`).
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.first {
            out.insert(format!("first/{n}"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("second/{n}"), t.clone());
        }
        out.insert("step".into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut s = OptimizerState::new();
        for (name, t) in tensors {
            if name == "step" {
                s.step = t.item() as u64;
            } else if let Some(n) = name.strip_prefix("first/") {
                s.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("second/") {
                s.second.insert(n.to_string(), t);
            } else {
                return Err(Error::invalid(format!("unexpected optimizer tensor `{name}`")));
            }
        }
        Ok(s)
    }
}

fn grad_for<'a>(grads: &'a BTreeMap<String, Tensor>, name: &str, p: &Tensor) -> Result<Option<&'a Tensor>> {
    match grads.get(name) {
        None => Ok(None),
        Some(g) if g.shape() == p.shape() => Ok(Some(g)),
        Some(g) => Err(Error::invalid(format!(
            "gradient for `{name}` has shape {:?}, parameter has {:?}",
            g.shape(),
            p.shape()
        ))),
    }
}

/// One Adadelta update; the resulting step is multiplied by `step_rate`.
/// Parameters without a gradient are left untouched.
pub fn adadelta_step(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    step_rate: f64,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let Some(g) = grad_for(grads, name, p)? else { continue };
        let (eg2, edx2) = state.slots(name, p.shape())?;
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(eg2.data_mut().iter_mut().zip(edx2.data_mut().iter_mut()));
        for ((x, &gi), (sg, sd)) in it {
            *sg = ADADELTA_DECAY * *sg + (1.0 - ADADELTA_DECAY) * gi * gi;
            let dx = -((*sd + ADADELTA_EPS).sqrt() / (*sg + ADADELTA_EPS).sqrt()) * gi;
            *sd = ADADELTA_DECAY * *sd + (1.0 - ADADELTA_DECAY) * dx * dx;
            *x += step_rate * dx;
        }
    }
    state.step += 1;
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    step_rate: f64,
) -> Result<()> {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grad_for(grads, name, p)? else { continue };
        let (m, v) = state.slots(name, p.shape())?;
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((x, &gi), (mi, vi)) in it {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *x -= step_rate * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    Ok(())
}

pub fn optimizer_step(
    cfg: &OptimizerConfig,
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    match cfg.kind {
        OptimizerKind::Adadelta => adadelta_step(params, grads, state, cfg.step_rate),
        OptimizerKind::Adam => adam_step(params, grads, state, cfg.step_rate),
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}
