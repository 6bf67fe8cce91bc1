//! Diagonal Gaussians: reparametrized sampling, densities, KL and the
//! annealed KL used by the tempered bound.
//!
//! Every operation exists twice: on plain tensors (evaluation, oracles) and
//! as graph builders (training). The graph versions take log-std nodes
//! because networks emit log-std; see [`std_from_raw`].

use std::f64::consts::PI;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const MIN_STD: f64 = 1e-5;
pub const MAX_STD: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::invalid(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("std must be positive, got {s}")));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Tensor::zeros(&[dim]),
            std: Tensor::ones(&[dim]),
        }
    }

    /// Builds from an unconstrained log-std, clamping std into
    /// `[MIN_STD, MAX_STD]`.
    pub fn from_log_std(mean: Tensor, log_std: &Tensor) -> Result<Self> {
        let std = log_std.map(|l| l.clamp(MIN_STD.ln(), MAX_STD.ln()).exp());
        DiagGaussian::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_len(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.len() != self.dim() {
            return Err(Error::invalid(format!(
                "{what} has {} entries, distribution has {}",
                t.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `mean + std * noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        self.check_len(noise, "noise")?;
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.std.data())
            .zip(noise.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        Ok(Tensor::new(self.mean.shape().to_vec(), data))
    }

    pub fn log_pdf(&self, x: &Tensor) -> Result<f64> {
        self.check_len(x, "x")?;
        Ok(self
            .mean
            .data()
            .iter()
            .zip(self.std.data())
            .zip(x.data())
            .map(|((m, s), x)| -0.5 * (2.0 * PI * s * s).ln() - (x - m) * (x - m) / (2.0 * s * s))
            .sum())
    }

    /// `KL(self || p)`.
    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        self.annealed_kl(p, 1.0)
    }

    /// Closed form of `E_self[ln self - c ln p]`, summed over dimensions.
    /// Equals `kl(p)` at `c = 1`.
    pub fn annealed_kl(&self, p: &DiagGaussian, c: f64) -> Result<f64> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::invalid(format!(
                "inverse temperature must lie in (0, 1], got {c}"
            )));
        }
        if p.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "KL between dimensions {} and {}",
                self.dim(),
                p.dim()
            )));
        }
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (mq, sq) = (self.mean.data()[i], self.std.data()[i]);
            let (mp, sp) = (p.mean.data()[i], p.std.data()[i]);
            let (lq, lp) = (sq.ln(), sp.ln());
            total += c * (HALF_LN_2PI + lp) - (HALF_LN_2PI + lq)
                + c * (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp)
                - 0.5;
        }
        // Exact cancellation at c = 1 keeps kl(q, q) at zero.
        if c == 1.0 {
            total = 0.0;
            for i in 0..self.dim() {
                let (mq, sq) = (self.mean.data()[i], self.std.data()[i]);
                let (mp, sp) = (p.mean.data()[i], p.std.data()[i]);
                total += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
            }
        }
        Ok(total)
    }
}

/// Graph handles of a diagonal Gaussian (rank-2, one distribution per row).
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub log_std: NodeId,
    pub std: NodeId,
}

/// Clamps a raw log-std node and exponentiates it.
pub fn std_from_raw(g: &mut Graph, mean: NodeId, raw_log_std: NodeId) -> GaussianNodes {
    let log_std = g.clamp(raw_log_std, MIN_STD.ln(), MAX_STD.ln());
    let std = g.exp(log_std);
    GaussianNodes { mean, log_std, std }
}

/// Splits a `[B, 2d]` network output into `(mean, log-std)` halves.
pub fn split_gaussian(g: &mut Graph, out: NodeId, d: usize) -> GaussianNodes {
    let mean = g.slice_cols(out, 0, d);
    let raw = g.slice_cols(out, d, d);
    std_from_raw(g, mean, raw)
}

/// Reparametrized draw `mean + std * noise`.
pub fn sample_node(g: &mut Graph, q: &GaussianNodes, noise: NodeId) -> NodeId {
    let scaled = g.mul(q.std, noise);
    g.add(q.mean, scaled)
}

/// Sum of elementwise Gaussian log-densities with per-entry log-std.
pub fn log_pdf_node(g: &mut Graph, x: NodeId, mean: NodeId, log_std: NodeId, n: usize) -> NodeId {
    let diff = g.sub(x, mean);
    let sq = g.square(diff);
    let inv_var = {
        let m2 = g.scale(log_std, -2.0);
        g.exp(m2)
    };
    let quad = g.mul(sq, inv_var);
    let quad_sum = g.sum(quad);
    let ls_sum = g.sum(log_std);
    let half_quad = g.scale(quad_sum, -0.5);
    let t = g.sub(half_quad, ls_sum);
    g.add_const(t, -(n as f64) * HALF_LN_2PI)
}

/// Sum of Gaussian log-densities sharing one scalar log-std node.
pub fn log_pdf_shared_std(g: &mut Graph, x: NodeId, mean: NodeId, log_std: NodeId, n: usize) -> NodeId {
    let diff = g.sub(x, mean);
    let sq = g.square(diff);
    let sse = g.sum(sq);
    let m2 = g.scale(log_std, -2.0);
    let inv_var = g.exp(m2);
    let quad = g.mul(sse, inv_var);
    let half_quad = g.scale(quad, -0.5);
    let norm = g.scale(log_std, n as f64);
    let t = g.sub(half_quad, norm);
    g.add_const(t, -(n as f64) * HALF_LN_2PI)
}

/// `E_q[ln q - c ln N(0, I)]` summed over all `n` entries of `q`; `c` is a
/// one-element node. Pass `None` for `c = 1`, which is the plain KL.
pub fn annealed_kl_std_normal(g: &mut Graph, q: &GaussianNodes, c: Option<NodeId>, n: usize) -> NodeId {
    let two_ls = g.scale(q.log_std, 2.0);
    let var = g.exp(two_ls);
    let m2 = g.square(q.mean);
    let s = g.add(var, m2);
    let s_sum = g.sum(s);
    let ls_sum = g.sum(q.log_std);
    let nf = n as f64;
    // Cross-entropy part: n/2 ln 2pi + sum(var + mean^2)/2, scaled by c.
    let half = g.scale(s_sum, 0.5);
    let cross = g.add_const(half, nf * HALF_LN_2PI);
    let cross = match c {
        Some(c) => g.mul_scalar(cross, c),
        None => cross,
    };
    let t = g.sub(cross, ls_sum);
    g.add_const(t, -nf * (HALF_LN_2PI + 0.5))
}

/// `KL(q || p)` for diagonal Gaussians given as graph nodes of equal shape.
pub fn kl_nodes(g: &mut Graph, q: &GaussianNodes, p: &GaussianNodes, n: usize) -> NodeId {
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let two_lq = g.scale(q.log_std, 2.0);
    let vq = g.exp(two_lq);
    let num = g.add(vq, dm2);
    let m2lp = g.scale(p.log_std, -2.0);
    let inv_vp = g.exp(m2lp);
    let ratio = g.mul(num, inv_vp);
    let ratio_sum = g.sum(ratio);
    let half = g.scale(ratio_sum, 0.5);
    let diff_ls = g.sub(p.log_std, q.log_std);
    let ls = g.sum(diff_ls);
    let t = g.add(ls, half);
    g.add_const(t, -0.5 * n as f64)
}
