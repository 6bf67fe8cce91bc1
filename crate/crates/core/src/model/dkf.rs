//! Deep Kalman filter baseline.
//!
//! A bidirectional RNN proposes every `z_t` directly; the transition network
//! enters the bound only through `KL(q(z_t) || p(z_t | z_{t-1}, u_{t-1}))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{init_dense, Activation, ParamNodes, Params};
use super::{ElboGraph, ElboNodes, RolloutGraph};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::distributions::{
    annealed_kl_std_normal, kl_nodes, log_pdf_node, sample_node, split_gaussian, GaussianNodes,
};
use crate::environments::EnvKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DkfConfig {
    pub obs_dim: usize,
    pub ctrl_dim: usize,
    pub latent_dim: usize,
    /// Units per RNN direction.
    pub rnn_hidden: usize,
    /// Width of both hidden layers in the transition and emission networks.
    pub hidden: usize,
}

impl DkfConfig {
    pub fn for_env(env: EnvKind) -> Self {
        DkfConfig {
            obs_dim: env.obs_dim(),
            ctrl_dim: env.ctrl_dim(),
            latent_dim: 3,
            rnn_hidden: 128,
            hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("obs_dim", self.obs_dim),
            ("ctrl_dim", self.ctrl_dim),
            ("latent_dim", self.latent_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("dkf config: {name} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &DkfConfig, rng: &mut R) -> Params {
    let mut p = Params::new();
    let (nz, nu, dx, hr, h) = (cfg.latent_dim, cfg.ctrl_dim, cfg.obs_dim, cfg.rnn_hidden, cfg.hidden);
    for dir in ["fwd", "bwd"] {
        init_dense(&mut p, &format!("rec.rnn.{dir}.in"), dx + nu, hr, false, rng);
        p.insert(
            format!("rec.rnn.{dir}.rec"),
            Tensor::randn(&[hr, hr], (1.0 / hr as f64).sqrt(), rng),
        );
    }
    init_dense(&mut p, "rec.out", 2 * hr, 2 * nz, false, rng);
    init_dense(&mut p, "trans.l1", nz + nu, h, false, rng);
    init_dense(&mut p, "trans.l2", h, h, false, rng);
    init_dense(&mut p, "trans.out", h, 2 * nz, false, rng);
    init_dense(&mut p, "emit.l1", nz, h, false, rng);
    init_dense(&mut p, "emit.l2", h, h, false, rng);
    init_dense(&mut p, "emit.out", h, 2 * dx, false, rng);
    p
}

struct Builder<'a> {
    cfg: &'a DkfConfig,
    g: Graph,
    p: ParamNodes,
    rows: usize,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a DkfConfig, params: &Params, rows: usize) -> Self {
        let mut g = Graph::new();
        let p = ParamNodes::declare(&mut g, params);
        Builder { cfg, g, p, rows }
    }

    fn block(&mut self, x: NodeId, t: usize) -> NodeId {
        self.g.slice_rows(x, t * self.rows, self.rows)
    }

    /// `q(z_t | x_{1:T}, u_{1:T})` for every step, stacked time-major.
    fn recognition(&mut self, obs: NodeId, ctrl: NodeId, t: usize) -> GaussianNodes {
        let obs_rows = self.g.slice_rows(obs, 0, t * self.rows);
        let ctrl_rows = self.g.slice_rows(ctrl, 0, t * self.rows);
        let xin = self.g.concat_cols(&[obs_rows, ctrl_rows]);
        let mut dirs: Vec<Vec<NodeId>> = Vec::with_capacity(2);
        for (dir, reverse) in [("fwd", false), ("bwd", true)] {
            let proj = self.p.dense(&mut self.g, &format!("rec.rnn.{dir}.in"), xin, Activation::Identity);
            let rec = self.p.get(&format!("rec.rnn.{dir}.rec"));
            let mut states = vec![None; t];
            let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
            let mut prev: Option<NodeId> = None;
            for step in order {
                let pre = self.block(proj, step);
                let pre = match prev {
                    Some(h) => {
                        let r = self.g.matmul(h, rec);
                        self.g.add(pre, r)
                    }
                    None => pre,
                };
                let h = self.g.tanh(pre);
                states[step] = Some(h);
                prev = Some(h);
            }
            dirs.push(states.into_iter().map(|s| s.unwrap()).collect());
        }
        let fwd = self.g.concat_rows(&dirs[0]);
        let bwd = self.g.concat_rows(&dirs[1]);
        let both = self.g.concat_cols(&[fwd, bwd]);
        let out = self.p.dense(&mut self.g, "rec.out", both, Activation::Identity);
        split_gaussian(&mut self.g, out, self.cfg.latent_dim)
    }

    fn transition(&mut self, z_prev: NodeId, u_prev: NodeId) -> GaussianNodes {
        let x = self.g.concat_cols(&[z_prev, u_prev]);
        let h = self.p.dense(&mut self.g, "trans.l1", x, Activation::Sigmoid);
        let h = self.p.dense(&mut self.g, "trans.l2", h, Activation::Sigmoid);
        let out = self.p.dense(&mut self.g, "trans.out", h, Activation::Identity);
        split_gaussian(&mut self.g, out, self.cfg.latent_dim)
    }

    fn emission(&mut self, z: NodeId) -> GaussianNodes {
        let h = self.p.dense(&mut self.g, "emit.l1", z, Activation::Sigmoid);
        let h = self.p.dense(&mut self.g, "emit.l2", h, Activation::Sigmoid);
        let out = self.p.dense(&mut self.g, "emit.out", h, Activation::Identity);
        split_gaussian(&mut self.g, out, self.cfg.obs_dim)
    }
}

/// Bound graph with inputs `obs`, `ctrl` (time-major), `noise.z [t*rows, latent_dim]`
/// and `c [1]`. The objective is `recon - c * KL`; `kl_v` is identically zero.
pub fn build_elbo_graph(cfg: &DkfConfig, params: &Params, rows: usize, t: usize) -> ElboGraph {
    assert!(rows >= 1 && t >= 1);
    let mut bld = Builder::new(cfg, params, rows);
    let (nz, dx) = (cfg.latent_dim, cfg.obs_dim);
    let obs = bld.g.input("obs", &[t * rows, dx]);
    let ctrl = bld.g.input("ctrl", &[t * rows, cfg.ctrl_dim]);
    let noise = bld.g.input("noise.z", &[t * rows, nz]);
    let c = bld.g.input("c", &[1]);

    let q = bld.recognition(obs, ctrl, t);
    let z = sample_node(&mut bld.g, &q, noise);
    bld.g.output("z", z);

    let px = bld.emission(z);
    bld.g.output("recon_mean", px.mean);
    let recon = log_pdf_node(&mut bld.g, obs, px.mean, px.log_std, t * rows * dx);
    bld.g.label(recon, "recon");

    let q1 = GaussianNodes {
        mean: bld.block(q.mean, 0),
        log_std: bld.block(q.log_std, 0),
        std: bld.block(q.std, 0),
    };
    let mut kl = annealed_kl_std_normal(&mut bld.g, &q1, None, rows * nz);
    if t > 1 {
        let span = (t - 1) * rows;
        let z_prev = bld.g.slice_rows(z, 0, span);
        let u_prev = bld.g.slice_rows(ctrl, 0, span);
        let prior = bld.transition(z_prev, u_prev);
        let g = &mut bld.g;
        let q_rest = GaussianNodes {
            mean: g.slice_rows(q.mean, rows, span),
            log_std: g.slice_rows(q.log_std, rows, span),
            std: g.slice_rows(q.std, rows, span),
        };
        let kl_rest = kl_nodes(g, &q_rest, &prior, span * nz);
        kl = g.add(kl, kl_rest);
    }
    let g = &mut bld.g;
    g.label(kl, "kl_w");
    let kl_v = g.scalar(0.0);
    let ckl = g.mul_scalar(kl, c);
    let annealed_total = g.sub(recon, ckl);
    g.label(annealed_total, "annealed_total");
    let bound = g.sub(recon, kl);
    let loss = g.neg(annealed_total);
    g.label(loss, "loss");

    ElboGraph {
        graph: bld.g,
        nodes: ElboNodes {
            recon,
            kl_w: kl,
            kl_v,
            annealed_total,
            bound,
            loss,
            z,
            recon_mean: px.mean,
        },
        rows,
        t,
    }
}

/// `z_1` from recognition over the first `obs_frames` observations, then
/// `z_t ~ p(z_t | z_{t-1}, u_{t-1})`. Inputs: `obs`, `ctrl [horizon*rows]`,
/// `noise.z [horizon*rows, latent_dim]`.
pub fn build_generative_graph(
    cfg: &DkfConfig,
    params: &Params,
    rows: usize,
    obs_frames: usize,
    horizon: usize,
) -> RolloutGraph {
    assert!(rows >= 1 && obs_frames >= 1 && horizon >= 1);
    let mut bld = Builder::new(cfg, params, rows);
    let obs = bld.g.input("obs", &[obs_frames * rows, cfg.obs_dim]);
    let ctrl = bld.g.input("ctrl", &[horizon * rows, cfg.ctrl_dim]);
    let noise = bld.g.input("noise.z", &[horizon * rows, cfg.latent_dim]);
    let frames = obs_frames.min(horizon);
    let q = bld.recognition(obs, ctrl, frames);
    let q1 = GaussianNodes {
        mean: bld.block(q.mean, 0),
        log_std: bld.block(q.log_std, 0),
        std: bld.block(q.std, 0),
    };
    let e0 = bld.block(noise, 0);
    let mut z = sample_node(&mut bld.g, &q1, e0);
    let mut zs = vec![z];
    for k in 1..horizon {
        let u = bld.block(ctrl, k - 1);
        let p = bld.transition(z, u);
        let e = bld.block(noise, k);
        z = sample_node(&mut bld.g, &p, e);
        zs.push(z);
    }
    let z_all = bld.g.concat_rows(&zs);
    let px = bld.emission(z_all);
    bld.g.output("z", z_all);
    bld.g.output("recon_mean", px.mean);
    RolloutGraph {
        graph: bld.g,
        z: z_all,
        mean: px.mean,
        rows,
        horizon,
    }
}
