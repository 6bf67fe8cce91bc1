//! DVBF with locally linear transitions.
//!
//! The recognition network infers process noise `w_t`, never states. States
//! follow `z_{t+1} = A_t z_t + B_t u_t + C_t w_t`, with `(A_t, B_t, C_t)` an
//! `alpha_t`-weighted mixture of `M` learned triplets, so reconstruction
//! errors at `t + 1` backpropagate through every earlier transition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{init_dense, Activation, ParamNodes, Params};
use super::{ElboGraph, ElboNodes, RolloutGraph};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::distributions::{
    annealed_kl_std_normal, log_pdf_shared_std, sample_node, split_gaussian, GaussianNodes, MAX_STD, MIN_STD,
};
use crate::environments::EnvKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialNet {
    /// MLP over the first `init_window` frames and `init_window - 1` controls.
    Mlp,
    /// Bidirectional tanh RNN over the whole observed sequence.
    BiRnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvbfConfig {
    pub obs_dim: usize,
    pub ctrl_dim: usize,
    pub latent_dim: usize,
    pub noise_dim: usize,
    /// Number of matrix triplets in the transition bank.
    pub transitions: usize,
    pub hidden: usize,
    /// Hidden width of the mixing network; 0 means softmax of an affine map.
    pub alpha_hidden: usize,
    pub init_window: usize,
    pub initial_net: InitialNet,
    pub emission_output: Activation,
    /// Variational posterior over the bank; `false` learns point estimates.
    pub bayesian_bank: bool,
}

impl DvbfConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let (latent, transitions, emission_output) = match env {
            EnvKind::Pendulum => (3, 16, Activation::Identity),
            EnvKind::Ball => (4, 16, Activation::Identity),
            EnvKind::TwoBalls => (10, 64, Activation::Sigmoid),
        };
        DvbfConfig {
            obs_dim: env.obs_dim(),
            ctrl_dim: env.ctrl_dim(),
            latent_dim: latent,
            noise_dim: latent,
            transitions,
            hidden: 128,
            alpha_hidden: 0,
            init_window: 3,
            initial_net: InitialNet::Mlp,
            emission_output,
            bayesian_bank: true,
        }
    }

    /// Columns of one per-component matrix `[A | B | C]`.
    pub fn block_cols(&self) -> usize {
        self.latent_dim + self.ctrl_dim + self.noise_dim
    }

    /// Entries of one bank component.
    pub fn component_len(&self) -> usize {
        self.latent_dim * self.block_cols()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("obs_dim", self.obs_dim),
            ("ctrl_dim", self.ctrl_dim),
            ("latent_dim", self.latent_dim),
            ("noise_dim", self.noise_dim),
            ("transitions", self.transitions),
            ("hidden", self.hidden),
            ("init_window", self.init_window),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("dvbf config: {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Initial parameter values.
pub fn init_params<R: Rng + ?Sized>(cfg: &DvbfConfig, rng: &mut R) -> Params {
    let mut p = Params::new();
    let (nz, nu, nw, dx, h) = (cfg.latent_dim, cfg.ctrl_dim, cfg.noise_dim, cfg.obs_dim, cfg.hidden);

    match cfg.initial_net {
        InitialNet::Mlp => {
            let fan_in = cfg.init_window * dx + (cfg.init_window - 1) * nu;
            init_dense(&mut p, "init.l1", fan_in, h, false, rng);
        }
        InitialNet::BiRnn => {
            for dir in ["fwd", "bwd"] {
                init_dense(&mut p, &format!("init.rnn.{dir}.in"), dx + nu, h, false, rng);
                p.insert(
                    format!("init.rnn.{dir}.rec"),
                    Tensor::randn(&[h, h], (1.0 / h as f64).sqrt(), rng),
                );
            }
            init_dense(&mut p, "init.l1", 2 * h, h, false, rng);
        }
    }
    init_dense(&mut p, "init.out", h, 2 * nw, false, rng);
    init_dense(&mut p, "init_trans.l1", nw, h, false, rng);
    init_dense(&mut p, "init_trans.out", h, nz, false, rng);

    let rec_in = nz + dx + nu;
    let std = (1.0 / rec_in as f64).sqrt();
    p.insert("rec.l1.wz", Tensor::randn(&[nz, h], std, rng));
    p.insert("rec.l1.wx", Tensor::randn(&[dx, h], std, rng));
    p.insert("rec.l1.wu", Tensor::randn(&[nu, h], std, rng));
    p.insert("rec.l1.b", Tensor::zeros(&[h]));
    init_dense(&mut p, "rec.out", h, 2 * nw, true, rng);

    if cfg.alpha_hidden > 0 {
        init_dense(&mut p, "alpha.l1", nz + nu, cfg.alpha_hidden, false, rng);
        init_dense(&mut p, "alpha.out", cfg.alpha_hidden, cfg.transitions, false, rng);
    } else {
        init_dense(&mut p, "alpha.out", nz + nu, cfg.transitions, false, rng);
    }

    init_dense(&mut p, "emit.l1", nz, h, false, rng);
    init_dense(&mut p, "emit.out", h, dx, false, rng);
    p.insert("emit.log_std", Tensor::scalar(0.0));

    p.insert("bank.mean", init_bank_mean(cfg, rng));
    p.insert(
        "bank.log_std",
        Tensor::full(&[cfg.transitions, cfg.component_len()], BANK_INIT_STD.ln()),
    );
    p.insert("prior.log_var", Tensor::scalar(0.0));
    p
}

/// Initial posterior std of every bank entry.
pub const BANK_INIT_STD: f64 = 0.01;

/// `A = I + N(0, 0.01^2)`, `B, C ~ N(0, 0.1^2)` for every component.
fn init_bank_mean<R: Rng + ?Sized>(cfg: &DvbfConfig, rng: &mut R) -> Tensor {
    let (nz, cols) = (cfg.latent_dim, cfg.block_cols());
    let mut data = Vec::with_capacity(cfg.transitions * cfg.component_len());
    for _ in 0..cfg.transitions {
        let noise = Tensor::randn(&[nz, cols], 1.0, rng);
        for i in 0..nz {
            for j in 0..cols {
                let e = noise.data()[i * cols + j];
                data.push(if j < nz {
                    (if i == j { 1.0 } else { 0.0 }) + 0.01 * e
                } else {
                    0.1 * e
                });
            }
        }
    }
    Tensor::matrix(cfg.transitions, cfg.component_len(), data)
}

/// Read-only view of the transition bank stored in a parameter set.
pub struct TransitionBank<'a> {
    cfg: &'a DvbfConfig,
    mean: &'a Tensor,
    log_std: &'a Tensor,
}

/// One transition triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl<'a> TransitionBank<'a> {
    pub fn new(cfg: &'a DvbfConfig, params: &'a Params) -> Self {
        TransitionBank {
            cfg,
            mean: params.get("bank.mean").expect("bank.mean"),
            log_std: params.get("bank.log_std").expect("bank.log_std"),
        }
    }

    pub fn len(&self) -> usize {
        self.cfg.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.transitions == 0
    }

    /// Reparametrized draw of every bank entry; `None` gives posterior means.
    pub fn sample(&self, noise: Option<&Tensor>) -> Result<Tensor> {
        match noise {
            None => Ok(self.mean.clone()),
            Some(_) if !self.cfg.bayesian_bank => Ok(self.mean.clone()),
            Some(n) => {
                if n.shape() != self.mean.shape() {
                    return Err(Error::invalid(format!(
                        "bank noise shape {:?}, expected {:?}",
                        n.shape(),
                        self.mean.shape()
                    )));
                }
                let mut out = self.mean.clone();
                for ((o, l), e) in out.data_mut().iter_mut().zip(self.log_std.data()).zip(n.data()) {
                    *o += l.clamp(MIN_STD.ln(), MAX_STD.ln()).exp() * e;
                }
                Ok(out)
            }
        }
    }

    /// Splits component `i` of a sampled bank into `(A, B, C)`.
    pub fn triplet(&self, v: &Tensor, i: usize) -> Triplet {
        split_block(self.cfg, v.row(i))
    }
}

fn split_block(cfg: &DvbfConfig, block: &[f64]) -> Triplet {
    let (nz, nu, nw, cols) = (cfg.latent_dim, cfg.ctrl_dim, cfg.noise_dim, cfg.block_cols());
    let take = |start: usize, width: usize| {
        let mut d = Vec::with_capacity(nz * width);
        for r in 0..nz {
            d.extend_from_slice(&block[r * cols + start..r * cols + start + width]);
        }
        Tensor::matrix(nz, width, d)
    };
    Triplet {
        a: take(0, nz),
        b: take(nz, nu),
        c: take(nz + nu, nw),
    }
}

/// Convex combination `sum_i alpha_i (A, B, C)^(i)` of a sampled bank.
pub fn mix_transition(alpha: &[f64], bank: &TransitionBank<'_>, v: &Tensor) -> Result<Triplet> {
    if alpha.len() != bank.len() {
        return Err(Error::invalid(format!(
            "{} mixing weights for {} bank components",
            alpha.len(),
            bank.len()
        )));
    }
    let total: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| a < -1e-6) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "mixing weights are not on the simplex (sum {total})"
        )));
    }
    let p = bank.cfg.component_len();
    let mut mixed = vec![0.0; p];
    for (i, &a) in alpha.iter().enumerate() {
        for (m, x) in mixed.iter_mut().zip(v.row(i)) {
            *m += a * x;
        }
    }
    Ok(split_block(bank.cfg, &mixed))
}

/// `A z + B u + C w`.
pub fn transition_step(z: &[f64], u: &[f64], w: &[f64], tr: &Triplet) -> Vec<f64> {
    let matvec = |m: &Tensor, x: &[f64]| -> Vec<f64> {
        let (r, c) = m.dims2().unwrap();
        assert_eq!(c, x.len());
        (0..r)
            .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let (az, bu, cw) = (matvec(&tr.a, z), matvec(&tr.b, u), matvec(&tr.c, w));
    (0..az.len()).map(|i| az[i] + bu[i] + cw[i]).collect()
}

struct Builder<'a> {
    cfg: &'a DvbfConfig,
    g: Graph,
    p: ParamNodes,
    rows: usize,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a DvbfConfig, params: &Params, rows: usize) -> Self {
        let mut g = Graph::new();
        let p = ParamNodes::declare(&mut g, params);
        Builder { cfg, g, p, rows }
    }

    fn block(&mut self, x: NodeId, t: usize) -> NodeId {
        self.g.slice_rows(x, t * self.rows, self.rows)
    }

    /// `q(w_1 | x, u)` from the observed prefix. `t_obs` frames of `obs` are bound.
    fn initial(&mut self, obs: NodeId, ctrl: NodeId, t_obs: usize, t_ctrl: usize) -> GaussianNodes {
        let (b, dx, nu, h) = (self.rows, self.cfg.obs_dim, self.cfg.ctrl_dim, self.cfg.hidden);
        let features = match self.cfg.initial_net {
            InitialNet::Mlp => {
                let w = self.cfg.init_window;
                let mut parts = Vec::with_capacity(2 * w - 1);
                for k in 0..w {
                    parts.push(if k < t_obs {
                        self.block(obs, k)
                    } else {
                        self.g.constant(Tensor::zeros(&[b, dx]))
                    });
                }
                for k in 0..w - 1 {
                    parts.push(if k < t_ctrl {
                        self.block(ctrl, k)
                    } else {
                        self.g.constant(Tensor::zeros(&[b, nu]))
                    });
                }
                let x = self.g.concat_cols(&parts);
                self.p.dense(&mut self.g, "init.l1", x, Activation::Relu)
            }
            InitialNet::BiRnn => {
                let obs_rows = self.g.slice_rows(obs, 0, t_obs * b);
                let ctrl_rows = self.g.slice_rows(ctrl, 0, t_obs * b);
                let xin = self.g.concat_cols(&[obs_rows, ctrl_rows]);
                let mut finals = Vec::with_capacity(2);
                for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                    let proj = self.p.dense(&mut self.g, &format!("init.rnn.{dir}.in"), xin, Activation::Identity);
                    let rec = self.p.get(&format!("init.rnn.{dir}.rec"));
                    let order: Vec<usize> = if reverse {
                        (0..t_obs).rev().collect()
                    } else {
                        (0..t_obs).collect()
                    };
                    let mut state: Option<NodeId> = None;
                    for t in order {
                        let pre = self.block(proj, t);
                        let pre = match state {
                            Some(hprev) => {
                                let r = self.g.matmul(hprev, rec);
                                self.g.add(pre, r)
                            }
                            None => pre,
                        };
                        state = Some(self.g.tanh(pre));
                    }
                    finals.push(state.expect("at least one frame"));
                }
                debug_assert_eq!(h, self.cfg.hidden);
                let cat = self.g.concat_cols(&finals);
                self.p.dense(&mut self.g, "init.l1", cat, Activation::Relu)
            }
        };
        let out = self.p.dense(&mut self.g, "init.out", features, Activation::Identity);
        split_gaussian(&mut self.g, out, self.cfg.noise_dim)
    }

    fn initial_transition(&mut self, w: NodeId) -> NodeId {
        let h = self.p.dense(&mut self.g, "init_trans.l1", w, Activation::Relu);
        self.p.dense(&mut self.g, "init_trans.out", h, Activation::Identity)
    }

    fn alpha(&mut self, z: NodeId, u: NodeId) -> NodeId {
        let x = self.g.concat_cols(&[z, u]);
        let logits = if self.cfg.alpha_hidden > 0 {
            let h = self.p.dense(&mut self.g, "alpha.l1", x, Activation::Relu);
            self.p.dense(&mut self.g, "alpha.out", h, Activation::Identity)
        } else {
            self.p.dense(&mut self.g, "alpha.out", x, Activation::Identity)
        };
        self.g.softmax(logits)
    }

    fn bank(&mut self, noise_v: NodeId) -> NodeId {
        let mean = self.p.get("bank.mean");
        if !self.cfg.bayesian_bank {
            return mean;
        }
        let raw = self.p.get("bank.log_std");
        let q = crate::distributions::std_from_raw(&mut self.g, mean, raw);
        sample_node(&mut self.g, &q, noise_v)
    }

    /// Returns `(z_next, alpha)`.
    fn transition(&mut self, z: NodeId, u: NodeId, w: NodeId, v: NodeId) -> (NodeId, NodeId) {
        let alpha = self.alpha(z, u);
        let mixed = self.g.matmul(alpha, v);
        let zuw = self.g.concat_cols(&[z, u, w]);
        let next = self
            .g
            .batch_matvec(mixed, zuw, self.cfg.latent_dim, self.cfg.block_cols());
        (next, alpha)
    }

    fn recognition(&mut self, z: NodeId, x_proj: NodeId, u: NodeId) -> GaussianNodes {
        let wz = self.p.get("rec.l1.wz");
        let wu = self.p.get("rec.l1.wu");
        let bias = self.p.get("rec.l1.b");
        let zp = self.g.matmul(z, wz);
        let up = self.g.matmul(u, wu);
        let s = self.g.add(zp, x_proj);
        let s = self.g.add(s, up);
        let pre = self.g.add_row(s, bias);
        let h = self.g.relu(pre);
        let out = self.p.dense(&mut self.g, "rec.out", h, Activation::Identity);
        split_gaussian(&mut self.g, out, self.cfg.noise_dim)
    }

    fn emission(&mut self, z_all: NodeId) -> NodeId {
        let h = self.p.dense(&mut self.g, "emit.l1", z_all, Activation::Relu);
        self.p.dense(&mut self.g, "emit.out", h, self.cfg.emission_output)
    }

    /// `KL(q(v) || N(0, exp(prior.log_var) I))`.
    fn kl_bank(&mut self) -> NodeId {
        let n = (self.cfg.transitions * self.cfg.component_len()) as f64;
        let mean = self.p.get("bank.mean");
        let raw = self.p.get("bank.log_std");
        let lam = self.p.get("prior.log_var");
        let ls = self.g.clamp(raw, MIN_STD.ln(), MAX_STD.ln());
        let two_ls = self.g.scale(ls, 2.0);
        let var = self.g.exp(two_ls);
        let m2 = self.g.square(mean);
        let s = self.g.add(var, m2);
        let s = self.g.sum(s);
        let neg_lam = self.g.neg(lam);
        let inv_prior = self.g.exp(neg_lam);
        let quad = self.g.mul(s, inv_prior);
        let quad = self.g.scale(quad, 0.5);
        let lam_term = self.g.scale(lam, 0.5 * n);
        let ls_sum = self.g.sum(ls);
        let t = self.g.sub(lam_term, ls_sum);
        let t = self.g.add(t, quad);
        self.g.add_const(t, -0.5 * n)
    }
}

/// Unrolled training/filtering graph for `rows` sequences of `t` frames.
///
/// Bound inputs: `obs [t*rows, obs_dim]`, `ctrl [t*rows, ctrl_dim]` (both
/// time-major), `noise.w [t*rows, noise_dim]` (block 0 drives the initial
/// state), `noise.v [M, component_len]`, `c [1]`, `kl_v_scale [1]`.
pub fn build_elbo_graph(cfg: &DvbfConfig, params: &Params, rows: usize, t: usize) -> ElboGraph {
    assert!(rows >= 1 && t >= 1);
    let mut bld = Builder::new(cfg, params, rows);
    let (nw, dx, nu) = (cfg.noise_dim, cfg.obs_dim, cfg.ctrl_dim);
    let g = &mut bld.g;
    let obs = g.input("obs", &[t * rows, dx]);
    let ctrl = g.input("ctrl", &[t * rows, nu]);
    let noise_w = g.input("noise.w", &[t * rows, nw]);
    let noise_v = g.input("noise.v", &[cfg.transitions, cfg.component_len()]);
    let c = g.input("c", &[1]);
    let kl_v_scale = g.input("kl_v_scale", &[1]);

    let v = bld.bank(noise_v);
    let q0 = bld.initial(obs, ctrl, t, t);
    let e0 = bld.block(noise_w, 0);
    let w0 = sample_node(&mut bld.g, &q0, e0);
    let z0 = bld.initial_transition(w0);

    let mut zs = vec![z0];
    let mut qs = vec![q0];
    let mut alphas = Vec::new();
    if t > 1 {
        let next_obs = bld.g.slice_rows(obs, rows, (t - 1) * rows);
        let wx = bld.p.get("rec.l1.wx");
        let x_proj = bld.g.matmul(next_obs, wx);
        for k in 0..t - 1 {
            let z = zs[k];
            let u = bld.block(ctrl, k);
            let xp = bld.block(x_proj, k);
            let q = bld.recognition(z, xp, u);
            let e = bld.block(noise_w, k + 1);
            let w = sample_node(&mut bld.g, &q, e);
            let (next, alpha) = bld.transition(z, u, w, v);
            zs.push(next);
            qs.push(q);
            alphas.push(alpha);
        }
    }

    let g = &mut bld.g;
    let z_all = g.concat_rows(&zs);
    g.output("z", z_all);
    let w_mean = {
        let ms: Vec<NodeId> = qs.iter().map(|q| q.mean).collect();
        g.concat_rows(&ms)
    };
    let w_log_std = {
        let ls: Vec<NodeId> = qs.iter().map(|q| q.log_std).collect();
        g.concat_rows(&ls)
    };
    g.output("w.mean", w_mean);
    g.output("w.log_std", w_log_std);
    if !alphas.is_empty() {
        let a = g.concat_rows(&alphas);
        g.output("alpha", a);
    }

    let recon_mean = bld.emission(z_all);
    let g = &mut bld.g;
    g.output("recon_mean", recon_mean);
    let raw = bld.p.get("emit.log_std");
    let log_std = g.clamp(raw, MIN_STD.ln(), MAX_STD.ln());
    let recon = log_pdf_shared_std(g, obs, recon_mean, log_std, t * rows * dx);
    g.label(recon, "recon");

    let q_all = GaussianNodes {
        mean: w_mean,
        log_std: w_log_std,
        std: w_log_std,
    };
    let n_w = t * rows * nw;
    let kl_w_annealed = annealed_kl_std_normal(g, &q_all, Some(c), n_w);
    g.label(kl_w_annealed, "kl_w_annealed");
    let kl_w = annealed_kl_std_normal(g, &q_all, None, n_w);
    g.label(kl_w, "kl_w");

    let kl_v = if cfg.bayesian_bank {
        let raw = bld.kl_bank();
        bld.g.mul(raw, kl_v_scale)
    } else {
        bld.g.scalar(0.0)
    };
    let g = &mut bld.g;
    g.label(kl_v, "kl_v");

    let scaled_recon = g.mul_scalar(recon, c);
    let t1 = g.sub(scaled_recon, kl_w_annealed);
    let annealed_total = g.sub(t1, kl_v);
    g.label(annealed_total, "annealed_total");
    let b1 = g.sub(recon, kl_w);
    let bound = g.sub(b1, kl_v);
    let loss = g.neg(annealed_total);
    g.label(loss, "loss");

    ElboGraph {
        graph: bld.g,
        nodes: ElboNodes {
            recon,
            kl_w,
            kl_v,
            annealed_total,
            bound,
            loss,
            z: z_all,
            recon_mean,
        },
        rows,
        t,
    }
}

/// Generative unroll: `z_1` from the first `obs_frames` observations, then
/// `horizon - 1` transitions driven by `w_t = noise` (prior draws).
///
/// Bound inputs: `obs [obs_frames*rows, obs_dim]`, `ctrl [horizon*rows, ctrl_dim]`,
/// `noise.w [horizon*rows, noise_dim]` (block 0 drives `q(w_1)`), `noise.v`.
pub fn build_generative_graph(
    cfg: &DvbfConfig,
    params: &Params,
    rows: usize,
    obs_frames: usize,
    horizon: usize,
) -> RolloutGraph {
    assert!(rows >= 1 && obs_frames >= 1 && horizon >= 1);
    let mut bld = Builder::new(cfg, params, rows);
    let g = &mut bld.g;
    let obs = g.input("obs", &[obs_frames * rows, cfg.obs_dim]);
    let ctrl = g.input("ctrl", &[horizon * rows, cfg.ctrl_dim]);
    let noise_w = g.input("noise.w", &[horizon * rows, cfg.noise_dim]);
    let noise_v = g.input("noise.v", &[cfg.transitions, cfg.component_len()]);

    let v = bld.bank(noise_v);
    let q0 = bld.initial(obs, ctrl, obs_frames, horizon);
    let e0 = bld.block(noise_w, 0);
    let w0 = sample_node(&mut bld.g, &q0, e0);
    let mut z = bld.initial_transition(w0);
    let mut zs = vec![z];
    for k in 0..horizon - 1 {
        let u = bld.block(ctrl, k);
        let w = bld.block(noise_w, k + 1);
        let (next, _) = bld.transition(z, u, w, v);
        zs.push(next);
        z = next;
    }
    let z_all = bld.g.concat_rows(&zs);
    let mean = bld.emission(z_all);
    bld.g.output("z", z_all);
    bld.g.output("recon_mean", mean);
    RolloutGraph {
        graph: bld.g,
        z: z_all,
        mean,
        rows,
        horizon,
    }
}

/// `q(w_t | z_t, x_{t+1}, u_t)` for a batch of rows.
pub fn infer_w(
    cfg: &DvbfConfig,
    params: &Params,
    z: &Tensor,
    x_next: &Tensor,
    u: &Tensor,
) -> Result<crate::distributions::DiagGaussian> {
    let rows = z.dims2().map(|d| d.0).unwrap_or(0);
    if rows == 0 {
        return Err(Error::invalid("infer_w expects a matrix of latent states"));
    }
    let mut bld = Builder::new(cfg, params, rows);
    let zn = bld.g.input("z", &[rows, cfg.latent_dim]);
    let xn = bld.g.input("x_next", &[rows, cfg.obs_dim]);
    let un = bld.g.input("u", &[rows, cfg.ctrl_dim]);
    let wx = bld.p.get("rec.l1.wx");
    let xp = bld.g.matmul(xn, wx);
    let q = bld.recognition(zn, xp, un);
    let mut data = std::collections::BTreeMap::new();
    data.insert("z".to_string(), z.clone());
    data.insert("x_next".to_string(), x_next.clone());
    data.insert("u".to_string(), u.clone());
    let values = bld.g.forward(&(&data, params))?;
    crate::distributions::DiagGaussian::new(values.get(q.mean).clone(), values.get(q.std).clone())
}
