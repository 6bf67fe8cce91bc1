//! Ground-truth systems, renderers, motor babbling and dataset generation.

mod ball;
mod dataset;
mod pendulum;
mod render;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ball::{ball_center_px, ball_step, render_balls, BallState, BALL_RADIUS_PX};
pub use dataset::{read_container, write_container, Manifest, FORMAT_VERSION};
pub use pendulum::{pendulum_step, render_pendulum, rk4, PendulumState};
pub use render::SUPERSAMPLE;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub mod constants {
    pub use super::pendulum::{
        DAMPING, DT, GRAVITY, LENGTH, MASS, ROD_LENGTH_PX, ROD_WIDTH_PX, SUBSTEPS,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Pendulum,
    Ball,
    TwoBalls,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Pendulum, EnvKind::Ball, EnvKind::TwoBalls];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Ball => "ball",
            EnvKind::TwoBalls => "two-balls",
        }
    }

    pub fn image_side(self) -> usize {
        match self {
            EnvKind::Pendulum | EnvKind::Ball => 16,
            EnvKind::TwoBalls => 20,
        }
    }

    pub fn obs_dim(self) -> usize {
        self.image_side() * self.image_side()
    }

    pub fn ctrl_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 1,
            EnvKind::Ball | EnvKind::TwoBalls => 2,
        }
    }

    pub fn truth_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 2,
            EnvKind::Ball => 4,
            EnvKind::TwoBalls => 8,
        }
    }

    /// Standard deviation of motor-babbling controls.
    pub fn ctrl_std(self) -> f64 {
        match self {
            EnvKind::Pendulum => 2.0,
            EnvKind::Ball | EnvKind::TwoBalls => 0.05,
        }
    }

    /// Seconds per frame (balls move in box widths per step).
    pub fn dt(self) -> f64 {
        match self {
            EnvKind::Pendulum => pendulum::DT,
            EnvKind::Ball | EnvKind::TwoBalls => 1.0,
        }
    }

    /// Names of the ground-truth columns.
    pub fn truth_names(self) -> Vec<&'static str> {
        match self {
            EnvKind::Pendulum => vec!["angle", "angular_velocity"],
            EnvKind::Ball => vec!["x", "y", "vx", "vy"],
            EnvKind::TwoBalls => vec!["x1", "y1", "vx1", "vy1", "x2", "y2", "vx2", "vy2"],
        }
    }

    pub fn constants(self) -> EnvConstants {
        EnvConstants::for_env(self)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown environment `{s}`")))
    }
}

/// Every constant that shapes a generated dataset; echoed into manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConstants {
    pub image_side: usize,
    pub dt: f64,
    pub ctrl_std: f64,
    pub pendulum_mass: f64,
    pub pendulum_length: f64,
    pub pendulum_damping: f64,
    pub gravity: f64,
    pub rk4_substeps: usize,
    pub rod_length_px: f64,
    pub rod_width_px: f64,
    pub init_angle_range: [f64; 2],
    pub init_angular_velocity_range: [f64; 2],
    pub ball_radius_px: f64,
    pub init_position_margin: f64,
    pub init_speed_range: [f64; 2],
    pub supersample: usize,
}

pub const INIT_ANGULAR_VELOCITY: f64 = 8.0;
pub const INIT_POSITION_MARGIN: f64 = 0.1;
pub const INIT_SPEED: f64 = 0.1;

impl EnvConstants {
    fn for_env(env: EnvKind) -> Self {
        EnvConstants {
            image_side: env.image_side(),
            dt: env.dt(),
            ctrl_std: env.ctrl_std(),
            pendulum_mass: pendulum::MASS,
            pendulum_length: pendulum::LENGTH,
            pendulum_damping: pendulum::DAMPING,
            gravity: pendulum::GRAVITY,
            rk4_substeps: pendulum::SUBSTEPS,
            rod_length_px: pendulum::ROD_LENGTH_PX,
            rod_width_px: pendulum::ROD_WIDTH_PX,
            init_angle_range: [0.0, std::f64::consts::TAU],
            init_angular_velocity_range: [-INIT_ANGULAR_VELOCITY, INIT_ANGULAR_VELOCITY],
            ball_radius_px: BALL_RADIUS_PX,
            init_position_margin: INIT_POSITION_MARGIN,
            init_speed_range: [-INIT_SPEED, INIT_SPEED],
            supersample: SUPERSAMPLE,
        }
    }
}

/// I.i.d. `N(0, scale^2)` controls, `t x dim` row-major.
pub fn motor_babbling<R: Rng + ?Sized>(dim: usize, t: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..dim * t)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// [`motor_babbling`] from a fresh generator seeded with `seed`.
pub fn motor_babbling_seeded(dim: usize, t: usize, scale: f64, seed: u64) -> Vec<f64> {
    assert!(t >= 1, "sequence length must be at least 1");
    let mut rng = stream_rng(seed, 0);
    motor_babbling(dim, t, scale, &mut rng)
}

/// Draws an initial ground-truth state vector.
pub fn sample_initial_state<R: Rng + ?Sized>(env: EnvKind, rng: &mut R) -> Vec<f64> {
    let ball = |rng: &mut R| {
        let lo = INIT_POSITION_MARGIN;
        vec![
            rng.random_range(lo..1.0 - lo),
            rng.random_range(lo..1.0 - lo),
            rng.random_range(-INIT_SPEED..INIT_SPEED),
            rng.random_range(-INIT_SPEED..INIT_SPEED),
        ]
    };
    match env {
        EnvKind::Pendulum => vec![
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(-INIT_ANGULAR_VELOCITY..INIT_ANGULAR_VELOCITY),
        ],
        EnvKind::Ball => ball(rng),
        EnvKind::TwoBalls => {
            let mut s = ball(rng);
            s.extend(ball(rng));
            s
        }
    }
}

fn balls_of(state: &[f64]) -> Vec<BallState> {
    state
        .chunks_exact(4)
        .map(|c| BallState::new([c[0], c[1]], [c[2], c[3]]))
        .collect()
}

/// Renders the observation for a ground-truth state vector.
pub fn render_state(env: EnvKind, state: &[f64]) -> Vec<f64> {
    match env {
        EnvKind::Pendulum => render_pendulum(state[0], env.image_side()),
        EnvKind::Ball | EnvKind::TwoBalls => render_balls(&balls_of(state), env.image_side()),
    }
}

/// Advances a ground-truth state vector by one frame under control `u`.
pub fn step_state(env: EnvKind, state: &[f64], u: &[f64]) -> Vec<f64> {
    match env {
        EnvKind::Pendulum => {
            let s = pendulum_step(PendulumState::new(state[0], state[1]), u[0], env.dt());
            vec![s.angle, s.velocity]
        }
        EnvKind::Ball | EnvKind::TwoBalls => balls_of(state)
            .into_iter()
            .flat_map(|b| {
                let n = ball_step(b, [u[0], u[1]]);
                [n.position[0], n.position[1], n.velocity[0], n.velocity[1]]
            })
            .collect(),
    }
}

/// One simulated sequence: frame `t` shows state `t`, and control `t`
/// drives the transition to frame `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<f64>,
    pub ctrl: Vec<f64>,
    pub truth: Vec<f64>,
}

pub fn simulate(env: EnvKind, initial: &[f64], ctrl: &[f64]) -> Trajectory {
    let du = env.ctrl_dim();
    assert_eq!(initial.len(), env.truth_dim());
    assert!(ctrl.len() % du == 0 && !ctrl.is_empty());
    let t = ctrl.len() / du;
    let mut state = initial.to_vec();
    let mut obs = Vec::with_capacity(t * env.obs_dim());
    let mut truth = Vec::with_capacity(t * env.truth_dim());
    for k in 0..t {
        obs.extend(render_state(env, &state));
        truth.extend_from_slice(&state);
        state = step_state(env, &state, &ctrl[k * du..(k + 1) * du]);
    }
    Trajectory {
        obs,
        ctrl: ctrl.to_vec(),
        truth,
    }
}

/// Metadata carried by every [`SequenceBatch`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: EnvKind,
    pub split: String,
    pub seed: u64,
    pub stream: u64,
}

/// `n` sequences of `t` frames, stored row-major as (sequence, time, feature).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub meta: DatasetMeta,
    pub n: usize,
    pub t: usize,
    pub obs_dim: usize,
    pub ctrl_dim: usize,
    pub truth_dim: usize,
    pub obs: Vec<f64>,
    pub ctrl: Vec<f64>,
    /// Empty when `truth_dim == 0`.
    pub truth: Vec<f64>,
}

impl SequenceBatch {
    pub fn env(&self) -> EnvKind {
        self.meta.env
    }

    pub fn obs_frame(&self, seq: usize, t: usize) -> &[f64] {
        let d = self.obs_dim;
        let off = (seq * self.t + t) * d;
        &self.obs[off..off + d]
    }

    pub fn ctrl_at(&self, seq: usize, t: usize) -> &[f64] {
        let d = self.ctrl_dim;
        let off = (seq * self.t + t) * d;
        &self.ctrl[off..off + d]
    }

    pub fn truth_at(&self, seq: usize, t: usize) -> &[f64] {
        let d = self.truth_dim;
        let off = (seq * self.t + t) * d;
        &self.truth[off..off + d]
    }

    /// The listed sequences, in the given order.
    pub fn select(&self, indices: &[usize]) -> SequenceBatch {
        let pick = |data: &[f64], d: usize| -> Vec<f64> {
            let stride = self.t * d;
            indices
                .iter()
                .flat_map(|&i| data[i * stride..(i + 1) * stride].iter().copied())
                .collect()
        };
        SequenceBatch {
            meta: self.meta.clone(),
            n: indices.len(),
            t: self.t,
            obs_dim: self.obs_dim,
            ctrl_dim: self.ctrl_dim,
            truth_dim: self.truth_dim,
            obs: pick(&self.obs, self.obs_dim),
            ctrl: pick(&self.ctrl, self.ctrl_dim),
            truth: if self.truth_dim > 0 {
                pick(&self.truth, self.truth_dim)
            } else {
                Vec::new()
            },
        }
    }

    pub fn head(&self, n: usize) -> SequenceBatch {
        self.select(&(0..n.min(self.n)).collect::<Vec<_>>())
    }

    /// Population variance over all pixels.
    pub fn pixel_variance(&self) -> f64 {
        let n = self.obs.len() as f64;
        let mean = self.obs.iter().sum::<f64>() / n;
        self.obs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }
}

fn quantize(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Split names and their stream offsets.
pub const SPLITS: [(&str, u64); 3] = [("train", 0), ("val", 1), ("test", 2)];

/// Simulates `n` motor-babbling sequences. Sequence `i` of stream `stream`
/// owns its own generator, so the output does not depend on thread count.
/// Values are rounded to `f32` precision so the on-disk container round-trips.
pub fn generate_sequences(env: EnvKind, n: usize, t: usize, seed: u64, stream: u64, split: &str) -> SequenceBatch {
    assert!(n >= 1 && t >= 1);
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng: ChaCha8Rng = stream_rng(seed, (stream << 32) | i as u64);
            let init = sample_initial_state(env, &mut rng);
            let ctrl = motor_babbling(env.ctrl_dim(), t, env.ctrl_std(), &mut rng);
            simulate(env, &init, &ctrl)
        })
        .collect();
    let mut obs = Vec::with_capacity(n * t * env.obs_dim());
    let mut ctrl = Vec::with_capacity(n * t * env.ctrl_dim());
    let mut truth = Vec::with_capacity(n * t * env.truth_dim());
    for tr in trajectories {
        obs.extend(tr.obs);
        ctrl.extend(tr.ctrl);
        truth.extend(tr.truth);
    }
    SequenceBatch {
        meta: DatasetMeta {
            env,
            split: split.to_string(),
            seed,
            stream,
        },
        n,
        t,
        obs_dim: env.obs_dim(),
        ctrl_dim: env.ctrl_dim(),
        truth_dim: env.truth_dim(),
        obs: quantize(obs),
        ctrl: quantize(ctrl),
        truth: quantize(truth),
    }
}

/// Writes `out/train`, `out/val` and `out/test` containers, each holding
/// `n_sequences` sequences of `t` frames from disjoint generator streams.
pub fn generate_dataset(env: EnvKind, n_sequences: usize, t: usize, seed: u64, out: &Path) -> Result<()> {
    for (split, stream) in SPLITS {
        let batch = generate_sequences(env, n_sequences, t, seed, stream, split);
        write_container(&out.join(split), &batch)?;
    }
    Ok(())
}

/// Reads one split written by [`generate_dataset`].
pub fn load_split(root: &Path, split: &str) -> Result<SequenceBatch> {
    read_container(&root.join(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_babbling_is_zero() {
        assert!(motor_babbling_seeded(2, 50, 0.0, 3).iter().all(|&u| u == 0.0));
    }

    #[test]
    fn babbling_is_deterministic() {
        assert_eq!(
            motor_babbling_seeded(1, 100, 2.0, 9),
            motor_babbling_seeded(1, 100, 2.0, 9)
        );
        assert_ne!(
            motor_babbling_seeded(1, 100, 2.0, 9),
            motor_babbling_seeded(1, 100, 2.0, 10)
        );
    }

    #[test]
    fn babbling_std_matches_scale() {
        let u = motor_babbling_seeded(1, 100_000, 2.0, 1);
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / u.len() as f64;
        assert!((var.sqrt() - 2.0).abs() / 2.0 < 0.02);
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn shapes_per_environment() {
        let p = generate_sequences(EnvKind::Pendulum, 4, 15, 0, 0, "train");
        assert_eq!((p.obs.len(), p.ctrl.len(), p.truth.len()), (4 * 15 * 256, 4 * 15, 4 * 15 * 2));
        let b = generate_sequences(EnvKind::TwoBalls, 3, 15, 0, 0, "train");
        assert_eq!((b.obs.len(), b.ctrl.len(), b.truth.len()), (3 * 15 * 400, 3 * 15 * 2, 3 * 15 * 8));
        assert!(b.obs.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn splits_use_disjoint_streams() {
        let a = generate_sequences(EnvKind::Ball, 5, 4, 0, 0, "train");
        let b = generate_sequences(EnvKind::Ball, 5, 4, 0, 1, "val");
        for i in 0..5 {
            assert_ne!(a.truth_at(i, 0), b.truth_at(i, 0));
        }
    }

    #[test]
    fn truth_follows_dynamics() {
        let batch = generate_sequences(EnvKind::Pendulum, 1, 5, 3, 0, "train");
        let s0 = batch.truth_at(0, 0);
        let s1 = step_state(EnvKind::Pendulum, s0, batch.ctrl_at(0, 0));
        let stored = batch.truth_at(0, 1);
        assert!((s1[0] - stored[0]).abs() < 1e-5 && (s1[1] - stored[1]).abs() < 1e-4);
    }

    #[test]
    fn env_names_round_trip() {
        for e in EnvKind::ALL {
            assert_eq!(e.name().parse::<EnvKind>().unwrap(), e);
        }
        assert!("cartpole".parse::<EnvKind>().is_err());
    }
}
