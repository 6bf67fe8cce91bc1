//! Torque-controlled damped pendulum, `m l^2 phi'' = -mu phi' + m g l sin(phi) + u`.
//!
//! `phi = 0` is the upright (unstable) position and `phi = pi` hangs down.

use super::render::{Canvas, SUPERSAMPLE};

pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DAMPING: f64 = 0.5;
pub const GRAVITY: f64 = 9.81;

/// Frame period in seconds.
pub const DT: f64 = 0.05;
/// RK4 sub-steps per frame.
pub const SUBSTEPS: usize = 10;

pub const ROD_LENGTH_PX: f64 = 6.0;
pub const ROD_WIDTH_PX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    /// Radians, unwrapped.
    pub angle: f64,
    /// Radians per second.
    pub velocity: f64,
}

impl PendulumState {
    pub fn new(angle: f64, velocity: f64) -> Self {
        PendulumState { angle, velocity }
    }

    /// Total mechanical energy per unit mass, `phi'^2 / 2 + g cos(phi)`.
    pub fn energy(&self) -> f64 {
        0.5 * LENGTH * LENGTH * self.velocity * self.velocity + GRAVITY * LENGTH * self.angle.cos()
    }
}

fn acceleration(angle: f64, velocity: f64, torque: f64) -> f64 {
    (-DAMPING * velocity + MASS * GRAVITY * LENGTH * angle.sin() + torque) / (MASS * LENGTH * LENGTH)
}

/// One classical RK4 step of size `h` with the torque held constant.
pub fn rk4(s: PendulumState, torque: f64, h: f64) -> PendulumState {
    let (a0, v0) = (s.angle, s.velocity);
    let k1a = v0;
    let k1v = acceleration(a0, v0, torque);
    let k2a = v0 + 0.5 * h * k1v;
    let k2v = acceleration(a0 + 0.5 * h * k1a, v0 + 0.5 * h * k1v, torque);
    let k3a = v0 + 0.5 * h * k2v;
    let k3v = acceleration(a0 + 0.5 * h * k2a, v0 + 0.5 * h * k2v, torque);
    let k4a = v0 + h * k3v;
    let k4v = acceleration(a0 + h * k3a, v0 + h * k3v, torque);
    PendulumState {
        angle: a0 + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a),
        velocity: v0 + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    }
}

/// Advances the pendulum by `dt` seconds under constant torque `u`
/// (zero-order hold), integrating with [`SUBSTEPS`] RK4 steps.
pub fn pendulum_step(s: PendulumState, u: f64, dt: f64) -> PendulumState {
    assert!(dt > 0.0, "dt must be positive");
    let h = dt / SUBSTEPS as f64;
    (0..SUBSTEPS).fold(s, |s, _| rk4(s, u, h))
}

/// Renders the rod as a `side x side` image in row-major order.
///
/// The rod is a `ROD_LENGTH_PX x ROD_WIDTH_PX` rectangle from the image
/// centre toward `(sin phi, -cos phi)` in (column, row) coordinates, so
/// `phi = 0` points up. Intensity is the fraction of the pixel covered.
pub fn render_pendulum(angle: f64, side: usize) -> Vec<f64> {
    let phi = angle.rem_euclid(std::f64::consts::TAU);
    let (dx, dy) = (phi.sin(), -phi.cos());
    let c = side as f64 / 2.0;
    let half_w = ROD_WIDTH_PX / 2.0;
    let mut canvas = Canvas::new(side);
    canvas.fill_coverage(SUPERSAMPLE, |x, y| {
        let (rx, ry) = (x - c, y - c);
        let along = rx * dx + ry * dy;
        let across = -rx * dy + ry * dx;
        (0.0..=ROD_LENGTH_PX).contains(&along) && across.abs() <= half_w
    });
    canvas.into_pixels()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn upright_rest_is_fixed_point() {
        let s = pendulum_step(PendulumState::new(0.0, 0.0), 0.0, DT);
        assert_eq!(s, PendulumState::new(0.0, 0.0));
    }

    #[test]
    fn horizontal_rod_accelerates() {
        let s = pendulum_step(PendulumState::new(FRAC_PI_2, 0.0), 0.0, DT);
        assert!(s.velocity > 0.0);
    }

    fn fine(s: PendulumState, u: f64, dt: f64) -> PendulumState {
        let h = dt / 100.0;
        (0..100).fold(s, |s, _| rk4(s, u, h))
    }

    #[test]
    fn single_step_matches_fine_integrator() {
        let s0 = PendulumState::new(1.0, 2.0);
        let a = pendulum_step(s0, 0.5, DT);
        let b = fine(s0, 0.5, DT);
        assert!((a.angle - b.angle).abs() < 1e-6);
        assert!((a.velocity - b.velocity).abs() < 1e-6);
    }

    #[test]
    fn unactuated_motion_stays_bounded() {
        let mut s = PendulumState::new(0.3, 7.5);
        let e0 = s.energy();
        for _ in 0..10_000 {
            s = pendulum_step(s, 0.0, DT);
            assert!(s.velocity.abs() < 20.0);
        }
        // Settles at the hanging position, having lost energy.
        assert!(s.energy() < e0);
        assert!((s.angle.rem_euclid(2.0 * PI) - PI).abs() < 1e-3);
    }

    #[test]
    fn render_is_periodic_and_in_range() {
        for k in 0..36 {
            let phi = k as f64 * 0.17 - 3.0;
            let a = render_pendulum(phi, 16);
            let b = render_pendulum(phi + 2.0 * PI, 16);
            assert_eq!(a, b);
            assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn upright_render_is_mirror_symmetric() {
        let img = render_pendulum(0.0, 16);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(img[r * 16 + c], img[r * 16 + (15 - c)]);
            }
        }
        // Rod occupies the upper half.
        let top: f64 = img[..128].iter().sum();
        let bottom: f64 = img[128..].iter().sum();
        assert!(top > 10.0 && bottom == 0.0);
    }

    #[test]
    fn rendered_mass_is_rotation_invariant() {
        let masses: Vec<f64> = (0..360)
            .map(|k| render_pendulum(k as f64 * PI / 180.0, 16).iter().sum())
            .collect();
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        for m in &masses {
            assert!((m - mean).abs() / mean < 0.10, "{m} vs {mean}");
        }
    }
}
