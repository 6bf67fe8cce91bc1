//! Balls bouncing inside the unit box, steered by additive velocity control.

use super::render::{Canvas, SUPERSAMPLE};

pub const BALL_RADIUS_PX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallState {
    pub position: [f64; 2],
    /// Box widths per step.
    pub velocity: [f64; 2],
}

impl BallState {
    pub fn new(position: [f64; 2], velocity: [f64; 2]) -> Self {
        BallState { position, velocity }
    }
}

/// `v' = v + u`, `p' = p + v'`, then reflect off the walls at 0 and 1 until
/// the position is back inside, negating the velocity component each time.
pub fn ball_step(s: BallState, u: [f64; 2]) -> BallState {
    let mut out = s;
    for k in 0..2 {
        let mut v = s.velocity[k] + u[k];
        let mut p = s.position[k] + v;
        while !(0.0..=1.0).contains(&p) {
            if p > 1.0 {
                p = 2.0 - p;
            } else {
                p = -p;
            }
            v = -v;
        }
        out.position[k] = p;
        out.velocity[k] = v;
    }
    out
}

/// Pixel-space centre of a ball; positions map onto `[r, side - r]` so the
/// disc touches the image border exactly when the ball touches a wall.
pub fn ball_center_px(position: [f64; 2], side: usize) -> (f64, f64) {
    let span = side as f64 - 2.0 * BALL_RADIUS_PX;
    (
        BALL_RADIUS_PX + position[0] * span,
        BALL_RADIUS_PX + position[1] * span,
    )
}

/// Renders one disc of radius [`BALL_RADIUS_PX`] per ball; overlapping discs
/// saturate at intensity 1. Position `x` maps to columns, `y` to rows.
pub fn render_balls(states: &[BallState], side: usize) -> Vec<f64> {
    assert!(side == 16 || side == 20, "ball images are 16 or 20 pixels wide");
    let centers: Vec<(f64, f64)> = states
        .iter()
        .map(|s| ball_center_px(s.position, side))
        .collect();
    let r2 = BALL_RADIUS_PX * BALL_RADIUS_PX;
    let mut canvas = Canvas::new(side);
    canvas.fill_coverage(SUPERSAMPLE, |x, y| {
        centers
            .iter()
            .any(|(cx, cy)| (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r2)
    });
    canvas.into_pixels()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn resting_ball_stays() {
        let s = BallState::new([0.5, 0.5], [0.0, 0.0]);
        assert_eq!(ball_step(s, [0.0, 0.0]), s);
    }

    #[test]
    fn reflects_at_right_wall() {
        let s = ball_step(BallState::new([0.95, 0.5], [0.1, 0.0]), [0.0, 0.0]);
        assert!((s.position[0] - 0.95).abs() < 1e-12);
        assert_eq!(s.position[1], 0.5);
        assert_eq!(s.velocity, [-0.1, 0.0]);
    }

    #[test]
    fn stays_in_box_under_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = BallState::new([0.2, 0.7], [0.05, -0.03]);
        for _ in 0..10_000 {
            let u = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
            s = ball_step(s, u);
            assert!(s.position.iter().all(|p| (0.0..=1.0).contains(p)));
            // keep speeds from drifting without bound
            s.velocity = s.velocity.map(|v| v.clamp(-2.5, 2.5));
        }
    }

    #[test]
    fn large_velocity_reflects_repeatedly() {
        let s = ball_step(BallState::new([0.5, 0.5], [2.3, -3.7]), [0.0, 0.0]);
        assert!(s.position.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn centred_ball_is_brightest_at_centre() {
        let img = render_balls(&[BallState::new([0.5, 0.5], [0.0; 2])], 16);
        let max = img.iter().cloned().fold(0.0, f64::max);
        for (r, c) in [(7, 7), (7, 8), (8, 7), (8, 8)] {
            assert_eq!(img[r * 16 + c], max);
        }
        assert_eq!(img[0], 0.0);
    }

    #[test]
    fn coincident_balls_saturate() {
        let b = BallState::new([0.3, 0.6], [0.0; 2]);
        assert_eq!(render_balls(&[b, b], 20), render_balls(&[b], 20));
    }

    #[test]
    fn disc_mass_is_translation_invariant() {
        let mut masses = Vec::new();
        for i in 0..=20 {
            for j in 0..=20 {
                let p = [0.1 + 0.04 * i as f64, 0.1 + 0.04 * j as f64];
                let m: f64 = render_balls(&[BallState::new(p, [0.0; 2])], 16).iter().sum();
                masses.push(m);
            }
        }
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        assert!(masses.iter().all(|m| (m - mean).abs() / mean < 0.10));
        assert!((mean - std::f64::consts::PI * 4.0).abs() < 0.5);
    }

    proptest! {
        #[test]
        fn step_keeps_ball_in_box_and_speed(
            p in proptest::array::uniform2(0.0f64..=1.0),
            v in proptest::array::uniform2(-3.0f64..3.0),
            u in proptest::array::uniform2(-0.5f64..0.5),
        ) {
            let s = ball_step(BallState::new(p, v), u);
            prop_assert!(s.position.iter().all(|x| (0.0..=1.0).contains(x)));
            for k in 0..2 {
                prop_assert!((s.velocity[k].abs() - (v[k] + u[k]).abs()).abs() < 1e-12);
            }
        }
    }
}
