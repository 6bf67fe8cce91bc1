//! Coverage-based anti-aliased rasterisation.

/// Sub-samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 8;

pub struct Canvas {
    side: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    pub fn new(side: usize) -> Self {
        Canvas {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    /// Sets each pixel to the fraction of its `ss x ss` sample grid for which
    /// `inside(x, y)` holds. Coordinates are continuous: pixel `(row, col)`
    /// spans `[col, col + 1) x [row, row + 1)`.
    pub fn fill_coverage(&mut self, ss: usize, inside: impl Fn(f64, f64) -> bool) {
        let step = 1.0 / ss as f64;
        let total = (ss * ss) as f64;
        for row in 0..self.side {
            for col in 0..self.side {
                let mut hits = 0usize;
                for j in 0..ss {
                    let y = row as f64 + (j as f64 + 0.5) * step;
                    for i in 0..ss {
                        let x = col as f64 + (i as f64 + 0.5) * step;
                        if inside(x, y) {
                            hits += 1;
                        }
                    }
                }
                self.pixels[row * self.side + col] = hits as f64 / total;
            }
        }
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}
