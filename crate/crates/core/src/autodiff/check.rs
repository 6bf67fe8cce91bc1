//! Finite-difference oracle and helpers for checking reverse-mode gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("fd_gradient eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::invalid(format!(
                "fd_gradient: non-finite function value at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst-case discrepancy between an analytic and a numeric gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// Largest relative error over coordinates whose magnitude is >= `small`.
    pub max_rel: f64,
    /// Largest absolute error over coordinates whose magnitude is < `small`.
    pub max_abs_small: f64,
    pub coords: usize,
}

impl GradCheck {
    pub const SMALL: f64 = 1e-3;

    pub fn compare(analytic: &Tensor, numeric: &Tensor) -> Self {
        let mut out = GradCheck::default();
        out.absorb(analytic, numeric);
        out
    }

    pub fn absorb(&mut self, analytic: &Tensor, numeric: &Tensor) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let mag = a.abs().max(n.abs());
            let err = (a - n).abs();
            if mag < Self::SMALL {
                self.max_abs_small = self.max_abs_small.max(err);
            } else {
                self.max_rel = self.max_rel.max(err / mag);
            }
            self.coords += 1;
        }
    }

    pub fn passes(&self, rtol: f64, atol: f64) -> bool {
        self.max_rel < rtol && self.max_abs_small < atol
    }
}

/// Checks `graph.backward` against central differences for every trainable
/// input of `graph`, with `loss` as the scalar objective.
pub fn check_graph(
    graph: &Graph,
    loss: NodeId,
    params: &BTreeMap<String, Tensor>,
    data: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<GradCheck> {
    let values = graph.forward(&(params, data))?;
    let grads = graph.backward(&values, loss)?;
    let mut report = GradCheck::default();
    for (name, analytic) in grads.iter() {
        let base = params
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.clone()))?;
        let numeric = fd_gradient(
            |probe| {
                let mut p = params.clone();
                p.insert(name.clone(), probe.clone());
                Ok(graph.forward(&(&p, data))?.scalar(loss))
            },
            base,
            eps,
        )?;
        report.absorb(analytic, &numeric);
    }
    Ok(report)
}

/// A randomly composed graph over the full primitive vocabulary.
pub struct RandomGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub params: BTreeMap<String, Tensor>,
}

/// Builds a random composition of primitives ending in a scalar, with all
/// leaves trainable. Deterministic in `seed`.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut params = BTreeMap::new();
    let rows = 3;
    let mut counter = 0usize;

    let mut new_param = |g: &mut Graph, rng: &mut ChaCha8Rng, shape: &[usize]| {
        let name = format!("p{counter}");
        counter += 1;
        let t = Tensor::randn(shape, 0.8, rng);
        params.insert(name.clone(), t);
        g.param(&name, shape)
    };

    // Pool of rank-2 nodes with `rows` rows, tracked with their column count.
    let mut pool: Vec<(NodeId, usize)> = Vec::new();
    for _ in 0..2 {
        let c = rng.random_range(2..5);
        let id = new_param(&mut g, &mut rng, &[rows, c]);
        pool.push((id, c));
    }

    let steps = rng.random_range(6..12);
    for _ in 0..steps {
        let (a, ca) = pool[rng.random_range(0..pool.len())];
        let kind = rng.random_range(0..16);
        let next = match kind {
            0 => (g.relu(a), ca),
            1 => (g.sigmoid(a), ca),
            2 => (g.tanh(a), ca),
            3 => {
                let t = g.tanh(a);
                (g.exp(t), ca)
            }
            4 => (g.square(a), ca),
            5 => {
                let s = g.square(a);
                let s1 = g.add_const(s, 1.0);
                (g.log(s1), ca)
            }
            6 => {
                let out_c = rng.random_range(2..5);
                let w = new_param(&mut g, &mut rng, &[ca, out_c]);
                if rng.random_bool(0.5) {
                    let b = new_param(&mut g, &mut rng, &[out_c]);
                    (g.affine(a, w, b), out_c)
                } else {
                    (g.matmul(a, w), out_c)
                }
            }
            7 => {
                let b = new_param(&mut g, &mut rng, &[ca]);
                (g.add_row(a, b), ca)
            }
            8 => (g.softmax(a), ca),
            9 => {
                let other = pool.iter().copied().find(|&(n, c)| c == ca && n != a);
                match other {
                    Some((b, _)) => match rng.random_range(0..3) {
                        0 => (g.add(a, b), ca),
                        1 => (g.sub(a, b), ca),
                        _ => (g.mul(a, b), ca),
                    },
                    None => (g.scale(a, -1.5), ca),
                }
            }
            10 => {
                let (b, cb) = pool[rng.random_range(0..pool.len())];
                (g.concat_cols(&[a, b]), ca + cb)
            }
            11 if ca > 1 => {
                let start = rng.random_range(0..ca - 1);
                let len = rng.random_range(1..=ca - start);
                (g.slice_cols(a, start, len), len)
            }
            12 => {
                let s = new_param(&mut g, &mut rng, &[1]);
                (g.mul_scalar(a, s), ca)
            }
            13 => {
                let out_r = rng.random_range(1..4);
                let m = new_param(&mut g, &mut rng, &[rows, out_r * ca]);
                (g.batch_matvec(m, a, out_r, ca), out_r)
            }
            14 => {
                let stacked = g.concat_rows(&[a, a]);
                let off = rng.random_range(0..=rows);
                (g.slice_rows(stacked, off, rows), ca)
            }
            _ => {
                let k = rng.random_range(-1.0..1.0);
                let s = g.add_const(a, k);
                (g.row_sum(s), 1)
            }
        };
        pool.push(next);
    }

    let (last, _) = *pool.last().unwrap();
    let (other, _) = pool[rng.random_range(0..pool.len())];
    let s = g.sum(last);
    let m = g.mean(other);
    let loss = g.add(s, m);
    RandomGraph {
        graph: g,
        loss,
        params,
    }
}
