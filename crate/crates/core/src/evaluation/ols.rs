//! Intercept-augmented least squares used to probe latent informativeness.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ridge added to the diagonal of the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Cholesky pivots below this fraction of the mean diagonal mark the design
/// as rank deficient even after the ridge.
const PIVOT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub r2: f64,
    /// Log-likelihood of the residuals under `N(0, SS_res / N)`.
    pub log_likelihood: f64,
    pub n: usize,
}

/// Regresses `targets` on the rows of `latents` (`N x d`) plus an intercept.
pub fn ols(latents: &Tensor, targets: &[f64]) -> Result<OlsFit> {
    let (n, d) = latents
        .dims2()
        .ok_or_else(|| Error::invalid(format!("latents must be a matrix, got {:?}", latents.shape())))?;
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} latent rows", targets.len())));
    }
    if n <= d + 1 {
        return Err(Error::invalid(format!("need more than {} samples, got {n}", d + 1)));
    }
    if !latents.is_finite() || targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("non-finite regression data"));
    }

    // Augmented design [1, z]; accumulate X'X and X'y.
    let p = d + 1;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut row = vec![1.0; p];
    for (i, &y) in targets.iter().enumerate() {
        row[1..].copy_from_slice(latents.row(i));
        for a in 0..p {
            xty[a] += row[a] * y;
            for b in 0..=a {
                xtx[a * p + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b * p + a] = xtx[a * p + b];
        }
        xtx[a * p + a] += RIDGE;
    }
    let beta = cholesky_solve(&mut xtx, &mut xty, p)?;

    let mean = targets.iter().sum::<f64>() / n as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (i, &y) in targets.iter().enumerate() {
        let fit = beta[0] + latents.row(i).iter().zip(&beta[1..]).map(|(z, b)| z * b).sum::<f64>();
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - mean) * (y - mean);
    }
    if ss_tot == 0.0 {
        return Err(Error::invalid("target is constant; R^2 is undefined"));
    }
    let var = (ss_res / n as f64).max(f64::MIN_POSITIVE);
    Ok(OlsFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        r2: 1.0 - ss_res / ss_tot,
        log_likelihood: -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * var).ln() + 1.0),
        n,
    })
}

/// Solves `A x = b` for symmetric positive definite `A` (overwritten).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], p: usize) -> Result<Vec<f64>> {
    let scale = (0..p).map(|i| a[i * p + i]).sum::<f64>() / p as f64;
    for j in 0..p {
        let mut diag = a[j * p + j];
        for k in 0..j {
            diag -= a[j * p + k] * a[j * p + k];
        }
        if !(diag > PIVOT_TOL * scale) {
            return Err(Error::RankDeficient(format!(
                "pivot {j} is {diag:.3e} against mean diagonal {scale:.3e}"
            )));
        }
        let l = diag.sqrt();
        a[j * p + j] = l;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / l;
        }
    }
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * p + k] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= a[k * p + i] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    Ok(b.to_vec())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::stream_rng;

    fn random_latents(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut stream_rng(seed, 0))
    }

    #[test]
    fn exact_linear_target_has_unit_r2() {
        let z = random_latents(200, 3, 1);
        let y: Vec<f64> = (0..200).map(|i| 0.5 - 2.0 * z.get2(i, 0) + 3.0 * z.get2(i, 2)).collect();
        let fit = ols(&z, &y).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-10, "{}", fit.r2);
        assert!((fit.intercept - 0.5).abs() < 1e-6);
        assert!((fit.coefficients[0] + 2.0).abs() < 1e-6);
        assert!(fit.coefficients[1].abs() < 1e-6);
        assert!(fit.log_likelihood.is_finite());
    }

    #[test]
    fn independent_noise_has_near_zero_r2() {
        let z = random_latents(10_000, 3, 2);
        let mut rng = stream_rng(2, 1);
        let y: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = ols(&z, &y).unwrap();
        assert!(fit.r2.abs() < 0.05, "{}", fit.r2);
    }

    #[test]
    fn log_likelihood_matches_closed_form() {
        let z = random_latents(50, 1, 3);
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let fit = ols(&z, &y).unwrap();
        let ss_res: f64 = (0..50)
            .map(|i| {
                let r = y[i] - fit.intercept - fit.coefficients[0] * z.get2(i, 0);
                r * r
            })
            .sum();
        let s2 = ss_res / 50.0;
        let direct: f64 = (0..50)
            .map(|i| {
                let r = y[i] - fit.intercept - fit.coefficients[0] * z.get2(i, 0);
                -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - r * r / (2.0 * s2)
            })
            .sum();
        assert!((fit.log_likelihood - direct).abs() < 1e-9);
    }

    #[test]
    fn duplicated_or_constant_columns_are_rank_deficient() {
        let base = random_latents(100, 1, 4);
        let dup = Tensor::matrix(100, 2, base.data().iter().flat_map(|&v| [v, v]).collect());
        let y: Vec<f64> = base.data().iter().map(|v| v * v).collect();
        assert!(matches!(ols(&dup, &y), Err(Error::RankDeficient(_))));
        let constant = Tensor::matrix(100, 1, vec![2.0; 100]);
        assert!(matches!(ols(&constant, &y), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn too_few_samples_or_constant_target_is_rejected() {
        let z = random_latents(4, 3, 5);
        assert!(ols(&z, &[1.0, 2.0, 3.0, 4.0]).is_err());
        let z = random_latents(20, 2, 5);
        assert!(ols(&z, &[1.0; 20]).is_err());
        assert!(ols(&z, &[1.0; 19]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn r2_is_scale_equivariant_and_bounded(seed in 0u64..10_000, d in 1usize..5, k in 0.01f64..100.0) {
            let z = random_latents(300, d, seed);
            let mut rng = stream_rng(seed, 9);
            let y: Vec<f64> = (0..300)
                .map(|i| z.get2(i, 0).tanh() + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let a = ols(&z, &y).unwrap();
            let b = ols(&z.map(|v| v * 10.0), &y).unwrap();
            prop_assert!((a.r2 - b.r2).abs() < 1e-9);
            prop_assert!(a.r2 <= 1.0 && a.r2 >= 0.0);
            let c = ols(&z, &y.iter().map(|v| v * k).collect::<Vec<_>>()).unwrap();
            prop_assert!((a.r2 - c.r2).abs() < 1e-9);
        }
    }
}
