//! Small numerical helpers: covariance whitening and the standard normal
//! quantile.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::types::CovariateMatrix;

/// Relative ridge added to a near-singular covariance, scaled by `trace / p`.
pub const RIDGE: f64 = 1e-8;

/// Unbiased sample covariance of the rows (divisor `2n - 1`).
pub fn sample_covariance(x: &CovariateMatrix) -> DMatrix<f64> {
    let (rows, p) = (x.n_subjects(), x.n_covariates());
    let mut means = vec![0.0; p];
    for r in x.rows() {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = DMatrix::zeros(p, p);
    for r in x.rows() {
        for a in 0..p {
            let da = r[a] - means[a];
            for b in 0..=a {
                cov[(a, b)] += da * (r[b] - means[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            let v = cov[(a, b)] / (rows - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

/// Maps covariate rows to coordinates in which the (regularized) sample
/// covariance is the identity, so Mahalanobis distances become squared
/// Euclidean distances.
#[derive(Debug, Clone)]
pub struct Whitener {
    /// Inverse Cholesky factor `L^{-1}` with `S = L L^T`.
    inv_factor: DMatrix<f64>,
    pub ridge_applied: bool,
}

impl Whitener {
    pub fn fit(x: &CovariateMatrix) -> Self {
        let cov = sample_covariance(x);
        let p = cov.nrows();
        let trace = cov.trace();
        let ridge = if trace > 0.0 { RIDGE * trace / p as f64 } else { 1.0 };

        let factor = cov.clone().cholesky().filter(|c| {
            let diag = c.l().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d * d), hi.max(d * d)));
            hi > 0.0 && lo > 1e-12 * hi
        });
        let (l, ridge_applied) = match factor {
            Some(c) => (c.l(), false),
            None => {
                let reg = cov + DMatrix::identity(p, p) * ridge;
                let c = reg.cholesky().expect("ridge-regularized covariance is positive definite");
                (c.l(), true)
            }
        };
        let inv_factor = l.try_inverse().expect("Cholesky factor is invertible");
        Self { inv_factor, ridge_applied }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(row);
        (&self.inv_factor * v).iter().copied().collect()
    }

    /// Whitened rows, in subject order.
    pub fn transform(&self, x: &CovariateMatrix) -> Vec<Vec<f64>> {
        x.rows().map(|r| self.transform_row(r)).collect()
    }
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(q)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `N - 1` (0 for a single sample).
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Variance estimate together with its delta-method standard error
/// `sqrt((m4 - s^4) / N)`.
pub fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (m2, m4) = xs.iter().fold((0.0, 0.0), |(a, b), x| {
        let d = (x - m) * (x - m);
        (a + d, b + d * d)
    });
    let var = m2 / (n - 1.0);
    let m4 = m4 / n;
    let pop = m2 / n;
    (var, ((m4 - pop * pop).max(0.0) / n).sqrt())
}
