//! Closed-form design criteria: the mean squared error over allocations and
//! noise, the conditional variance of the squared error under pairwise
//! matching, the variance decomposition, the approximate tail quantile, and
//! the asymptotic reference constants.
//!
//! Notation: `2n` subjects, `mu = mu_T + mu_C`, `z = z_T + z_C` with
//! per-subject variances `rho`, `v = mu + z`. The squared error of the
//! difference-in-means estimator is `(w . v)^2 / (2n)^2`.

use rayon::prelude::*;

use crate::designs::{enumerate_support, sample_allocation, Design};
use crate::error::{Error, Result};
use crate::estimator::squared_error_from_sum;
use crate::rng::{self, Stream};
use crate::stats::{mean, normal_quantile, sample_variance, variance_with_se};
use crate::types::{Blocking, DesignCovariance};

/// Leading constant of the pairwise-matching conditional variance,
/// `Var_W[(tau_hat - tau)^2 | v] = c / n^4 * sum_{i<j} d_i^2 d_j^2`, as fixed by
/// exhaustive enumeration of the `2^n` sign patterns.
pub const PM_VARIANCE_CONSTANT: f64 = 0.25;

/// The constant as printed in the source derivation (`1/16`). It disagrees
/// with enumeration by a factor of four and is kept for reporting only.
pub const PRINTED_PM_VARIANCE_CONSTANT: f64 = 1.0 / 16.0;

#[derive(Debug, Clone)]
pub struct CriterionInputs {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma_w: DesignCovariance,
    pub q: f64,
    pub c_q: f64,
}

impl CriterionInputs {
    /// Inputs with the default tail constant for `q`.
    pub fn new(mu: Vec<f64>, rho: Vec<f64>, sigma_w: DesignCovariance, q: f64) -> Result<Self> {
        let c_q = tail_constant(q)?;
        if mu.len() != sigma_w.dim() {
            return Err(Error::Length { expected: sigma_w.dim(), got: mu.len() });
        }
        if rho.len() != sigma_w.dim() {
            return Err(Error::Length { expected: sigma_w.dim(), got: rho.len() });
        }
        if rho.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::Invalid("residual variances must be finite and nonnegative".into()));
        }
        Ok(Self { mu, rho, sigma_w, q, c_q })
    }

    pub fn with_tail_constant(mut self, c_q: f64) -> Self {
        self.c_q = c_q;
        self
    }
}

/// Tail constant for quantile level `q`: 1.645 at 0.95 and 2.326 at 0.99
/// (the rounded table values), the standard normal quantile elsewhere.
pub fn tail_constant(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Invalid(format!("quantile level must lie in (0, 1), got {q}")));
    }
    Ok(if q == 0.95 {
        1.645
    } else if q == 0.99 {
        2.326
    } else {
        normal_quantile(q)
    })
}

/// `E_{W,Z}[(tau_hat - tau)^2] = (mu' Sigma_W mu + sum rho) / 4n^2`.
pub fn mean_mse(inputs: &CriterionInputs) -> f64 {
    let len = inputs.mu.len() as f64;
    (inputs.sigma_w.quadratic_form(&inputs.mu) + inputs.rho.iter().sum::<f64>()) / (len * len)
}

/// Variance over pairwise-matching allocations of the squared error given
/// `v`, with pairs `(v[0], v[1]), (v[2], v[3]), ...`.
pub fn pm_conditional_variance(v: &[f64]) -> Result<f64> {
    if v.is_empty() || !v.len().is_multiple_of(2) {
        return Err(Error::Length { expected: v.len() + v.len() % 2, got: v.len() });
    }
    Ok(pm_variance_from_gaps(v.chunks(2).map(|p| p[1] - p[0])))
}

/// As [`pm_conditional_variance`], for an arbitrary pairing of the subjects.
pub fn pm_conditional_variance_paired(v: &[f64], pairing: &Blocking) -> Result<f64> {
    if v.len() != pairing.n_subjects() {
        return Err(Error::Length { expected: pairing.n_subjects(), got: v.len() });
    }
    let pairs = pairing
        .pairs()
        .ok_or_else(|| Error::Design("conditional variance needs a pairing".into()))?;
    Ok(pm_variance_from_gaps(pairs.iter().map(|&(a, b)| v[b] - v[a])))
}

fn pm_variance_from_gaps(gaps: impl Iterator<Item = f64>) -> f64 {
    // sum_{i<j} a_i a_j via a running prefix; every term is nonnegative, so
    // there is no cancellation
    let (mut prefix, mut cross, mut n) = (0.0, 0.0, 0usize);
    for d in gaps {
        let a = d * d;
        cross += a * prefix;
        prefix += a;
        n += 1;
    }
    let n = n as f64;
    PM_VARIANCE_CONSTANT * cross / (n * n * n * n)
}

/// Conditional mean and variance over allocations of the squared error for a
/// fixed `v`, where each is available without sampling allocations.
#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    sigma_w: DesignCovariance,
    kind: ConditionalKind,
}

#[derive(Debug, Clone)]
enum ConditionalKind {
    Pairs(Blocking),
    Deterministic,
    Enumerated(Vec<crate::types::Allocation>),
}

impl ConditionalMoments {
    /// PM and PB have closed forms; other designs need an enumerable support.
    pub fn new(design: &Design) -> Result<Self> {
        let kind = match design {
            Design::Pm(b) => ConditionalKind::Pairs(b.clone()),
            Design::Pb(_) => ConditionalKind::Deterministic,
            _ => ConditionalKind::Enumerated(enumerate_support(design).map_err(|e| {
                Error::Design(format!("no closed form and no enumerable support for this design ({e})"))
            })?),
        };
        Ok(Self { sigma_w: crate::designs::design_covariance(design), kind })
    }

    /// `E_W[(tau_hat - tau)^2 | v] = v' Sigma_W v / 4n^2`.
    pub fn mean(&self, v: &[f64]) -> f64 {
        let len = v.len() as f64;
        self.sigma_w.quadratic_form(v) / (len * len)
    }

    pub fn variance(&self, v: &[f64]) -> f64 {
        match &self.kind {
            ConditionalKind::Pairs(b) => pm_conditional_variance_paired(v, b).expect("pairing matches v"),
            // w and its mirror give the same squared error
            ConditionalKind::Deterministic => 0.0,
            ConditionalKind::Enumerated(support) => {
                let errs: Vec<f64> = support.iter().map(|w| squared_error_from_sum(w, v)).collect();
                let m = mean(&errs);
                errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / errs.len() as f64
            }
        }
    }
}

/// The two terms of `Var(MSE) = Var_Z(E_W[MSE | Z]) + E_Z(Var_W[MSE | Z])`,
/// each with a Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    pub var_of_conditional_mean: f64,
    pub var_of_conditional_mean_se: f64,
    pub mean_of_conditional_variance: f64,
    pub mean_of_conditional_variance_se: f64,
}

impl VarianceDecomposition {
    pub fn total(&self) -> f64 {
        self.var_of_conditional_mean + self.mean_of_conditional_variance
    }

    pub fn total_se(&self) -> f64 {
        self.var_of_conditional_mean_se.hypot(self.mean_of_conditional_variance_se)
    }
}

const DECOMPOSITION_TAG: u64 = 0x6465_636f;

/// Estimates both decomposition terms from `noise_reps` draws of the noise
/// sum `z`; `draw_noise` must return a vector the length of `mu`.
pub fn variance_decomposition_terms<F>(
    design: &Design,
    mu: &[f64],
    draw_noise: F,
    noise_reps: usize,
    seed: u64,
) -> Result<VarianceDecomposition>
where
    F: Fn(&mut Stream) -> Vec<f64> + Sync,
{
    if mu.len() != design.n_subjects() {
        return Err(Error::Length { expected: design.n_subjects(), got: mu.len() });
    }
    if noise_reps < 2 {
        return Err(Error::Invalid("variance decomposition needs at least two noise draws".into()));
    }
    let moments = ConditionalMoments::new(design)?;
    let draws: Vec<(f64, f64)> = (0..noise_reps)
        .into_par_iter()
        .map(|r| {
            let z = draw_noise(&mut rng::stream(seed, DECOMPOSITION_TAG, r as u64));
            let v: Vec<f64> = mu.iter().zip(&z).map(|(m, z)| m + z).collect();
            (moments.mean(&v), moments.variance(&v))
        })
        .collect();
    let cond_means: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let cond_vars: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (var_mean, var_mean_se) = variance_with_se(&cond_means);
    Ok(VarianceDecomposition {
        var_of_conditional_mean: var_mean,
        var_of_conditional_mean_se: var_mean_se,
        mean_of_conditional_variance: mean(&cond_vars),
        mean_of_conditional_variance_se: (sample_variance(&cond_vars) / noise_reps as f64).sqrt(),
    })
}

/// `Q_q ~ mean + c_q sqrt(var)`.
pub fn approx_quantile(mean_mse: f64, var_mse: f64, c_q: f64) -> Result<f64> {
    if var_mse < 0.0 {
        return Err(Error::Invalid(format!("variance must be nonnegative, got {var_mse}")));
    }
    Ok(mean_mse + c_q * var_mse.sqrt())
}

/// Reference limits of `n^2 Var((tau_hat - tau)^2)` as printed in the source:
/// `rho_bar^2 / 8` for pairwise matching and `rho_bar^2 / 2` for perfect
/// balance. These are reported next to simulation output, not asserted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticReference {
    pub pm: f64,
    pub pb: f64,
}

pub fn asymptotic_reference(rho_bar: f64) -> Result<AsymptoticReference> {
    check_rho_bar(rho_bar)?;
    let s = rho_bar * rho_bar;
    Ok(AsymptoticReference { pm: s / 8.0, pb: s / 2.0 })
}

/// Pairwise-matching limit implied by [`PM_VARIANCE_CONSTANT`] when the
/// within-pair mean gaps vanish: `E[d_i^2] = 2 rho_bar`, so
/// `n^2 Var -> c * (n^2 / 2) * 4 rho_bar^2 / n^2 = rho_bar^2 / 2`.
pub fn pm_limit_from_enumeration(rho_bar: f64) -> Result<f64> {
    check_rho_bar(rho_bar)?;
    Ok(PM_VARIANCE_CONSTANT * 2.0 * rho_bar * rho_bar)
}

fn check_rho_bar(rho_bar: f64) -> Result<()> {
    if rho_bar >= 0.0 && rho_bar.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("rho_bar must be finite and nonnegative, got {rho_bar}")))
    }
}

/// `n^2 Var((tau_hat - tau)^2)` with its standard error, estimated from
/// `reps` draws of Gaussian noise with per-subject variance `rho` around
/// `mu` and one allocation per draw.
pub fn scaled_error_variance(design: &Design, mu: &[f64], rho: f64, reps: usize, seed: u64, cell: u64) -> (f64, f64) {
    let sd = rho.sqrt();
    let errs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut s = rng::stream(seed, cell, r as u64);
            let v: Vec<f64> = mu
                .iter()
                .map(|m| {
                    let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut s);
                    m + sd * z
                })
                .collect();
            let w = sample_allocation(design, &mut s);
            squared_error_from_sum(&w, &v)
        })
        .collect();
    let (var, se) = variance_with_se(&errs);
    let n = (mu.len() / 2) as f64;
    (n * n * var, n * n * se)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheckRow {
    pub n_subjects: usize,
    pub n_blocks: usize,
    pub estimate: f64,
    pub se: f64,
    /// `rho_bar^2 / 8`.
    pub bound: f64,
    /// `estimate >= bound - 3 se`.
    pub holds: bool,
}

/// Checks `n^2 Var >= rho_bar^2 / 8` for homogeneous block designs (all
/// means equal, Gaussian noise with variance `rho` per subject) over every
/// `(2n, B)` combination where `B` divides `2n` into even blocks.
pub fn block_bound_check(
    sizes: &[usize],
    block_counts: &[usize],
    rho: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<BoundCheckRow>> {
    let bound = asymptotic_reference(rho)?.pm;
    let mut rows = Vec::new();
    for &n_subjects in sizes {
        for &b in block_counts {
            if b == 0 || n_subjects % b != 0 || (n_subjects / b) % 2 != 0 {
                continue;
            }
            let blocking = Blocking::contiguous(n_subjects, b)?;
            let design = if blocking.is_pairing() { Design::pm(blocking)? } else { Design::block(blocking) };
            let cell = rng::tag(&[n_subjects as u64, b as u64]);
            let (estimate, se) = scaled_error_variance(&design, &vec![0.0; n_subjects], rho, reps, seed, cell);
            rows.push(BoundCheckRow { n_subjects, n_blocks: b, estimate, se, bound, holds: estimate >= bound - 3.0 * se });
        }
    }
    Ok(rows)
}
