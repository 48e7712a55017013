//! Replicate loop for one simulation cell, tail criteria with bootstrap
//! intervals, and the exhaustive-enumeration oracles.
//!
//! Every random draw comes from a counter-based stream keyed by
//! `(seed, cell, index)`, so results do not depend on the number of worker
//! threads or on the order in which replicates execute.

use rayon::prelude::*;

use crate::criteria::{asymptotic_reference, pm_limit_from_enumeration, scaled_error_variance, tail_constant};
use crate::designs::{build_blocking, enumerate_support, greedy_pair_switch, sample_allocation, Design};
use crate::error::{Error, Result};
use crate::estimator::{estimand, estimate, squared_error_from_sum};
use crate::matching::{mahalanobis_distances, match_exact, match_heuristic, EXACT_CAPACITY};
use crate::response::{draw_covariates, CovariateDistribution, ResponseModel};
use crate::rng;
use crate::stats::{mean, sample_variance};
use crate::types::{Allocation, Blocking, CovariateMatrix, OutcomePair};

const COVARIATE_TAG: u64 = 0x636f_7661;
const BOOTSTRAP_TAG: u64 = 0x626f_6f74;
const DESIGN_TAG: u64 = 0x6465_7367;

/// Where a cell's covariates come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateSource {
    Fixed(CovariateMatrix),
    Drawn { dist: CovariateDistribution, n_subjects: usize, p: usize },
}

impl CovariateSource {
    /// The covariate matrix; drawn sources depend only on the seed, the
    /// response kind and the shape, so every design in a panel sees the same
    /// subjects.
    pub fn materialize(&self, model: &ResponseModel, seed: u64) -> Result<CovariateMatrix> {
        match self {
            CovariateSource::Fixed(x) => Ok(x.clone()),
            &CovariateSource::Drawn { dist, n_subjects, p } => {
                let id = rng::tag(&[COVARIATE_TAG, model.kind as u64, n_subjects as u64, p as u64]);
                draw_covariates(dist, n_subjects, p, &mut rng::stream(seed, id, 0))
            }
        }
    }
}

/// How a cell builds its design from the covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum DesignSpec {
    /// Complete randomization.
    Bcrd,
    /// `B` equal blocks from the covariate ordering; `B = 1` is BCRD and
    /// blocks of two are pairwise matching.
    Blocks(usize),
    /// Pairwise matching on Mahalanobis distance: exact matching when the
    /// instance fits, the heuristic otherwise.
    Matched,
    /// Perfect balance with `w_star` from greedy pair switching.
    PerfectBalance { restarts: usize },
    /// A design built elsewhere.
    Given(Design),
}

impl DesignSpec {
    pub fn build(&self, x: &CovariateMatrix, seed: u64) -> Result<Design> {
        let n = x.n_subjects();
        match self {
            DesignSpec::Bcrd | DesignSpec::Blocks(1) => Design::bcrd(n),
            &DesignSpec::Blocks(b) => {
                let blocking = build_blocking(x, b)?;
                if blocking.is_pairing() {
                    Design::pm(blocking)
                } else {
                    Ok(Design::block(blocking))
                }
            }
            DesignSpec::Matched => {
                let d = mahalanobis_distances(x);
                let m = if n <= EXACT_CAPACITY { match_exact(&d)? } else { match_heuristic(&d)? };
                Design::pm(m.pairing())
            }
            &DesignSpec::PerfectBalance { restarts } => {
                let best = greedy_pair_switch(x, restarts, rng::tag(&[seed, DESIGN_TAG]))?;
                Ok(Design::pb(best.allocation))
            }
            DesignSpec::Given(d) => {
                if d.n_subjects() != n {
                    return Err(Error::Length { expected: n, got: d.n_subjects() });
                }
                Ok(d.clone())
            }
        }
    }

    fn code(&self) -> u64 {
        match self {
            DesignSpec::Bcrd => 1,
            DesignSpec::Blocks(b) => 100 + *b as u64,
            DesignSpec::Matched => 2,
            DesignSpec::PerfectBalance { .. } => 3,
            DesignSpec::Given(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub model: ResponseModel,
    pub covariates: CovariateSource,
    pub design: DesignSpec,
    pub n_reps: usize,
    pub q: f64,
    pub bootstrap_reps: usize,
    /// Confidence level of the bootstrap intervals.
    pub ci_level: f64,
    pub seed: u64,
}

impl CellConfig {
    pub fn new(model: ResponseModel, covariates: CovariateSource, design: DesignSpec, n_reps: usize, seed: u64) -> Self {
        Self { model, covariates, design, n_reps, q: 0.95, bootstrap_reps: 1000, ci_level: 0.95, seed }
    }

    /// Stream id of the cell's replicates.
    pub fn cell_id(&self, n_subjects: usize) -> u64 {
        rng::tag(&[self.model.kind as u64, self.model.beta.len() as u64, n_subjects as u64, self.design.code()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub mean_sq_err: f64,
    /// Standard deviation of the squared errors (not divided by `sqrt(N)`).
    pub sd_sq_err: f64,
    pub empirical_quantile: f64,
    pub empirical_ci: (f64, f64),
    /// `mean + c_q sd`.
    pub approx_quantile: f64,
    pub approx_ci: (f64, f64),
    pub c_q: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub design: Design,
}

/// Simulates `n_reps` replicates: draw both potential outcome vectors,
/// compute the estimand, draw one allocation, and record the squared error.
pub fn run_cell(cfg: &CellConfig) -> Result<CriterionReport> {
    let (errs, design) = simulate_cell(cfg)?;
    let c_q = tail_constant(cfg.q)?;
    let mean_sq_err = mean(&errs);
    let sd_sq_err = sample_variance(&errs).sqrt();
    let empirical = empirical_quantile(&errs, cfg.q)?;
    let approx = mean_sq_err + c_q * sd_sq_err;

    let cell = rng::tag(&[BOOTSTRAP_TAG, cfg.cell_id(design.n_subjects())]);
    let q = cfg.q;
    let stats: [&Statistic<'_>; 2] = [
        &|s: &mut [f64]| quantile_in_place(s, q),
        &|s: &mut [f64]| mean(s) + c_q * sample_variance(s).sqrt(),
    ];
    let (empirical_ci, approx_ci) = if cfg.bootstrap_reps == 0 {
        ((empirical, empirical), (approx, approx))
    } else {
        let cis = percentile_intervals(&errs, &stats, cfg.ci_level, cfg.bootstrap_reps, cfg.seed, cell)?;
        (widen(cis[0], empirical), widen(cis[1], approx))
    };
    Ok(CriterionReport {
        mean_sq_err,
        sd_sq_err,
        empirical_quantile: empirical,
        empirical_ci,
        approx_quantile: approx,
        approx_ci,
        c_q,
        n_reps: cfg.n_reps,
        seed: cfg.seed,
        design,
    })
}

/// The raw squared errors of a cell, in replicate order, with the design used.
pub fn simulate_cell(cfg: &CellConfig) -> Result<(Vec<f64>, Design)> {
    if cfg.n_reps == 0 {
        return Err(Error::Invalid("a cell needs at least one replicate".into()));
    }
    let x = cfg.covariates.materialize(&cfg.model, cfg.seed)?;
    let design = cfg.design.build(&x, cfg.seed)?;
    let (mu_t, mu_c) = cfg.model.potential_means(&x)?;
    let cell = cfg.cell_id(x.n_subjects());
    let errs = (0..cfg.n_reps)
        .into_par_iter()
        .map(|r| {
            let mut s = rng::stream(cfg.seed, cell, r as u64);
            let y_t = cfg.model.draw_outcomes(&mu_t, &mut s)?;
            let y_c = cfg.model.draw_outcomes(&mu_c, &mut s)?;
            let outcomes = OutcomePair::fixed(y_t, y_c)?;
            let tau = estimand(&outcomes);
            let w = sample_allocation(&design, &mut s);
            let err = estimate(&w, &outcomes)? - tau;
            Ok(err * err)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((errs, design))
}

/// Percentile intervals need not contain the full-sample statistic; extend
/// them so the report always satisfies `lo <= point <= hi`.
fn widen((lo, hi): (f64, f64), point: f64) -> (f64, f64) {
    (lo.min(point), hi.max(point))
}

/// The `ceil(q N)`-th order statistic (1-based).
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("empirical quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Invalid(format!("quantile level must lie in (0, 1], got {q}")));
    }
    Ok(quantile_in_place(&mut samples.to_vec(), q))
}

fn quantile_in_place(samples: &mut [f64], q: f64) -> f64 {
    let k = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
    *samples.select_nth_unstable_by(k - 1, f64::total_cmp).1
}

type Statistic<'a> = dyn Fn(&mut [f64]) -> f64 + Sync + 'a;

/// Percentile bootstrap interval of `statistic` from `reps` resamples with
/// replacement; resample `b` uses stream `(seed, stream_id, b)`.
pub fn bootstrap_ci<F>(samples: &[f64], statistic: F, level: f64, reps: usize, seed: u64, stream_id: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let stat = |s: &mut [f64]| statistic(s);
    Ok(percentile_intervals(samples, &[&stat], level, reps, seed, stream_id)?[0])
}

fn percentile_intervals(
    samples: &[f64],
    statistics: &[&Statistic<'_>],
    level: f64,
    reps: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Invalid("bootstrap of an empty sample".into()));
    }
    if reps == 0 {
        return Err(Error::Invalid("bootstrap needs at least one resample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let n = samples.len();
    let replicates: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut s = rng::stream(seed, stream_id, b as u64);
            let mut buf: Vec<f64> = (0..n).map(|_| samples[rand::Rng::random_range(&mut s, 0..n)]).collect();
            // statistics may reorder the buffer, and reordering changes
            // nothing a symmetric statistic depends on
            statistics.iter().map(|f| f(&mut buf)).collect()
        })
        .collect();
    let alpha = 1.0 - level;
    Ok((0..statistics.len())
        .map(|k| {
            let mut values: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
            let lo = quantile_in_place(&mut values, alpha / 2.0);
            let hi = quantile_in_place(&mut values, 1.0 - alpha / 2.0);
            (lo, hi)
        })
        .collect())
}

/// Exact mean and (population) variance of the squared error over the
/// design's uniform support, outcomes held fixed.
pub fn enumerate_design_oracle(design: &Design, outcomes: &OutcomePair) -> Result<(f64, f64)> {
    if outcomes.len() != design.n_subjects() {
        return Err(Error::Length { expected: design.n_subjects(), got: outcomes.len() });
    }
    let v = outcomes.outcome_sum();
    let errs: Vec<f64> = enumerate_support(design)?.iter().map(|w| squared_error_from_sum(w, &v)).collect();
    let m = mean(&errs);
    Ok((m, errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / errs.len() as f64))
}

/// Exact `E_{W,Z}[(tau_hat - tau)^2]`: enumeration over the support for the
/// mean part plus the noise moment `E[(w . z)^2] = sum rho`, which holds for
/// every allocation because the noise is independent with mean zero.
pub fn oracle_mean_mse(design: &Design, mu: &[f64], rho: &[f64]) -> Result<f64> {
    let len = design.n_subjects();
    if mu.len() != len || rho.len() != len {
        return Err(Error::Length { expected: len, got: if mu.len() != len { mu.len() } else { rho.len() } });
    }
    let support = enumerate_support(design)?;
    let signal = support.iter().map(|w| squared_error_from_sum(w, mu)).sum::<f64>() / support.len() as f64;
    let lenf = len as f64;
    Ok(signal + rho.iter().sum::<f64>() / (lenf * lenf))
}

/// Average of the estimate over the design's support.
pub fn oracle_mean_estimate(design: &Design, outcomes: &OutcomePair) -> Result<f64> {
    let support = enumerate_support(design)?;
    let total = support.iter().map(|w| estimate(w, outcomes)).sum::<Result<f64>>()?;
    Ok(total / support.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceFamily {
    Pm,
    Pb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n_subjects: usize,
    /// `n^2 Var((tau_hat - tau)^2)`.
    pub estimate: f64,
    pub se: f64,
    /// The printed limit for the family.
    pub printed_reference: f64,
    /// The limit implied by the enumeration-verified variance constant
    /// (equal to `printed_reference` for PB).
    pub enumeration_reference: f64,
}

/// `n^2 Var` of the squared error for PM or PB across sample sizes, with
/// Gaussian noise of variance `rho` per subject and vanishing within-pair
/// mean gaps: subjects come in identical pairs (rows `2i` and `2i + 1`), the
/// means follow the continuous simulation model, PM pairs the duplicates, and
/// PB's `w_star` splits every duplicate pair, which makes the covariate
/// imbalance exactly zero.
pub fn convergence_study(family: ConvergenceFamily, sizes: &[usize], rho: f64, reps: usize, seed: u64) -> Result<Vec<ConvergenceRow>> {
    let refs = asymptotic_reference(rho)?;
    let (printed_reference, enumeration_reference) = match family {
        ConvergenceFamily::Pm => (refs.pm, pm_limit_from_enumeration(rho)?),
        ConvergenceFamily::Pb => (refs.pb, refs.pb),
    };
    let model = ResponseModel::simulation_default(crate::response::ResponseKind::Continuous, 1);
    sizes
        .iter()
        .map(|&n_subjects| {
            if n_subjects < 4 || n_subjects % 2 != 0 {
                return Err(Error::Invalid(format!("convergence sizes must be even and at least 4, got {n_subjects}")));
            }
            let x = duplicated_covariates(n_subjects, seed)?;
            let (mu_t, mu_c) = model.potential_means(&x)?;
            let mu: Vec<f64> = mu_t.iter().zip(&mu_c).map(|(t, c)| t + c).collect();
            let design = match family {
                ConvergenceFamily::Pm => Design::pm(Blocking::contiguous(n_subjects, n_subjects / 2)?)?,
                ConvergenceFamily::Pb => {
                    Design::pb(Allocation::new((0..n_subjects).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect())?)
                }
            };
            let cell = rng::tag(&[family as u64, n_subjects as u64]);
            let (estimate, se) = scaled_error_variance(&design, &mu, rho, reps, seed, cell);
            Ok(ConvergenceRow { n_subjects, estimate, se, printed_reference, enumeration_reference })
        })
        .collect()
}

/// `U(-1, 1)` covariates with every value repeated on two consecutive rows.
pub fn duplicated_covariates(n_subjects: usize, seed: u64) -> Result<CovariateMatrix> {
    let half = n_subjects / 2;
    // covariate matrices need an even row count of at least four, so draw a
    // padded column and keep the first `half` values
    let rows = (half + half % 2).max(4);
    let drawn = draw_covariates(
        CovariateDistribution::Uniform { lo: -1.0, hi: 1.0 },
        rows,
        1,
        &mut rng::stream(seed, rng::tag(&[COVARIATE_TAG, n_subjects as u64]), 0),
    )?;
    let column: Vec<f64> = drawn.column(0).iter().take(half).flat_map(|&v| [v, v]).collect();
    CovariateMatrix::from_column(&column)
}
