//! Endpoint models: a GLM-style linear predictor, the mean function of each
//! response type, and the outcome and covariate distributions used in the
//! simulations.
//!
//! | response   | mean            | outcome distribution                   | default parameter |
//! |------------|-----------------|----------------------------------------|-------------------|
//! | continuous | identity        | `Normal(mu, sigma^2)`                  | `sigma = 1`       |
//! | incidence  | inverse logit   | `Bernoulli(mu)`                        |                   |
//! | proportion | inverse logit   | `Beta(phi mu, phi (1 - mu))`           | `phi = 2`         |
//! | count      | exp             | `Poisson(mu)`                          |                   |
//! | survival   | exp             | `Weibull(mu / Gamma(1 + 1/k), k)`      | `k = 4`           |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::types::{CovariateMatrix, OutcomePair};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

/// Largest Poisson mean accepted by the sampler.
pub const POISSON_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResponseKind {
    Continuous,
    Incidence,
    Proportion,
    Count,
    Survival,
}

impl ResponseKind {
    pub const ALL: [ResponseKind; 5] = [
        ResponseKind::Continuous,
        ResponseKind::Incidence,
        ResponseKind::Proportion,
        ResponseKind::Count,
        ResponseKind::Survival,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResponseKind::Continuous => "continuous",
            ResponseKind::Incidence => "incidence",
            ResponseKind::Proportion => "proportion",
            ResponseKind::Count => "count",
            ResponseKind::Survival => "survival",
        }
    }

    fn default_param(self) -> f64 {
        match self {
            ResponseKind::Continuous => 1.0,
            ResponseKind::Proportion => 2.0,
            ResponseKind::Survival => 4.0,
            ResponseKind::Incidence | ResponseKind::Count => f64::NAN,
        }
    }
}

impl fmt::Display for ResponseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResponseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ResponseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown response type '{s}'")))
    }
}

/// Response model: coefficients plus the dispersion parameter of the kind
/// (`sigma` for continuous, `phi` for proportion, `k` for survival; unused
/// otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseModel {
    pub kind: ResponseKind,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub beta_t: f64,
    param: f64,
}

/// Covariate weights used by the simulations, cycled for `p > 5`.
const DEFAULT_BETA: [f64; 5] = [1.0, -1.0, 1.0, -1.0, 1.0];

impl ResponseModel {
    pub fn new(kind: ResponseKind, beta0: f64, beta: Vec<f64>, beta_t: f64) -> Self {
        Self { kind, beta0, beta, beta_t, param: kind.default_param() }
    }

    /// Simulation defaults: `beta0 = -1`, `beta = [1, -1, 1, -1, 1]` truncated
    /// to `p`, `beta_T = 0.001`.
    pub fn simulation_default(kind: ResponseKind, p: usize) -> Self {
        let beta = (0..p).map(|j| DEFAULT_BETA[j % DEFAULT_BETA.len()]).collect();
        Self::new(kind, -1.0, beta, 0.001)
    }

    pub fn with_param(mut self, param: f64) -> Result<Self> {
        if matches!(self.kind, ResponseKind::Incidence | ResponseKind::Count) {
            return Err(Error::Invalid(format!("{} response has no parameter", self.kind)));
        }
        if !(param > 0.0 && param.is_finite()) {
            return Err(Error::Invalid(format!("{} parameter must be positive, got {param}", self.kind)));
        }
        self.param = param;
        Ok(self)
    }

    pub fn param(&self) -> Option<f64> {
        (!self.param.is_nan()).then_some(self.param)
    }

    /// `beta0 + beta . x + beta_T w`.
    pub fn linear_component(&self, x_row: &[f64], w_sign: i8) -> f64 {
        self.beta0 + self.beta.iter().zip(x_row).map(|(b, x)| b * x).sum::<f64>() + self.beta_t * w_sign as f64
    }

    /// Per-subject means under treatment (`w = +1`) and control (`w = -1`).
    pub fn potential_means(&self, x: &CovariateMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.n_covariates() != self.beta.len() {
            return Err(Error::Length { expected: self.beta.len(), got: x.n_covariates() });
        }
        let mean = |sign| x.rows().map(|r| mean_function(self.kind, self.linear_component(r, sign))).collect();
        Ok((mean(1), mean(-1)))
    }

    /// Closed-form outcome variance of one arm at mean `mu`.
    pub fn outcome_variance(&self, mu: f64) -> f64 {
        match self.kind {
            ResponseKind::Continuous => self.param * self.param,
            ResponseKind::Incidence => mu * (1.0 - mu),
            ResponseKind::Proportion => mu * (1.0 - mu) / (self.param + 1.0),
            ResponseKind::Count => mu,
            ResponseKind::Survival => {
                let k = self.param;
                let g1 = gamma(1.0 + 1.0 / k);
                let scale = mu / g1;
                scale * scale * (gamma(1.0 + 2.0 / k) - g1 * g1)
            }
        }
    }

    /// `rho_i = Var(Z_T,i) + Var(Z_C,i)`.
    pub fn residual_variances(&self, mu_t: &[f64], mu_c: &[f64]) -> Vec<f64> {
        mu_t.iter().zip(mu_c).map(|(&t, &c)| self.outcome_variance(t) + self.outcome_variance(c)).collect()
    }

    fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self.kind {
            ResponseKind::Continuous => mu.is_finite(),
            ResponseKind::Incidence => (0.0..=1.0).contains(&mu),
            ResponseKind::Proportion => mu > 0.0 && mu < 1.0,
            ResponseKind::Count => (0.0..=POISSON_GUARD).contains(&mu),
            ResponseKind::Survival => mu > 0.0 && mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::MeanOutOfRange { kind: self.kind.name(), mean: mu })
        }
    }

    /// One independent outcome per subject with the given means.
    pub fn draw_outcomes<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        mu.iter()
            .map(|&m| {
                self.check_mean(m)?;
                Ok(self.draw_one(m, rng))
            })
            .collect()
    }

    fn draw_one<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> f64 {
        match self.kind {
            ResponseKind::Continuous => {
                let z: f64 = StandardNormal.sample(rng);
                mu + self.param * z
            }
            ResponseKind::Incidence => {
                if rng.random::<f64>() < mu {
                    1.0
                } else {
                    0.0
                }
            }
            ResponseKind::Proportion => {
                let lx = log_gamma_variate(self.param * mu, rng);
                let ly = log_gamma_variate(self.param * (1.0 - mu), rng);
                1.0 / (1.0 + (ly - lx).exp())
            }
            ResponseKind::Count => {
                if mu == 0.0 {
                    0.0
                } else {
                    Poisson::new(mu).expect("guarded Poisson mean").sample(rng)
                }
            }
            ResponseKind::Survival => {
                let k = self.param;
                let scale = mu / gamma(1.0 + 1.0 / k);
                scale * (-open_unit(rng).ln()).powf(1.0 / k)
            }
        }
    }

    /// Draw both potential outcome vectors (treatment first) and attach the
    /// closed-form residual variances.
    pub fn draw_outcome_pair<R: Rng + ?Sized>(&self, mu_t: &[f64], mu_c: &[f64], rng: &mut R) -> Result<OutcomePair> {
        let y_t = self.draw_outcomes(mu_t, rng)?;
        let y_c = self.draw_outcomes(mu_c, rng)?;
        OutcomePair::new(y_t, y_c, mu_t.to_vec(), mu_c.to_vec(), self.residual_variances(mu_t, mu_c))
    }
}

/// Mean function of the response kind. Predictors beyond `ETA_CLAMP` in
/// magnitude are clamped, with a logged warning.
pub fn mean_function(kind: ResponseKind, eta: f64) -> f64 {
    let clamped = |eta: f64| {
        if eta.abs() > ETA_CLAMP {
            log::warn!("linear predictor {eta} clamped to +-{ETA_CLAMP}");
            eta.clamp(-ETA_CLAMP, ETA_CLAMP)
        } else {
            eta
        }
    };
    match kind {
        ResponseKind::Continuous => eta,
        ResponseKind::Incidence | ResponseKind::Proportion => 1.0 / (1.0 + (-clamped(eta)).exp()),
        ResponseKind::Count | ResponseKind::Survival => clamped(eta).exp(),
    }
}

/// Uniform on `(0, 1]`.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Log of a `Gamma(shape, 1)` draw. Small shapes use
/// `Gamma(a) = Gamma(a + 1) U^{1/a}` in log space so the draw cannot
/// underflow to zero.
fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng).ln();
        g + open_unit(rng).ln() / shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateDistribution {
    Uniform { lo: f64, hi: f64 },
    /// Exponential with the given rate, shifted by `-1/rate` to mean zero.
    ExponentialCentered { rate: f64 },
}

impl CovariateDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            CovariateDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            CovariateDistribution::ExponentialCentered { .. } => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            CovariateDistribution::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            CovariateDistribution::ExponentialCentered { rate } => 1.0 / (rate * rate),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CovariateDistribution::ExponentialCentered { rate } => -open_unit(rng).ln() / rate - 1.0 / rate,
        }
    }
}

/// Which covariate family a simulation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovariateFamily {
    Uniform,
    Exponential,
}

impl CovariateFamily {
    pub fn name(self) -> &'static str {
        match self {
            CovariateFamily::Uniform => "uniform",
            CovariateFamily::Exponential => "exponential",
        }
    }

    /// Covariate distribution used with each response type. The exponential
    /// rates match the uniform variances.
    pub fn distribution(self, kind: ResponseKind) -> CovariateDistribution {
        let half_width = match kind {
            ResponseKind::Incidence => 10.0,
            ResponseKind::Count => 5.0,
            _ => 1.0,
        };
        match self {
            CovariateFamily::Uniform => CovariateDistribution::Uniform { lo: -half_width, hi: half_width },
            CovariateFamily::Exponential => {
                CovariateDistribution::ExponentialCentered { rate: 12f64.sqrt() / (2.0 * half_width) }
            }
        }
    }
}

impl FromStr for CovariateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CovariateFamily::Uniform),
            "exponential" | "exp" => Ok(CovariateFamily::Exponential),
            _ => Err(Error::Invalid(format!("unknown covariate family '{s}'"))),
        }
    }
}

/// I.i.d. covariate matrix of `n_subjects x p` draws, filled row by row.
pub fn draw_covariates<R: Rng + ?Sized>(
    dist: CovariateDistribution,
    n_subjects: usize,
    p: usize,
    rng: &mut R,
) -> Result<CovariateMatrix> {
    match dist {
        CovariateDistribution::Uniform { lo, hi } if !(hi > lo) => {
            return Err(Error::Invalid(format!("uniform bounds [{lo}, {hi}] are empty")))
        }
        CovariateDistribution::ExponentialCentered { rate } if !(rate > 0.0) => {
            return Err(Error::Invalid(format!("exponential rate must be positive, got {rate}")))
        }
        _ => {}
    }
    let values = (0..n_subjects * p).map(|_| dist.sample(rng)).collect();
    CovariateMatrix::new(values, n_subjects, p)
}
