//! Difference-in-means estimator, the sample average treatment effect, and
//! the squared estimation error.

use crate::error::{Error, Result};
use crate::types::{Allocation, OutcomePair};

fn check_len(w: &Allocation, outcomes: &OutcomePair) -> Result<()> {
    if w.len() != outcomes.len() {
        return Err(Error::Length { expected: outcomes.len(), got: w.len() });
    }
    Ok(())
}

/// Sample average treatment effect `(1/2n) sum (y_T - y_C)`.
pub fn estimand(outcomes: &OutcomePair) -> f64 {
    let total: f64 = outcomes.y_t.iter().zip(&outcomes.y_c).map(|(t, c)| t - c).sum();
    total / outcomes.len() as f64
}

/// Difference in arm means: treated subjects contribute `y_T / n`, controls
/// contribute `-y_C / n`.
pub fn estimate(w: &Allocation, outcomes: &OutcomePair) -> Result<f64> {
    check_len(w, outcomes)?;
    let n = (w.len() / 2) as f64;
    let (treated, control) = w.signs().iter().enumerate().fold((0.0, 0.0), |(t, c), (i, &s)| {
        if s == 1 {
            (t + outcomes.y_t[i], c)
        } else {
            (t, c + outcomes.y_c[i])
        }
    });
    Ok(treated / n - control / n)
}

/// `(estimate - estimand)^2`, computed directly.
pub fn squared_error(w: &Allocation, outcomes: &OutcomePair) -> Result<f64> {
    let err = estimate(w, outcomes)? - estimand(outcomes);
    Ok(err * err)
}

/// `(w^T (y_T + y_C))^2 / 4n^2`, the quadratic-form route to the same value.
pub fn squared_error_quadratic(w: &Allocation, outcomes: &OutcomePair) -> Result<f64> {
    check_len(w, outcomes)?;
    Ok(squared_error_from_sum(w, &outcomes.outcome_sum()))
}

/// Squared error given the outcome sum `v = y_T + y_C`.
pub fn squared_error_from_sum(w: &Allocation, v: &[f64]) -> f64 {
    let len = w.len() as f64;
    let s = w.dot(v);
    s * s / (len * len)
}

/// Average residual variance.
pub fn residual_variance_mean(rho: &[f64]) -> Result<f64> {
    if rho.is_empty() {
        return Err(Error::Invalid("empty residual variance vector".into()));
    }
    if rho.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(Error::Invalid("residual variances must be finite and nonnegative".into()));
    }
    Ok(rho.iter().sum::<f64>() / rho.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(signs: &[i8]) -> Allocation {
        Allocation::new(signs.to_vec()).unwrap()
    }

    #[test]
    fn estimand_examples() {
        let o = OutcomePair::fixed(vec![3.0, 5.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(estimand(&o), 2.5);
        let same = OutcomePair::fixed(vec![0.3, -2.0, 7.0, 1.0], vec![0.3, -2.0, 7.0, 1.0]).unwrap();
        assert_eq!(estimand(&same), 0.0);
        let unit = OutcomePair::fixed(vec![1.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(estimand(&unit), 1.0);
    }

    #[test]
    fn estimate_examples() {
        let o = OutcomePair::fixed(vec![3.0, 5.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(estimate(&w(&[1, -1]), &o).unwrap(), 1.0);

        let constant = OutcomePair::fixed(vec![4.5; 6], vec![-1.25; 6]).unwrap();
        assert_eq!(estimate(&w(&[1, -1, 1, -1, -1, 1]), &constant).unwrap(), 5.75);

        let o = OutcomePair::fixed(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]).unwrap();
        assert_eq!(estimate(&w(&[1, -1, -1, 1]), &o).unwrap(), 2.5);
    }

    #[test]
    fn estimate_rejects_length_mismatch() {
        let o = OutcomePair::fixed(vec![3.0, 5.0], vec![1.0, 2.0]).unwrap();
        assert!(estimate(&w(&[1, -1, 1, -1]), &o).is_err());
    }

    #[test]
    fn squared_error_examples() {
        let o = OutcomePair::fixed(vec![3.0, 5.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(squared_error(&w(&[1, -1]), &o).unwrap(), 2.25);
        assert_eq!(squared_error_quadratic(&w(&[1, -1]), &o).unwrap(), 2.25);

        let annihilated = OutcomePair::fixed(vec![1.0, -2.0, 0.5, 3.0], vec![-1.0, 2.0, -0.5, -3.0]).unwrap();
        assert_eq!(squared_error(&w(&[1, 1, -1, -1]), &annihilated).unwrap(), 0.0);

        let constant_sum = OutcomePair::fixed(vec![0.25, 1.0, 0.0, 0.75], vec![0.75, 0.0, 1.0, 0.25]).unwrap();
        assert_eq!(squared_error_quadratic(&w(&[1, -1, -1, 1]), &constant_sum).unwrap(), 0.0);
    }

    #[test]
    fn residual_variance_mean_examples() {
        assert_eq!(residual_variance_mean(&[1.0; 4]).unwrap(), 1.0);
        assert_eq!(residual_variance_mean(&[0.0; 6]).unwrap(), 0.0);
        assert_eq!(residual_variance_mean(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert!(residual_variance_mean(&[]).is_err());
        assert!(residual_variance_mean(&[1.0, -0.5]).is_err());
    }

    fn balanced_case() -> impl Strategy<Value = (Vec<i8>, Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                Just((0..2 * n).map(|i| if i < n { 1i8 } else { -1 }).collect::<Vec<_>>()).prop_shuffle(),
                prop::collection::vec(-50.0f64..50.0, 2 * n),
                prop::collection::vec(-50.0f64..50.0, 2 * n),
            )
        })
    }

    proptest! {
        #[test]
        fn two_routes_to_squared_error_agree((signs, yt, yc) in balanced_case()) {
            let o = OutcomePair::fixed(yt, yc).unwrap();
            let w = Allocation::new(signs).unwrap();
            let direct = squared_error(&w, &o).unwrap();
            let quad = squared_error_quadratic(&w, &o).unwrap();
            let scale = o.outcome_sum().iter().map(|v| v * v).sum::<f64>().max(1.0);
            prop_assert!((direct - quad).abs() <= 1e-12 * scale);
        }

        #[test]
        fn mirror_pair_averages_to_estimand((signs, yt, yc) in balanced_case()) {
            let o = OutcomePair::fixed(yt, yc).unwrap();
            let w = Allocation::new(signs).unwrap();
            let avg = 0.5 * (estimate(&w, &o).unwrap() + estimate(&w.mirror(), &o).unwrap());
            let scale: f64 = o.y_t.iter().chain(&o.y_c).map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((avg - estimand(&o)).abs() <= 1e-12 * scale);
        }
    }
}
