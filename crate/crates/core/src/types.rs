//! Shared domain types: covariates, allocations, blockings, potential outcomes
//! and design covariance matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Fixed `2n x p` matrix of subject covariates, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    values: Vec<f64>,
    n_subjects: usize,
    n_covariates: usize,
}

impl CovariateMatrix {
    pub fn new(values: Vec<f64>, n_subjects: usize, n_covariates: usize) -> Result<Self> {
        if n_covariates == 0 {
            return Err(Error::Covariates("need at least one covariate".into()));
        }
        if n_subjects < 4 || !n_subjects.is_multiple_of(2) {
            return Err(Error::Covariates(format!(
                "subject count must be even and at least 4, got {n_subjects}"
            )));
        }
        if values.len() != n_subjects * n_covariates {
            return Err(Error::Length { expected: n_subjects * n_covariates, got: values.len() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Covariates(format!(
                "non-finite entry at row {}, column {}",
                bad / n_covariates,
                bad % n_covariates
            )));
        }
        Ok(Self { values, n_subjects, n_covariates })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Covariates("ragged rows".into()));
        }
        Self::new(rows.iter().flatten().copied().collect(), rows.len(), p)
    }

    /// Single-covariate matrix.
    pub fn from_column(column: &[f64]) -> Result<Self> {
        Self::new(column.to_vec(), column.len(), 1)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    /// Half the subject count.
    pub fn n(&self) -> usize {
        self.n_subjects / 2
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_covariates + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_subjects).map(|i| self.get(i, j)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_covariates)
    }

    /// Range (max - min) of each column.
    pub fn column_ranges(&self) -> Vec<f64> {
        (0..self.n_covariates)
            .map(|j| {
                let (lo, hi) = self
                    .rows()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
                hi - lo
            })
            .collect()
    }

    /// Keep only the first `p` columns.
    pub fn leading_columns(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.n_covariates {
            return Err(Error::Covariates(format!("cannot take {p} of {} columns", self.n_covariates)));
        }
        let values = self.rows().flat_map(|r| r[..p].iter().copied()).collect();
        Self::new(values, self.n_subjects, p)
    }
}

/// A balanced `+1/-1` assignment vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Allocation {
    signs: Vec<i8>,
}

impl Allocation {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if let Some(&bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::BadSign(bad));
        }
        let plus = signs.iter().filter(|&&s| s == 1).count();
        let minus = signs.len() - plus;
        if plus != minus || signs.is_empty() {
            return Err(Error::Unbalanced { plus, minus });
        }
        Ok(Self { signs })
    }

    /// Caller guarantees balance and `+-1` entries.
    pub(crate) fn from_signs_unchecked(signs: Vec<i8>) -> Self {
        debug_assert_eq!(signs.iter().map(|&s| s as i64).sum::<i64>(), 0);
        Self { signs }
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.signs[i] == 1
    }

    /// `w^T v`.
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.signs.iter().zip(v).map(|(&s, &x)| s as f64 * x).sum()
    }

    /// Mirror allocation with the arms swapped.
    pub fn mirror(&self) -> Self {
        Self { signs: self.signs.iter().map(|s| -s).collect() }
    }
}

/// Ordered partition of subjects into equal, even-size blocks.
///
/// A pairing is the special case with blocks of size two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocking {
    block_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Blocking {
    /// Build from explicit member lists. Every subject `0..n_subjects` must
    /// appear exactly once and all blocks must share one even size.
    pub fn from_blocks(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let n_subjects: usize = blocks.iter().map(Vec::len).sum();
        let size = blocks.first().map_or(0, Vec::len);
        if blocks.is_empty() || size == 0 {
            return Err(Error::Blocking("no blocks".into()));
        }
        if let Some(b) = blocks.iter().find(|b| b.len() != size) {
            return Err(Error::Blocking(format!("blocks of unequal size ({} vs {size})", b.len())));
        }
        if !size.is_multiple_of(2) {
            return Err(Error::Blocking(format!("block size {size} is odd")));
        }
        let mut block_of = vec![usize::MAX; n_subjects];
        for (b, members) in blocks.iter().enumerate() {
            for &i in members {
                if i >= n_subjects {
                    return Err(Error::Blocking(format!("subject {i} out of range")));
                }
                if block_of[i] != usize::MAX {
                    return Err(Error::Blocking(format!("subject {i} appears twice")));
                }
                block_of[i] = b;
            }
        }
        Ok(Self { block_of, members: blocks })
    }

    /// `n_blocks` contiguous blocks in index order.
    pub fn contiguous(n_subjects: usize, n_blocks: usize) -> Result<Self> {
        check_divisibility(n_subjects, n_blocks)?;
        let size = n_subjects / n_blocks;
        Self::from_blocks((0..n_blocks).map(|b| (b * size..(b + 1) * size).collect()).collect())
    }

    /// Pairing from a list of index pairs.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        Self::from_blocks(pairs.iter().map(|&(a, b)| vec![a, b]).collect())
    }

    pub fn n_subjects(&self) -> usize {
        self.block_of.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.members.len()
    }

    pub fn block_size(&self) -> usize {
        self.members[0].len()
    }

    pub fn is_pairing(&self) -> bool {
        self.block_size() == 2
    }

    pub fn block_of(&self, i: usize) -> usize {
        self.block_of[i]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Pairs as `(lo, hi)` sorted by `lo`; `None` unless this is a pairing.
    pub fn pairs(&self) -> Option<Vec<(usize, usize)>> {
        if !self.is_pairing() {
            return None;
        }
        let mut pairs: Vec<_> =
            self.members.iter().map(|m| (m[0].min(m[1]), m[0].max(m[1]))).collect();
        pairs.sort_unstable();
        Some(pairs)
    }
}

pub(crate) fn check_divisibility(n_subjects: usize, n_blocks: usize) -> Result<()> {
    if n_blocks == 0 || !n_subjects.is_multiple_of(n_blocks) {
        return Err(Error::Blocking(format!(
            "{n_blocks} blocks do not divide {n_subjects} subjects"
        )));
    }
    if !(n_subjects / n_blocks).is_multiple_of(2) {
        return Err(Error::Blocking(format!(
            "{n_subjects} subjects in {n_blocks} blocks gives odd block size {}",
            n_subjects / n_blocks
        )));
    }
    Ok(())
}

/// Potential outcomes, their means, and the variances of the combined
/// residual `Z_T + Z_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePair {
    pub y_t: Vec<f64>,
    pub y_c: Vec<f64>,
    pub mu_t: Vec<f64>,
    pub mu_c: Vec<f64>,
    pub rho: Vec<f64>,
}

impl OutcomePair {
    pub fn new(y_t: Vec<f64>, y_c: Vec<f64>, mu_t: Vec<f64>, mu_c: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let n = y_t.len();
        if n == 0 {
            return Err(Error::Outcomes("no subjects".into()));
        }
        for v in [&y_c, &mu_t, &mu_c, &rho] {
            if v.len() != n {
                return Err(Error::Length { expected: n, got: v.len() });
            }
        }
        if [&y_t, &y_c, &mu_t, &mu_c, &rho].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Outcomes("non-finite entry".into()));
        }
        if rho.iter().any(|&r| r < 0.0) {
            return Err(Error::Outcomes("negative residual variance".into()));
        }
        Ok(Self { y_t, y_c, mu_t, mu_c, rho })
    }

    /// Deterministic outcomes: means equal the outcomes, residual variance 0.
    pub fn fixed(y_t: Vec<f64>, y_c: Vec<f64>) -> Result<Self> {
        let rho = vec![0.0; y_t.len()];
        Self::new(y_t.clone(), y_c.clone(), y_t, y_c, rho)
    }

    pub fn len(&self) -> usize {
        self.y_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_t.is_empty()
    }

    /// `y_T + y_C`.
    pub fn outcome_sum(&self) -> Vec<f64> {
        self.y_t.iter().zip(&self.y_c).map(|(a, b)| a + b).collect()
    }

    /// `mu_T + mu_C`.
    pub fn mean_sum(&self) -> Vec<f64> {
        self.mu_t.iter().zip(&self.mu_c).map(|(a, b)| a + b).collect()
    }

    /// `z_T + z_C`.
    pub fn residual_sum(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| (self.y_t[i] - self.mu_t[i]) + (self.y_c[i] - self.mu_c[i]))
            .collect()
    }
}

/// Variance-covariance matrix of a design's allocation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignCovariance {
    sigma_w: DMatrix<f64>,
}

impl DesignCovariance {
    pub fn new(sigma_w: DMatrix<f64>) -> Result<Self> {
        if !sigma_w.is_square() {
            return Err(Error::Design("covariance must be square".into()));
        }
        let n = sigma_w.nrows();
        for i in 0..n {
            if sigma_w[(i, i)] != 1.0 {
                return Err(Error::Design(format!("diagonal entry {i} is {} not 1", sigma_w[(i, i)])));
            }
            for j in 0..i {
                if sigma_w[(i, j)] != sigma_w[(j, i)] {
                    return Err(Error::Design("covariance is not symmetric".into()));
                }
            }
        }
        Ok(Self { sigma_w })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn dim(&self) -> usize {
        self.sigma_w.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma_w[(i, j)]
    }

    /// `v^T Sigma_W v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.sigma_w[(i, j)] * v[j];
            }
            total += v[i] * row;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariate_matrix_rejects_bad_shapes() {
        assert!(CovariateMatrix::from_column(&[1.0, 2.0]).is_err());
        assert!(CovariateMatrix::from_column(&[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(CovariateMatrix::from_column(&[1.0, f64::NAN, 3.0, 4.0]).is_err());
        let x = CovariateMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0], vec![5.0, -1.0]])
            .unwrap();
        assert_eq!(x.row(1), &[3.0, 4.0]);
        assert_eq!(x.column(1), vec![2.0, 4.0, 0.0, -1.0]);
        assert_eq!(x.column_ranges(), vec![5.0, 5.0]);
    }

    #[test]
    fn allocation_requires_balance() {
        assert!(matches!(Allocation::new(vec![1, 1, -1]), Err(Error::Unbalanced { plus: 2, minus: 1 })));
        assert!(matches!(Allocation::new(vec![1, 0]), Err(Error::BadSign(0))));
        let w = Allocation::new(vec![1, -1, -1, 1]).unwrap();
        assert_eq!(w.dot(&[1.0, 2.0, 3.0, 4.0]), 0.0);
        assert_eq!(w.mirror().signs(), &[-1, 1, 1, -1]);
    }

    #[test]
    fn blocking_validation() {
        assert!(Blocking::contiguous(6, 2).is_err());
        assert!(Blocking::contiguous(6, 4).is_err());
        let b = Blocking::contiguous(8, 2).unwrap();
        assert_eq!(b.block_size(), 4);
        assert_eq!(b.block_of(5), 1);
        assert!(Blocking::from_pairs(&[(0, 1), (1, 2)]).is_err());
        let p = Blocking::from_pairs(&[(3, 2), (0, 1)]).unwrap();
        assert_eq!(p.pairs().unwrap(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn design_covariance_checks_diagonal() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 0.5]);
        assert!(DesignCovariance::new(bad).is_err());
        let ok = DesignCovariance::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])).unwrap();
        assert_eq!(ok.quadratic_form(&[1.0, 3.0]), 4.0);
    }
}
