//! Randomization designs: complete randomization, block designs, pairwise
//! matching and deterministic perfect balance.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::Whitener;
use crate::types::{check_divisibility, Allocation, Blocking, CovariateMatrix, DesignCovariance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignKind {
    Bcrd,
    Block,
    Pm,
    Pb,
}

impl DesignKind {
    pub fn label(self) -> &'static str {
        match self {
            DesignKind::Bcrd => "BCRD",
            DesignKind::Block => "block",
            DesignKind::Pm => "PM",
            DesignKind::Pb => "PB",
        }
    }
}

/// A design together with whatever it needs to draw allocations.
#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    /// Uniform over all balanced allocations of `n_subjects`.
    Bcrd { n_subjects: usize },
    /// Independent balanced randomization within each block.
    Block(Blocking),
    /// Block design whose blocks are pairs.
    Pm(Blocking),
    /// `w_star` or its mirror, each with probability 1/2.
    Pb(Allocation),
}

impl Design {
    pub fn bcrd(n_subjects: usize) -> Result<Self> {
        if n_subjects < 2 || !n_subjects.is_multiple_of(2) {
            return Err(Error::Design(format!("BCRD needs an even subject count, got {n_subjects}")));
        }
        Ok(Design::Bcrd { n_subjects })
    }

    pub fn block(blocking: Blocking) -> Self {
        Design::Block(blocking)
    }

    pub fn pm(pairing: Blocking) -> Result<Self> {
        if !pairing.is_pairing() {
            return Err(Error::Design(format!(
                "pairwise matching needs blocks of size 2, got {}",
                pairing.block_size()
            )));
        }
        Ok(Design::Pm(pairing))
    }

    pub fn pb(w_star: Allocation) -> Self {
        Design::Pb(w_star)
    }

    pub fn kind(&self) -> DesignKind {
        match self {
            Design::Bcrd { .. } => DesignKind::Bcrd,
            Design::Block(_) => DesignKind::Block,
            Design::Pm(_) => DesignKind::Pm,
            Design::Pb(_) => DesignKind::Pb,
        }
    }

    pub fn n_subjects(&self) -> usize {
        match self {
            Design::Bcrd { n_subjects } => *n_subjects,
            Design::Block(b) | Design::Pm(b) => b.n_subjects(),
            Design::Pb(w) => w.len(),
        }
    }

    /// Blocks of a randomized design; BCRD is the single-block case.
    pub fn blocks(&self) -> Option<Vec<Vec<usize>>> {
        match self {
            Design::Bcrd { n_subjects } => Some(vec![(0..*n_subjects).collect()]),
            Design::Block(b) | Design::Pm(b) => Some(b.blocks().to_vec()),
            Design::Pb(_) => None,
        }
    }

    /// Number of allocations in the support (saturating).
    pub fn support_size(&self) -> u128 {
        match self {
            Design::Pb(_) => 2,
            _ => self
                .blocks()
                .unwrap()
                .iter()
                .map(|b| binomial(b.len() as u128, b.len() as u128 / 2))
                .fold(1u128, |acc, c| acc.saturating_mul(c)),
        }
    }
}

pub(crate) fn binomial(n: u128, k: u128) -> u128 {
    let mut out = 1u128;
    for i in 0..k {
        out = out.saturating_mul(n - i) / (i + 1);
    }
    out
}

/// Draw one allocation from the design.
pub fn sample_allocation<R: Rng + ?Sized>(design: &Design, rng: &mut R) -> Allocation {
    match design {
        Design::Pb(w) => {
            if rng.random::<bool>() {
                w.clone()
            } else {
                w.mirror()
            }
        }
        Design::Bcrd { n_subjects } => {
            let mut idx: Vec<usize> = (0..*n_subjects).collect();
            let mut signs = vec![-1i8; *n_subjects];
            assign_half(&mut idx, &mut signs, rng);
            Allocation::from_signs_unchecked(signs)
        }
        Design::Block(b) | Design::Pm(b) => {
            let mut signs = vec![-1i8; b.n_subjects()];
            let mut scratch = Vec::with_capacity(b.block_size());
            for block in b.blocks() {
                scratch.clear();
                scratch.extend_from_slice(block);
                assign_half(&mut scratch, &mut signs, rng);
            }
            Allocation::from_signs_unchecked(signs)
        }
    }
}

fn assign_half<R: Rng + ?Sized>(members: &mut [usize], signs: &mut [i8], rng: &mut R) {
    let half = members.len() / 2;
    members.partial_shuffle(rng, half);
    for &i in &members[..half] {
        signs[i] = 1;
    }
}

/// Closed-form covariance matrix of the design's allocation vector.
pub fn design_covariance(design: &Design) -> DesignCovariance {
    let n = design.n_subjects();
    let mut sigma = DMatrix::zeros(n, n);
    match design {
        Design::Pb(w) => {
            for i in 0..n {
                for j in 0..n {
                    sigma[(i, j)] = (w.signs()[i] * w.signs()[j]) as f64;
                }
            }
        }
        _ => {
            for block in design.blocks().unwrap() {
                let off = -1.0 / (block.len() as f64 - 1.0);
                for &i in &block {
                    for &j in &block {
                        sigma[(i, j)] = if i == j { 1.0 } else { off };
                    }
                }
            }
        }
    }
    DesignCovariance::new(sigma).expect("design covariance has unit diagonal and is symmetric")
}

/// Largest support `enumerate_support` will materialize.
pub const SUPPORT_LIMIT: u128 = 1 << 20;

/// Every allocation in the design's (uniform) support. PB yields `w_star`
/// then its mirror; randomized designs are listed block by block.
pub fn enumerate_support(design: &Design) -> Result<Vec<Allocation>> {
    let size = design.support_size();
    if size > SUPPORT_LIMIT {
        return Err(Error::SupportTooLarge { size, limit: SUPPORT_LIMIT });
    }
    let blocks = match design {
        Design::Pb(w) => return Ok(vec![w.clone(), w.mirror()]),
        _ => design.blocks().unwrap(),
    };
    let mut out = vec![vec![-1i8; design.n_subjects()]];
    for block in &blocks {
        let halves = half_subsets(block.len());
        let mut next = Vec::with_capacity(out.len() * halves.len());
        for signs in &out {
            for half in &halves {
                let mut s = signs.clone();
                for &k in half {
                    s[block[k]] = 1;
                }
                next.push(s);
            }
        }
        out = next;
    }
    Ok(out.into_iter().map(Allocation::from_signs_unchecked).collect())
}

/// All `len/2`-subsets of `0..len`, in lexicographic order.
fn half_subsets(len: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, len: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..=len - left {
            cur.push(i);
            rec(i + 1, len, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, len, len / 2, &mut Vec::new(), &mut out);
    out
}

/// Blocks built from the first two covariates: order subjects by covariate
/// one, re-sort consecutive groups of `2 n_B` subjects by covariate two, then
/// cut into blocks of `n_B`. With one covariate the blocks are contiguous runs
/// of the sorted values. Sorts are stable, so ties keep input order.
pub fn build_blocking(x: &CovariateMatrix, n_blocks: usize) -> Result<Blocking> {
    let n_subjects = x.n_subjects();
    check_divisibility(n_subjects, n_blocks)?;
    let block_size = n_subjects / n_blocks;

    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.sort_by(|&a, &b| x.get(a, 0).total_cmp(&x.get(b, 0)));
    if x.n_covariates() >= 2 {
        for group in order.chunks_mut(2 * block_size) {
            group.sort_by(|&a, &b| x.get(a, 1).total_cmp(&x.get(b, 1)));
        }
    }
    Blocking::from_blocks(order.chunks(block_size).map(<[usize]>::to_vec).collect())
}

/// Covariate imbalance `(X^T w)^T S^{-1} (X^T w)` with `S` the regularized
/// sample covariance of the rows.
#[derive(Debug, Clone)]
pub struct Imbalance {
    whitened: Vec<Vec<f64>>,
    gram: Vec<f64>,
    tolerance: f64,
}

/// Result of one greedy descent.
#[derive(Debug, Clone)]
pub struct LocalOptimum {
    pub allocation: Allocation,
    pub objective: f64,
    /// Objective after each accepted swap, starting with the initial value.
    pub trajectory: Vec<f64>,
}

impl Imbalance {
    pub fn new(x: &CovariateMatrix) -> Self {
        let whitened = Whitener::fit(x).transform(x);
        let n = whitened.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let g: f64 = whitened[i].iter().zip(&whitened[j]).map(|(a, b)| a * b).sum();
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        let scale = (0..n).map(|i| gram[i * n + i]).sum::<f64>() / n as f64;
        Self { whitened, gram, tolerance: 1e-12 * scale.max(f64::MIN_POSITIVE) }
    }

    pub fn n_subjects(&self) -> usize {
        self.whitened.len()
    }

    fn imbalance_vector(&self, w: &Allocation) -> Vec<f64> {
        let p = self.whitened[0].len();
        let mut s = vec![0.0; p];
        for (row, &sign) in self.whitened.iter().zip(w.signs()) {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += sign as f64 * v;
            }
        }
        s
    }

    pub fn objective(&self, w: &Allocation) -> f64 {
        self.imbalance_vector(w).iter().map(|v| v * v).sum()
    }

    /// Repeatedly apply the treated/control swap that lowers the objective
    /// most, scanning treated then control indices in ascending order and
    /// keeping the first best, until no swap improves.
    pub fn descend(&self, start: Allocation) -> LocalOptimum {
        let n = self.n_subjects();
        let mut signs = start.signs().to_vec();
        let mut s = self.imbalance_vector(&start);
        let mut obj: f64 = s.iter().map(|v| v * v).sum();
        let mut trajectory = vec![obj];
        let mut proj = vec![0.0; n];
        loop {
            for (i, row) in self.whitened.iter().enumerate() {
                proj[i] = row.iter().zip(&s).map(|(a, b)| a * b).sum();
            }
            let mut best: Option<(usize, usize)> = None;
            let mut best_obj = obj - self.tolerance;
            for i in (0..n).filter(|&i| signs[i] == 1) {
                for j in (0..n).filter(|&j| signs[j] == -1) {
                    let cross = self.gram[i * n + i] - 2.0 * self.gram[i * n + j] + self.gram[j * n + j];
                    let candidate = obj - 4.0 * proj[i] + 4.0 * proj[j] + 4.0 * cross;
                    if candidate < best_obj {
                        best_obj = candidate;
                        best = Some((i, j));
                    }
                }
            }
            let Some((i, j)) = best else { break };
            signs[i] = -1;
            signs[j] = 1;
            for (k, acc) in s.iter_mut().enumerate() {
                *acc -= 2.0 * (self.whitened[i][k] - self.whitened[j][k]);
            }
            obj = s.iter().map(|v| v * v).sum();
            trajectory.push(obj);
        }
        LocalOptimum { allocation: Allocation::from_signs_unchecked(signs), objective: obj, trajectory }
    }
}

/// Uniform draw from all balanced allocations of `n_subjects`.
pub fn random_balanced<R: Rng + ?Sized>(n_subjects: usize, rng: &mut R) -> Allocation {
    let mut idx: Vec<usize> = (0..n_subjects).collect();
    let mut signs = vec![-1i8; n_subjects];
    assign_half(&mut idx, &mut signs, rng);
    Allocation::from_signs_unchecked(signs)
}

const GREEDY_TAG: u64 = 0x6772_6565_6479;

/// Best local optimum of the imbalance objective over `restarts` greedy
/// descents from uniform balanced starts. Restart `r` draws its start from
/// stream `(seed, r)`; the winner is the lowest `(objective, r)`, so the
/// result does not depend on scheduling.
pub fn greedy_pair_switch(x: &CovariateMatrix, restarts: usize, seed: u64) -> Result<LocalOptimum> {
    if restarts == 0 {
        return Err(Error::Invalid("greedy pair switching needs at least one restart".into()));
    }
    let imbalance = Imbalance::new(x);
    let (_, _, best) = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::stream(seed, GREEDY_TAG, r as u64);
            let start = random_balanced(x.n_subjects(), &mut stream);
            let opt = imbalance.descend(start);
            (opt.objective, r, opt)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one restart");
    Ok(best)
}
