//! Mahalanobis distances and nonbipartite pairings of subjects.
//!
//! Three matchers are provided:
//!
//! * [`match_exact`] solves the minimum-cost perfect matching exactly by
//!   dynamic programming over subsets of unmatched subjects. It is limited to
//!   [`EXACT_CAPACITY`] subjects.
//! * [`match_heuristic`] runs pair-exchange local search (two- and
//!   three-pair rearrangements) from a greedy cheapest-edge pairing and from
//!   a few fixed pseudo-random pairings, keeping the cheapest local optimum. This is the matcher used at experiment scale.
//! * [`match_grid`] is the interval-grid construction: cut each covariate
//!   into `m` rank intervals, group subjects that share every interval, pair
//!   randomly inside groups, then pair the odd leftovers randomly. It is not
//!   meant to be good, only to be analyzable: the mean squared within-pair gap
//!   of any Lipschitz function of bounded covariates shrinks like
//!   `n^{-1/(2p)}`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::Whitener;
use crate::types::{Blocking, CovariateMatrix};

/// Largest instance `match_exact` accepts.
pub const EXACT_CAPACITY: usize = 20;

/// Symmetric, nonnegative, zero-diagonal distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Length { expected: n * n, got: d.len() });
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::Invalid(format!("distance diagonal {i} is nonzero")));
            }
            for j in 0..i {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 || v != d[j * n + i] {
                    return Err(Error::Invalid(format!("bad distance between {i} and {j}")));
                }
            }
        }
        Ok(Self { n, d })
    }

    /// Build from a pairwise function evaluated on `i < j`.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self::new(n, d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn pairing_cost(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(a, b)| self.get(a, b)).sum()
    }
}

/// `(x_l - x_m)^T S^{-1} (x_l - x_m)` for every pair of subjects, with `S`
/// the unbiased sample covariance of the rows (ridge-regularized if
/// near-singular).
pub fn mahalanobis_distances(x: &CovariateMatrix) -> DistanceMatrix {
    let white = Whitener::fit(x).transform(x);
    DistanceMatrix::from_fn(x.n_subjects(), |i, j| {
        white[i].iter().zip(&white[j]).map(|(a, b)| (a - b) * (a - b)).sum()
    })
    .expect("squared distances are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMethod {
    Exact,
    Grid,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Pairs `(lo, hi)` sorted by `lo`.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
    pub method: MatchMethod,
}

impl MatchResult {
    fn new(mut pairs: Vec<(usize, usize)>, d: &DistanceMatrix, method: MatchMethod) -> Self {
        for p in pairs.iter_mut() {
            *p = (p.0.min(p.1), p.0.max(p.1));
        }
        pairs.sort_unstable();
        let cost = d.pairing_cost(&pairs);
        Self { pairs, cost, method }
    }

    pub fn pairing(&self) -> Blocking {
        Blocking::from_pairs(&self.pairs).expect("matcher output is a perfect pairing")
    }
}

fn check_even(n: usize) -> Result<()> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Invalid(format!("perfect matching needs an even number of subjects, got {n}")));
    }
    Ok(())
}

/// Minimum-cost perfect matching. Among optimal pairings the
/// lexicographically smallest (pairs listed by lower index) is returned.
pub fn match_exact(d: &DistanceMatrix) -> Result<MatchResult> {
    let n = d.len();
    check_even(n)?;
    if n > EXACT_CAPACITY {
        return Err(Error::Capacity { size: n, capacity: EXACT_CAPACITY });
    }
    // best[mask] = cheapest perfect matching of the subjects in `mask`
    let full = (1usize << n) - 1;
    let mut best = vec![f64::INFINITY; 1 << n];
    best[0] = 0.0;
    let choose = |mask: usize, best: &[f64]| -> (f64, usize) {
        let i = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << i);
        let mut out = (f64::INFINITY, usize::MAX);
        let mut bits = rest;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let c = d.get(i, j) + best[rest & !(1 << j)];
            if c < out.0 {
                out = (c, j);
            }
        }
        out
    };
    for mask in 1..=full {
        if mask.count_ones() % 2 == 0 {
            best[mask] = choose(mask, &best).0;
        }
    }
    let mut pairs = Vec::with_capacity(n / 2);
    let mut mask = full;
    while mask != 0 {
        let i = mask.trailing_zeros() as usize;
        let (_, j) = choose(mask, &best);
        pairs.push((i, j));
        mask &= !(1 << i) & !(1 << j);
    }
    Ok(MatchResult::new(pairs, d, MatchMethod::Exact))
}

/// Number of extra random starting pairings tried by `match_heuristic`.
pub const HEURISTIC_RESTARTS: u64 = 8;

const HEURISTIC_TAG: u64 = 0x6865_7572;

/// Greedy cheapest-edge seeding followed by pair-exchange local search, plus
/// `HEURISTIC_RESTARTS` local searches from fixed pseudo-random pairings. The
/// cheapest local optimum wins (earliest start on ties), so the result is a
/// deterministic function of `d`.
pub fn match_heuristic(d: &DistanceMatrix) -> Result<MatchResult> {
    let n = d.len();
    check_even(n)?;

    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    edges.sort_by(|a, b| d.get(a.0, a.1).total_cmp(&d.get(b.0, b.1)).then(a.cmp(b)));
    let mut used = vec![false; n];
    let mut greedy = Vec::with_capacity(n / 2);
    for (i, j) in edges {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            greedy.push((i, j));
        }
    }

    let mut best = local_search(d, greedy);
    let mut best_cost = d.pairing_cost(&best);
    for start in 0..HEURISTIC_RESTARTS {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(HEURISTIC_TAG, n as u64, start));
        let pairs = local_search(d, order.chunks(2).map(|c| (c[0], c[1])).collect());
        let cost = d.pairing_cost(&pairs);
        if improves(cost, best_cost) {
            best = pairs;
            best_cost = cost;
        }
    }
    Ok(MatchResult::new(best, d, MatchMethod::Heuristic))
}

fn local_search(d: &DistanceMatrix, mut pairs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    loop {
        if two_exchange(d, &mut pairs) {
            continue;
        }
        if !three_exchange(d, &mut pairs) {
            return pairs;
        }
    }
}

fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-12 * (1.0 + old.abs())
}

/// One sweep of two-pair rearrangements; true if anything changed.
fn two_exchange(d: &DistanceMatrix, pairs: &mut [(usize, usize)]) -> bool {
    let mut changed = false;
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            let ((p, q), (r, s)) = (pairs[a], pairs[b]);
            let current = d.get(p, q) + d.get(r, s);
            let swap_q_r = d.get(p, r) + d.get(q, s);
            let swap_q_s = d.get(p, s) + d.get(q, r);
            if swap_q_r <= swap_q_s && improves(swap_q_r, current) {
                pairs[a] = (p, r);
                pairs[b] = (q, s);
                changed = true;
            } else if improves(swap_q_s, current) {
                pairs[a] = (p, s);
                pairs[b] = (q, r);
                changed = true;
            }
        }
    }
    changed
}

/// The 15 perfect matchings of six slots.
const SIX_SLOT_MATCHINGS: [[(usize, usize); 3]; 15] = [
    [(0, 1), (2, 3), (4, 5)],
    [(0, 1), (2, 4), (3, 5)],
    [(0, 1), (2, 5), (3, 4)],
    [(0, 2), (1, 3), (4, 5)],
    [(0, 2), (1, 4), (3, 5)],
    [(0, 2), (1, 5), (3, 4)],
    [(0, 3), (1, 2), (4, 5)],
    [(0, 3), (1, 4), (2, 5)],
    [(0, 3), (1, 5), (2, 4)],
    [(0, 4), (1, 2), (3, 5)],
    [(0, 4), (1, 3), (2, 5)],
    [(0, 4), (1, 5), (2, 3)],
    [(0, 5), (1, 2), (3, 4)],
    [(0, 5), (1, 3), (2, 4)],
    [(0, 5), (1, 4), (2, 3)],
];

/// First improving three-pair rearrangement, applied; true if found.
fn three_exchange(d: &DistanceMatrix, pairs: &mut [(usize, usize)]) -> bool {
    let k = pairs.len();
    for a in 0..k {
        for b in a + 1..k {
            for c in b + 1..k {
                let slots = [pairs[a].0, pairs[a].1, pairs[b].0, pairs[b].1, pairs[c].0, pairs[c].1];
                let current = d.get(slots[0], slots[1]) + d.get(slots[2], slots[3]) + d.get(slots[4], slots[5]);
                let mut best = (current, 0usize);
                for (m, matching) in SIX_SLOT_MATCHINGS.iter().enumerate().skip(1) {
                    let cost: f64 = matching.iter().map(|&(u, v)| d.get(slots[u], slots[v])).sum();
                    if cost < best.0 {
                        best = (cost, m);
                    }
                }
                if best.1 != 0 && improves(best.0, current) {
                    let m = SIX_SLOT_MATCHINGS[best.1];
                    pairs[a] = (slots[m[0].0], slots[m[0].1]);
                    pairs[b] = (slots[m[1].0], slots[m[1].1]);
                    pairs[c] = (slots[m[2].0], slots[m[2].1]);
                    return true;
                }
            }
        }
    }
    false
}

/// Interval-grid dimensions for `n_subjects = 2n` subjects and `p`
/// covariates: `m = max(1, floor(n^{1/(2p)}))` intervals per covariate, each
/// holding `2r` consecutive ranks with `r = floor(n / m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub intervals: usize,
    pub r: usize,
}

impl GridLayout {
    pub fn new(n_subjects: usize, p: usize) -> Self {
        let n = n_subjects / 2;
        let root = (n as f64).powf(1.0 / (2.0 * p as f64));
        // guard against 16^(1/2) evaluating to 3.9999...
        let mut m = root.floor() as usize;
        if ((m + 1) as f64 - root).abs() < 1e-9 {
            m += 1;
        }
        let intervals = m.max(1);
        Self { intervals, r: n / intervals }
    }

    /// Subjects per interval.
    pub fn interval_size(&self) -> usize {
        2 * self.r
    }

    /// Interval of a 0-based rank, or `None` for ranks past the last full
    /// interval.
    pub fn interval_of_rank(&self, rank: usize) -> Option<usize> {
        let g = rank / self.interval_size();
        (g < self.intervals).then_some(g)
    }
}

/// Interval-grid pairing. Cost is reported under the Mahalanobis distances
/// of `x`.
pub fn match_grid<R: Rng + ?Sized>(x: &CovariateMatrix, rng: &mut R) -> MatchResult {
    let n_subjects = x.n_subjects();
    let layout = GridLayout::new(n_subjects, x.n_covariates());

    let mut cell: Vec<Option<Vec<usize>>> = vec![Some(Vec::with_capacity(x.n_covariates())); n_subjects];
    for j in 0..x.n_covariates() {
        let mut order: Vec<usize> = (0..n_subjects).collect();
        order.sort_by(|&a, &b| x.get(a, j).total_cmp(&x.get(b, j)));
        for (rank, &i) in order.iter().enumerate() {
            match layout.interval_of_rank(rank) {
                Some(g) => {
                    if let Some(key) = cell[i].as_mut() {
                        key.push(g)
                    }
                }
                None => cell[i] = None,
            }
        }
    }

    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    let mut overflow = Vec::new();
    for (i, key) in cell.into_iter().enumerate() {
        match key {
            Some(k) => groups.entry(k).or_default().push(i),
            None => overflow.push(i),
        }
    }

    let mut pairs = Vec::with_capacity(n_subjects / 2);
    for members in groups.values_mut() {
        members.shuffle(rng);
        if members.len() % 2 == 1 {
            overflow.push(members.pop().unwrap());
        }
        pairs.extend(members.chunks_exact(2).map(|c| (c[0], c[1])));
    }
    overflow.sort_unstable();
    overflow.shuffle(rng);
    pairs.extend(overflow.chunks_exact(2).map(|c| (c[0], c[1])));

    MatchResult::new(pairs, &mahalanobis_distances(x), MatchMethod::Grid)
}

/// Mean squared within-pair gap of `mu`: `(1/n) sum_pairs (mu_a - mu_b)^2`.
pub fn a2_diagnostic(pairing: &Blocking, mu: &[f64]) -> Result<f64> {
    if mu.len() != pairing.n_subjects() {
        return Err(Error::Length { expected: pairing.n_subjects(), got: mu.len() });
    }
    let pairs = pairing
        .pairs()
        .ok_or_else(|| Error::Invalid("diagnostic needs a pairing".into()))?;
    let total: f64 = pairs.iter().map(|&(a, b)| (mu[a] - mu[b]).powi(2)).sum();
    Ok(total / pairs.len() as f64)
}
