//! Registration and generation quality metrics.
//!
//! Chamfer distance uses mean Euclidean (not squared) nearest-neighbour
//! distances in both directions. EMD is reported as the mean matched
//! distance so values compare across point counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::spatial::{dist, NeighborIndex};

/// Largest size solved by the exact assignment solver; larger inputs use
/// the auction approximation.
pub const EMD_EXACT_THRESHOLD: usize = 512;

/// Per-assignment slack of the auction solver, relative to the largest
/// pairwise distance.
pub const AUCTION_EPSILON: f64 = 1e-6;

pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty cloud"));
    }
    Ok(mean_nn_distance(x, y) + mean_nn_distance(y, x))
}

/// `(1/|from|) Σ_{p∈from} min_{q∈to} ‖p − q‖`.
pub fn mean_nn_distance(from: &PointCloud, to: &PointCloud) -> f64 {
    let index = NeighborIndex::new(to.points());
    let total: f64 = from.points().iter().map(|p| index.nearest(p).1.sqrt()).sum();
    total / from.len() as f64
}

/// One-to-one matching: `mapping[i]` is the index in `Y` paired with `X[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    mapping: Vec<usize>,
}

impl Assignment {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &j in &mapping {
            if j >= mapping.len() || seen[j] {
                return Err(Error::invalid("assignment is not a permutation"));
            }
            seen[j] = true;
        }
        Ok(Self { mapping })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EmdSolver {
    Exact,
    /// Auction result; `lower_bound` is a dual bound on the mean cost.
    Auction { epsilon: f64, lower_bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emd {
    /// Mean matched Euclidean distance.
    pub cost: f64,
    pub assignment: Assignment,
    pub solver: EmdSolver,
}

pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<Emd> {
    emd_with_threshold(x, y, EMD_EXACT_THRESHOLD)
}

pub fn emd_with_threshold(x: &PointCloud, y: &PointCloud, exact_threshold: usize) -> Result<Emd> {
    if x.len() != y.len() {
        return Err(Error::SizeMismatch { left: x.len(), right: y.len() });
    }
    let n = x.len();
    let mut cost = Vec::with_capacity(n * n);
    for p in x.points() {
        for q in y.points() {
            cost.push(dist(p, q));
        }
    }
    let (mapping, solver) = if n <= exact_threshold {
        (hungarian(&cost, n), EmdSolver::Exact)
    } else {
        let cmax = cost.iter().copied().fold(0.0, f64::max);
        let eps = (AUCTION_EPSILON * cmax).max(f64::MIN_POSITIVE);
        let (mapping, lower) = auction(&cost, n, eps);
        (mapping, EmdSolver::Auction { epsilon: eps, lower_bound: lower / n as f64 })
    };
    let total: f64 = mapping.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Emd { cost: total / n as f64, assignment: Assignment { mapping }, solver })
}

/// Minimum-cost perfect matching on a dense `n×n` cost matrix using
/// shortest augmenting paths with row/column potentials. Returns the
/// column assigned to every row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|m| *m = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[owner[j] - 1] = j - 1;
    }
    mapping
}

/// Forward auction with epsilon scaling. Returns the assignment and a dual
/// lower bound on the optimal total cost; the primal total is within
/// `n·eps` of the optimum.
pub fn auction(cost: &[f64], n: usize, eps_final: f64) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    if n == 1 {
        return (vec![0], cost[0]);
    }
    let cmax = cost.iter().copied().fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (cmax / 4.0).max(eps_final);
    let mut assigned = vec![usize::MAX; n];
    loop {
        let mut owner = vec![usize::MAX; n];
        assigned.iter_mut().for_each(|a| *a = usize::MAX);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best_j, mut best, mut second) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let val = -row[j] - prices[j];
                if val > best {
                    second = best;
                    best = val;
                    best_j = j;
                } else if val > second {
                    second = val;
                }
            }
            prices[best_j] += best - second + eps;
            let prev = owner[best_j];
            if prev != usize::MAX {
                assigned[prev] = usize::MAX;
                queue.push(prev);
            }
            owner[best_j] = i;
            assigned[i] = best_j;
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    let mut dual = prices.iter().sum::<f64>();
    for i in 0..n {
        let row = &cost[i * n..(i + 1) * n];
        dual += (0..n).map(|j| -row[j] - prices[j]).fold(f64::NEG_INFINITY, f64::max);
    }
    (assigned, -dual)
}

/// How consecutive points are paired when building edge lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// `‖P_i − P_{(i+1) mod N}‖`, a closed chain.
    #[default]
    Cyclic,
    /// `‖P_i − P_{(i+1) mod (N−1)}‖`, the modulus taken literally.
    Verbatim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub lengths: Vec<f64>,
}

pub fn edge_set(p: &PointCloud, mode: EdgeMode) -> Result<EdgeSet> {
    let n = p.len();
    if n < 2 {
        return Err(Error::invalid(format!("edge set needs at least 2 points, got {n}")));
    }
    let pts = p.points();
    let lengths = (0..n).map(|i| dist(&pts[i], &pts[edge_successor(i, n, mode)])).collect();
    Ok(EdgeSet { lengths })
}

pub(crate) fn edge_successor(i: usize, n: usize, mode: EdgeMode) -> usize {
    match mode {
        EdgeMode::Cyclic => (i + 1) % n,
        EdgeMode::Verbatim => (i + 1) % (n - 1),
    }
}

/// Mean over points of the squared distance between index-paired points.
pub fn mse_points(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::SizeMismatch { left: x.len(), right: y.len() });
    }
    let total: f64 = x.points().iter().zip(y.points()).map(|(p, q)| crate::spatial::dist2(p, q)).sum();
    Ok(total / x.len() as f64)
}
