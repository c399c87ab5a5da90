//! Transform estimation from index-aligned correspondences: batched
//! consensus (`pdsac`), the sequential baseline (`ransac`), point-to-point
//! ICP, and the composition of the two branch transforms.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, matmul, polar_rotation, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{
    compose, cross_covariance, invert, is_rank_deficient, kabsch, polar_factor,
    rigid_from_rotation_and_centroids, Mat3, Mat4, Point3, PointCloud, RigidTransform,
};
use crate::spatial::{dist, NeighborIndex};

pub const DEFAULT_HYPOTHESES: usize = 512;
pub const DEFAULT_MINIMAL_SET: usize = 4;
pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.02;
const SCORE_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdsacConfig {
    /// Hypotheses per call.
    pub m: usize,
    /// Correspondences per minimal set.
    pub k: usize,
}

impl Default for PdsacConfig {
    fn default() -> Self {
        Self { m: DEFAULT_HYPOTHESES, k: DEFAULT_MINIMAL_SET }
    }
}

impl PdsacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config { key: "pdsac.m".into(), message: "must be positive".into() });
        }
        if self.k < 3 {
            return Err(Error::Config { key: "pdsac.k".into(), message: "must be at least 3".into() });
        }
        Ok(())
    }
}

/// `src[i]` corresponds to `dst[i]`.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    src: Vec<Point3>,
    dst: Vec<Point3>,
}

impl CorrespondenceSet {
    pub fn new(src: Vec<Point3>, dst: Vec<Point3>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::SizeMismatch { left: src.len(), right: dst.len() });
        }
        Ok(Self { src, dst })
    }

    pub fn from_clouds(src: &PointCloud, dst: &PointCloud) -> Result<Self> {
        Self::new(src.points().to_vec(), dst.points().to_vec())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[Point3] {
        &self.src
    }

    pub fn dst(&self) -> &[Point3] {
        &self.dst
    }

    /// `Σᵢ ‖[srcᵢ, 1]·T − dstᵢ‖`.
    pub fn residual(&self, t: &RigidTransform) -> f64 {
        self.src.iter().zip(&self.dst).map(|(p, q)| dist(&t.apply_point(p), q)).sum()
    }

    fn subset(&self, idx: &[usize]) -> (Vec<Point3>, Vec<Point3>) {
        (idx.iter().map(|&i| self.src[i]).collect(), idx.iter().map(|&i| self.dst[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusResult {
    pub transform: RigidTransform,
    pub residual: f64,
    pub hypothesis_index: usize,
    /// Residual of every hypothesis; `+∞` for degenerate minimal sets.
    pub residuals_all: Vec<f64>,
    /// Correspondence indices of the winning minimal set.
    pub minimal_set: Vec<usize>,
}

/// Draws `m` minimal sets of `k` distinct indices from `0..n`. Sets are
/// drawn sequentially from one stream, so the first `m₁` sets for a seed are
/// the same for every `m ≥ m₁`.
pub fn sample_minimal_sets(n: usize, k: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 3 {
        return Err(Error::invalid(format!("minimal set size must be at least 3, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} correspondences cannot fill a minimal set of {k}")));
    }
    if m == 0 {
        return Err(Error::invalid("at least one hypothesis is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m).map(|_| sample(&mut rng, n, k).into_vec()).collect())
}

/// Kabsch on one minimal set, `None` when it is degenerate.
fn solve_set(c: &CorrespondenceSet, set: &[usize]) -> Option<RigidTransform> {
    let (s, d) = c.subset(set);
    let (h, cs, cd) = cross_covariance(&s, &d);
    let pf = polar_factor(&h);
    if is_rank_deficient(&pf.s) {
        return None;
    }
    Some(rigid_from_rotation_and_centroids(pf.rotation, cs, cd))
}

/// Residuals of many hypotheses against all correspondences. Hypotheses are
/// scored in blocks so each correspondence is loaded once per block.
fn score_all(c: &CorrespondenceSet, hyps: &[Option<RigidTransform>]) -> Vec<f64> {
    hyps.par_chunks(SCORE_BLOCK)
        .flat_map_iter(|block| {
            let mats: Vec<Mat4> = block.iter().map(|t| t.map_or([[0.0; 4]; 4], |t| *t.matrix())).collect();
            let mut res = vec![0.0; block.len()];
            for (p, q) in c.src.iter().zip(&c.dst) {
                for (m, r) in mats.iter().zip(res.iter_mut()) {
                    let x = p[0] * m[0][0] + p[1] * m[1][0] + p[2] * m[2][0] + m[3][0] - q[0];
                    let y = p[0] * m[0][1] + p[1] * m[1][1] + p[2] * m[2][1] + m[3][1] - q[1];
                    let z = p[0] * m[0][2] + p[1] * m[1][2] + p[2] * m[2][2] + m[3][2] - q[2];
                    *r += (x * x + y * y + z * z).sqrt();
                }
            }
            block.iter().zip(res).map(|(t, r)| if t.is_some() { r } else { f64::INFINITY }).collect::<Vec<_>>()
        })
        .collect()
}

/// Index of the smallest finite value, lowest index on ties.
fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn pdsac(c: &CorrespondenceSet, m: usize, k: usize, seed: u64) -> Result<ConsensusResult> {
    let sets = sample_minimal_sets(c.len(), k, m, seed)?;
    pdsac_with_sets(c, &sets)
}

/// Consensus over caller-supplied minimal sets.
pub fn pdsac_with_sets(c: &CorrespondenceSet, sets: &[Vec<usize>]) -> Result<ConsensusResult> {
    if sets.is_empty() {
        return Err(Error::invalid("at least one hypothesis is required"));
    }
    if let Some(bad) = sets.iter().flatten().find(|&&i| i >= c.len()) {
        return Err(Error::invalid(format!("minimal-set index {bad} out of range for {} correspondences", c.len())));
    }
    let hyps: Vec<Option<RigidTransform>> = sets.par_iter().map(|s| solve_set(c, s)).collect();
    let residuals_all = score_all(c, &hyps);
    let best = argmin(&residuals_all)
        .ok_or_else(|| Error::EstimationFailure(format!("all {} hypotheses are degenerate", sets.len())))?;
    Ok(ConsensusResult {
        transform: hyps[best].expect("finite residual implies a solution"),
        residual: residuals_all[best],
        hypothesis_index: best,
        residuals_all,
        minimal_set: sets[best].clone(),
    })
}

/// Weighted blend of all hypotheses with weights `softmax(−rⱼ / τ)`:
/// rotation is the polar factor of the weighted rotation sum.
pub fn softmin_blend(c: &CorrespondenceSet, sets: &[Vec<usize>], temperature: f64) -> Result<RigidTransform> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let hyps: Vec<Option<RigidTransform>> = sets.iter().map(|s| solve_set(c, s)).collect();
    let res = score_all(c, &hyps);
    let best = argmin(&res).ok_or_else(|| Error::EstimationFailure("all hypotheses are degenerate".into()))?;
    let weights: Vec<f64> = res.iter().map(|r| if r.is_finite() { (-(r - res[best]) / temperature).exp() } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let mut rot = [[0.0; 3]; 3];
    let mut t = [0.0; 3];
    for (h, w) in hyps.iter().zip(&weights) {
        let Some(h) = h else { continue };
        let w = w / total;
        let r = h.rotation();
        let tr = h.translation();
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] += w * r[i][j];
            }
            t[i] += w * tr[i];
        }
    }
    Ok(RigidTransform::from_parts(polar_factor(&rot).rotation, t))
}

/// Differentiable `[4, 4]` transform of a chosen minimal set: Kabsch on
/// `src[set] → dst[set]` recorded in the autodiff graph.
pub fn kabsch_tensor(src: &Tensor, dst: &Tensor, set: &[usize]) -> Result<Tensor> {
    let s = src.gather_rows(set)?;
    let d = dst.gather_rows(set)?;
    let cs = s.reduce_mean(0)?.reshape(&[1, 3])?;
    let cd = d.reduce_mean(0)?.reshape(&[1, 3])?;
    let h = matmul(&s.sub(&cs)?.transpose(0, 1)?, &d.sub(&cd)?)?;
    let r = polar_rotation(&h)?;
    let t = cd.sub(&matmul(&cs, &r)?)?;
    transform_tensor(&r, &t)
}

/// Assembles `[[R, 0], [t, 1]]` from `[3, 3]` and `[1, 3]` tensors.
pub fn transform_tensor(r: &Tensor, t: &Tensor) -> Result<Tensor> {
    let top = concat(&[r.clone(), Tensor::zeros(&[3, 1])], 1)?;
    let bottom = concat(&[t.clone(), Tensor::scalar(1.0).reshape(&[1, 1])?], 1)?;
    concat(&[top, bottom], 0)
}

fn split_tensor(m: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((m.slice(0, 0, 3)?.slice(1, 0, 3)?, m.slice(0, 3, 1)?.slice(1, 0, 3)?))
}

pub fn invert_tensor(m: &Tensor) -> Result<Tensor> {
    let (r, t) = split_tensor(m)?;
    let rt = r.transpose(0, 1)?;
    transform_tensor(&rt, &matmul(&t, &rt)?.neg())
}

/// Differentiable pdsac: the selection is made on values, then the winner
/// is re-solved inside the graph so gradients reach `src` and `dst`.
pub fn pdsac_tensor(src: &Tensor, dst: &Tensor, m: usize, k: usize, seed: u64) -> Result<(Tensor, ConsensusResult)> {
    let to_points = |t: &Tensor| t.values().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Point3>>();
    let c = CorrespondenceSet::new(to_points(src), to_points(dst))?;
    let result = pdsac(&c, m, k, seed)?;
    Ok((kabsch_tensor(src, dst, &result.minimal_set)?, result))
}

/// `T_est = T_B · T_A⁻¹`: the transform taking `B` onto `A` when `A` and `B`
/// were mapped into one common frame by `T_A` and `T_B`.
pub fn combine_branch_transforms(t_a: &RigidTransform, t_b: &RigidTransform) -> RigidTransform {
    compose(t_b, &invert(t_a))
}

/// Transform taking `A` onto `B` from the two branch transforms when each
/// branch is generated in the other cloud's frame (`T_A: A → B`,
/// `T_B: B → A`): the chordal mean of `T_A` and `T_B⁻¹`.
pub fn fuse_cross_branch_transforms(t_a: &RigidTransform, t_b: &RigidTransform) -> RigidTransform {
    let b_inv = invert(t_b);
    let (ra, rb) = (t_a.rotation(), b_inv.rotation());
    let mut sum: Mat3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sum[i][j] = ra[i][j] + rb[i][j];
        }
    }
    let (ta, tb) = (t_a.translation(), b_inv.translation());
    RigidTransform::from_parts(polar_factor(&sum).rotation, [0, 1, 2].map(|i| 0.5 * (ta[i] + tb[i])))
}

/// Graph version of [`fuse_cross_branch_transforms`].
pub fn fuse_cross_branch_tensor(t_a: &Tensor, t_b: &Tensor) -> Result<Tensor> {
    let (ra, ta) = split_tensor(t_a)?;
    let (rb, tb) = split_tensor(&invert_tensor(t_b)?)?;
    let r = polar_rotation(&ra.add(&rb)?)?;
    transform_tensor(&r, &ta.add(&tb)?.scale(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RansacSelection {
    /// Most inliers; ties go to the lower residual.
    #[default]
    InlierCount,
    /// Lowest residual over all correspondences.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub k: usize,
    pub inlier_threshold: f64,
    pub selection: RansacSelection,
    pub refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_HYPOTHESES,
            k: DEFAULT_MINIMAL_SET,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            selection: RansacSelection::InlierCount,
            refit: true,
        }
    }
}

pub fn ransac(c: &CorrespondenceSet, cfg: &RansacConfig, seed: u64) -> Result<ConsensusResult> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("ransac needs at least one iteration"));
    }
    let sets = sample_minimal_sets(c.len(), cfg.k, cfg.iterations, seed)?;
    ransac_with_sets(c, cfg, &sets)
}

/// Sequential hypothesise-and-verify over caller-supplied minimal sets.
pub fn ransac_with_sets(c: &CorrespondenceSet, cfg: &RansacConfig, sets: &[Vec<usize>]) -> Result<ConsensusResult> {
    if sets.is_empty() {
        return Err(Error::invalid("ransac needs at least one iteration"));
    }
    let mut residuals_all = Vec::with_capacity(sets.len());
    // (index, inliers, residual, transform)
    let mut best: Option<(usize, usize, f64, RigidTransform)> = None;
    for (j, set) in sets.iter().enumerate() {
        let Some(t) = solve_set(c, set) else {
            residuals_all.push(f64::INFINITY);
            continue;
        };
        let mut residual = 0.0;
        let mut inliers = 0;
        for (p, q) in c.src.iter().zip(&c.dst) {
            let e = dist(&t.apply_point(p), q);
            residual += e;
            inliers += usize::from(e < cfg.inlier_threshold);
        }
        residuals_all.push(residual);
        let better = match (&best, cfg.selection) {
            (None, _) => true,
            (Some((_, bi, br, _)), RansacSelection::InlierCount) => inliers > *bi || (inliers == *bi && residual < *br),
            (Some((_, _, br, _)), RansacSelection::Residual) => residual < *br,
        };
        if better {
            best = Some((j, inliers, residual, t));
        }
    }
    let (idx, _, residual, t) =
        best.ok_or_else(|| Error::EstimationFailure(format!("all {} hypotheses are degenerate", sets.len())))?;
    let mut transform = t;
    let mut residual = residual;
    if cfg.refit {
        let inliers: Vec<usize> =
            (0..c.len()).filter(|&i| dist(&t.apply_point(&c.src[i]), &c.dst[i]) < cfg.inlier_threshold).collect();
        if inliers.len() >= 3 {
            let (s, d) = c.subset(&inliers);
            if let Ok(refit) = kabsch(&s, &d) {
                transform = refit;
                residual = c.residual(&refit);
            }
        }
    }
    Ok(ConsensusResult { transform, residual, hypothesis_index: idx, residuals_all, minimal_set: sets[idx].clone() })
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub final_rmse: f64,
    /// RMSE before the first update and after every accepted update.
    pub rmse_history: Vec<f64>,
}

pub const ICP_MAX_ITER: usize = 50;
pub const ICP_TOL: f64 = 1e-6;

/// Point-to-point ICP moving `src` onto `dst`. Stops early, keeping the
/// current estimate, when the nearest-neighbour matching is degenerate.
pub fn icp(src: &PointCloud, dst: &PointCloud, max_iter: usize, tol: f64) -> Result<IcpResult> {
    let index = NeighborIndex::new(dst.points());
    let matches = |t: &RigidTransform| -> (Vec<Point3>, f64) {
        let mut matched = Vec::with_capacity(src.len());
        let mut sq = 0.0;
        for p in src.points() {
            let (j, d2) = index.nearest(&t.apply_point(p));
            matched.push(dst.points()[j]);
            sq += d2;
        }
        (matched, (sq / src.len() as f64).sqrt())
    };
    let mut t = RigidTransform::identity();
    let (mut matched, mut rmse) = matches(&t);
    let mut history = vec![rmse];
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        // a matching that collapses onto a line or point has no unique
        // rotation; stop with the last accepted transform
        let Ok(next) = kabsch(src.points(), &matched) else { break };
        let (next_matched, next_rmse) = matches(&next);
        if next_rmse > rmse {
            break;
        }
        let improvement = rmse - next_rmse;
        t = next;
        matched = next_matched;
        rmse = next_rmse;
        history.push(rmse);
        if improvement < tol {
            break;
        }
    }
    Ok(IcpResult { transform: t, iterations, final_rmse: rmse, rmse_history: history })
}
