//! Single-pass registration: one generator forward, one consensus call per
//! branch, then the two branch estimates are fused.

use crate::datagen::sub_seed;
use crate::error::Result;
use crate::estimation::{fuse_cross_branch_transforms, pdsac, ransac, ConsensusResult, CorrespondenceSet, PdsacConfig, RansacConfig};
use crate::geometry::{PointCloud, RigidTransform};
use crate::networks::{generator_forward, Generated, NetworkConfig, ParamStore};

#[derive(Debug, Clone)]
pub struct Registration {
    /// `A` regenerated in `B`'s frame, row-aligned with `A`.
    pub a_g: PointCloud,
    /// `B` regenerated in `A`'s frame, row-aligned with `B`.
    pub b_g: PointCloud,
    /// Consensus on `A ↔ A_g` (maps `A` towards `B`).
    pub branch_a: ConsensusResult,
    /// Consensus on `B ↔ B_g` (maps `B` towards `A`).
    pub branch_b: ConsensusResult,
    /// Estimated transform taking `A` onto `B`.
    pub t_est: RigidTransform,
}

#[derive(Debug, Clone, Copy)]
pub enum Consensus<'a> {
    Pdsac(&'a PdsacConfig),
    Ransac(&'a RansacConfig),
}

pub fn branch_seeds(seed: u64) -> (u64, u64) {
    (sub_seed(seed, 1), sub_seed(seed, 2))
}

/// Estimates the transform from already generated clouds.
pub fn estimate_from_generated(
    a: &PointCloud,
    b: &PointCloud,
    a_g: &PointCloud,
    b_g: &PointCloud,
    consensus: Consensus<'_>,
    seed: u64,
) -> Result<(ConsensusResult, ConsensusResult, RigidTransform)> {
    let ca = CorrespondenceSet::from_clouds(a, a_g)?;
    let cb = CorrespondenceSet::from_clouds(b, b_g)?;
    let (sa, sb) = branch_seeds(seed);
    let (ra, rb) = match consensus {
        Consensus::Pdsac(p) => (pdsac(&ca, p.m, p.k, sa)?, pdsac(&cb, p.m, p.k, sb)?),
        Consensus::Ransac(r) => (ransac(&ca, r, sa)?, ransac(&cb, r, sb)?),
    };
    let t = fuse_cross_branch_transforms(&ra.transform, &rb.transform);
    Ok((ra, rb, t))
}

pub fn register_pair(
    a: &PointCloud,
    b: &PointCloud,
    generator: &ParamStore,
    network: &NetworkConfig,
    pdsac_cfg: &PdsacConfig,
    seed: u64,
) -> Result<Registration> {
    let Generated { a_g, b_g, .. } = generator_forward(a, b, generator, network)?;
    let (branch_a, branch_b, t_est) = estimate_from_generated(a, b, &a_g, &b_g, Consensus::Pdsac(pdsac_cfg), seed)?;
    Ok(Registration { a_g, b_g, branch_a, branch_b, t_est })
}
