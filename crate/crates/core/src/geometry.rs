//! Point clouds, rigid transforms and the SVD rigid fit.
//!
//! Transforms act on homogeneous *row* vectors: a point `p` maps to
//! `[p, 1] · M`, so the rotation block is the upper-left 3×3 of `M`, the
//! translation is the fourth row, and the fourth column is `(0, 0, 0, 1)ᵀ`.
//! Composition therefore reads left to right: `apply(p, compose(a, b))`
//! applies `a` first.
//!
//! Euler angles are intrinsic X, then Y, then Z (in degrees in the public
//! API). With column-vector rotation matrices `Rx`, `Ry`, `Rz` the
//! equivalent column rotation is `Rx · Ry · Rz`; its transpose is the row
//! block stored here.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

/// Tolerance on `RᵀR = I` and `det R = 1` for a valid rigid transform.
pub const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::shape(format!("flat buffer of length {} is not N×3", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerPose {
    pub angles_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl EulerPose {
    pub fn new(angles_deg: [f64; 3], translation: [f64; 3]) -> Self {
        Self { angles_deg, translation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    matrix: Mat4,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { matrix: m }
    }

    /// Assembles a transform from a row-convention rotation block and a
    /// translation row. The rotation is not re-orthonormalised.
    pub fn from_parts(rotation: Mat3, translation: Point3) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&rotation[i]);
        }
        m[3][..3].copy_from_slice(&translation);
        m[3][3] = 1.0;
        Self { matrix: m }
    }

    /// Validating constructor for externally supplied matrices.
    pub fn from_matrix(matrix: Mat4) -> Result<Self> {
        let t = Self { matrix };
        t.validate()?;
        Ok(t)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::shape(format!("expected 16 values, got {}", values.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i].copy_from_slice(&values[4 * i..4 * i + 4]);
        }
        Self::from_matrix(m)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.matrix[i]);
        }
        out
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.matrix
    }

    pub fn rotation(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.matrix[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> Point3 {
        [self.matrix[3][0], self.matrix[3][1], self.matrix[3][2]]
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        if m[0][3] != 0.0 || m[1][3] != 0.0 || m[2][3] != 0.0 || m[3][3] != 1.0 {
            return Err(Error::invalid("fourth column must be (0,0,0,1)"));
        }
        let (ortho, det) = orthonormality(&self.rotation());
        if ortho >= RIGID_TOL || (det - 1.0).abs() >= RIGID_TOL {
            return Err(Error::invalid(format!(
                "rotation block is not proper orthonormal (|RᵀR-I|∞={ortho:e}, det={det})"
            )));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = p[0] * m[0][j] + p[1] * m[1][j] + p[2] * m[2][j] + m[3][j];
        }
        out
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        compose(self, next)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }
}

/// `‖RᵀR − I‖∞` and `det R`.
pub fn orthonormality(r: &Mat3) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    (worst, det3(r))
}

pub fn det3(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|v| v / n)
}

/// Column-convention rotation `Rx(x)·Ry(y)·Rz(z)` for angles in radians.
pub(crate) fn column_rotation(x: f64, y: f64, z: f64) -> Mat3 {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    [
        [cy * cz, -cy * sz, sy],
        [cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -sx * cy],
        [sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy],
    ]
}

/// Row-convention rotation block for Euler angles in radians.
pub(crate) fn row_rotation(angles_rad: [f64; 3]) -> Mat3 {
    mat3_transpose(&column_rotation(angles_rad[0], angles_rad[1], angles_rad[2]))
}

pub fn euler_to_transform(pose: &EulerPose) -> Result<RigidTransform> {
    if pose.angles_deg.iter().chain(pose.translation.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("euler pose has non-finite components"));
    }
    let rot = row_rotation(pose.angles_deg.map(f64::to_radians));
    Ok(RigidTransform::from_parts(rot, pose.translation))
}

/// Inverse of [`euler_to_transform`]; exact for angles with |y| < 90°.
pub fn transform_to_euler(t: &RigidTransform) -> EulerPose {
    let c = mat3_transpose(&t.rotation());
    let y = c[0][2].clamp(-1.0, 1.0).asin();
    let x = (-c[1][2]).atan2(c[2][2]);
    let z = (-c[0][1]).atan2(c[0][0]);
    EulerPose {
        angles_deg: [x.to_degrees(), y.to_degrees(), z.to_degrees()],
        translation: t.translation(),
    }
}

pub fn apply(pc: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: pc.points.iter().map(|p| t.apply_point(p)).collect(),
        id: pc.id.clone(),
    }
}

pub fn compose(first: &RigidTransform, second: &RigidTransform) -> RigidTransform {
    let a = &first.matrix;
    let b = &second.matrix;
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    // keep the fourth column exact
    for row in m.iter_mut().take(3) {
        row[3] = 0.0;
    }
    m[3][3] = 1.0;
    RigidTransform { matrix: m }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = mat3_transpose(&t.rotation());
    let tr = t.translation();
    let mut ti = [0.0; 3];
    for (j, v) in ti.iter_mut().enumerate() {
        *v = -(0..3).map(|k| tr[k] * rt[k][j]).sum::<f64>();
    }
    RigidTransform::from_parts(rt, ti)
}

fn uniform_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        range[0] + (range[1] - range[0]) * rng.gen::<f64>()
    }
}

fn check_range(name: &str, range: [f64; 2]) -> Result<()> {
    if !range[0].is_finite() || !range[1].is_finite() || range[0] > range[1] {
        return Err(Error::invalid(format!("{name} range [{}, {}] is invalid", range[0], range[1])));
    }
    Ok(())
}

/// Draws Euler angles and translation components independently and
/// uniformly from the given ranges.
pub fn random_transform(seed: u64, rot_range_deg: [f64; 2], trans_range: [f64; 2]) -> Result<(RigidTransform, EulerPose)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_transform_with(&mut rng, rot_range_deg, trans_range)
}

pub fn random_transform_with(
    rng: &mut ChaCha8Rng,
    rot_range_deg: [f64; 2],
    trans_range: [f64; 2],
) -> Result<(RigidTransform, EulerPose)> {
    check_range("rotation", rot_range_deg)?;
    check_range("translation", trans_range)?;
    let mut angles = [0.0; 3];
    for a in angles.iter_mut() {
        *a = uniform_in(rng, rot_range_deg);
    }
    let mut translation = [0.0; 3];
    for t in translation.iter_mut() {
        *t = uniform_in(rng, trans_range);
    }
    let pose = EulerPose::new(angles, translation);
    Ok((euler_to_transform(&pose)?, pose))
}

/// SVD of a 3×3 matrix with singular values sorted in descending order,
/// plus the reflection sign used by the orthogonal polar factor.
#[derive(Debug, Clone, Copy)]
pub struct PolarFactor {
    pub u: Mat3,
    pub s: [f64; 3],
    pub v: Mat3,
    /// `det(U Vᵀ)`, applied to the smallest singular direction.
    pub d: f64,
    /// `U diag(1, 1, d) Vᵀ`.
    pub rotation: Mat3,
}

impl PolarFactor {
    /// Smallest denominator appearing in the derivative of the polar
    /// factor. Gradients are unreliable when this approaches zero.
    pub fn derivative_gap(&self) -> f64 {
        let s = self.s;
        let dd = [1.0, 1.0, self.d];
        let mut gap = f64::INFINITY;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let den = if dd[i] == dd[j] { s[i] + s[j] } else { (s[i] - s[j]).abs() };
                gap = gap.min(den);
            }
        }
        gap
    }
}

pub fn polar_factor(h: &Mat3) -> PolarFactor {
    let m = Matrix3::from_fn(|i, j| h[i][j]);
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut uu = [[0.0; 3]; 3];
    let mut vv = [[0.0; 3]; 3];
    let mut s = [0.0; 3];
    for (c, &o) in order.iter().enumerate() {
        s[c] = sv[o];
        for r in 0..3 {
            uu[r][c] = u[(r, o)];
            vv[r][c] = vt[(o, r)];
        }
    }
    let d = if det3(&mat3_mul(&uu, &mat3_transpose(&vv))) < 0.0 { -1.0 } else { 1.0 };
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = uu[i][0] * vv[j][0] + uu[i][1] * vv[j][1] + d * uu[i][2] * vv[j][2];
        }
    }
    PolarFactor { u: uu, s, v: vv, d, rotation }
}

/// Cross-covariance `Σ (src_i − c_s)ᵀ (dst_i − c_d)` and both centroids.
pub fn cross_covariance(src: &[Point3], dst: &[Point3]) -> (Mat3, Point3, Point3) {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = [[0.0; 3]; 3];
    for (p, q) in src.iter().zip(dst) {
        let x = [p[0] - cs[0], p[1] - cs[1], p[2] - cs[2]];
        let y = [q[0] - cd[0], q[1] - cd[1], q[2] - cd[2]];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += x[i] * y[j];
            }
        }
    }
    (h, cs, cd)
}

/// True when the cross-covariance has rank below two.
pub(crate) fn is_rank_deficient(s: &[f64; 3]) -> bool {
    !(s[0] > 1e-300) || s[1] <= 1e-10 * s[0]
}

/// Least-squares rigid fit `argmin_T Σ ‖[src_i, 1]·T − dst_i‖²`.
pub fn kabsch(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::SizeMismatch { left: src.len(), right: dst.len() });
    }
    if src.len() < 3 {
        return Err(Error::invalid(format!("kabsch needs at least 3 correspondences, got {}", src.len())));
    }
    let (h, cs, cd) = cross_covariance(src, dst);
    let pf = polar_factor(&h);
    if is_rank_deficient(&pf.s) {
        return Err(Error::Degenerate(format!("cross-covariance singular values {:?}", pf.s)));
    }
    Ok(rigid_from_rotation_and_centroids(pf.rotation, cs, cd))
}

pub(crate) fn rigid_from_rotation_and_centroids(r: Mat3, cs: Point3, cd: Point3) -> RigidTransform {
    let mut t = [0.0; 3];
    for (j, v) in t.iter_mut().enumerate() {
        *v = cd[j] - (0..3).map(|k| cs[k] * r[k][j]).sum::<f64>();
    }
    RigidTransform::from_parts(r, t)
}

/// Mean absolute difference of the three Euler angles, in degrees.
pub fn rotation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = transform_to_euler(est).angles_deg;
    let b = transform_to_euler(gt).angles_deg;
    (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 3.0
}

pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = est.translation();
    let b = gt.translation();
    (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 3.0
}

/// Angle of the relative rotation, in degrees. Diagnostic only.
pub fn geodesic_angle_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let rel = mat3_mul(&est.rotation(), &mat3_transpose(&gt.rotation()));
    let tr = rel[0][0] + rel[1][1] + rel[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}
