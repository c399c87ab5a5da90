//! Procedural shapes and the paired-sample protocol: two independent
//! surface samplings, unit-box normalisation, optional noise and cropping of
//! the target, then a random rigid motion of the target.

mod io;

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply, random_transform, EulerPose, Point3, PointCloud, RigidTransform};

pub use io::{
    read_cloud, read_manifest, read_ply, read_xyz, write_cloud, write_manifest, write_ply, write_xyz, CloudFormat,
    PairRecord,
};

/// Jitter applied to duplicated points when re-padding a cropped cloud.
pub const PAD_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { size: [f64; 3] },
    /// Closed cylinder along Z.
    Cylinder { radius: f64, height: f64 },
    /// Torus in the XY plane.
    Torus { major: f64, minor: f64 },
    Composite { children: Vec<Placed> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placed {
    pub shape: Shape,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Composite,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Composite => "composite",
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
            Shape::Torus { .. } => ShapeKind::Torus,
            Shape::Composite { .. } => ShapeKind::Composite,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Shape::Sphere { radius } => positive("radius", *radius),
            Shape::Box { size } => size.iter().try_for_each(|&s| positive("box size", s)),
            Shape::Cylinder { radius, height } => positive("radius", *radius).and(positive("height", *height)),
            Shape::Torus { major, minor } => {
                positive("major radius", *major)?;
                positive("minor radius", *minor)?;
                if minor >= major {
                    return Err(Error::invalid("torus minor radius must be below the major radius"));
                }
                Ok(())
            }
            Shape::Composite { children } => {
                if !(2..=4).contains(&children.len()) {
                    return Err(Error::invalid(format!("composite needs 2 to 4 children, got {}", children.len())));
                }
                for c in children {
                    if c.offset.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid("child offset must be finite"));
                    }
                    c.shape.validate()?;
                }
                Ok(())
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { size: [x, y, z] } => 2.0 * (x * y + y * z + x * z),
            Shape::Cylinder { radius, height } => 2.0 * PI * radius * height + 2.0 * PI * radius * radius,
            Shape::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Shape::Composite { children } => children.iter().map(|c| c.shape.surface_area()).sum(),
        }
    }

    /// True when the shape has a continuous rotational symmetry, so its pose
    /// cannot be recovered from the surface alone.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, Shape::Sphere { .. } | Shape::Cylinder { .. } | Shape::Torus { .. })
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match self {
            Shape::Sphere { radius } => {
                let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(f64::MIN_POSITIVE);
                v.map(|c| radius * c / n)
            }
            Shape::Box { size: [x, y, z] } => {
                let faces = [y * z, y * z, x * z, x * z, x * y, x * y];
                let total: f64 = faces.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut f = 0;
                while f < 5 && u >= faces[f] {
                    u -= faces[f];
                    f += 1;
                }
                let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
                let hi = (f % 2) as f64;
                match f / 2 {
                    0 => [hi * x, a * y, b * z],
                    1 => [a * x, hi * y, b * z],
                    _ => [a * x, b * y, hi * z],
                }
            }
            Shape::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let u = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                if u < side {
                    [radius * theta.cos(), radius * theta.sin(), rng.gen::<f64>() * height]
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if u < side + cap { 0.0 } else { *height };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Shape::Torus { major, minor } => loop {
                // area element ∝ (R + r cos θ); accept θ proportionally
                let theta = rng.gen::<f64>() * 2.0 * PI;
                let phi = rng.gen::<f64>() * 2.0 * PI;
                if rng.gen::<f64>() * (major + minor) <= major + minor * theta.cos() {
                    let w = major + minor * theta.cos();
                    break [w * phi.cos(), w * phi.sin(), minor * theta.sin()];
                }
            },
            Shape::Composite { children } => {
                let total = self.surface_area();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = children.len() - 1;
                for (i, c) in children.iter().enumerate() {
                    let a = c.shape.surface_area();
                    if u < a {
                        pick = i;
                        break;
                    }
                    u -= a;
                }
                let c = &children[pick];
                let p = c.shape.sample_point(rng);
                [p[0] + c.offset[0], p[1] + c.offset[1], p[2] + c.offset[2]]
            }
        }
    }

    /// Shape of `kind` with parameters drawn from `rng`.
    pub fn random(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Shape {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        match kind {
            ShapeKind::Sphere => Shape::Sphere { radius: u(0.5, 1.0) },
            ShapeKind::Box => Shape::Box { size: [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)] },
            ShapeKind::Cylinder => Shape::Cylinder { radius: u(0.2, 0.5), height: u(0.5, 1.0) },
            ShapeKind::Torus => {
                let major = u(0.4, 0.8);
                Shape::Torus { major, minor: major * u(0.2, 0.5) }
            }
            ShapeKind::Composite => {
                let count = rng.gen_range(2..=4);
                let primitives = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Torus];
                let children = (0..count)
                    .map(|_| {
                        let kind = primitives[rng.gen_range(0..primitives.len())];
                        let shape = Shape::random(kind, rng);
                        let offset = [0; 3].map(|_| rng.gen_range(-0.8..0.8));
                        Placed { shape, offset }
                    })
                    .collect();
                Shape::Composite { children }
            }
        }
    }
}

/// `n` points uniform by area on the surface.
pub fn sample_shape(shape: &Shape, n: usize, seed: u64) -> Result<PointCloud> {
    shape.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot sample zero points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| shape.sample_point(&mut rng)).collect())
}

/// Uniform scale and shift placing the bounding box in `[0, 1]³` with the
/// longest side spanning `[0, 1]`.
pub fn normalize_unit_box(pc: &PointCloud) -> Result<PointCloud> {
    let (lo, hi) = pc.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::Degenerate("cannot normalise a cloud with zero extent".into()));
    }
    let s = 1.0 / extent;
    let pts = pc.points().iter().map(|p| [0, 1, 2].map(|a| ((p[a] - lo[a]) * s).clamp(0.0, 1.0))).collect();
    Ok(keep_id(PointCloud::new(pts)?, pc))
}

fn keep_id(out: PointCloud, from: &PointCloud) -> PointCloud {
    match &from.id {
        Some(id) => out.with_id(id.clone()),
        None => out,
    }
}

pub fn add_gaussian_noise(pc: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(pc.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = pc.points().iter().map(|p| p.map(|c| c + normal.sample(&mut rng))).collect();
    Ok(keep_id(PointCloud::new(pts)?, pc))
}

/// Drops the `⌊fraction·N⌋` points with the largest X (ties broken by lower
/// index first); survivors keep their order.
pub fn partial_crop(pc: &PointCloud, fraction: f64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("crop fraction must lie in [0, 1), got {fraction}")));
    }
    let n = pc.len();
    let drop = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pc.points()[j][0].total_cmp(&pc.points()[i][0]).then(i.cmp(&j)));
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    let pts = pc.points().iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    Ok(keep_id(PointCloud::new(pts)?, pc))
}

/// Restores `n` points by appending jittered copies of random survivors.
pub fn repad(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if pc.len() >= n {
        return Ok(pc.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PAD_JITTER).expect("valid sigma");
    let mut pts = pc.points().to_vec();
    while pts.len() < n {
        let src = pc.points()[rng.gen_range(0..pc.len())];
        pts.push(src.map(|c| c + normal.sample(&mut rng)));
    }
    Ok(keep_id(PointCloud::new(pts)?, pc))
}

/// Independent seed for a labelled sub-task.
pub fn sub_seed(seed: u64, label: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub shape: Shape,
    pub shape_id: String,
    pub symmetric: bool,
    pub noise_sigma: f64,
    pub partial_fraction: f64,
    pub seed: u64,
    pub sample_seeds: [u64; 2],
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub a: PointCloud,
    pub b: PointCloud,
    pub t_gt: RigidTransform,
    pub pose: EulerPose,
    pub meta: PairMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairProtocol {
    pub n_points: usize,
    pub rot_range_deg: [f64; 2],
    pub trans_range: [f64; 2],
    pub noise_sigma: f64,
    pub partial_fraction: f64,
}

impl Default for PairProtocol {
    fn default() -> Self {
        Self { n_points: 1024, rot_range_deg: [0.0, 45.0], trans_range: [0.0, 0.8], noise_sigma: 0.0, partial_fraction: 0.0 }
    }
}

/// Source `A` and target `B = apply(B₀, T_gt)` where `A` and `B₀` are two
/// independent samplings of `shape`; noise and cropping touch the target only.
pub fn build_pair(shape: &Shape, proto: &PairProtocol, seed: u64) -> Result<PairSample> {
    if proto.n_points == 0 {
        return Err(Error::invalid("pairs need at least one point"));
    }
    if !(0.0..1.0).contains(&proto.partial_fraction) {
        return Err(Error::invalid(format!("crop fraction must lie in [0, 1), got {}", proto.partial_fraction)));
    }
    let seeds = [sub_seed(seed, 1), sub_seed(seed, 2)];
    let a = normalize_unit_box(&sample_shape(shape, proto.n_points, seeds[0])?)?;
    let mut b0 = normalize_unit_box(&sample_shape(shape, proto.n_points, seeds[1])?)?;
    b0 = add_gaussian_noise(&b0, proto.noise_sigma, sub_seed(seed, 3))?;
    if proto.partial_fraction > 0.0 {
        b0 = repad(&partial_crop(&b0, proto.partial_fraction)?, proto.n_points, sub_seed(seed, 4))?;
    }
    let (t_gt, pose) = random_transform(sub_seed(seed, 5), proto.rot_range_deg, proto.trans_range)?;
    let b = apply(&b0, &t_gt);
    let meta = PairMeta {
        shape: shape.clone(),
        shape_id: shape.kind().name().to_string(),
        symmetric: shape.is_symmetric(),
        noise_sigma: proto.noise_sigma,
        partial_fraction: proto.partial_fraction,
        seed,
        sample_seeds: seeds,
    };
    Ok(PairSample { a, b, t_gt, pose, meta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pairs: usize,
    pub shapes: Vec<ShapeKind>,
    /// When set, every pair of a given kind uses the same shape parameters.
    pub shape_seed: Option<u64>,
    pub n_points: usize,
    pub rot_range_deg: [f64; 2],
    pub trans_range: [f64; 2],
    pub noise_sigma: f64,
    pub partial_fraction: f64,
    pub format: CloudFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 64,
            shapes: vec![ShapeKind::Composite, ShapeKind::Box],
            shape_seed: None,
            n_points: 1024,
            rot_range_deg: [0.0, 45.0],
            trans_range: [0.0, 0.8],
            noise_sigma: 0.0,
            partial_fraction: 0.0,
            format: CloudFormat::Ply,
        }
    }
}

impl DataConfig {
    pub fn protocol(&self) -> PairProtocol {
        PairProtocol {
            n_points: self.n_points,
            rot_range_deg: self.rot_range_deg,
            trans_range: self.trans_range,
            noise_sigma: self.noise_sigma,
            partial_fraction: self.partial_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: format!("data.{key}"), message });
        if self.shapes.is_empty() {
            return bad("shapes", "at least one shape kind is required".into());
        }
        if self.n_points == 0 {
            return bad("n_points", "must be positive".into());
        }
        for (key, r) in [("rot_range_deg", self.rot_range_deg), ("trans_range", self.trans_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(key, format!("invalid range {r:?}"));
            }
        }
        if !(0.0..1.0).contains(&self.partial_fraction) {
            return bad("partial_fraction", "must lie in [0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative".into());
        }
        Ok(())
    }

    /// Shape used for pair `i` of a dataset drawn with `seed`.
    pub fn shape_for(&self, i: usize, seed: u64) -> Shape {
        let kind = self.shapes[i % self.shapes.len()];
        let shape_seed = match self.shape_seed {
            Some(s) => sub_seed(s, kind as u64),
            None => sub_seed(sub_seed(seed, i as u64), 0),
        };
        Shape::random(kind, &mut ChaCha8Rng::seed_from_u64(shape_seed))
    }

    pub fn build(&self, i: usize, seed: u64) -> Result<PairSample> {
        let shape = self.shape_for(i, seed);
        build_pair(&shape, &self.protocol(), sub_seed(sub_seed(seed, i as u64), 1))
    }
}

/// Builds every pair (in parallel), writes the clouds and the manifest, and
/// returns the manifest records in pair order.
pub fn generate_dataset(cfg: &DataConfig, out_dir: &Path, seed: u64) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let records: Vec<PairRecord> = (0..cfg.pairs)
        .into_par_iter()
        .map(|i| {
            let pair = cfg.build(i, seed)?;
            let id = format!("pair_{i:05}");
            let ext = cfg.format.extension();
            let (a_path, b_path) = (format!("{id}_a.{ext}"), format!("{id}_b.{ext}"));
            write_cloud(&out_dir.join(&a_path), &pair.a)?;
            write_cloud(&out_dir.join(&b_path), &pair.b)?;
            Ok(PairRecord { pair_id: id, a_path, b_path, t_gt: pair.t_gt.to_row_major().to_vec(), pose: pair.pose, meta: pair.meta })
        })
        .collect::<Result<_>>()?;
    write_manifest(&out_dir.join(io::MANIFEST_NAME), &records)?;
    Ok(records)
}

/// Loads the clouds of a dataset written by [`generate_dataset`].
pub fn load_pair(dir: &Path, rec: &PairRecord) -> Result<(PointCloud, PointCloud, RigidTransform)> {
    let a = read_cloud(&dir.join(&rec.a_path))?.with_id(format!("{}_a", rec.pair_id));
    let b = read_cloud(&dir.join(&rec.b_path))?.with_id(format!("{}_b", rec.pair_id));
    Ok((a, b, RigidTransform::from_row_major(&rec.t_gt)?))
}

pub fn manifest_path(dir: &Path) -> std::path::PathBuf {
    dir.join(io::MANIFEST_NAME)
}
