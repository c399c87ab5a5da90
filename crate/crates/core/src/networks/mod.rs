//! Generator and discriminator networks.
//!
//! The generator maps a pair `(A, B)` to `(A_g, B_g)`: a T-Net normalises
//! each cloud's pose, a graph layer and two mixer layers extract per-point
//! features, the pooled global features of the two clouds are exchanged,
//! and a point-wise decoder emits one output point per input point.

mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, concat, matmul, rigid_from_params, Tensor, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geometry::{polar_factor, PointCloud, RigidTransform};
use crate::spatial::knn_graph;

pub use params::{
    config_hash, load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, Params, Precision,
};
use params::{init_dense, init_zero_dense};

/// Channels of the edge convolution (and of its input edge features).
pub const GCNN_CHANNELS: usize = 6;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Points per cloud; also the token-mixing width.
    pub n_points: usize,
    /// Neighbours per point in the graph layer.
    pub k: usize,
    pub leaky_slope: f64,
    pub tnet_point: Vec<usize>,
    pub tnet_head: Vec<usize>,
    pub embed_dim: usize,
    pub mixer_layers: usize,
    pub residual: bool,
    pub layer_norm: bool,
    /// Hidden widths of the decoder; the output layer has 3 channels.
    pub decoder: Vec<usize>,
    /// Hidden widths of each discriminator; the output layer has 1 channel.
    pub discriminator: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            k: 20,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            tnet_point: vec![64, 128, 1024],
            tnet_head: vec![512, 256],
            embed_dim: 128,
            mixer_layers: 2,
            residual: true,
            layer_norm: false,
            decoder: vec![256, 128, 64],
            discriminator: vec![128, 64],
        }
    }
}

impl NetworkConfig {
    pub fn with_points(n_points: usize) -> Self {
        Self { n_points, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: format!("network.{key}"), message: message.into() });
        if self.n_points == 0 {
            return bad("n_points", "must be positive");
        }
        if self.k == 0 || self.k >= self.n_points {
            return bad("k", "must satisfy 0 < k < n_points");
        }
        if self.tnet_point.is_empty() || self.tnet_point.contains(&0) {
            return bad("tnet_point", "needs at least one positive width");
        }
        if self.tnet_head.contains(&0) || self.decoder.contains(&0) || self.discriminator.contains(&0) {
            return bad("widths", "layer widths must be positive");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive");
        }
        if !(self.leaky_slope.is_finite()) {
            return bad("leaky_slope", "must be finite");
        }
        Ok(())
    }

    /// Canonical JSON used for checkpoint compatibility hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical_json())
    }
}

fn dense_chain(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, widths: &[usize]) -> Result<()> {
    for (i, w) in widths.windows(2).enumerate() {
        init_dense(store, rng, &format!("{prefix}.{i}"), w[0], w[1])?;
    }
    Ok(())
}

/// Fresh generator parameters. The last T-Net layer starts at zero so the
/// initial pose normalisation is the identity.
pub fn init_generator(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let point: Vec<usize> = std::iter::once(3).chain(cfg.tnet_point.iter().copied()).collect();
    dense_chain(&mut s, &mut rng, "tnet.point", &point)?;
    let pooled = 2 * cfg.tnet_point[cfg.tnet_point.len() - 1];
    let head: Vec<usize> = std::iter::once(pooled).chain(cfg.tnet_head.iter().copied()).collect();
    dense_chain(&mut s, &mut rng, "tnet.head", &head)?;
    init_zero_dense(&mut s, &format!("tnet.head.{}", head.len() - 1), head[head.len() - 1], 6)?;
    init_dense(&mut s, &mut rng, "gcnn", GCNN_CHANNELS, GCNN_CHANNELS)?;
    init_dense(&mut s, &mut rng, "embed", GCNN_CHANNELS, cfg.embed_dim)?;
    for l in 0..cfg.mixer_layers {
        dense_chain(&mut s, &mut rng, &format!("mixer{l}.token"), &[cfg.n_points; 3])?;
        dense_chain(&mut s, &mut rng, &format!("mixer{l}.channel"), &[cfg.embed_dim; 3])?;
    }
    let dec: Vec<usize> =
        std::iter::once(2 * cfg.embed_dim).chain(cfg.decoder.iter().copied()).chain(std::iter::once(3)).collect();
    dense_chain(&mut s, &mut rng, "decoder", &dec)?;
    Ok(s)
}

/// Fresh parameters for the two discriminators `disc_a` and `disc_b`.
pub fn init_discriminators(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let widths: Vec<usize> =
        std::iter::once(3).chain(cfg.discriminator.iter().copied()).chain(std::iter::once(1)).collect();
    for name in ["disc_a", "disc_b"] {
        dense_chain(&mut s, &mut rng, name, &widths)?;
    }
    Ok(s)
}

pub fn cloud_tensor(pc: &PointCloud) -> Tensor {
    Tensor::new(pc.to_flat(), &[pc.len(), 3]).expect("non-empty cloud")
}

pub fn tensor_cloud(t: &Tensor) -> Result<PointCloud> {
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(Error::shape(format!("expected [N, 3] points, got {:?}", t.shape())));
    }
    PointCloud::from_flat(t.values())
}

/// Rigid transform from a `[4, 4]` tensor; the rotation block is projected
/// onto the nearest rotation to absorb reduced-precision rounding.
pub fn tensor_transform(t: &Tensor) -> Result<RigidTransform> {
    let v = t.values();
    if v.len() != 16 {
        return Err(Error::shape(format!("expected a [4, 4] transform, got {:?}", t.shape())));
    }
    let block = [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]];
    let rotation = polar_factor(&block).rotation;
    Ok(RigidTransform::from_parts(rotation, [v[12], v[13], v[14]]))
}

fn layer(p: &Params, name: &str, x: &Tensor) -> Result<Tensor> {
    affine(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)
}

/// `[P, 1]·M` for a `[N, 3]` tensor and a `[4, 4]` transform tensor.
pub fn apply_tensor(points: &Tensor, m: &Tensor) -> Result<Tensor> {
    let rot = m.slice(0, 0, 3)?.slice(1, 0, 3)?;
    let t = m.slice(0, 3, 1)?.slice(1, 0, 3)?;
    matmul(points, &rot)?.add(&t)
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    let mean = x.reduce_mean(1)?.reshape(&[rows, 1])?;
    let centered = x.sub(&mean)?;
    let var = centered.square().reduce_mean(1)?.reshape(&[rows, 1])?;
    centered.div(&var.add_scalar(LAYER_NORM_EPS).sqrt())
}

/// Forward passes over one parameter view.
pub struct Generator<'a> {
    pub cfg: &'a NetworkConfig,
    pub params: &'a Params,
}

/// Max-pooled per-point T-Net features of one cloud.
pub struct TnetGlobal(Tensor);

pub struct FeatureBundle {
    /// `[N, C]` per-point features.
    pub feat: Tensor,
    /// `[C]` maximum over points.
    pub global: Tensor,
}

pub struct GeneratorOutput {
    pub a_g: Tensor,
    /// Absent when only the first branch was decoded.
    pub b_g: Option<Tensor>,
    pub a_t: Tensor,
    pub b_t: Tensor,
    pub t_norm_a: Tensor,
    pub t_norm_b: Tensor,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a NetworkConfig, params: &'a Params) -> Self {
        Self { cfg, params }
    }

    fn check_points(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.cfg.n_points, 3] {
            return Err(Error::Config {
                key: "network.n_points".into(),
                message: format!("network expects [{}, 3] points, got {:?}", self.cfg.n_points, x.shape()),
            });
        }
        Ok(())
    }

    pub fn tnet_global(&self, x: &Tensor) -> Result<TnetGlobal> {
        let mut h = x.clone();
        let n = self.cfg.tnet_point.len();
        for i in 0..n {
            h = layer(self.params, &format!("tnet.point.{i}"), &h)?;
            if i + 1 < n {
                h = h.leaky_relu(self.cfg.leaky_slope);
            }
        }
        Ok(TnetGlobal(h.reduce_max(0)?))
    }

    /// Six pose parameters (radians, then translation) for the first cloud.
    pub fn tnet_params(&self, first: &TnetGlobal, second: &TnetGlobal) -> Result<Tensor> {
        let mut h = concat(&[first.0.clone(), second.0.clone()], 0)?;
        let n = self.cfg.tnet_head.len() + 1;
        for i in 0..n {
            h = layer(self.params, &format!("tnet.head.{i}"), &h)?;
            if i + 1 < n {
                h = h.leaky_relu(self.cfg.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Pose-normalised first cloud and the `[4, 4]` transform applied to it.
    pub fn tnet(&self, p: &Tensor, q: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_points(p)?;
        self.check_points(q)?;
        let (gp, gq) = (self.tnet_global(p)?, self.tnet_global(q)?);
        self.tnet_with(p, &gp, &gq)
    }

    fn tnet_with(&self, p: &Tensor, gp: &TnetGlobal, gq: &TnetGlobal) -> Result<(Tensor, Tensor)> {
        let m = rigid_from_params(&self.tnet_params(gp, gq)?)?;
        Ok((apply_tensor(p, &m)?, m))
    }

    /// Edge convolution over the exact k-nearest-neighbour graph: `[N, 6]`.
    pub fn gcnn(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let k = self.cfg.k;
        if n <= k {
            return Err(Error::invalid(format!("graph layer needs more than k={k} points, got {n}")));
        }
        let pts: Vec<[f64; 3]> = x.values().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let graph = knn_graph(&pts, k);
        let nbr: Vec<usize> = graph.iter().flatten().copied().collect();
        let own: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let xi = x.gather_rows(&own)?;
        let xj = x.gather_rows(&nbr)?;
        let edges = concat(&[xi.clone(), xj.sub(&xi)?], 1)?;
        let h = layer(self.params, "gcnn", &edges)?.leaky_relu(self.cfg.leaky_slope);
        h.reshape(&[n, k, GCNN_CHANNELS])?.reduce_max(1)
    }

    pub fn mixer_layer(&self, l: usize, feat: &Tensor) -> Result<Tensor> {
        let (n, c) = (self.cfg.n_points, self.cfg.embed_dim);
        if feat.shape() != [n, c] {
            return Err(Error::shape(format!("mixer layer expects [{n}, {c}], got {:?}", feat.shape())));
        }
        let norm = |x: &Tensor| if self.cfg.layer_norm { layer_norm(x) } else { Ok(x.clone()) };
        let tokens = norm(feat)?.transpose(0, 1)?;
        let h = layer(self.params, &format!("mixer{l}.token.0"), &tokens)?.gelu();
        let mixed = layer(self.params, &format!("mixer{l}.token.1"), &h)?.transpose(0, 1)?;
        let x = if self.cfg.residual { mixed.add(feat)? } else { mixed };
        let h = layer(self.params, &format!("mixer{l}.channel.0"), &norm(&x)?)?.gelu();
        let mixed = layer(self.params, &format!("mixer{l}.channel.1"), &h)?;
        if self.cfg.residual {
            mixed.add(&x)
        } else {
            Ok(mixed)
        }
    }

    pub fn pointmixer(&self, x: &Tensor) -> Result<FeatureBundle> {
        let mut feat = layer(self.params, "embed", &self.gcnn(x)?)?;
        for l in 0..self.cfg.mixer_layers {
            feat = self.mixer_layer(l, &feat)?;
        }
        let global = feat.reduce_max(0)?;
        Ok(FeatureBundle { feat, global })
    }

    pub fn decode(&self, fusion: &Tensor) -> Result<Tensor> {
        let want = 2 * self.cfg.embed_dim;
        if fusion.shape().len() != 2 || fusion.shape()[1] != want {
            return Err(Error::shape(format!("decoder expects [N, {want}], got {:?}", fusion.shape())));
        }
        let mut h = fusion.clone();
        let n = self.cfg.decoder.len() + 1;
        for i in 0..n {
            h = layer(self.params, &format!("decoder.{i}"), &h)?;
            if i + 1 < n {
                h = h.gelu();
            }
        }
        Ok(h)
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<GeneratorOutput> {
        self.run(a, b, true)
    }

    /// First-branch output for the pair `(x, y)`.
    pub fn branch(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, y, false)?.a_g)
    }

    fn run(&self, a: &Tensor, b: &Tensor, both: bool) -> Result<GeneratorOutput> {
        self.check_points(a)?;
        self.check_points(b)?;
        let (ga, gb) = (self.tnet_global(a)?, self.tnet_global(b)?);
        let (a_t, t_norm_a) = self.tnet_with(a, &ga, &gb)?;
        let (b_t, t_norm_b) = self.tnet_with(b, &gb, &ga)?;
        let fa = self.pointmixer(&a_t)?;
        let fb = self.pointmixer(&b_t)?;
        let (fusion_a, fusion_b) = feature_interaction(&fa, &fb)?;
        let a_g = self.decode(&fusion_a)?;
        let b_g = if both { Some(self.decode(&fusion_b)?) } else { None };
        Ok(GeneratorOutput { a_g, b_g, a_t, b_t, t_norm_a, t_norm_b })
    }
}

/// Concatenates each cloud's per-point features with the difference of the
/// two global vectors: `[N, 2C]` each.
pub fn feature_interaction(b1: &FeatureBundle, b2: &FeatureBundle) -> Result<(Tensor, Tensor)> {
    if b1.feat.shape() != b2.feat.shape() {
        return Err(Error::shape(format!(
            "feature bundles differ: {:?} vs {:?}",
            b1.feat.shape(),
            b2.feat.shape()
        )));
    }
    let (n, c) = (b1.feat.shape()[0], b1.feat.shape()[1]);
    let d12 = b1.global.sub(&b2.global)?;
    let spread = |d: &Tensor| d.reshape(&[1, c])?.gather_rows(&vec![0; n]);
    let f1 = concat(&[b1.feat.clone(), spread(&d12)?], 1)?;
    let f2 = concat(&[b2.feat.clone(), spread(&d12.neg())?], 1)?;
    Ok((f1, f2))
}

/// Probability in `[ε, 1 − ε]` that `points` is real; `which` is `disc_a`
/// or `disc_b`.
pub fn discriminator(params: &Params, cfg: &NetworkConfig, which: &str, points: &Tensor) -> Result<Tensor> {
    let mut h = points.clone();
    let n = cfg.discriminator.len() + 1;
    for i in 0..n {
        h = layer(params, &format!("{which}.{i}"), &h)?;
        if i + 1 < n {
            h = h.leaky_relu(cfg.leaky_slope);
        }
    }
    Ok(h.mean().sigmoid().clamp(DISC_EPS, 1.0 - DISC_EPS))
}

pub const DISC_EPS: f64 = 1e-7;

/// Convenience wrapper: generated clouds and T-Net transforms for one pair.
pub struct Generated {
    pub a_g: PointCloud,
    pub b_g: PointCloud,
    pub a_t: PointCloud,
    pub b_t: PointCloud,
    pub t_norm_a: RigidTransform,
    pub t_norm_b: RigidTransform,
}

pub fn generator_forward(a: &PointCloud, b: &PointCloud, store: &ParamStore, cfg: &NetworkConfig) -> Result<Generated> {
    let params = store.leaves(|_| false);
    let out = Generator::new(cfg, &params).forward(&cloud_tensor(a), &cloud_tensor(b))?;
    Ok(Generated {
        a_g: tensor_cloud(&out.a_g)?,
        b_g: tensor_cloud(out.b_g.as_ref().expect("both branches decoded"))?,
        a_t: tensor_cloud(&out.a_t)?,
        b_t: tensor_cloud(&out.b_t)?,
        t_norm_a: tensor_transform(&out.t_norm_a)?,
        t_norm_b: tensor_transform(&out.t_norm_b)?,
    })
}

pub fn discriminator_forward(pc: &PointCloud, store: &ParamStore, cfg: &NetworkConfig, which: &str) -> Result<f64> {
    let params = store.leaves(|_| false);
    Ok(discriminator(&params, cfg, which, &cloud_tensor(pc))?.item())
}
