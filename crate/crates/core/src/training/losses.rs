//! Registration losses on graph tensors plus value-level wrappers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{invert, PointCloud, RigidTransform};
use crate::metrics::{edge_successor, emd, EdgeMode};
use crate::networks::{cloud_tensor, discriminator, tensor_cloud, Params, NetworkConfig};

pub const ADV_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Generator minimises `−log D(fake)`.
    #[default]
    NonSaturating,
    /// Generator minimises `log(1 − D(fake))`.
    Minimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub abs: f64,
    pub relative: f64,
    pub cyc: f64,
    pub adv: f64,
    pub transform: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    pub fn new(abs: f64, relative: f64, cyc: f64, adv: f64, transform: f64) -> Self {
        Self { abs, relative, cyc, adv, transform, total: combine(abs, relative, cyc, adv, transform) }
    }

    pub fn is_finite(&self) -> bool {
        [self.abs, self.relative, self.cyc, self.adv, self.transform, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(sum(|l| l.abs), sum(|l| l.relative), sum(|l| l.cyc), sum(|l| l.adv), sum(|l| l.transform))
    }
}

fn combine(abs: f64, relative: f64, cyc: f64, adv: f64, transform: f64) -> f64 {
    abs + relative + cyc + ADV_WEIGHT * adv + transform
}

/// Earth mover's distance with the matching held fixed: the mean distance
/// between `x[i]` and its assigned partner in `y`.
pub fn emd_tensor(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let m = emd(&tensor_cloud(x)?, &tensor_cloud(y)?)?;
    Ok(x.sub(&y.gather_rows(m.assignment.mapping())?)?.row_norm()?.mean())
}

/// Lengths of the consecutive-point edges of a `[N, 3]` tensor.
pub fn edge_tensor(x: &Tensor, mode: EdgeMode) -> Result<Tensor> {
    let n = x.shape()[0];
    if n < 2 {
        return Err(Error::invalid(format!("edge set needs at least 2 points, got {n}")));
    }
    let succ: Vec<usize> = (0..n).map(|i| edge_successor(i, n, mode)).collect();
    x.gather_rows(&succ)?.sub(x)?.row_norm()
}

pub fn absolute_tensor(a: &Tensor, b: &Tensor, a_g: &Tensor, b_g: &Tensor) -> Result<Tensor> {
    emd_tensor(a, b_g)?.add(&emd_tensor(b, a_g)?)
}

pub fn relative_tensor(a: &Tensor, a_g: &Tensor, b: &Tensor, b_g: &Tensor, mode: EdgeMode) -> Result<Tensor> {
    let term = |x: &Tensor, g: &Tensor| -> Result<Tensor> {
        Ok(edge_tensor(x, mode)?.sub(&edge_tensor(g, mode)?)?.abs().mean())
    };
    term(a, a_g)?.add(&term(b, b_g)?)
}

/// `‖T_est·T_gt⁻¹ − I‖_F` over the full 4×4.
pub fn transform_tensor_loss(t_est: &Tensor, t_gt: &RigidTransform) -> Result<Tensor> {
    let inv = Tensor::new(invert(t_gt).to_row_major().to_vec(), &[4, 4])?;
    let eye = Tensor::new((0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(), &[4, 4])?;
    Ok(matmul(t_est, &inv)?.sub(&eye)?.square().sum().sqrt())
}

/// Generator-side adversarial term for one pair.
pub fn adversarial_g_tensor(
    disc: &Params,
    cfg: &NetworkConfig,
    a_g: &Tensor,
    b_g: &Tensor,
    form: AdversarialForm,
) -> Result<Tensor> {
    let da = discriminator(disc, cfg, "disc_a", b_g)?;
    let db = discriminator(disc, cfg, "disc_b", a_g)?;
    Ok(match form {
        AdversarialForm::NonSaturating => da.log().add(&db.log())?.scale(-0.5),
        AdversarialForm::Minimax => da.neg().add_scalar(1.0).log().add(&db.neg().add_scalar(1.0).log())?.scale(0.5),
    })
}

/// `−[log D_A(A) + log(1 − D_A(B_g)) + log D_B(B) + log(1 − D_B(A_g))] / 2`;
/// the generated clouds enter as constants.
pub fn discriminator_tensor(
    disc: &Params,
    cfg: &NetworkConfig,
    a: &Tensor,
    b: &Tensor,
    a_g: &Tensor,
    b_g: &Tensor,
) -> Result<Tensor> {
    let real_a = discriminator(disc, cfg, "disc_a", a)?.log();
    let fake_a = discriminator(disc, cfg, "disc_a", &b_g.detach())?.neg().add_scalar(1.0).log();
    let real_b = discriminator(disc, cfg, "disc_b", b)?.log();
    let fake_b = discriminator(disc, cfg, "disc_b", &a_g.detach())?.neg().add_scalar(1.0).log();
    Ok(real_a.add(&fake_a)?.add(&real_b)?.add(&fake_b)?.scale(-0.5))
}

pub fn total_tensor(parts: [&Tensor; 5]) -> Result<Tensor> {
    let [abs, rel, cyc, adv, tr] = parts;
    abs.add(rel)?.add(cyc)?.add(&adv.scale(ADV_WEIGHT))?.add(tr)
}

pub fn loss_absolute(a: &PointCloud, b: &PointCloud, a_g: &PointCloud, b_g: &PointCloud) -> Result<f64> {
    Ok(emd(a, b_g)?.cost + emd(b, a_g)?.cost)
}

pub fn loss_relative(a: &PointCloud, a_g: &PointCloud, b: &PointCloud, b_g: &PointCloud, mode: EdgeMode) -> Result<f64> {
    for (x, g) in [(a, a_g), (b, b_g)] {
        if x.len() != g.len() {
            return Err(Error::SizeMismatch { left: x.len(), right: g.len() });
        }
    }
    let t = |pc: &PointCloud| cloud_tensor(pc);
    Ok(relative_tensor(&t(a), &t(a_g), &t(b), &t(b_g), mode)?.item())
}

pub fn loss_transform(t_est: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    let t = Tensor::new(t_est.to_row_major().to_vec(), &[4, 4]).expect("4x4");
    transform_tensor_loss(&t, t_gt).expect("4x4").item()
}

pub fn total_loss(abs: f64, relative: f64, cyc: f64, adv: f64, transform: f64) -> LossBreakdown {
    LossBreakdown::new(abs, relative, cyc, adv, transform)
}
