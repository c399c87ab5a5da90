use std::cell::Cell;

use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{mat3_mul, mat3_transpose, polar_factor, Mat3};

/// Below this gap the polar-factor derivative is dropped.
pub const POLAR_GRAD_GAP: f64 = 1e-6;

thread_local! {
    static SUPPRESSED: Cell<u64> = const { Cell::new(0) };
}

/// Number of polar-factor backward passes skipped on this thread since the
/// last call.
pub fn take_suppressed_polar_grads() -> u64 {
    SUPPRESSED.with(|c| c.replace(0))
}

fn to_mat(v: &[f64]) -> Mat3 {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

fn flatten(m: &Mat3) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Orthogonal polar factor `U diag(1, 1, d) Vᵀ` of a 3×3 matrix, where
/// `d = sign(det(U Vᵀ))`. The backward pass is exact away from repeated or
/// vanishing singular values; near them the gradient is zeroed and counted.
pub fn polar_rotation(h: &Tensor) -> Result<Tensor> {
    if h.shape() != [3, 3] {
        return Err(Error::shape(format!("polar_rotation expects [3, 3], got {:?}", h.shape())));
    }
    let pf = polar_factor(&to_mat(h.values()));
    Ok(Tensor::from_op(vec![3, 3], flatten(&pf.rotation), vec![h.clone()], move |g, _| {
        if pf.derivative_gap() < POLAR_GRAD_GAP {
            SUPPRESSED.with(|c| c.set(c.get() + 1));
            return vec![Some(vec![0.0; 9])];
        }
        let gt = mat3_mul(&mat3_mul(&mat3_transpose(&pf.u), &to_mat(g)), &pf.v);
        let dd = [1.0, 1.0, pf.d];
        let s = pf.s;
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                m[i][j] = if dd[i] == dd[j] {
                    dd[i] * (gt[i][j] - gt[j][i]) / (s[i] + s[j])
                } else {
                    dd[j] * (gt[i][j] + gt[j][i]) / (s[j] - s[i])
                };
            }
        }
        let gh = mat3_mul(&mat3_mul(&pf.u, &m), &mat3_transpose(&pf.v));
        vec![Some(flatten(&gh))]
    }))
}

fn rx(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    ([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]], [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
}

fn ry(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    ([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
}

fn rz(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    ([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
}

/// Six parameters (three Euler angles in radians, three translations) to a
/// 4×4 row-convention homogeneous transform.
pub fn rigid_from_params(p: &Tensor) -> Result<Tensor> {
    if p.numel() != 6 {
        return Err(Error::shape(format!("rigid_from_params expects 6 values, got {:?}", p.shape())));
    }
    let v = p.values();
    let (x, dx) = rx(v[0]);
    let (y, dy) = ry(v[1]);
    let (z, dz) = rz(v[2]);
    let col = mat3_mul(&mat3_mul(&x, &y), &z);
    let dcol = [
        mat3_mul(&mat3_mul(&dx, &y), &z),
        mat3_mul(&mat3_mul(&x, &dy), &z),
        mat3_mul(&mat3_mul(&x, &y), &dz),
    ];
    let mut out = vec![0.0; 16];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 4 + j] = col[j][i];
        }
        out[12 + i] = v[3 + i];
    }
    out[15] = 1.0;
    Ok(Tensor::from_op(vec![4, 4], out, vec![p.clone()], move |g, _| {
        let mut gp = vec![0.0; 6];
        for (a, d) in dcol.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    gp[a] += g[i * 4 + j] * d[j][i];
                }
            }
        }
        gp[3..6].copy_from_slice(&g[12..15]);
        vec![Some(gp)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_transform, EulerPose};

    #[test]
    fn params_match_euler_conversion() {
        let p = Tensor::new(vec![0.3, -0.4, 1.1, 0.5, -0.2, 0.9], &[6]).unwrap();
        let m = rigid_from_params(&p).unwrap();
        let t = euler_to_transform(&EulerPose::new(
            [0.3f64.to_degrees(), (-0.4f64).to_degrees(), 1.1f64.to_degrees()],
            [0.5, -0.2, 0.9],
        ))
        .unwrap();
        for (a, b) in m.values().iter().zip(t.to_row_major()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_identity() {
        let m = rigid_from_params(&Tensor::zeros(&[6])).unwrap();
        let id: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(m.values(), id.as_slice());
    }

    #[test]
    fn degenerate_polar_gradient_is_suppressed() {
        take_suppressed_polar_grads();
        let h = Tensor::variable(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[3, 3]).unwrap();
        let r = polar_rotation(&h).unwrap();
        r.sum().backward().unwrap();
        assert!(h.grad().iter().all(|g| g.is_finite() && *g == 0.0));
        assert!(take_suppressed_polar_grads() >= 1);
    }
}
