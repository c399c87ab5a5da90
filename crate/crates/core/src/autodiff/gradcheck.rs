//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` with central
/// differences on up to `max_coords` randomly chosen coordinates per input.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Tensor> =
        inputs.iter().map(|(v, s)| Tensor::variable(v.clone(), s)).collect::<Result<_>>()?;
    f(&vars)?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (k, (values, shape)) in inputs.iter().enumerate() {
        let grad = vars[k].grad();
        let coords: Vec<usize> = if values.len() <= max_coords {
            (0..values.len()).collect()
        } else {
            sample(&mut rng, values.len(), max_coords).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = values.clone();
                shifted[c] += delta;
                let mut args: Vec<Tensor> = inputs.iter().map(|(v, s)| Tensor::new(v.clone(), s)).collect::<Result<_>>()?;
                args[k] = Tensor::new(shifted, shape)?;
                Ok(f(&args)?.item())
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
            analytic.push(grad[c]);
        }
        coords_checked += coords.len();
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, per_input, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::{affine, concat, matmul};
    use crate::autodiff::{polar_rotation, rigid_from_params};

    fn data(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_ok(r: GradCheck) {
        assert!(r.max_rel_error < 1e-6, "relative error {:?}", r.per_input);
    }

    #[test]
    fn elementwise_ops() {
        let x = (data(12, 1), vec![3, 4]);
        let y = (data(4, 2).iter().map(|v| v + 2.0).collect(), vec![4]);
        let r = check(
            |t| {
                let a = t[0].gelu().mul(&t[1])?.sigmoid();
                let b = t[0].leaky_relu(0.01).div(&t[1])?.square();
                let c = t[1].log().exp().sqrt().add_scalar(0.5).neg();
                a.add(&b)?.sub(&c)?.mean().add(&t[0].sin().cos().abs().sum())
            },
            &[x, y],
            64,
            0,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn linear_algebra_ops() {
        let x = (data(2 * 5 * 3, 3), vec![2, 5, 3]);
        let w = (data(12, 4), vec![3, 4]);
        let b = (data(4, 5), vec![4]);
        let r = check(
            |t| {
                let h = affine(&t[0], &t[1], &t[2])?.gelu();
                let m = matmul(&h, &t[1].transpose(0, 1)?)?;
                let bt = matmul(&t[0].transpose(1, 2)?, &t[0])?;
                m.reduce_max(1)?.sum().add(&bt.square().mean())
            },
            &[x, w, b],
            64,
            1,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn structural_ops() {
        let x = (data(24, 6), vec![4, 6]);
        let r = check(
            |t| {
                let a = t[0].slice(1, 1, 3)?;
                let b = t[0].gather_rows(&[3, 0, 0, 2])?.slice(1, 0, 2)?;
                let c = concat(&[a, b], 1)?;
                let d = c.reduce_mean(0)?.row_norm()?;
                Ok(d.add(&c.reduce_sum(1)?.reshape(&[2, 2])?.clamp(-0.5, 10.0).mean())?.sum())
            },
            &[x],
            64,
            2,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn polar_and_rigid_ops() {
        let h = (vec![2.0, 0.3, -0.1, 0.2, 1.1, 0.4, -0.3, 0.2, 0.6], vec![3, 3]);
        let r = check(|t| Ok(polar_rotation(&t[0])?.mul(&Tensor::new(data(9, 7), &[3, 3])?)?.sum()), &[h], 9, 0).unwrap();
        assert_ok(r);
        // reflection case: det(H) < 0
        let h = (vec![2.0, 0.3, -0.1, 0.2, 1.1, 0.4, 0.3, -0.2, -0.6], vec![3, 3]);
        let r = check(|t| Ok(polar_rotation(&t[0])?.mul(&Tensor::new(data(9, 8), &[3, 3])?)?.sum()), &[h], 9, 0).unwrap();
        assert_ok(r);
        let p = (data(6, 9), vec![6]);
        let r = check(|t| Ok(rigid_from_params(&t[0])?.mul(&Tensor::new(data(16, 10), &[4, 4])?)?.sum()), &[p], 6, 0).unwrap();
        assert_ok(r);
    }
}
