//! Reverse-mode gradients checked against central finite differences.
//!
//! cargo run --example gradient_check

use genreg::autodiff::gradcheck::check;
use genreg::autodiff::{matmul, polar_rotation, take_suppressed_polar_grads, Tensor};

fn main() -> genreg::Result<()> {
    // f(x, w) = sum(sigmoid(x·w)²)
    let x = (vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7], vec![2, 3]);
    let w = (vec![0.4, -1.1, 0.2, 0.8, -0.5, 0.3], vec![3, 2]);
    let r = check(|t: &[Tensor]| Ok(matmul(&t[0], &t[1])?.sigmoid().square().sum()), &[x.clone(), w], 64, 0)?;
    println!("sigmoid(x·w)²: max rel error {:.2e} over {} coords", r.max_rel_error, r.coords_checked);

    // the rotation factor of a 3x3 matrix, projected onto fixed weights
    let m = (vec![1.0, 0.2, -0.1, 0.3, 0.9, 0.4, -0.2, 0.1, 1.2], vec![3, 3]);
    let proj = Tensor::new((0..9).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 3])?;
    let r = check(|t: &[Tensor]| Ok(polar_rotation(&t[0])?.mul(&proj)?.sum()), &[m], 64, 1)?;
    println!("polar rotation: max rel error {:.2e}", r.max_rel_error);

    // one manual backward pass
    let v = Tensor::variable(x.0, &x.1)?;
    let y = v.square().mean();
    y.backward()?;
    println!("d mean(x²)/dx = {:?}", v.grad());
    println!("guarded polar gradients: {}", take_suppressed_polar_grads());
    Ok(())
}
