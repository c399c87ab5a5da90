//! Chamfer distance, exact and auction earth mover's distance, edge sets.
//!
//! cargo run --release --example matching_metrics -- [n]

use genreg::datagen::{sample_shape, Shape};
use genreg::metrics::{chamfer, edge_set, emd, emd_with_threshold, EdgeMode};

fn main() -> genreg::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(300, |s| s.parse().expect("point count"));
    let shape = Shape::Torus { major: 0.35, minor: 0.1 };
    let x = sample_shape(&shape, n, 1)?;
    let y = sample_shape(&shape, n, 2)?;

    println!("chamfer(x, y) = {:.6}", chamfer(&x, &y)?);
    let exact = emd(&x, &y)?;
    println!("emd exact     = {:.6} ({:?})", exact.cost, exact.solver);
    // threshold 0 forces the auction solver
    let approx = emd_with_threshold(&x, &y, 0)?;
    println!("emd auction   = {:.6} ({:?})", approx.cost, approx.solver);

    let first: Vec<usize> = exact.assignment.mapping().iter().take(8).copied().collect();
    println!("first matches x[i] -> y[{first:?}]");

    let edges = edge_set(&x, EdgeMode::Cyclic)?;
    let mean = edges.lengths.iter().sum::<f64>() / edges.lengths.len() as f64;
    println!("{} cyclic edges, mean length {mean:.4}", edges.lengths.len());
    Ok(())
}
