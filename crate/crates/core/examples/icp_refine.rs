//! Point-to-point ICP from a small perturbation of a sampled shape.
//!
//! cargo run --release --example icp_refine -- [max_rot_deg]

use genreg::datagen::{sample_shape, Shape};
use genreg::estimation::{icp, ICP_MAX_ITER, ICP_TOL};
use genreg::geometry::{apply, random_transform, rotation_error, translation_error};

fn main() -> genreg::Result<()> {
    let max_rot: f64 = std::env::args().nth(1).map_or(5.0, |s| s.parse().expect("rotation bound"));
    let shape = Shape::Box { size: [0.6, 0.4, 0.2] };
    let src = sample_shape(&shape, 2000, 3)?;
    let (gt, pose) = random_transform(4, [0.0, max_rot], [0.0, 0.05])?;
    let dst = apply(&src, &gt);

    let r = icp(&src, &dst, ICP_MAX_ITER, ICP_TOL)?;
    println!("perturbation {pose:?}");
    println!("{} iterations, RE {:.2e} deg, TE {:.2e}", r.iterations, rotation_error(&r.transform, &gt), translation_error(&r.transform, &gt));
    for (i, rmse) in r.rmse_history.iter().enumerate() {
        println!("  {i:>2} rmse {rmse:.6}");
    }
    Ok(())
}
