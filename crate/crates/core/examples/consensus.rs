//! pdsac and ransac on correspondences with injected outliers.
//!
//! cargo run --release --example consensus -- [outlier_fraction]

use genreg::estimation::{pdsac, ransac, RansacConfig};
use genreg::geometry::{rotation_error, translation_error};
use genreg::harness::synthetic_correspondences;

fn main() -> genreg::Result<()> {
    let outliers: f64 = std::env::args().nth(1).map_or(0.3, |s| s.parse().expect("outlier fraction"));
    let (c, gt, mask) = synthetic_correspondences(1024, outliers, 5)?;
    println!("{} correspondences, {} outliers", mask.len(), mask.iter().filter(|&&o| o).count());

    let p = pdsac(&c, 512, 4, 9)?;
    println!(
        "pdsac   RE {:.4} deg  TE {:.5}  residual {:.4}  hypothesis {}",
        rotation_error(&p.transform, &gt),
        translation_error(&p.transform, &gt),
        p.residual,
        p.hypothesis_index
    );
    let r = ransac(&c, &RansacConfig::default(), 9)?;
    println!(
        "ransac  RE {:.4} deg  TE {:.5}  residual {:.4}",
        rotation_error(&r.transform, &gt),
        translation_error(&r.transform, &gt),
        r.residual
    );
    let winners: Vec<bool> = p.minimal_set.iter().map(|&i| mask[i]).collect();
    println!("pdsac winning set {:?}, outlier flags {winners:?}", p.minimal_set);
    Ok(())
}
