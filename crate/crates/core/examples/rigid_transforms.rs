//! Euler poses, composition, inversion and the closed-form Kabsch fit.
//!
//! cargo run --example rigid_transforms

use genreg::geometry::{
    apply, compose, euler_to_transform, geodesic_angle_deg, invert, kabsch, random_transform, rotation_error,
    transform_to_euler, translation_error, EulerPose, PointCloud,
};

fn main() -> genreg::Result<()> {
    let pose = EulerPose::new([30.0, -10.0, 45.0], [0.2, 0.0, -0.1]);
    let t = euler_to_transform(&pose)?;
    println!("pose {:?} -> matrix", pose);
    for row in t.matrix() {
        println!("  {:>9.5} {:>9.5} {:>9.5} {:>9.5}", row[0], row[1], row[2], row[3]);
    }
    println!("round trip: {:?}", transform_to_euler(&t));

    let back = compose(&t, &invert(&t));
    println!("T then T^-1 differs from identity by {:.2e} deg", geodesic_angle_deg(&back, &Default::default()));

    // recover a random motion from exact correspondences
    let src = PointCloud::from_flat(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2])?;
    let (gt, gt_pose) = random_transform(11, [0.0, 45.0], [0.0, 0.8])?;
    let dst = apply(&src, &gt);
    let est = kabsch(src.points(), dst.points())?;
    println!("ground truth {:?}", gt_pose);
    println!("kabsch RE {:.2e} deg, TE {:.2e}", rotation_error(&est, &gt), translation_error(&est, &gt));
    Ok(())
}
