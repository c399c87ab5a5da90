//! End-to-end registration of one pair: generator forward pass, consensus on
//! both branches and fusion. Uses a trained checkpoint when given one, and a
//! freshly initialised generator otherwise.
//!
//! cargo run --release --example register_pair -- [checkpoint_dir]

use std::path::Path;

use genreg::datagen::{DataConfig, ShapeKind};
use genreg::estimation::PdsacConfig;
use genreg::geometry::{apply, rotation_error, translation_error};
use genreg::metrics::chamfer;
use genreg::networks::{init_generator, NetworkConfig};
use genreg::pipeline::register_pair;
use genreg::training::load_trained;

fn main() -> genreg::Result<()> {
    let (network, generator) = match std::env::args().nth(1) {
        Some(dir) => {
            let (net, gen, _) = load_trained(Path::new(&dir), None)?;
            (net, gen)
        }
        None => {
            let net = NetworkConfig::with_points(256);
            let gen = init_generator(&net, 1)?;
            (net, gen)
        }
    };
    let data = DataConfig { shapes: vec![ShapeKind::Composite], n_points: network.n_points, ..DataConfig::default() };
    let pair = data.build(0, 3)?;

    let reg = register_pair(&pair.a, &pair.b, &generator, &network, &PdsacConfig::default(), 5)?;
    println!("ground truth {:?}", pair.pose);
    println!("branch residuals {:.4} / {:.4}", reg.branch_a.residual, reg.branch_b.residual);
    println!("CD(A_g, B) {:.4}  CD(B_g, A) {:.4}", chamfer(&reg.a_g, &pair.b)?, chamfer(&reg.b_g, &pair.a)?);
    println!(
        "CD(A, B) {:.4} -> CD(T_est(A), B) {:.4}",
        chamfer(&pair.a, &pair.b)?,
        chamfer(&apply(&pair.a, &reg.t_est), &pair.b)?
    );
    println!("RE {:.3} deg  TE {:.4}", rotation_error(&reg.t_est, &pair.t_gt), translation_error(&reg.t_est, &pair.t_gt));
    Ok(())
}
