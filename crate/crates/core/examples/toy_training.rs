//! Overfits the generator on a few poses of one composite shape and reports
//! how well the trained model registers the first pair.
//!
//! cargo run --release --example toy_training -- [steps] [learning_rate] [poses]

use genreg::datagen::{DataConfig, ShapeKind};
use genreg::estimation::PdsacConfig;
use genreg::geometry::{apply, rotation_error, translation_error};
use genreg::metrics::chamfer;
use genreg::networks::NetworkConfig;
use genreg::pipeline::register_pair;
use genreg::training::{train, TrainConfig, TrainPair, TrainSetup};

fn main() -> genreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("learning rate"));
    let poses: usize = args.next().map_or(1, |s| s.parse().expect("pose count"));

    let data = DataConfig {
        pairs: poses,
        shapes: vec![ShapeKind::Composite],
        shape_seed: Some(3),
        n_points: 256,
        ..DataConfig::default()
    };
    // batch elements cycle through the available poses
    let pairs: Vec<TrainPair> = (0..poses)
        .map(|i| {
            let s = data.build(i, 7)?;
            Ok(TrainPair { id: format!("pair_{i}"), a: s.a, b: s.b, t_gt: s.t_gt })
        })
        .collect::<genreg::Result<_>>()?;

    let setup = TrainSetup {
        network: NetworkConfig::with_points(256),
        train: TrainConfig { batch_size: 4, max_steps: Some(steps), learning_rate: lr, ..TrainConfig::default() },
        pdsac: PdsacConfig::default(),
        out_dir: None,
    };
    let out = train(&setup, &pairs)?;
    for row in out.history.iter().step_by((out.history.len() / 20).max(1)) {
        println!(
            "step {:5}  total {:.4}  abs {:.4}  cyc {:.4}  transform {:.4}  disc {:.4}  {:.0} ms",
            row.step,
            row.loss.total,
            row.loss.abs,
            row.loss.cyc,
            row.loss.transform,
            row.disc_loss.unwrap_or(f64::NAN),
            row.wall_ms
        );
    }

    let p = &pairs[0];
    let reg = register_pair(&p.a, &p.b, &out.generator, &setup.network, &setup.pdsac, 1)?;
    println!("initial CD(A, B)    {:.4}", chamfer(&p.a, &p.b)?);
    println!("final CD(A_g, B)    {:.4}", chamfer(&reg.a_g, &p.b)?);
    println!("final CD(A_g, B_g)  {:.4}", chamfer(&reg.a_g, &reg.b_g)?);
    println!("CD(T_est(A), B)     {:.4}", chamfer(&apply(&p.a, &reg.t_est), &p.b)?);
    println!("RE {:.3} deg  TE {:.4}", rotation_error(&reg.t_est, &p.t_gt), translation_error(&reg.t_est, &p.t_gt));
    println!("suppressed polar gradients: {}", out.suppressed_grads);
    Ok(())
}
