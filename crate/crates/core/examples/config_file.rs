//! Loads a TOML run configuration and shows how bad keys are reported.
//!
//! cargo run --example config_file -- [config.toml]

use genreg::config::Config;

const SAMPLE: &str = r#"
[data]
pairs = 8
n_points = 512

[network]
n_points = 512

[train]
epochs = 20
learning_rate = 3e-4

[train.gan_schedule]
generator_every = 5
"#;

fn main() -> genreg::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => Config::load(path.as_ref())?,
        None => Config::from_toml_str(SAMPLE)?,
    };
    println!("{}", cfg.to_toml());

    for bad in ["[train]\nlearning_rat = 1e-3", "[pdsac]\nk = 2", "[data]\nn_points = 512"] {
        match Config::from_toml_str(bad) {
            Ok(_) => println!("{bad:?} accepted"),
            Err(e) => println!("{bad:?} -> {} ({e})", e.kind()),
        }
    }
    Ok(())
}
