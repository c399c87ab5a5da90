//! Run configuration loaded from TOML.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! are rejected. Errors name the offending key as a dotted path such as
//! `train.gan_schedule.generator_every`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::estimation::{PdsacConfig, RansacConfig};
use crate::networks::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub pdsac: PdsacConfig,
    pub ransac: RansacConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            Error::Config { key, message: inner.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.pdsac.validate()?;
        validate_ransac(&self.ransac)?;
        if self.network.n_points != self.data.n_points {
            return Err(Error::Config {
                key: "network.n_points".into(),
                message: format!("{} differs from data.n_points = {}", self.network.n_points, self.data.n_points),
            });
        }
        Ok(())
    }
}

fn validate_ransac(r: &RansacConfig) -> Result<()> {
    let bad = |key: &str, message: &str| Err(Error::Config { key: format!("ransac.{key}"), message: message.into() });
    if r.iterations == 0 {
        return bad("iterations", "must be positive");
    }
    if r.k < 3 {
        return bad("k", "must be at least 3");
    }
    if !(r.inlier_threshold.is_finite() && r.inlier_threshold > 0.0) {
        return bad("inlier_threshold", "must be a positive real");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match Config::from_toml_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.data.n_points = 256;
        c.network.n_points = 256;
        c.train.max_steps = Some(10);
        c.data.shape_seed = Some(4);
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("[train.gan_schedule]\ngenerator_evry = 3\n"), "train.gan_schedule.generator_evry");
        assert_eq!(key_of("[train]\nbatch_size = \"x\"\n"), "train.batch_size");
        assert_eq!(key_of("[train.gan_schedule]\ngenerator_every = 0\n"), "train.gan_schedule.generator_every");
        assert_eq!(key_of("[network]\nn_points = 512\n"), "network.n_points");
        assert_eq!(key_of("[ransac]\nk = 2\n"), "ransac.k");
        assert_eq!(key_of("[pdsac]\nm = 0\n"), "pdsac.m");
        assert_eq!(key_of("[bogus]\nx = 1\n"), "bogus");
    }

    #[test]
    fn syntax_errors_carry_lines() {
        match Config::from_toml_str("[train]\nepochs = 3\nbatch_size = = 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
