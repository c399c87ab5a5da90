//! Point-cloud registration by generating aligned clouds.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
