pub mod checkpoint;
pub mod data;
pub mod depth;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
