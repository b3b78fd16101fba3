pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod params;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
