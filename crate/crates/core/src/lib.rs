pub mod analysis;
pub mod audio;
pub mod dataset;
pub mod embed;
pub mod eval;
pub mod error;
pub mod mel;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;

pub use error::{Error, Result};
