pub mod data;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numfmt;
pub mod synth;
pub mod trainer;
pub mod weather;

pub use error::{Error, ErrorKind, Result};
