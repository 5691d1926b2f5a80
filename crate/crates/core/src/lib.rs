pub mod analytics;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod nn;
pub mod par;
pub mod synth;
pub mod training;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
