//! Polarimetric thermal to visible face synthesis with a multi-stream
//! feature-fusion generator and a multi-scale patch discriminator.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod polarimetry;
pub mod training;

pub use error::{Error, Result};
