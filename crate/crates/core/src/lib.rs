pub mod ablation;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod extractor;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod seed;
pub mod train;
pub mod variant;

pub use error::{Error, Result};
