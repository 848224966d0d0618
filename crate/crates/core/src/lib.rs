//! Fair and differentially private synthesis of heterogeneous tabular data.

pub mod autodiff;
pub mod diffusion;
pub mod disentangle;
pub mod dp;
pub mod error;
pub mod evaluation;
pub mod params;
pub mod persample;
pub mod pipeline;
pub mod rng;
pub mod schema_io;
pub mod tokenizer;
pub mod vae;

pub use error::{FlipError, Result};
