//! HiCOMEX: facial action unit detection from a single image.
//!
//! Local AU features are cropped around landmark-derived AU centers, then
//! recombined by up to three relation learners (a BiLSTM over the AU
//! sequence, a self-attention encoder, and a continuous Hopfield layer)
//! before per-AU occurrence prediction.

pub mod au_region;
pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod relation;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
