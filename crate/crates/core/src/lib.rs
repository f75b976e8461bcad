//! Joint semantic segmentation and stereo matching.

pub mod ablate;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod stereo;
pub mod tape;
pub mod worldgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
