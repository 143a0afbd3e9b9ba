//! Hyperspectral image classification with a spectral 3-D convolution
//! front-end, a LoRA-adapted hierarchical window-attention backbone and a
//! from-scratch reverse-mode tensor engine.

pub mod cli;
pub mod error;
pub mod hsi_io;
pub mod numerics;
pub mod model;
pub mod peft;
pub mod preprocess;
pub mod train;

pub use error::{Error, Result};
