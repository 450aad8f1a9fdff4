//! Windowed-attention U-shaped segmentation with a multi-scale nested
//! decoder, an edge-aware composite loss and a trainable denoising
//! front-end, plus the data, training and evaluation harness around them.

pub mod backbone;
pub mod data;
pub mod denoise;
pub mod edgelabel;
pub mod error;
pub mod figures;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Error, Result};
