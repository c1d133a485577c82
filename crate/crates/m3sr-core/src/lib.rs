//! Multi-scale multi-perceptual state-space network for reconstructing
//! hyperspectral cubes from RGB images, together with the numerical
//! machinery to verify it: a minimal reverse-mode tensor engine, selective
//! state-space scans, a single-level Haar wavelet transform, a three-scale
//! encoder-decoder, a training loop, and image-quality metrics.

pub mod data;
pub mod error;
pub mod fastmath;
pub mod gradcheck;
pub mod blocks;
pub mod kernels;
pub mod network;
pub mod params;
pub mod scan2d;
pub mod ssm;
pub mod wavelet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, TensorF};
