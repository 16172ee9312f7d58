//! Synthetic vessel-like training images and a small fully convolutional
//! segmentation network.
//!
//! The crate has five parts: [`synthgen`] grows random line trees and
//! rasterizes them together with their exact label masks; [`noisegen`]
//! degrades those images with patchy sinusoids and Gaussian noise; [`nn`]
//! is a CPU network with training, checkpoints and gradient checks;
//! [`eval`] computes pixel metrics and ROC curves inside a field of view;
//! [`dataio`] reads fundus datasets and writes images and manifests.

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod nn;
pub mod noisegen;
pub mod raster;
pub mod rng;
pub mod synthgen;

pub use config::{DatasetVariant, EvalConfig, RunConfig};
pub use error::{ConfigError, DataError, EvalError, GenerateError, NnError, ShapeError};
pub use noisegen::{make_sample, NoiseConfig};
pub use raster::{BinaryMask, GrayImage};
pub use synthgen::{generate_raw, GeneratorConfig, Sample};
