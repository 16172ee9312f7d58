//! Fully-convolutional segmentation network written from scratch.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use network::{ForwardPass, Gradients, LayerParams, LayerSpec, Network, NetworkSpec};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{train, GeneratedSource, SampleSource, TrainConfig, TrainLog, Trainer};
