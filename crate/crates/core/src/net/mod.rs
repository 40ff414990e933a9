//! Fully-convolutional 2D→3D displacement regressor with hand-written
//! reverse-mode gradients.
//!
//! The encoder turns a `(1, H, W)` projection into a stack of 2D feature
//! maps, a parameter-free reshape reinterprets that stack as a coarse 3D
//! feature volume, and a transposed-convolution decoder upsamples it to a
//! `(2, H_out, D_out, W_out)` in-plane displacement field.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod optim;
mod scalar;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use layers::{Anl, BatchNorm, Conv2d, ConvTranspose3d, Layer, Mode, PRelu, Reshape, ResidualBlock, Scale};
pub use loss::mse_loss;
pub use model::{Network, NetworkConfig};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{
    evaluate_mse, predict, train, write_metrics_csv, zero_predictor_mse, EpochMetrics, LrSchedule, TrainOptions,
    TrainOutcome, TrainingSet,
};
