//! Volumetric CNN training for the bias trial: a fixed conv/batch-norm/
//! sigmoid architecture with hand-written gradients, the three mitigation
//! strategies, and SmoothGrad saliency.

pub mod checkpoint;
mod layers;
pub mod mitigate;
pub mod model;
pub mod real;
pub mod saliency;
pub mod train;

pub use mitigate::{reweigh_weights, SampleWeights, UnlearnConfig};
pub use model::{init_params, input_gradient, predict, CnnConfig, Freeze, Mode, ModelParams};
pub use real::Real;
pub use saliency::SaliencyConfig;
pub use train::{train, History, SplitData, TrainConfig, TrainOptions};
