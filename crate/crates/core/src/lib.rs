//! Handwritten character recognition with a small convolutional network
//! implemented from first principles: tensors, layers with explicit
//! backward passes, ADAM, a training loop with early stopping, and
//! accuracy/confusion reporting.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use layers::Mode;
pub use model::{Architecture, LayerSpec, ModelConfig, SequentialModel};
pub use tensor::{Real, Rng, Shape, Tensor};
