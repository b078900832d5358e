//! A small CPU tensor engine with reverse-mode autodiff, the hierarchical
//! residual network and its training loop.

pub mod adam;
pub mod checkpoint;
pub mod hresnet;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use hresnet::{build_hresnet, HResNet, Mode, NetworkSpec};
pub use scalar::{gemm, Scalar, Strides};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{train, EpochRecord, History, TrainConfig};
