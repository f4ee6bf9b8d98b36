//! Dense tensors with a reverse-mode tape, and a dual-branch gait
//! recognition network built on top of them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the common choices.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError,
};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use layers::{LstcKernelBank, PoolMode};
pub use losses::{joint_loss, LossConfig, LossReport};
pub use model::{
    Branch, Head, LstcnModel, Mode, ModelConfig, ModelError, PartFeatureSet, PartTag, ShapeTrace,
    Variant,
};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = LstcnModel<f64>;
pub type Model32 = LstcnModel<f32>;
