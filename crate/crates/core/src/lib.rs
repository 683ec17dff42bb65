//! Attention-guided feature distillation for dense prediction.
//!
//! A teacher segmentation network's intermediate features are refined by a
//! channel-then-spatial attention block, normalized per channel, and matched
//! by the student's refined features under a squared distance that is added
//! to the student's cross-entropy. Everything runs on the small
//! reverse-mode tensor core in [`tape`] and [`kernels`].
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default 64-bit precision.

pub mod attention;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod init;
pub mod kernels;
pub mod metrics;
pub mod scalar;
pub mod segnet;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{AttentionMaps, CbamParams, Refined};
pub use distill::{DistillConfig, Method, TapEntry, TapId, TapSet};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use segnet::{SegNet, SegNetConfig, TapBundle};
pub use tape::{Activation, Param, Tape, Var};
pub use tensor::{Shape, Tensor};
pub use train::{Checkpoint, Student, Teacher, TrainConfig};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type CbamParams64 = attention::CbamParams<f64>;
pub type SegNet64 = segnet::SegNet<f64>;
