//! Forward and backward kernels on flat row-major buffers.
//!
//! These are pure functions; [`crate::tape::Tape`] records which kernel
//! produced each value and replays the matching backward in reverse order.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::ConvGeom;
pub use norm::NormAxis;
pub use pool::PoolKind;
