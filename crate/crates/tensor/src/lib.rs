//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The primitive set covers matmul, 2D/3D (transposed) convolution, layer
//! norm, softmax, GELU, elementwise arithmetic, padding/gather and
//! reshape/permute. All reductions run in a fixed sequential order, so two
//! identical runs produce bitwise-identical values and gradients.

mod checkpoint;
mod error;
pub mod memory;
mod op;
mod ops;
pub mod serialize;
mod tensor;

pub use checkpoint::{checkpoint, recompute_segment, Segment};
pub use error::{Result, TensorError};
pub use memory::Buffer;
pub use op::{forward_op, Op};
pub use ops::{AxisPad, PadMode};
pub use tensor::{is_grad_enabled, no_grad, with_grad_mode, BackwardOp, Gradients, Tensor};
