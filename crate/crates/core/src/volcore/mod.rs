//! Dense tensors, the recording tape, and the primitive differentiable ops.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled, check_gradients_with_step, rel_err, GradCheckReport, DEFAULT_STEP, REL_ERR_FLOOR};
pub use ops::{concat, sigmoid_scalar, BinaryOp, Reduce, LOG_CLAMP};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{numel, Real, Tensor};
