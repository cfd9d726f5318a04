//! Tensors, parameters, reverse-mode differentiation and the gradient oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use params::{truncated_normal, Gradients, ParamId, ParamStore};
pub use tape::{Backward, Tape, Var};
pub use tensor::{dot, gelu, layer_norm, logsumexp, softmax, Tensor};
