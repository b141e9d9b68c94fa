//! Dense tensors, a reverse-mode tape and gradient checking.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, sample_coordinates, Coordinate, GradCheckReport};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{sigmoid, Backward, Mask, Tape, Var, NORM_FLOOR};
pub use tensor::{dot, l2_norm, Tensor};
