//! Dense arrays and the reverse-mode autodiff graph built on them.

mod array;
mod gradcheck;
mod graph;

pub use array::{broadcast_shape, Array};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_inputs, finite_diff_check_params, relative_error,
    GradCheckReport, ParamCheck,
};
#[cfg(feature = "fault-injection")]
pub use graph::fault;
pub use graph::{Gradients, Graph, Var};
