//! Minimal dense-tensor reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{gradient_check, gradient_check_input, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamStore};
