//! Dense arrays, seeded randomness, a reverse-mode tape and its
//! finite-difference oracle.

mod array;
mod gradcheck;
mod params;
mod rng;
mod tape;

pub use array::{DenseArray, Precision, Real};
pub use gradcheck::{finite_diff_check, relative_error, CoordCheck, FdReport, ProbePlan, REL_ERROR_FLOOR};
pub use params::{Param, ParamStore};
pub use rng::Rng;
pub use tape::{grad, grad_many, Gradients, Graph, RotaryTable, Var};
