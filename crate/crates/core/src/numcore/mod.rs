//! Dense linear algebra, Cholesky solves and reverse-mode differentiation.

mod cholesky;
pub mod gradcheck;
mod matrix;
pub mod tape;

pub use cholesky::{cholesky, solve_spd, CholeskyFactor, JITTER_LADDER};
pub use gradcheck::{check_tape_gradient, finite_diff_check, max_relative_error};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};
