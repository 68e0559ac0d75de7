//! Numerical building blocks shared by the models.
//!
//! Vectors indexed over (input, grid point) pairs always use the layout
//! `v[n * L + l]`: grouped by input, contiguous over the grid.

mod cg;
mod dense;
mod ilu;
mod sparse;

pub use cg::{cg_solve, cg_solve_observed, CgOptions, CgReport, CgSolution, LinearOperator};
pub use dense::{eig_sym, kron_apply, sym_solve, SymEigen, SymFactor};
pub use ilu::{ilu_inverse_apply, IluFactor, DEFAULT_DROP_TOLERANCE, DEFAULT_FILL_FACTOR};
pub use sparse::SparseMatrix;

pub(crate) use dense::row_major as dense_row_major;
pub(crate) use sparse::SparseBuilder;
