//! Linear-objective conic programs over affine equalities, nonnegative rows and PSD blocks.
//!
//! Programs are built from named variable blocks and affine expressions, then handed to an
//! interior-point backend. Solutions are re-checked against the program before being reported
//! as optimal.

extern crate openblas_src;

mod cbf;
mod expr;
mod program;
mod solve;

pub use expr::{AffMat, LinExpr};
pub use program::{BlockInfo, BlockKind, ConicProgram, MatrixVar, PsdConstraint, ScalarVar, SymVar, VectorVar};
pub use solve::{check_residuals, solve_conic, ConicSolution, ConicStatus, DEFAULT_TOL};
