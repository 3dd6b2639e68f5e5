//! Differentiable dense-array engine.

mod array;
mod conv;
mod linalg;
mod tape;

pub use array::Array;
pub use linalg::{jacobi_eigh, SymEigen};
pub use tape::{Gradients, Tape, Var, DEGENERATE_GAP, SYMMETRY_TOL};

