//! Exact safety verification of polynomial hybrid systems.
//!
//! The pipeline computes a polynomial barrier certificate for a hybrid
//! automaton and then *proves* it correct in exact rational arithmetic:
//!
//! 1. [`encoder`] compiles the barrier conditions into a sum-of-squares
//!    program whose unknowns appear (bi)linearly in a block-diagonal
//!    parametric matrix inequality,
//! 2. [`solver`] finds a numeric interior solution by alternating
//!    maximum-margin LMI solves over the two variable groups,
//! 3. [`refine`] drives the residual of the certificate identities below a
//!    tolerance with a factored Gauss-Newton iteration,
//! 4. [`recover`] converts the numeric solution into exact rational data
//!    (truncated `LDL^T` rationalization, simultaneous Diophantine
//!    approximation, orthogonal projection onto the exact identity
//!    hyperplane),
//! 5. [`checker`] re-verifies everything with zero tolerance: exact `LDL^T`
//!    positive-semidefiniteness checks and exact polynomial identities.
//!
//! Nothing outside [`checker`] is trusted; a verdict of `SAFE` is backed
//! entirely by rational arithmetic.

pub mod checker;
pub mod driver;
pub mod encoder;
pub mod model;
pub mod polyalg;
pub mod recover;
pub mod refine;
pub mod solver;

pub use polyalg::{Poly, Rat};
