//! Exact desk-scale primal solvers used to certify dual values.

pub mod entropy;
pub mod mot;
pub mod simplex;
pub mod tree;

pub use mot::{solve_discrete_mot, DiscreteMotInstance, DiscreteMotResult};
pub use simplex::{LinearProgram, LpSolution};
