//! Martingale optimal transport and martingale Schrödinger bridges in
//! continuous time, solved through their dual Hamilton-Jacobi formulations.

pub mod error;
pub mod hamiltonian;
pub mod measures;
pub mod mot_dual;
pub mod fokker_planck;
pub mod hj_solver;
pub mod primal_oracle;
pub mod sb_dual;
pub mod svm_models;
pub mod vix;
pub mod cli;

pub use error::{Error, Result};
