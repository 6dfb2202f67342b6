//! Bundled problem instances.

pub mod cartpole;
pub mod jet;
pub mod lqr;

pub use cartpole::{cartpole_problem, Cartpole, CartpoleParams, Denominator};
pub use lqr::{lqr_problem, LqrParameterization, LqrProblem, TerminalCost};
