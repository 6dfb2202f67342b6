//! Differentiation of constrained discrete-time optimal control problems
//! through the implicit function theorem, in time linear in the horizon.

pub mod bench;
pub mod blocks;
pub mod blocktri;
pub mod cli;
pub mod envs;
pub mod error;
pub mod forward;
pub mod idoc;
pub mod linalg;
pub mod problem;
pub mod riccati;

pub use error::{Error, Result};
