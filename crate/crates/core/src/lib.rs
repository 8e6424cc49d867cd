//! Tabular Q-learning with heuristic Q-value guidance, plus the exact
//! solvers and numerical checks used to verify it.

pub mod analysis;
pub mod envs;
pub mod error;
pub mod heuristics;
pub mod mdp;
pub mod oracle;
pub mod qlearn;
pub mod runlog;

pub use error::{Error, Result};
