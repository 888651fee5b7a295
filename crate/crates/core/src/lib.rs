//! Imperative learning: bilevel optimization with differentiable and
//! discrete lower levels, plus desk-scale planning, control, SLAM and
//! multi-agent routing harnesses.

pub mod astar;
pub mod blo;
pub mod discrete;
pub mod error;
pub mod mpc;
pub mod mtsp;
pub mod pgo;

pub use error::{Error, Result};
