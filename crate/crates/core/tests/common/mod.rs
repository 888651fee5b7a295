//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod discrete_toys;
pub mod grid_oracle;
pub mod hvp_oracle;
