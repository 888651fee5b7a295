//! Planar pose-graph optimization with a learnable odometry front-end.

mod graph;
mod se2;
mod solve;
mod train;

pub use graph::{pose_vars, residual_vector, Edge, PoseGraph2D};
pub use se2::{relative_residual, wrap, Pose2, PoseVars};
pub use solve::{gauss_newton_solve, gn_step, GnConfig, GnReport};
pub use train::{
    ate, generate_fixture, imperative_slam_train, one_step_hypergrad, seeded_fixture, unrolled_hypergrad, SlamConfig, SlamFixture, SlamOutcome,
    SlamRow, SyntheticFrontEnd, THETA_DIM,
};
