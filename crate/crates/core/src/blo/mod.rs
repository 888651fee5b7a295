//! Bilevel optimization: lower-level solvers and hypergradient routes.

mod hypergrad;
mod linsolve;
mod lower;
mod problem;
pub mod quadratic;
mod selftest;
mod train;

pub use hypergrad::{hypergrad_constrained, hypergrad_first_order, hypergrad_implicit, hypergrad_unrolled, FirstOrder, Hypergradient, CONSTRAINT_TOL};
pub use linsolve::{solve as solve_linear, HypergradMethod, LinearSolver, SolveReport};
pub use lower::{solve_lower, LowerSolution};
pub use problem::{BilevelProblem, ClosedFormFn, Constraint, ConstraintKind, CostFn, InitFn, LowerSolverConfig, LowerSolverKind};
pub use selftest::{run_selftest, SelftestCase, SelftestReport};
pub use train::{imperative_train, Route, TrainOutcome};
