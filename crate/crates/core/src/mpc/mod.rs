mod denoiser;
mod lqr;
mod metrics;
mod plant;
mod train;

pub use denoiser::DenoiserNet;
pub use lqr::{bind_problem, lqr_backward, lqr_on_tape, lqr_solve, LqrGradients, LqrInputs, LqrSolution, LqrUpstream, LqrVars, MpcProblem};
pub use metrics::{control_metrics, ControlMetrics};
pub use plant::{simulate_step, LinearPlant};
pub use train::{impc_train, EpisodeRow, ImpcConfig, ImpcOutcome};
