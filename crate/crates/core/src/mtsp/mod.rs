//! Min-max multi-agent routing with a learned city allocation, per-agent
//! tours from nearest-neighbour plus 2-opt, and a surrogate control variate.

mod instance;
mod net;
mod train;
mod tsp;

pub use instance::{dist, MtspInstance, Point};
pub use net::{city_features, AllocationNet, SurrogateNet, ALLOC_HIDDEN, CITY_FEATURES, SUMMARY_FEATURES, SURROGATE_HIDDEN};
pub use train::{
    assignment_cost, evaluate_greedy, evaluate_sampled, evaluate_sector, imtsp_grad, imtsp_train, sector_assignment, variance_dominance, ImtspConfig, ImtspGrad,
    ImtspOutcome, ImtspRow, SurrogateObjective,
};
pub use tsp::{improving_move, minmax_cost, solve_assignment, tour_length, tsp_solve, AgentTour};
