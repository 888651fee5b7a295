mod diff;
mod grid;
mod net;
mod search;
mod train;

pub use diff::{diff_astar_forward, DiffAstarConfig, DiffSearch, NEIGHBOR_KERNEL, STEP_KERNEL};
pub use grid::{generate_maze, render_overlay, Cell, GridPlanInstance, MazeConfig, MOVES};
pub use net::{features, HeuristicNet, HeuristicNetConfig, FEATURES, SKIP_FEATURES};
pub use search::{astar_classic, dijkstra, dijkstra_from, path_cost, SearchResult};
pub use train::{evaluate, maze_set, metric_exp_rt, summarize, train_iastar, train_step, ul_cost, EpochRow, IastarConfig, IastarOutcome, MapMetrics};
