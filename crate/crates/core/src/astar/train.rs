use std::time::Instant;

use ilearn_autodiff::{Optimizer, OptimizerKind, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::diff::{diff_astar_forward, DiffAstarConfig, DiffSearch};
use super::grid::{generate_maze, GridPlanInstance, MazeConfig};
use super::net::{HeuristicNet, HeuristicNetConfig};
use super::search::{astar_classic, dijkstra};
use crate::error::{Error, Result};

/// `w_a * C_a + w_l * C_l` on the result's tape.
pub fn ul_cost(tape: &mut Tape, result: &DiffSearch, w_a: f64, w_l: f64) -> Result<Var> {
    let a = tape.scale(result.explored_count, w_a);
    let l = tape.scale(result.path_cost, w_l);
    Ok(tape.add(a, l)?)
}

/// Percent reductions in explored nodes and time against a baseline.
pub fn metric_exp_rt(s_base: f64, s: f64, t_base: f64, t: f64) -> Result<(f64, f64)> {
    if !(s_base > 0.0) || !(t_base > 0.0) {
        return Err(Error::Invalid(format!("baselines must be positive (explored {s_base}, time {t_base})")));
    }
    Ok((100.0 * (s_base - s) / s_base, 100.0 * (t_base - t) / t_base))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IastarConfig {
    pub epochs: usize,
    pub w_a: f64,
    pub w_l: f64,
    pub lr: f64,
    pub search: DiffAstarConfig,
    pub net: HeuristicNetConfig,
    pub seed: u64,
}

impl Default for IastarConfig {
    fn default() -> Self {
        IastarConfig {
            epochs: 2,
            w_a: 1.0,
            w_l: 1.0,
            lr: 1e-2,
            search: DiffAstarConfig::default(),
            net: HeuristicNetConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub ul_cost: f64,
    pub exp_pct: f64,
    pub within_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapMetrics {
    pub map_id: usize,
    pub exp_pct: f64,
    pub rt_pct: f64,
    pub cost_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct IastarOutcome {
    pub net: HeuristicNet,
    pub history: Vec<EpochRow>,
    /// UL cost after every step.
    pub step_costs: Vec<f64>,
}

/// Maps from a seeded generator.
pub fn maze_set(cfg: &MazeConfig, count: usize, seed: u64) -> Result<Vec<GridPlanInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_maze(cfg, &mut rng)).collect()
}

/// One imperative step on `inst`; returns the UL cost before the update.
pub fn train_step(net: &mut HeuristicNet, opt: &mut Optimizer, inst: &GridPlanInstance, cfg: &IastarConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let h = net.forward_on(&mut tape, &bound, inst)?;
    let result = diff_astar_forward(&mut tape, inst, h, &cfg.search)?;
    let cost = ul_cost(&mut tape, &result, cfg.w_a, cfg.w_l)?;
    let value = tape.item(cost)?;
    let grads = net.params.gradients(&mut tape, &bound, cost)?;
    opt.step(&mut net.params, &grads)?;
    Ok(value)
}

/// Trains the heuristic net, one map per step, evaluating on `heldout`
/// after every epoch.
pub fn train_iastar(train: &[GridPlanInstance], heldout: &[GridPlanInstance], cfg: &IastarConfig) -> Result<IastarOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("no training maps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = HeuristicNet::random(&cfg.net, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_costs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for inst in train {
            let c = train_step(&mut net, &mut opt, inst, cfg)?;
            if !c.is_finite() {
                return Err(Error::NonFinite { step: step_costs.len(), value: c });
            }
            total += c;
            step_costs.push(c);
        }
        let (exp_pct, within_bound) = if heldout.is_empty() {
            (0.0, 0.0)
        } else {
            let m = evaluate(&net, heldout)?;
            summarize(&m)
        };
        history.push(EpochRow { epoch, ul_cost: total / train.len() as f64, exp_pct, within_bound });
    }
    Ok(IastarOutcome { net, history, step_costs })
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed().as_secs_f64().max(1e-9))
}

/// Hard A* guided by the learned field versus the Euclidean heuristic.
/// Timings cover the search only.
pub fn evaluate(net: &HeuristicNet, maps: &[GridPlanInstance]) -> Result<Vec<MapMetrics>> {
    maps.iter()
        .enumerate()
        .map(|(map_id, inst)| {
            let learned = net.forward(inst)?;
            let euclid = inst.euclidean_to_goal();
            let (base, t_base) = timed(|| astar_classic(inst, &euclid));
            let (ours, t) = timed(|| astar_classic(inst, &learned));
            let (base, ours) = (base?, ours?);
            let (exp_pct, rt_pct) = metric_exp_rt(base.explored_count, ours.explored_count, t_base, t)?;
            let optimal = dijkstra(inst)[inst.index(inst.goal())];
            Ok(MapMetrics { map_id, exp_pct, rt_pct, cost_ratio: ours.path_cost / optimal })
        })
        .collect()
}

/// Mean Exp and the fraction of maps with cost ratio at most 1.05.
pub fn summarize(metrics: &[MapMetrics]) -> (f64, f64) {
    let n = metrics.len().max(1) as f64;
    let exp = metrics.iter().map(|m| m.exp_pct).sum::<f64>() / n;
    let ok = metrics.iter().filter(|m| m.cost_ratio <= 1.05).count() as f64 / n;
    (exp, ok)
}
