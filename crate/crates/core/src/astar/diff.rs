//! Differentiable A*: the search runs with soft-max node selection
//! (hard argmax forward), neighbourhood expansion by the 3x3 aggregate op,
//! and exposes relaxed explored/path quantities that are differentiable in
//! the heuristic.

use ilearn_autodiff::{Tape, Tensor, Var};

use super::grid::GridPlanInstance;
use super::search::{backtrack, path_cost};
use crate::error::{Error, Result};

/// 8-neighbourhood indicator kernel.
pub const NEIGHBOR_KERNEL: [f64; 9] = [1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
const D: f64 = std::f64::consts::SQRT_2;
/// Step cost from the centre cell to each neighbour.
pub const STEP_KERNEL: [f64; 9] = [D, 1.0, D, 1.0, 0.0, 1.0, D, 1.0, D];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffAstarConfig {
    /// Selection temperature.
    pub temperature: f64,
    /// Relaxation width of the explored mask, in path-cost units.
    pub relaxation: f64,
    /// Expansion budget; zero means one per cell.
    pub max_iters: usize,
    /// Number of per-step selection distributions to keep.
    pub keep_selections: usize,
}

impl Default for DiffAstarConfig {
    fn default() -> Self {
        DiffAstarConfig { temperature: 1.0, relaxation: 2.0, max_iters: 0, keep_selections: 0 }
    }
}

/// Soft search outcome on the caller's tape.
pub struct DiffSearch {
    /// `[H, W]` explored mask: hard closed set forward, sigmoid relaxation
    /// of `f < C*` backward.
    pub explored: Var,
    /// Sum of `explored`.
    pub explored_count: Var,
    /// `[H, W]` path indicator with the same straight-through relaxation.
    pub path_map: Var,
    /// Hard path cost forward; backward, the gradient of the smoothed amount
    /// by which `g + h` on the path exceeds the path cost.
    pub path_cost: Var,
    /// Hard path (empty when flagged).
    pub path: Vec<(usize, usize)>,
    pub hard_cost: f64,
    pub expansions: usize,
    /// Selection mass accumulated on the goal.
    pub goal_mass: f64,
    /// Budget ran out before the goal was selected.
    pub flagged: bool,
    /// Softmax selection distributions of the first steps.
    pub selections: Vec<Tensor>,
    /// Search `g` values (infinite where never reached).
    pub g: Vec<f64>,
}

fn aggregate(x: &[f64], h: usize, w: usize, kernel: [f64; 9]) -> Vec<f64> {
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![h, w], x.to_vec()).expect("grid"));
    let a = t.aggregate(v, kernel).expect("rank-2 input");
    t.value(a).data().to_vec()
}

/// Masked softmax of `-f / tau` over the open set.
fn selection(f: &[f64], open: &[bool], tau: f64) -> Vec<f64> {
    let m = f.iter().zip(open).filter(|(_, &o)| o).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = f.iter().zip(open).map(|(v, &o)| if o { (-(v - m) / tau).exp() } else { 0.0 }).collect();
    let z: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= z;
    }
    p
}

/// Runs the search with heuristic `h` (an `[H, W]` variable on `tape`).
pub fn diff_astar_forward(tape: &mut Tape, inst: &GridPlanInstance, h: Var, cfg: &DiffAstarConfig) -> Result<DiffSearch> {
    if !(cfg.temperature > 0.0) || !(cfg.relaxation > 0.0) {
        return Err(Error::Invalid("temperature and relaxation must be > 0".into()));
    }
    let (rows, cols) = (inst.height(), inst.width());
    if tape.shape(h) != [rows, cols] {
        return Err(Error::Invalid(format!("heuristic shape {:?} does not match the {rows}x{cols} grid", tape.shape(h))));
    }
    let hv = tape.value(h).data().to_vec();
    if hv.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Invalid("heuristic must be finite and nonnegative".into()));
    }
    let n = inst.len();
    let budget = if cfg.max_iters == 0 { n } else { cfg.max_iters };
    let free: Vec<f64> = inst.blocked().iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let start = inst.index(inst.start());
    let goal = inst.index(inst.goal());

    let mut g = vec![f64::INFINITY; n];
    let mut open = vec![false; n];
    let mut closed = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    g[start] = 0.0;
    open[start] = true;
    let mut selections = Vec::new();
    let mut goal_mass = 0.0;
    let mut expansions = 0;
    let mut reached_goal = false;

    while expansions < budget && open.iter().any(|&o| o) {
        let f: Vec<f64> = (0..n).map(|i| if open[i] { g[i] + hv[i] } else { f64::INFINITY }).collect();
        let probs = selection(&f, &open, cfg.temperature);
        if selections.len() < cfg.keep_selections {
            selections.push(Tensor::new(vec![rows, cols], probs.clone())?);
        }
        // hard choice: smallest f, then smallest h, then smallest index
        let sel = (0..n)
            .filter(|&i| open[i])
            .min_by(|&a, &b| f[a].total_cmp(&f[b]).then(hv[a].total_cmp(&hv[b])).then(a.cmp(&b)))
            .expect("non-empty open set");
        expansions += 1;
        open[sel] = false;
        closed[sel] = true;
        if sel == goal {
            goal_mass = 1.0;
            reached_goal = true;
            break;
        }
        let mut onehot = vec![0.0; n];
        onehot[sel] = 1.0;
        let nbr = aggregate(&onehot, rows, cols, NEIGHBOR_KERNEL);
        let step = aggregate(&onehot, rows, cols, STEP_KERNEL);
        for j in 0..n {
            if nbr[j] * free[j] == 0.0 || closed[j] {
                continue;
            }
            let cand = g[sel] + step[j];
            if cand < g[j] {
                g[j] = cand;
                parent[j] = sel;
                open[j] = true;
            }
        }
    }

    let (path, hard_cost, c_star) = if reached_goal {
        let path = backtrack(inst, &parent, goal);
        let cost = path_cost(&path);
        (path, cost, g[goal])
    } else {
        // partial: relax against the best frontier estimate
        let best = (0..n).filter(|&i| open[i]).map(|i| g[i] + hv[i]).fold(f64::INFINITY, f64::min);
        (Vec::new(), f64::INFINITY, if best.is_finite() { best } else { 0.0 })
    };

    let tau = cfg.relaxation;
    let g_known: Vec<f64> = g.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let reached: Vec<f64> = g.iter().map(|v| if v.is_finite() { 1.0 } else { 0.0 }).collect();
    let hard_closed = Tensor::new(vec![rows, cols], closed.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())?;
    let mut path_mask = vec![0.0; n];
    for c in &path {
        path_mask[inst.index(*c)] = 1.0;
    }
    let path_mask = Tensor::new(vec![rows, cols], path_mask)?;

    // margin = (C* - g - h) / tau
    let gc = tape.constant(Tensor::new(vec![rows, cols], g_known)?);
    let f = tape.add(gc, h)?;
    let margin = tape.affine(f, -1.0 / tau, c_star / tau);
    let soft = tape.sigmoid(margin);
    let reached = tape.constant(Tensor::new(vec![rows, cols], reached)?);
    let soft = tape.mul(soft, reached)?;
    let explored = straight_through(tape, &hard_closed, soft)?;
    let explored_count = tape.sum(explored);
    let pm = tape.constant(path_mask.clone());
    let soft_path = tape.mul(soft, pm)?;
    let path_map = straight_through(tape, &path_mask, soft_path)?;

    let over = tape.neg(margin);
    let over = tape.softplus(over);
    let over = tape.mul(over, pm)?;
    let over = tape.sum(over);
    let over = tape.scale(over, tau);
    let base = Tensor::scalar(if hard_cost.is_finite() { hard_cost } else { c_star });
    let path_cost_var = straight_through(tape, &base, over)?;

    Ok(DiffSearch {
        explored,
        explored_count,
        path_map,
        path_cost: path_cost_var,
        path,
        hard_cost,
        expansions,
        goal_mass,
        flagged: !reached_goal,
        selections,
        g,
    })
}

/// `hard + soft - detach(soft)`.
fn straight_through(tape: &mut Tape, hard: &Tensor, soft: Var) -> Result<Var> {
    let hc = tape.constant(hard.clone());
    let ds = tape.detach(soft);
    let a = tape.add(hc, soft)?;
    Ok(tape.sub(a, ds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::astar::search::astar_classic;

    fn run(inst: &GridPlanInstance, h: &[f64], cfg: &DiffAstarConfig) -> (Tape, DiffSearch) {
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::new(vec![inst.height(), inst.width()], h.to_vec()).unwrap());
        let r = diff_astar_forward(&mut tape, inst, hv, cfg).unwrap();
        (tape, r)
    }

    #[test]
    fn matches_classic_on_open_grid() {
        let inst = GridPlanInstance::open(3, 3, (0, 0), (2, 2)).unwrap();
        let cfg = DiffAstarConfig { temperature: 1e-3, ..DiffAstarConfig::default() };
        let (tape, r) = run(&inst, &[0.0; 9], &cfg);
        let classic = astar_classic(&inst, &[0.0; 9]).unwrap();
        assert_eq!(r.path, classic.path);
        assert_eq!(r.hard_cost, classic.path_cost);
        assert_eq!(tape.item(r.explored_count).unwrap(), classic.explored_count);
        let pm = tape.value(r.path_map);
        for (i, v) in pm.data().iter().enumerate() {
            assert_eq!(*v > 0.5, classic.path.contains(&inst.cell(i)));
        }
    }

    #[test]
    fn first_selection_spreads_with_temperature() {
        let inst = GridPlanInstance::open(5, 5, (2, 2), (0, 0)).unwrap();
        let cfg = DiffAstarConfig { temperature: 1e9, keep_selections: 2, ..DiffAstarConfig::default() };
        let (_, r) = run(&inst, &inst.euclidean_to_goal(), &cfg);
        assert_eq!(r.selections[0].data()[inst.index((2, 2))], 1.0);
        let second = &r.selections[1];
        for (i, p) in second.data().iter().enumerate() {
            let (rr, cc) = inst.cell(i);
            let is_nbr = rr.abs_diff(2) <= 1 && cc.abs_diff(2) <= 1 && (rr, cc) != (2, 2);
            assert!((p - if is_nbr { 0.125 } else { 0.0 }).abs() < 1e-9);
        }
    }

    #[test]
    fn corridor_field_explores_only_the_path() {
        let inst = GridPlanInstance::open(6, 8, (0, 0), (5, 7)).unwrap();
        let exact = crate::astar::search::dijkstra_from(&inst, inst.goal());
        let classic = astar_classic(&inst, &exact).unwrap();
        let h: Vec<f64> = (0..inst.len()).map(|i| if classic.path.contains(&inst.cell(i)) { exact[i] } else { 1e3 }).collect();
        let (tape, r) = run(&inst, &h, &DiffAstarConfig::default());
        assert_eq!(tape.item(r.explored_count).unwrap(), r.path.len() as f64);
    }

    #[test]
    fn budget_exhaustion_flags() {
        let inst = GridPlanInstance::open(6, 6, (0, 0), (5, 5)).unwrap();
        let cfg = DiffAstarConfig { max_iters: 3, ..DiffAstarConfig::default() };
        let (_, r) = run(&inst, &[0.0; 36], &cfg);
        assert!(r.flagged && r.path.is_empty() && r.goal_mass < 0.99);
    }

    #[test]
    fn explored_gradient_raises_heuristic() {
        let inst = GridPlanInstance::open(8, 8, (0, 0), (7, 5)).unwrap();
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::new(vec![8, 8], inst.euclidean_to_goal()).unwrap());
        let r = diff_astar_forward(&mut tape, &inst, hv, &DiffAstarConfig::default()).unwrap();
        let g = tape.grad(r.explored_count, &[hv]).unwrap().remove(0);
        assert!(g.data().iter().all(|v| *v <= 0.0));
        assert!(g.data().iter().any(|v| *v < 0.0));
    }
}
