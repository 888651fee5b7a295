use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::grid::{Cell, GridPlanInstance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Start to goal inclusive.
    pub path: Vec<Cell>,
    pub path_cost: f64,
    /// Expanded (closed) cells, row-major.
    pub explored: Vec<bool>,
    pub explored_count: f64,
}

/// Frontier entry ordered by `(f, h, index)`, smallest first.
#[derive(Clone, Copy, Debug)]
struct Entry {
    f: f64,
    h: f64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap
        other.f.total_cmp(&self.f).then(other.h.total_cmp(&self.h)).then(other.index.cmp(&self.index))
    }
}

/// Path cost with straight and diagonal steps summed separately, so equal
/// paths give bit-identical costs regardless of summation order.
pub fn path_cost(path: &[Cell]) -> f64 {
    let mut straight = 0usize;
    let mut diagonal = 0usize;
    for w in path.windows(2) {
        let dr = w[0].0.abs_diff(w[1].0);
        let dc = w[0].1.abs_diff(w[1].1);
        if dr + dc == 2 {
            diagonal += 1;
        } else {
            straight += 1;
        }
    }
    straight as f64 + diagonal as f64 * std::f64::consts::SQRT_2
}

pub(crate) fn backtrack(inst: &GridPlanInstance, parent: &[usize], goal: usize) -> Vec<Cell> {
    let mut path = vec![inst.cell(goal)];
    let start = inst.index(inst.start());
    let mut cur = goal;
    while cur != start {
        cur = parent[cur];
        path.push(inst.cell(cur));
    }
    path.reverse();
    path
}

/// A* with node selection by `(g + h, h, index)`; closed nodes are never
/// reopened.
pub fn astar_classic(inst: &GridPlanInstance, h: &[f64]) -> Result<SearchResult> {
    if h.len() != inst.len() {
        return Err(Error::Invalid(format!("heuristic has {} values for {} cells", h.len(), inst.len())));
    }
    if h.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Invalid("heuristic must be finite and nonnegative".into()));
    }
    let n = inst.len();
    let start = inst.index(inst.start());
    let goal = inst.index(inst.goal());
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[start] = 0.0;
    heap.push(Entry { f: h[start], h: h[start], index: start });
    let mut count = 0usize;
    while let Some(Entry { index, .. }) = heap.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        count += 1;
        if index == goal {
            let path = backtrack(inst, &parent, goal);
            return Ok(SearchResult { path_cost: path_cost(&path), path, explored: closed, explored_count: count as f64 });
        }
        for (nb, step) in inst.neighbors(inst.cell(index)) {
            let j = inst.index(nb);
            if closed[j] {
                continue;
            }
            let cand = g[index] + step;
            if cand < g[j] {
                g[j] = cand;
                parent[j] = index;
                heap.push(Entry { f: cand + h[j], h: h[j], index: j });
            }
        }
    }
    Err(Error::NoPath)
}

/// Shortest 8-connected distance from `source` to every cell (infinite when
/// unreachable).
pub fn dijkstra_from(inst: &GridPlanInstance, source: Cell) -> Vec<f64> {
    let n = inst.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let s = inst.index(source);
    dist[s] = 0.0;
    heap.push(Entry { f: 0.0, h: 0.0, index: s });
    while let Some(Entry { index, .. }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        for (nb, step) in inst.neighbors(inst.cell(index)) {
            let j = inst.index(nb);
            let cand = dist[index] + step;
            if cand < dist[j] {
                dist[j] = cand;
                heap.push(Entry { f: cand, h: 0.0, index: j });
            }
        }
    }
    dist
}

/// Distances from the start.
pub fn dijkstra(inst: &GridPlanInstance) -> Vec<f64> {
    dijkstra_from(inst, inst.start())
}
