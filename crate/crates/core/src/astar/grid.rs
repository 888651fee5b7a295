use std::fmt::Write as _;

use ilearn_autodiff::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

pub type Cell = (usize, usize);

/// 8-connected moves with their costs.
pub const MOVES: [(isize, isize, f64); 8] = [
    (-1, -1, std::f64::consts::SQRT_2),
    (-1, 0, 1.0),
    (-1, 1, std::f64::consts::SQRT_2),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (1, -1, std::f64::consts::SQRT_2),
    (1, 0, 1.0),
    (1, 1, std::f64::consts::SQRT_2),
];

/// Occupancy grid with start and goal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPlanInstance {
    height: usize,
    width: usize,
    /// Row-major, `true` for obstacles.
    blocked: Vec<bool>,
    start: Cell,
    goal: Cell,
}

impl GridPlanInstance {
    pub fn new(height: usize, width: usize, blocked: Vec<bool>, start: Cell, goal: Cell) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::Invalid(format!("grid must be at least 3x3, got {height}x{width}")));
        }
        if blocked.len() != height * width {
            return Err(Error::Invalid("occupancy size does not match the grid".into()));
        }
        let inst = GridPlanInstance { height, width, blocked, start, goal };
        for (name, c) in [("start", start), ("goal", goal)] {
            if c.0 >= height || c.1 >= width {
                return Err(Error::Invalid(format!("{name} {c:?} outside the grid")));
            }
            if inst.is_blocked(c) {
                return Err(Error::Invalid(format!("{name} {c:?} is an obstacle")));
            }
        }
        if start == goal {
            return Err(Error::Invalid("start and goal coincide".into()));
        }
        Ok(inst)
    }

    /// Empty grid.
    pub fn open(height: usize, width: usize, start: Cell, goal: Cell) -> Result<Self> {
        Self::new(height, width, vec![false; height * width], start, goal)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn index(&self, c: Cell) -> usize {
        c.0 * self.width + c.1
    }

    pub fn cell(&self, i: usize) -> Cell {
        (i / self.width, i % self.width)
    }

    pub fn is_blocked(&self, c: Cell) -> bool {
        self.blocked[self.index(c)]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
        MOVES.iter().filter_map(move |&(dr, dc, cost)| {
            let r = c.0 as isize + dr;
            let col = c.1 as isize + dc;
            if r < 0 || col < 0 || r >= self.height as isize || col >= self.width as isize {
                return None;
            }
            let n = (r as usize, col as usize);
            (!self.is_blocked(n)).then_some((n, cost))
        })
    }

    /// Free-cell indicator as an `[H, W]` tensor.
    pub fn free_map(&self) -> Tensor {
        let data = self.blocked.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("grid size")
    }

    fn one_hot(&self, c: Cell) -> Tensor {
        let mut data = vec![0.0; self.len()];
        data[self.index(c)] = 1.0;
        Tensor::new(vec![self.height, self.width], data).expect("grid size")
    }

    pub fn start_map(&self) -> Tensor {
        self.one_hot(self.start)
    }

    pub fn goal_map(&self) -> Tensor {
        self.one_hot(self.goal)
    }

    /// Map, start and goal channels stacked channels-last: `[H, W, 3]`.
    pub fn encode(&self) -> Tensor {
        let (f, s, g) = (self.free_map(), self.start_map(), self.goal_map());
        let mut data = Vec::with_capacity(self.len() * 3);
        for i in 0..self.len() {
            data.extend([f.data()[i], s.data()[i], g.data()[i]]);
        }
        Tensor::new(vec![self.height, self.width, 3], data).expect("grid size")
    }

    /// Euclidean distance from every cell to the goal.
    pub fn euclidean_to_goal(&self) -> Vec<f64> {
        let (gr, gc) = self.goal;
        (0..self.len())
            .map(|i| {
                let (r, c) = self.cell(i);
                let dr = r as f64 - gr as f64;
                let dc = c as f64 - gc as f64;
                (dr * dr + dc * dc).sqrt()
            })
            .collect()
    }

    /// Obstacle-free 8-connected distance from every cell to the goal.
    pub fn octile_to_goal(&self) -> Vec<f64> {
        let (gr, gc) = self.goal;
        (0..self.len())
            .map(|i| {
                let (r, c) = self.cell(i);
                let dr = r.abs_diff(gr) as f64;
                let dc = c.abs_diff(gc) as f64;
                dr.max(dc) + (std::f64::consts::SQRT_2 - 1.0) * dr.min(dc)
            })
            .collect()
    }

    /// Text form: `.` free, `#` obstacle, `S` start, `G` goal.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() + self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if (r, c) == self.start {
                    'S'
                } else if (r, c) == self.goal {
                    'G'
                } else if self.is_blocked((r, c)) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut blocked = Vec::with_capacity(height * width);
        let (mut start, mut goal) = (Vec::new(), Vec::new());
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Parse(format!("map row {} has {} columns, expected {width}", r + 1, line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '.' => blocked.push(false),
                    '#' => blocked.push(true),
                    'S' => {
                        start.push((r, c));
                        blocked.push(false);
                    }
                    'G' => {
                        goal.push((r, c));
                        blocked.push(false);
                    }
                    other => return Err(Error::Parse(format!("unexpected map character {other:?} at row {}, column {}", r + 1, c + 1))),
                }
            }
        }
        if start.len() != 1 || goal.len() != 1 {
            return Err(Error::Parse(format!("map needs exactly one S and one G, found {} and {}", start.len(), goal.len())));
        }
        Self::new(height, width, blocked, start[0], goal[0])
    }
}

/// Recursive-division maze walls.
fn divide(blocked: &mut [bool], width: usize, r0: usize, c0: usize, h: usize, w: usize, rng: &mut impl Rng) {
    if h < 3 || w < 3 {
        return;
    }
    let horizontal = if h == w { rng.gen_bool(0.5) } else { h > w };
    if horizontal {
        // wall on an odd offset row, passage on an even offset column
        let wr = r0 + 1 + 2 * rng.gen_range(0..(h - 1) / 2);
        let gap = c0 + 2 * rng.gen_range(0..w.div_ceil(2));
        for c in c0..c0 + w {
            if c != gap {
                blocked[wr * width + c] = true;
            }
        }
        divide(blocked, width, r0, c0, wr - r0, w, rng);
        divide(blocked, width, wr + 1, c0, r0 + h - wr - 1, w, rng);
    } else {
        let wc = c0 + 1 + 2 * rng.gen_range(0..(w - 1) / 2);
        let gap = r0 + 2 * rng.gen_range(0..h.div_ceil(2));
        for r in r0..r0 + h {
            if r != gap {
                blocked[r * width + wc] = true;
            }
        }
        divide(blocked, width, r0, c0, h, wc - c0, rng);
        divide(blocked, width, r0, wc + 1, h, c0 + w - wc - 1, rng);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MazeConfig {
    pub height: usize,
    pub width: usize,
    /// Probability of clearing each wall cell after division.
    pub perforation: f64,
    /// Minimum straight-line distance between start and goal, as a fraction
    /// of the grid diagonal.
    pub min_separation: f64,
}

impl Default for MazeConfig {
    fn default() -> Self {
        MazeConfig { height: 32, width: 32, perforation: 0.4, min_separation: 0.4 }
    }
}

/// Recursive-division maze with random perforation and a reachable
/// start/goal pair.
pub fn generate_maze(cfg: &MazeConfig, rng: &mut impl Rng) -> Result<GridPlanInstance> {
    if cfg.height < 3 || cfg.width < 3 {
        return Err(Error::Invalid("maze must be at least 3x3".into()));
    }
    if !(0.0..=1.0).contains(&cfg.perforation) || !(0.0..1.0).contains(&cfg.min_separation) {
        return Err(Error::Invalid("perforation must lie in [0, 1] and separation in [0, 1)".into()));
    }
    for _ in 0..1000 {
        let mut blocked = vec![false; cfg.height * cfg.width];
        divide(&mut blocked, cfg.width, 0, 0, cfg.height, cfg.width, rng);
        for b in blocked.iter_mut() {
            if *b && rng.gen_bool(cfg.perforation) {
                *b = false;
            }
        }
        let free: Vec<usize> = (0..blocked.len()).filter(|&i| !blocked[i]).collect();
        if free.len() < 2 {
            continue;
        }
        let diag = ((cfg.height * cfg.height + cfg.width * cfg.width) as f64).sqrt();
        for _ in 0..100 {
            let s = free[rng.gen_range(0..free.len())];
            let g = free[rng.gen_range(0..free.len())];
            let (sr, sc) = (s / cfg.width, s % cfg.width);
            let (gr, gc) = (g / cfg.width, g % cfg.width);
            let d = ((sr as f64 - gr as f64).powi(2) + (sc as f64 - gc as f64).powi(2)).sqrt();
            if s == g || d < cfg.min_separation * diag {
                continue;
            }
            let inst = GridPlanInstance::new(cfg.height, cfg.width, blocked.clone(), (sr, sc), (gr, gc))?;
            if super::search::dijkstra(&inst)[g].is_finite() {
                return Ok(inst);
            }
        }
    }
    Err(Error::Invalid("could not place a reachable start/goal pair".into()))
}

/// Debug rendering of a cell set over the map.
pub fn render_overlay(inst: &GridPlanInstance, marks: &[bool], mark: char) -> String {
    let base = inst.to_text();
    let mut out = String::new();
    for (r, line) in base.lines().enumerate() {
        for (c, ch) in line.chars().enumerate() {
            let i = r * inst.width() + c;
            let _ = write!(out, "{}", if ch == '.' && marks[i] { mark } else { ch });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_round_trip() {
        let text = "S..#\n.#..\n...G\n";
        let inst = GridPlanInstance::from_text(text).unwrap();
        assert_eq!(inst.to_text(), text);
        assert_eq!(inst.start(), (0, 0));
        assert_eq!(inst.goal(), (2, 3));
        assert!(inst.is_blocked((0, 3)));
    }

    #[test]
    fn text_errors() {
        assert!(GridPlanInstance::from_text("S..\n...\n...\n").is_err());
        assert!(GridPlanInstance::from_text("S.G\n..\n...\n").is_err());
        assert!(GridPlanInstance::from_text("S.x\n...\n..G\n").is_err());
        assert!(GridPlanInstance::from_text("SG\n..\n").is_err());
    }

    #[test]
    fn encoding_channels() {
        let inst = GridPlanInstance::from_text("S.#\n...\n..G\n").unwrap();
        let e = inst.encode();
        assert_eq!(e.shape(), &[3, 3, 3]);
        assert_eq!(e.get(&[0, 0, 1]), 1.0);
        assert_eq!(e.get(&[2, 2, 2]), 1.0);
        assert_eq!(e.get(&[0, 2, 0]), 0.0);
        assert_eq!(e.data().iter().skip(1).step_by(3).sum::<f64>(), 1.0);
    }

    #[test]
    fn mazes_are_solvable_and_deterministic() {
        let cfg = MazeConfig { height: 16, width: 16, ..MazeConfig::default() };
        for seed in 0..20 {
            let a = generate_maze(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = generate_maze(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            let text = a.to_text();
            assert_eq!(text.matches('S').count(), 1);
            assert_eq!(text.matches('G').count(), 1);
        }
    }
}
