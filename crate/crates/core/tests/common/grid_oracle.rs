use ilearn::astar::GridPlanInstance;

/// Shortest 8-connected path cost by repeated relaxation.
pub fn shortest_cost(inst: &GridPlanInstance) -> Option<f64> {
    let n = inst.len();
    let mut best = vec![f64::INFINITY; n];
    best[inst.index(inst.start())] = 0.0;
    loop {
        let mut changed = false;
        for i in 0..n {
            if !best[i].is_finite() {
                continue;
            }
            let (r, c) = inst.cell(i);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= inst.height() as i64 || nc >= inst.width() as i64 {
                        continue;
                    }
                    let cell = (nr as usize, nc as usize);
                    if inst.is_blocked(cell) {
                        continue;
                    }
                    let step = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                    let j = inst.index(cell);
                    if best[i] + step < best[j] - 1e-12 {
                        best[j] = best[i] + step;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            let g = best[inst.index(inst.goal())];
            return g.is_finite().then_some(g);
        }
    }
}
