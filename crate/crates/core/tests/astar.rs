use ilearn::astar::*;
use ilearn_autodiff::{Optimizer, OptimizerKind, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SQ2: f64 = std::f64::consts::SQRT_2;

/// Bellman-Ford relaxation over the 8-connected grid, counting straight and
/// diagonal steps separately so costs compare exactly.
fn oracle(inst: &GridPlanInstance) -> Vec<Option<(usize, usize)>> {
    let n = inst.len();
    let mut best: Vec<Option<(usize, usize)>> = vec![None; n];
    best[inst.index(inst.start())] = Some((0, 0));
    let cost = |p: (usize, usize)| p.0 as f64 + p.1 as f64 * SQ2;
    loop {
        let mut changed = false;
        for i in 0..n {
            let Some(bi) = best[i] else { continue };
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
                    let cand = if dr != 0 && dc != 0 { (bi.0, bi.1 + 1) } else { (bi.0 + 1, bi.1) };
                    let j = inst.index(cell);
                    if best[j].map_or(true, |b| cost(cand) < cost(b) - 1e-12) {
                        best[j] = Some(cand);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

fn oracle_cost(inst: &GridPlanInstance) -> Option<f64> {
    oracle(inst)[inst.index(inst.goal())].map(|(s, d)| s as f64 + d as f64 * SQ2)
}

fn random_map(rng: &mut ChaCha8Rng, size: usize, density: f64) -> GridPlanInstance {
    loop {
        let blocked: Vec<bool> = (0..size * size).map(|_| rng.gen_bool(density)).collect();
        let s = (rng.gen_range(0..size), rng.gen_range(0..size));
        let g = (rng.gen_range(0..size), rng.gen_range(0..size));
        let mut blocked = blocked;
        blocked[s.0 * size + s.1] = false;
        blocked[g.0 * size + g.1] = false;
        if let Ok(inst) = GridPlanInstance::new(size, size, blocked, s, g) {
            return inst;
        }
    }
}

fn check_path(inst: &GridPlanInstance, path: &[Cell]) {
    assert_eq!(path.first(), Some(&inst.start()));
    assert_eq!(path.last(), Some(&inst.goal()));
    for w in path.windows(2) {
        assert!(w[0].0.abs_diff(w[1].0) <= 1 && w[0].1.abs_diff(w[1].1) <= 1 && w[0] != w[1]);
        assert!(!inst.is_blocked(w[1]));
    }
}

#[test]
fn zero_heuristic_matches_oracle_on_200_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut solved = 0;
    for _ in 0..200 {
        let inst = random_map(&mut rng, 16, 0.3);
        match (astar_classic(&inst, &vec![0.0; inst.len()]), oracle_cost(&inst)) {
            (Ok(r), Some(c)) => {
                check_path(&inst, &r.path);
                assert_eq!(r.path_cost, c);
                solved += 1;
            }
            (Err(ilearn::Error::NoPath), None) => {}
            (r, c) => panic!("disagreement: {r:?} vs {c:?}"),
        }
    }
    assert!(solved > 100);
}

#[test]
fn euclidean_heuristic_is_admissible() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let inst = random_map(&mut rng, 16, 0.3);
        if let Some(c) = oracle_cost(&inst) {
            let r = astar_classic(&inst, &inst.euclidean_to_goal()).unwrap();
            assert_eq!(r.path_cost, c);
        }
    }
}

/// Number of distinct optimal paths, by dynamic programming over the
/// shortest-path DAG.
fn optimal_path_count(inst: &GridPlanInstance) -> usize {
    let best = oracle(inst);
    let cost = |i: usize| best[i].map(|(s, d)| s as f64 + d as f64 * SQ2);
    let mut order: Vec<usize> = (0..inst.len()).filter(|&i| best[i].is_some()).collect();
    order.sort_by(|&a, &b| cost(a).unwrap().total_cmp(&cost(b).unwrap()));
    let mut count = vec![0usize; inst.len()];
    count[inst.index(inst.start())] = 1;
    for &i in &order {
        for (nb, step) in inst.neighbors(inst.cell(i)) {
            let j = inst.index(nb);
            if let (Some(ci), Some(cj)) = (cost(i), cost(j)) {
                if (ci + step - cj).abs() < 1e-9 {
                    count[j] += count[i];
                }
            }
        }
    }
    count[inst.index(inst.goal())]
}

#[test]
fn soft_search_agrees_with_classic_on_unique_optima() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = DiffAstarConfig { temperature: 1e-3, ..DiffAstarConfig::default() };
    let mut checked = 0;
    while checked < 50 {
        let inst = random_map(&mut rng, 12, 0.35);
        if oracle_cost(&inst).is_none() || optimal_path_count(&inst) != 1 {
            continue;
        }
        let h = inst.euclidean_to_goal();
        let classic = astar_classic(&inst, &h).unwrap();
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::new(vec![12, 12], h).unwrap());
        let soft = diff_astar_forward(&mut tape, &inst, hv, &cfg).unwrap();
        let thresholded: Vec<Cell> = {
            let pm = tape.value(soft.path_map);
            (0..inst.len()).filter(|&i| pm.data()[i] > 0.5).map(|i| inst.cell(i)).collect()
        };
        let mut classic_cells = classic.path.clone();
        classic_cells.sort();
        assert_eq!(thresholded, classic_cells);
        assert!((soft.hard_cost - classic.path_cost).abs() <= 1e-9);
        assert!(!soft.flagged && soft.goal_mass >= 0.99);
        checked += 1;
    }
}

#[test]
fn ul_cost_drops_on_a_fixed_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = generate_maze(&MazeConfig::default(), &mut rng).unwrap();
    let cfg = IastarConfig { lr: 1e-3, ..IastarConfig::default() };
    let mut net = HeuristicNet::random(&cfg.net, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let costs: Vec<f64> = (0..11).map(|_| train_step(&mut net, &mut opt, &inst, &cfg).unwrap()).collect();
    for w in costs.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{costs:?}");
    }
    assert!(costs[10] < costs[0]);
}

#[test]
fn zero_weights_leave_the_net_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = generate_maze(&MazeConfig { height: 12, width: 12, ..MazeConfig::default() }, &mut rng).unwrap();
    let cfg = IastarConfig { w_a: 0.0, w_l: 0.0, ..IastarConfig::default() };
    let mut net = HeuristicNet::random(&cfg.net, &mut rng);
    let before = net.params.clone();
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let h = net.forward_on(&mut tape, &bound, &inst).unwrap();
    let r = diff_astar_forward(&mut tape, &inst, h, &cfg.search).unwrap();
    let c = ul_cost(&mut tape, &r, 0.0, 0.0).unwrap();
    let grads = net.params.gradients(&mut tape, &bound, c).unwrap();
    assert!(grads.values().all(|g| g.data().iter().all(|v| *v == 0.0)));
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    train_step(&mut net, &mut opt, &inst, &cfg).unwrap();
    assert_eq!(net.params, before);
}

#[test]
fn short_training_beats_euclidean_on_held_out_maps() {
    let mc = MazeConfig { height: 16, width: 16, ..MazeConfig::default() };
    let train = maze_set(&mc, 60, 21).unwrap();
    let held = maze_set(&mc, 20, 22).unwrap();
    let out = train_iastar(&train, &held, &IastarConfig { epochs: 1, ..IastarConfig::default() }).unwrap();
    let (exp, ok) = summarize(&evaluate(&out.net, &held).unwrap());
    assert!(exp > 0.0, "Exp {exp}");
    assert!(ok >= 0.9);
    assert_eq!(out.step_costs.len(), 60);
}

#[test]
fn map_text_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = generate_maze(&MazeConfig::default(), &mut rng).unwrap();
    assert_eq!(GridPlanInstance::from_text(&inst.to_text()).unwrap(), inst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn net_field_is_nonnegative(seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_map(&mut rng, 8, 0.2);
        let mut net = HeuristicNet::random(&HeuristicNetConfig::default(), &mut rng);
        let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-scale..scale)).collect();
        net.params.set("m2_w", Tensor::matrix(32, 1, w).unwrap()).unwrap();
        let h = net.forward(&inst).unwrap();
        prop_assert!(h.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn soft_explored_count_matches_classic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_map(&mut rng, 10, 0.25);
        prop_assume!(oracle_cost(&inst).is_some());
        let h = inst.octile_to_goal();
        let classic = astar_classic(&inst, &h).unwrap();
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::new(vec![10, 10], h).unwrap());
        let soft = diff_astar_forward(&mut tape, &inst, hv, &DiffAstarConfig::default()).unwrap();
        prop_assert_eq!(tape.item(soft.explored_count).unwrap(), classic.explored_count);
        prop_assert_eq!(soft.hard_cost, classic.path_cost);
    }
}
