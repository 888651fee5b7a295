use std::rc::Rc;

use ilearn::blo::solve_lower;
use ilearn::pgo::*;
use ilearn_autodiff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn residual(pi: Pose2, pj: Pose2, z: Pose2) -> [f64; 3] {
    let g = PoseGraph2D::new(vec![pi, pj], vec![Edge { i: 0, j: 1, measurement: z, info: [1.0; 3] }]).unwrap();
    g.edge_residual(&g.edges[0])
}

fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(1e-12)
}

#[test]
fn residual_examples() {
    let unit = Pose2::new(1.0, 0.0, 0.0);
    assert_eq!(residual(Pose2::identity(), unit, unit), [0.0; 3]);
    assert_eq!(residual(Pose2::identity(), Pose2::new(2.0, 0.0, 0.0), unit), [1.0, 0.0, 0.0]);
}

#[test]
fn noiseless_triangle_solves_to_zero_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let truth: Vec<Pose2> = (0..3).map(|_| Pose2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0))).collect();
        let truth = [Pose2::identity(), truth[1], truth[2]];
        let edges = [(0, 1), (1, 2), (0, 2)].map(|(i, j)| Edge { i, j, measurement: truth[i].between(&truth[j]), info: [1.0, 2.0, 0.5] });
        let init: Vec<Pose2> = truth
            .iter()
            .enumerate()
            .map(|(k, p)| if k == 0 { *p } else { Pose2::new(p.x + rng.gen_range(-0.1..0.1), p.y + rng.gen_range(-0.1..0.1), p.theta + rng.gen_range(-0.1..0.1)) })
            .collect();
        let g = PoseGraph2D::new(init, edges.to_vec()).unwrap();
        let (solved, report) = gauss_newton_solve(&g, &GnConfig::default()).unwrap();
        assert!(report.cost <= 1e-16 && report.converged, "{report:?}");
        for (a, b) in solved.nodes.iter().zip(&truth) {
            assert!((a.x - b.x).abs() < 1e-8 && (a.y - b.y).abs() < 1e-8);
        }
    }
}

#[test]
fn two_nodes_solve_in_one_iteration() {
    let anchor = Pose2::new(1.0, 2.0, 0.0);
    let z = Pose2::new(0.5, -0.3, 0.0);
    let g = PoseGraph2D::new(vec![anchor, Pose2::new(-1.0, 4.0, 0.0)], vec![Edge { i: 0, j: 1, measurement: z, info: [1.0; 3] }]).unwrap();
    let (solved, report) = gauss_newton_solve(&g, &GnConfig { max_iters: 1, ..GnConfig::default() }).unwrap();
    assert_eq!(report.iterations, 1);
    let want = anchor.compose(&z);
    assert!((solved.nodes[1].x - want.x).abs() < 1e-14 && (solved.nodes[1].y - want.y).abs() < 1e-14);
    assert_eq!(solved.nodes[1].theta, 0.0);
}

fn noisy_fixture(seed: u64) -> SlamFixture {
    seeded_fixture(&SlamConfig { nodes: 10, seed, ..SlamConfig::default() }).unwrap()
}

#[test]
fn large_damping_shrinks_the_step() {
    let g = noisy_fixture(2).graph(&SyntheticFrontEnd::default()).unwrap();
    let norms: Vec<f64> = [0.0, 1.0, 1e3, 1e6, 1e12].iter().map(|l| gn_step(&g, *l).unwrap().norm()).collect();
    for w in norms.windows(2) {
        assert!(w[1] < w[0], "{norms:?}");
    }
    assert!(norms[4] < 1e-9);
}

#[test]
fn damped_steps_never_raise_the_cost() {
    let mut g = noisy_fixture(3).graph(&SyntheticFrontEnd::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in g.nodes.iter_mut().skip(1) {
        *p = Pose2::new(p.x + rng.gen_range(-1.0..1.0), p.y + rng.gen_range(-1.0..1.0), p.theta + rng.gen_range(-1.0..1.0));
    }
    let (_, report) = gauss_newton_solve(&g, &GnConfig { damping: Some(1e-2), ..GnConfig::default() }).unwrap();
    assert!(report.converged);
    for w in report.costs.windows(2) {
        assert!(w[1] <= w[0], "{:?}", report.costs);
    }
}

#[test]
fn one_step_matches_unrolled_on_20_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let fixture = Rc::new(noisy_fixture(100 + seed));
        let theta = Tensor::vector(vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.05), rng.gen_range(0.8..1.2)]);
        let fe = SyntheticFrontEnd::from_theta(&theta).unwrap();
        let (solved, report) = gauss_newton_solve(&fixture.graph(&fe).unwrap(), &GnConfig { tol: 1e-10, ..GnConfig::default() }).unwrap();
        assert!(report.converged);
        let problem = fixture.problem(1).unwrap();
        let one = one_step_hypergrad(&problem, &theta, &solved.free_params(), 1e-9).unwrap();
        let unrolled = unrolled_hypergrad(&fixture, &theta, 20).unwrap();
        let err = relative_error(&one, &unrolled);
        assert!(err <= 0.05, "seed {seed}: {err} ({one:?} vs {unrolled:?})");
    }
}

#[test]
fn one_step_rejects_unconverged_lower_level() {
    let fixture = Rc::new(noisy_fixture(5));
    let theta = SyntheticFrontEnd::default().theta();
    let problem = fixture.problem(1).unwrap();
    let dead = fixture.graph(&SyntheticFrontEnd::default()).unwrap().free_params();
    assert!(matches!(one_step_hypergrad(&problem, &theta, &dead, 1e-9), Err(ilearn::Error::NotConverged { .. })));
}

fn clean_config() -> SlamConfig {
    SlamConfig { nodes: 10, sensor_scale: 1.0, sensor_bias: [0.0; 3], odom_noise: [0.0; 3], skip_noise: [0.0; 3], ..SlamConfig::default() }
}

#[test]
fn unbiased_noiseless_front_end_has_zero_gradient() {
    let cfg = clean_config();
    let fixture = Rc::new(seeded_fixture(&cfg).unwrap());
    let theta = SyntheticFrontEnd::default().theta();
    let (solved, report) = gauss_newton_solve(&fixture.graph(&SyntheticFrontEnd::default()).unwrap(), &GnConfig::default()).unwrap();
    assert!(report.cost < 1e-24);
    let g = one_step_hypergrad(&fixture.problem(1).unwrap(), &theta, &solved.free_params(), 1e-9).unwrap();
    assert!(g.max_abs() < 1e-12, "{g:?}");
}

#[test]
fn translation_bias_gradient_points_back_to_zero() {
    let cfg = SlamConfig { turn_std: 0.0, ..clean_config() };
    let fixture = Rc::new(seeded_fixture(&cfg).unwrap());
    let problem = fixture.problem(1).unwrap();
    for b in [0.1, -0.1, 0.02] {
        let fe = SyntheticFrontEnd { bias: [b, 0.0, 0.0], scale: 1.0 };
        let (solved, _) = gauss_newton_solve(&fixture.graph(&fe).unwrap(), &GnConfig { tol: 1e-10, ..GnConfig::default() }).unwrap();
        let g = one_step_hypergrad(&problem, &fe.theta(), &solved.free_params(), 1e-9).unwrap();
        assert!(g.data()[0] * b > 0.0, "b = {b}: {g:?}");
    }
}

#[test]
fn ate_examples() {
    let gt: Vec<Pose2> = (0..5).map(|k| Pose2::new(k as f64, 0.0, 0.1 * k as f64)).collect();
    assert_eq!(ate(&gt, &gt).unwrap(), 0.0);
    let d = 0.3;
    let shifted: Vec<Pose2> = gt.iter().enumerate().map(|(k, p)| if k == 0 { *p } else { Pose2::new(p.x + d, p.y, p.theta) }).collect();
    assert!((ate(&shifted, &gt).unwrap() - d * (4.0f64 / 5.0).sqrt()).abs() < 1e-12);
    let mut one = gt.clone();
    one[3].y += 0.5;
    assert!((ate(&one, &gt).unwrap() - 0.5 / 5f64.sqrt()).abs() < 1e-12);
    assert!(ate(&gt[..3], &gt).is_err());
}

#[test]
fn training_recovers_the_front_end_bias() {
    let cfg = SlamConfig::default();
    let fixture = seeded_fixture(&cfg).unwrap();
    let out = imperative_slam_train(&fixture, &cfg, SyntheticFrontEnd::default()).unwrap();
    let (first, last) = (&out.history[0], out.history.last().unwrap());
    assert!(last.ate_frontend <= 0.8 * first.ate_frontend, "{first:?} -> {last:?}");
    for row in &out.history {
        assert!(row.ate_optimized <= row.ate_frontend, "{row:?}");
    }
}

#[test]
fn unbiased_start_stays_flat() {
    let cfg = SlamConfig { sensor_scale: 1.0, sensor_bias: [0.0; 3], iterations: 20, ..SlamConfig::default() };
    let fixture = seeded_fixture(&cfg).unwrap();
    let out = imperative_slam_train(&fixture, &cfg, SyntheticFrontEnd::default()).unwrap();
    let first = out.history[0].ate_frontend;
    for row in &out.history {
        assert!((row.ate_frontend - first).abs() <= 0.1, "{first} vs {row:?}");
    }
}

#[test]
fn graph_file_roundtrip() {
    let g = noisy_fixture(6).graph(&SyntheticFrontEnd::default()).unwrap();
    assert_eq!(PoseGraph2D::from_text(&g.to_text()).unwrap(), g);
    assert!(PoseGraph2D::from_text("NODE 0 0 0 0\nNODE 1 1 0 0\nEDGE 0 1 1 0 0 -1 1 1\n").is_err());
}

#[test]
fn tape_gauss_newton_agrees_with_values_solver() {
    let fixture = Rc::new(noisy_fixture(7));
    let theta = Tensor::vector(vec![0.05, -0.02, 0.01, 1.1]);
    let fe = SyntheticFrontEnd::from_theta(&theta).unwrap();
    let (solved, _) = gauss_newton_solve(&fixture.graph(&fe).unwrap(), &GnConfig::default()).unwrap();
    let sol = solve_lower(&fixture.problem(30).unwrap(), &theta, false).unwrap();
    assert!(sol.phi.sub(&solved.free_params()).unwrap().max_abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rigid_transform_leaves_cost_unchanged(seed in 0u64..1000, x in -5.0f64..5.0, y in -5.0f64..5.0, t in -3.0f64..3.0) {
        let g = noisy_fixture(seed).graph(&SyntheticFrontEnd::default()).unwrap();
        let tf = Pose2::new(x, y, t);
        let moved = PoseGraph2D::new(g.nodes.iter().map(|p| tf.compose(p)).collect(), g.edges.clone()).unwrap();
        let (_, a) = gauss_newton_solve(&g, &GnConfig::default()).unwrap();
        let (_, b) = gauss_newton_solve(&moved, &GnConfig::default()).unwrap();
        prop_assert!((a.cost - b.cost).abs() <= 1e-10);
    }

    #[test]
    fn consistent_edges_have_zero_residual(x in -3.0f64..3.0, y in -3.0f64..3.0, t in -3.0f64..3.0, u in -3.0f64..3.0) {
        let pi = Pose2::new(x, y, t);
        let pj = Pose2::new(y, u, t + u);
        let z = pi.between(&pj);
        let r = residual(pi, pj, z);
        prop_assert!(r.iter().all(|v| v.abs() < 1e-12));
    }
}
