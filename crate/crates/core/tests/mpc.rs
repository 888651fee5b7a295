use ilearn::mpc::*;
use ilearn_autodiff::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// Dense KKT solve over `z = [u_0..u_{T-1}, x_1..x_T]` with the dynamics as
/// equality constraints.
fn kkt_oracle(plant: &LinearPlant, pr: &MpcProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let (n, m, t) = (plant.n(), plant.m(), pr.horizon);
    let (a, b, q, r) = (mat(&plant.a), mat(&plant.b()), mat(&pr.q), mat(&pr.r));
    let nz = t * (m + n);
    let nc = t * n;
    let ui = |k: usize| k * m;
    let xi = |k: usize| t * m + (k - 1) * n;
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    for k in 0..t {
        h.view_mut((ui(k), ui(k)), (m, m)).copy_from(&(&r * 2.0));
        h.view_mut((xi(k + 1), xi(k + 1)), (n, n)).copy_from(&(&q * 2.0));
        let rk = DVector::from_row_slice(pr.reference[k].data());
        let mut gk = -2.0 * &q * rk;
        if let Some(l) = pr.linear.get(k) {
            gk += DVector::from_row_slice(l.data());
        }
        g.rows_mut(xi(k + 1), n).copy_from(&gk);
    }
    let mut c = DMatrix::zeros(nc, nz);
    let mut d = DVector::zeros(nc);
    let x0 = DVector::from_row_slice(pr.x0.data());
    for k in 0..t {
        let row = k * n;
        c.view_mut((row, xi(k + 1)), (n, n)).copy_from(&DMatrix::identity(n, n));
        c.view_mut((row, ui(k)), (n, m)).copy_from(&(-&b));
        if k == 0 {
            d.rows_mut(row, n).copy_from(&(&a * &x0));
        } else {
            c.view_mut((row, xi(k)), (n, n)).copy_from(&(-&a));
        }
    }
    let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
    kkt.view_mut((0, nz), (nz, nc)).copy_from(&c.transpose());
    kkt.view_mut((nz, 0), (nc, nz)).copy_from(&c);
    let mut rhs = DVector::zeros(nz + nc);
    rhs.rows_mut(0, nz).copy_from(&(-g));
    rhs.rows_mut(nz, nc).copy_from(&d);
    let sol = kkt.lu().solve(&rhs).unwrap();
    let us = (0..t).map(|k| sol.rows(ui(k), m).into_owned()).collect();
    let xs = (1..=t).map(|k| sol.rows(xi(k), n).into_owned()).collect();
    (us, xs)
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, horizon: usize) -> (LinearPlant, MpcProblem) {
    let plant = LinearPlant::chain(n, rng.gen_range(0.05..0.3), rng.gen_range(0.5..2.0)).unwrap();
    let qd: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = qd[i];
    }
    let vec = |rng: &mut ChaCha8Rng| Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let problem = MpcProblem {
        horizon,
        q: Tensor::matrix(n, n, q).unwrap(),
        r: Tensor::matrix(1, 1, vec![rng.gen_range(0.01..1.0)]).unwrap(),
        linear: (0..horizon).map(|_| vec(rng)).collect(),
        reference: (0..horizon).map(|_| vec(rng)).collect(),
        x0: vec(rng),
    };
    (plant, problem)
}

#[test]
fn riccati_matches_dense_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, horizon) in [(2, 10), (2, 20), (3, 8), (4, 10), (1, 40)] {
        let (plant, problem) = random_problem(&mut rng, n, horizon);
        let sol = lqr_solve(&plant, &problem).unwrap();
        let (us, xs) = kkt_oracle(&plant, &problem);
        for k in 0..horizon {
            for (a, b) in sol.controls[k].data().iter().zip(us[k].iter()) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "u {a} vs {b}");
            }
            for (a, b) in sol.states[k + 1].data().iter().zip(xs[k].iter()) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "x {a} vs {b}");
            }
        }
    }
}

#[test]
fn double_integrator_fixture() {
    let plant = LinearPlant::chain(2, 0.1, 1.0).unwrap();
    let problem = MpcProblem::tracking(10, Tensor::eye(2), Tensor::matrix(1, 1, vec![0.1]).unwrap(), Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.0, 0.0]));
    let sol = lqr_solve(&plant, &problem).unwrap();
    let (us, _) = kkt_oracle(&plant, &problem);
    for k in 0..10 {
        assert!((sol.controls[k].data()[0] - us[k][0]).abs() <= 1e-8);
        let next = plant.step(&sol.states[k], &sol.controls[k]).unwrap();
        assert!(next.sub(&sol.states[k + 1]).unwrap().max_abs() < 1e-12);
    }
}

fn upstream(rng: &mut ChaCha8Rng, sol: &LqrSolution) -> LqrUpstream {
    let draw = |rng: &mut ChaCha8Rng, t: &Tensor| Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    LqrUpstream {
        states: sol.states.iter().map(|t| draw(rng, t)).collect(),
        controls: sol.controls.iter().map(|t| draw(rng, t)).collect(),
    }
}

fn objective(plant: &LinearPlant, problem: &MpcProblem, up: &LqrUpstream) -> f64 {
    let sol = lqr_solve(plant, problem).unwrap();
    let dot = |a: &[Tensor], b: &[Tensor]| a.iter().zip(b).map(|(x, y)| x.dot(y).unwrap()).sum::<f64>();
    dot(&sol.states, &up.states) + dot(&sol.controls, &up.controls)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), n in 1usize..4, horizon in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plant, problem) = random_problem(&mut rng, n, horizon);
        let up = upstream(&mut rng, &lqr_solve(&plant, &problem).unwrap());
        let g = lqr_backward(&plant, &problem, &up).unwrap();
        let eps = 1e-5;
        let fd_p = (objective(&plant.clone().with_p(plant.p + eps), &problem, &up) - objective(&plant.clone().with_p(plant.p - eps), &problem, &up)) / (2.0 * eps);
        prop_assert!(rel(g.p, fd_p) <= 1e-5, "p: {} vs {}", g.p, fd_p);
        for i in 0..n {
            let shift = |d: f64| {
                let mut pr = problem.clone();
                let mut x = pr.x0.data().to_vec();
                x[i] += d;
                pr.x0 = Tensor::vector(x);
                objective(&plant, &pr, &up)
            };
            let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
            prop_assert!(rel(g.x0.data()[i], fd) <= 1e-5, "x0[{}]: {} vs {}", i, g.x0.data()[i], fd);
            let shift_q = |d: f64| {
                let mut pr = problem.clone();
                let mut q = pr.q.data().to_vec();
                q[i * n + i] += d;
                pr.q = Tensor::matrix(n, n, q).unwrap();
                objective(&plant, &pr, &up)
            };
            let fd = (shift_q(eps) - shift_q(-eps)) / (2.0 * eps);
            prop_assert!(rel(g.q.data()[i * n + i], fd) <= 1e-5, "q[{}]: {} vs {}", i, g.q.data()[i * n + i], fd);
        }
        let shift_r = |d: f64| {
            let mut pr = problem.clone();
            pr.r = Tensor::matrix(1, 1, vec![pr.r.data()[0] + d]).unwrap();
            objective(&plant, &pr, &up)
        };
        let fd = (shift_r(eps) - shift_r(-eps)) / (2.0 * eps);
        prop_assert!(rel(g.r.data()[0], fd) <= 1e-5, "r: {} vs {}", g.r.data()[0], fd);
    }

    #[test]
    fn value_matrices_are_symmetric_psd(seed in any::<u64>(), n in 1usize..5, horizon in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plant, problem) = random_problem(&mut rng, n, horizon);
        let sol = lqr_solve(&plant, &problem).unwrap();
        prop_assert_eq!(sol.value_matrices.len(), horizon + 1);
        for p in &sol.value_matrices {
            let m = mat(p);
            prop_assert!((&m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax()));
            let sym = (&m + m.transpose()) * 0.5;
            let min = sym.symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-10 * (1.0 + m.amax()), "min eigenvalue {}", min);
        }
    }
}

#[test]
fn noise_free_identity_plant_holds_state() {
    let plant = LinearPlant::new(Tensor::eye(2), Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), 1.0).unwrap();
    let x = Tensor::vector(vec![0.3, -1.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (next, meas) = simulate_step(&plant, &x, &Tensor::vector(vec![0.0]), &mut rng).unwrap();
    assert_eq!(next, x);
    assert_eq!(meas, x);
}

#[test]
fn rollouts_are_reproducible() {
    let plant = LinearPlant::chain(2, 0.1, 1.0).unwrap().with_noise(1e-4, 8.73e-2, 1e-3);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut x = Tensor::vector(vec![1.0, 0.0]);
        let mut out = Vec::new();
        for k in 0..50 {
            let (n, m) = simulate_step(&plant, &x, &Tensor::vector(vec![(k as f64).sin()]), &mut rng).unwrap();
            out.extend(m.data().iter().map(|v| v.to_bits()));
            x = n;
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn measurement_noise_std() {
    let sigma = 8.73e-2;
    let plant = LinearPlant::chain(2, 0.1, 1.0).unwrap().with_noise(0.0, sigma, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::vector(vec![0.0, 0.0]);
    let u = Tensor::vector(vec![0.0]);
    let samples: Vec<f64> = (0..100_000).map(|_| simulate_step(&plant, &x, &u, &mut rng).unwrap().1.data()[0]).collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt();
    assert!((std - sigma).abs() / sigma <= 0.03, "std {std}");
}

#[test]
fn consistent_model_learns_nothing() {
    let cfg = ImpcConfig { p_init_offset: 0.0, sigma_u: 0.0, sigma_x: 0.0, episodes: 3, ..ImpcConfig::default() };
    let out = impc_train(&cfg).unwrap();
    assert!(out.history.iter().all(|r| r.ul_loss < 1e-12));
    assert!((out.p_hat - cfg.p_true).abs() <= 1e-6);
}

#[test]
fn denoiser_alone_beats_raw_measurements() {
    let cfg = ImpcConfig { p_init_offset: 0.0, train_p: false, ..ImpcConfig::default() };
    let out = impc_train(&cfg).unwrap();
    let last = out.history.len() - 1;
    assert!(out.estimate_rmse[last] < out.measurement_rmse[last], "{} vs {}", out.estimate_rmse[last], out.measurement_rmse[last]);
    assert_eq!(out.p_hat, cfg.p_true);
}

#[test]
fn offset_model_is_recovered() {
    let cfg = ImpcConfig::default();
    let out = impc_train(&cfg).unwrap();
    assert!(out.relative_p_error(cfg.p_true) <= 0.05, "p_hat {}", out.p_hat);
    let (first, last) = (out.history[0].rmse, out.history[out.history.len() - 1].rmse);
    assert!(last <= 0.8 * first, "rmse {first} -> {last}");
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ImpcConfig { m: 2, ..ImpcConfig::default() },
        ImpcConfig { q: vec![1.0], ..ImpcConfig::default() },
        ImpcConfig { cycles: 2, ..ImpcConfig::default() },
        ImpcConfig { p_init_offset: -1.0, ..ImpcConfig::default() },
    ] {
        assert!(matches!(impc_train(&cfg), Err(ilearn::Error::Config(_))));
    }
}
