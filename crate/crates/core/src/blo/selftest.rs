use ilearn_autodiff::{Tape, Tensor, Var};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::hypergrad::{hypergrad_constrained, hypergrad_first_order, hypergrad_implicit, hypergrad_unrolled};
use super::linsolve::HypergradMethod;
use super::lower::solve_lower;
use super::problem::{BilevelProblem, ConstraintKind, LowerSolverConfig};
use super::quadratic::{relative_error, QuadraticBilevel};
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct SelftestCase {
    pub name: String,
    pub analytic: Vec<f64>,
    pub computed: Vec<f64>,
    pub relative_error: f64,
    pub tolerance: f64,
    pub cg_iterations: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub cases: Vec<SelftestCase>,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn case(name: impl Into<String>, analytic: Vec<f64>, computed: &Tensor, tolerance: f64, cg_iterations: usize) -> SelftestCase {
    let relative_error = relative_error(computed.data(), &analytic, 1e-12);
    SelftestCase {
        name: name.into(),
        computed: computed.data().to_vec(),
        passed: relative_error <= tolerance,
        analytic,
        relative_error,
        tolerance,
        cg_iterations,
    }
}

fn half_sq(t: &mut Tape, x: Var) -> ilearn_autodiff::Result<Var> {
    let s = t.dot(x, x)?;
    Ok(t.scale(s, 0.5))
}

fn tracking(k: f64, cfg: LowerSolverConfig) -> BilevelProblem {
    BilevelProblem::new(
        Box::new(|t, _, phi| half_sq(t, phi)),
        Box::new(move |t, psi, phi| {
            let kp = t.scale(psi, k);
            let d = t.sub(phi, kp)?;
            half_sq(t, d)
        }),
        1,
        cfg,
    )
}

/// Runs the hand-derived examples plus `random` seeded quadratic problems.
pub fn run_selftest(seed: u64, random: usize) -> Result<SelftestReport> {
    let method = HypergradMethod::default();
    let mut cases = Vec::new();

    let psi = Tensor::vector(vec![1.5]);
    let p = tracking(1.0, LowerSolverConfig::gradient_descent(1, 1.0));
    cases.push(case("unrolled/one-step", vec![1.5], &hypergrad_unrolled(&p, &psi)?, 1e-12, 0));
    let p = tracking(2.0, LowerSolverConfig::gradient_descent(30, 0.5));
    cases.push(case("unrolled/scaled-tracking", vec![6.0], &hypergrad_unrolled(&p, &psi)?, 1e-6, 0));

    let p = tracking(1.0, LowerSolverConfig::gradient_descent(100, 0.5));
    let sol = solve_lower(&p, &psi, false)?;
    let h = hypergrad_implicit(&p, &psi, &sol.phi, &method)?;
    cases.push(case("implicit/tracking", vec![1.5], &h.grad, 1e-8, h.cg_iterations));

    let diag = BilevelProblem::new(
        Box::new(|t, _, phi| Ok(t.sum(phi))),
        Box::new(|t, psi, phi| {
            let a = t.constant(Tensor::vector(vec![2.0, 4.0]));
            let ap = t.mul(a, phi)?;
            let quad = t.dot(phi, ap)?;
            let quad = t.scale(quad, 0.5);
            let lin = t.dot(psi, phi)?;
            t.sub(quad, lin)
        }),
        2,
        LowerSolverConfig::gradient_descent(200, 0.4).with_tol(1e-10),
    );
    let psi2 = Tensor::vector(vec![1.0, -2.0]);
    let sol = solve_lower(&diag, &psi2, false)?;
    let h = hypergrad_implicit(&diag, &psi2, &sol.phi, &method)?;
    cases.push(case("implicit/diagonal", vec![0.5, 0.25], &h.grad, 1e-8, h.cg_iterations));

    let fo = BilevelProblem::new(
        Box::new(|t, psi, phi| {
            let a = half_sq(t, phi)?;
            let b = half_sq(t, psi)?;
            t.add(a, b)
        }),
        Box::new(|t, psi, phi| {
            let d = t.sub(phi, psi)?;
            half_sq(t, d)
        }),
        1,
        LowerSolverConfig::gradient_descent(1, 1.0),
    );
    let g = hypergrad_first_order(&fo, &psi, &psi, &method)?;
    cases.push(case("first-order/dropped-term", vec![1.5], &g.grad, 1e-12, 0));
    let err = Tensor::vector(vec![g.error_estimate.unwrap_or(f64::NAN)]);
    cases.push(case("first-order/error-estimate", vec![1.5], &err, 1e-10, 0));

    let sum_con = BilevelProblem::new(Box::new(|t, _, phi| t.dot(phi, phi)), Box::new(|t, _, phi| half_sq(t, phi)), 2, LowerSolverConfig::closed_form())
        .with_constraint(
            ConstraintKind::Equality,
            Box::new(|t, psi, phi| {
                let s = t.sum(phi);
                let p = t.sum(psi);
                t.sub(s, p)
            }),
        );
    let h = hypergrad_constrained(&sum_con, &psi, &Tensor::vector(vec![0.75, 0.75]), &method)?;
    cases.push(case("constrained/sum", vec![1.5], &h.grad, 1e-10, h.cg_iterations));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..random {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=8);
        let q = QuadraticBilevel::random(&mut rng, n, m);
        let psi_v = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let psi = Tensor::vector(psi_v.as_slice().to_vec());
        let exact = q.analytic_hypergradient(&psi_v)?;
        let (phi, _) = q.solve(&psi_v)?;
        let p = q.problem(LowerSolverConfig::closed_form().with_tol(1e-8));
        let h = hypergrad_implicit(&p, &psi, &Tensor::vector(phi.as_slice().to_vec()), &method)?;
        cases.push(case(format!("random-{i}/implicit"), exact.as_slice().to_vec(), &h.grad, 1e-6, h.cg_iterations));

        let scale = q.lower_rhs_norm(&psi_v);
        let (eta, steps) = q.gradient_descent_schedule(scale, 1e-9);
        let p = q.problem(LowerSolverConfig::gradient_descent(steps, eta));
        cases.push(case(format!("random-{i}/unrolled"), exact.as_slice().to_vec(), &hypergrad_unrolled(&p, &psi)?, 1e-5, 0));

        let qc = q.with_random_constraint(&mut rng);
        let exact = qc.analytic_hypergradient(&psi_v)?;
        let (phi, _) = qc.solve(&psi_v)?;
        let p = qc.problem(LowerSolverConfig::closed_form().with_tol(1e-8));
        let h = hypergrad_constrained(&p, &psi, &Tensor::vector(phi.as_slice().to_vec()), &method)?;
        cases.push(case(format!("random-{i}/constrained"), exact.as_slice().to_vec(), &h.grad, 1e-6, h.cg_iterations));
    }

    let max_relative_error = cases.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let passed = cases.iter().all(|c| c.passed);
    Ok(SelftestReport { cases, max_relative_error, passed })
}
