use ilearn_autodiff::{Optimizer, OptimizerKind, Tensor};

use super::hypergrad::{hypergrad_constrained, hypergrad_first_order, hypergrad_implicit, hypergrad_unrolled};
use super::linsolve::HypergradMethod;
use super::lower::solve_lower;
use super::problem::BilevelProblem;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Route {
    Unrolled,
    Implicit(HypergradMethod),
    FirstOrder,
    Constrained(HypergradMethod),
}

impl Route {
    pub fn hypergradient(&self, problem: &BilevelProblem, psi: &Tensor, phi: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Route::Unrolled => hypergrad_unrolled(problem, psi)?,
            Route::Implicit(m) => hypergrad_implicit(problem, psi, phi, m)?.grad,
            Route::FirstOrder => hypergrad_first_order(problem, psi, phi, &HypergradMethod::default())?.grad,
            Route::Constrained(m) => hypergrad_constrained(problem, psi, phi, m)?.grad,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub psi: Tensor,
    /// `U(psi_k, phi_k)` before each outer step.
    pub history: Vec<f64>,
    pub trajectory: Vec<Tensor>,
}

/// Outer loop: solve the lower level, take a hypergradient, step `psi`.
pub fn imperative_train(problem: &BilevelProblem, psi0: &Tensor, route: Route, outer: OptimizerKind, iters: usize) -> Result<TrainOutcome> {
    if iters < 1 {
        return Err(Error::Config("imperative training needs iters >= 1".into()));
    }
    let mut opt = Optimizer::new(outer);
    let mut psi = psi0.clone();
    let mut history = Vec::with_capacity(iters);
    let mut trajectory = vec![psi.clone()];
    for iteration in 0..iters {
        let abort = |history: &Vec<f64>, reason: Error| Error::Aborted { iteration, history: history.clone(), reason: Box::new(reason) };
        let step = (|| {
            let sol = solve_lower(problem, &psi, false)?;
            let u = problem.upper_value(&psi, &sol.phi)?;
            Ok::<_, Error>((sol, u))
        })();
        let (sol, u) = step.map_err(|e| abort(&history, e))?;
        if !u.is_finite() {
            return Err(abort(&history, Error::NonFinite { step: iteration, value: u }));
        }
        history.push(u);
        let g = route.hypergradient(problem, &psi, &sol.phi).map_err(|e| abort(&history, e))?;
        psi = opt.step_tensor(&psi, &g);
        trajectory.push(psi.clone());
    }
    Ok(TrainOutcome { psi, history, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blo::problem::LowerSolverConfig;
    use ilearn_autodiff::{Tape, Var};

    fn half_sq(t: &mut Tape, x: Var) -> ilearn_autodiff::Result<Var> {
        let s = t.dot(x, x)?;
        Ok(t.scale(s, 0.5))
    }

    fn problem(steps: usize) -> BilevelProblem {
        BilevelProblem::new(
            Box::new(|t, _, phi| {
                let d = t.add_scalar(phi, -1.0);
                half_sq(t, d)
            }),
            Box::new(|t, psi, phi| {
                let d = t.sub(phi, psi)?;
                half_sq(t, d)
            }),
            1,
            LowerSolverConfig::gradient_descent(steps, 1.0).with_tol(1e-10),
        )
    }

    #[test]
    fn implicit_route_converges() {
        let out = imperative_train(
            &problem(50),
            &Tensor::vector(vec![0.0]),
            Route::Implicit(HypergradMethod::default()),
            OptimizerKind::Sgd { lr: 0.5 },
            40,
        )
        .unwrap();
        assert!((out.psi.data()[0] - 1.0).abs() < 1e-4);
        assert_eq!(out.history.len(), 40);
    }

    #[test]
    fn already_optimal_stays_put() {
        let out = imperative_train(&problem(5), &Tensor::vector(vec![1.0]), Route::Implicit(HypergradMethod::default()), OptimizerKind::Sgd { lr: 0.5 }, 5).unwrap();
        assert!((out.psi.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unrolled_matches_implicit() {
        let a = imperative_train(&problem(3), &Tensor::vector(vec![0.0]), Route::Unrolled, OptimizerKind::Sgd { lr: 0.5 }, 40).unwrap();
        let b = imperative_train(
            &problem(3),
            &Tensor::vector(vec![0.0]),
            Route::Implicit(HypergradMethod::default()),
            OptimizerKind::Sgd { lr: 0.5 },
            40,
        )
        .unwrap();
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert!((x.data()[0] - y.data()[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_upper_aborts_with_history() {
        let p = BilevelProblem::new(
            Box::new(|t, psi, _| {
                let e = t.exp(psi);
                let e = t.exp(e);
                let s = t.sum(e);
                Ok(t.neg(s))
            }),
            Box::new(|t, psi, phi| {
                let d = t.sub(phi, psi)?;
                half_sq(t, d)
            }),
            1,
            LowerSolverConfig::gradient_descent(1, 1.0),
        );
        let err = imperative_train(&p, &Tensor::vector(vec![5.0]), Route::FirstOrder, OptimizerKind::Sgd { lr: 1.0 }, 10).unwrap_err();
        match err {
            Error::Aborted { history, .. } => assert!(!history.is_empty()),
            other => panic!("{other:?}"),
        }
    }
}
