//! Hypergradient routes: unrolled, implicit, first-order and constrained.

use ilearn_autodiff::{Tape, Tensor, Var};

use super::linsolve::{solve, HypergradMethod, SolveReport};
use super::lower::lower_step;
use super::problem::{BilevelProblem, ConstraintKind, LowerSolverKind};
use crate::error::{Error, Result};

/// Hypergradient with the diagnostics of the linear solves behind it.
#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grad: Tensor,
    /// Last linear solve (absent for routes that need none).
    pub solve: Option<SolveReport>,
    /// Total operator applications across all linear solves.
    pub cg_iterations: usize,
    /// Constraint multiplier `lambda` with `dL/dphi = lambda dxi/dphi`.
    pub multiplier: Option<f64>,
    /// True when the constrained route fell back to the unconstrained one.
    pub inactive: bool,
}

impl Hypergradient {
    /// A linear solve missed its residual target.
    pub fn flagged(&self) -> bool {
        self.solve.is_some_and(|s| !s.converged)
    }
}

#[derive(Clone, Debug)]
pub struct FirstOrder {
    pub grad: Tensor,
    /// Magnitude of the dropped implicit term `|q^T H_phipsi|`, available
    /// when the lower level is stationary at the given iterate.
    pub error_estimate: Option<f64>,
}

/// Differentiates `U(psi, Phi_T(psi))` through every lower-level step.
pub fn hypergrad_unrolled(problem: &BilevelProblem, psi: &Tensor) -> Result<Tensor> {
    let cfg = problem.lower_solver;
    cfg.validate()?;
    let mut tape = Tape::new();
    let p = tape.leaf(psi.clone());
    let phi = if cfg.kind == LowerSolverKind::ClosedForm {
        let solution = problem.closed_form.as_ref().ok_or(Error::Missing("closed-form lower solution"))?;
        solution(&mut tape, p)?
    } else {
        let mut phi = tape.constant((problem.init)(psi));
        let mut adam = None;
        for step in 1..=cfg.steps {
            let out = lower_step(&mut tape, problem, p, phi, &mut adam, step, true)?;
            if !out.cost.is_finite() {
                return Err(Error::NonFinite { step: step - 1, value: out.cost });
            }
            phi = out.next;
        }
        phi
    };
    let u = (problem.upper)(&mut tape, p, phi)?;
    let value = tape.item(u)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { step: cfg.steps, value });
    }
    Ok(tape.grad(u, &[p])?.remove(0))
}

fn check_stationary(problem: &BilevelProblem, psi: &Tensor, phi: &Tensor) -> Result<()> {
    let grad_norm = problem.lower_gradient(psi, phi)?.norm();
    let tol = problem.lower_solver.tol;
    if !(grad_norm <= tol) {
        return Err(Error::NotConverged { grad_norm, tol });
    }
    Ok(())
}

/// Partial derivatives of the upper cost at a fixed point.
fn upper_partials(problem: &BilevelProblem, psi: &Tensor, phi: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.leaf(psi.clone());
    let f = tape.leaf(phi.clone());
    let u = (problem.upper)(&mut tape, p, f)?;
    let mut g = tape.grad(u, &[p, f])?;
    let du_dphi = g.pop().expect("two gradients");
    Ok((g.pop().expect("two gradients"), du_dphi))
}

/// Tape holding a recorded `d(cost)/dphi` so both `H v` and
/// `(d/dpsi) <grad, y>` are available.
struct Curvature {
    tape: Tape,
    psi: Var,
    phi: Var,
    grad: Var,
}

impl Curvature {
    fn of_lower(problem: &BilevelProblem, psi: &Tensor, phi: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let p = tape.leaf(psi.clone());
        let f = tape.leaf(phi.clone());
        let l = (problem.lower)(&mut tape, p, f)?;
        let grad = tape.gradient(l, &[f], true)?[0];
        Ok(Curvature { tape, psi: p, phi: f, grad })
    }

    fn hessian_vector(&mut self, v: &Tensor) -> Result<Tensor> {
        Ok(self.tape.hvp_from_grad(self.grad, self.phi, v)?)
    }

    /// `(d^2 cost / dphi dpsi)^T y`.
    fn mixed_transpose(&mut self, y: &Tensor) -> Result<Tensor> {
        let t = &mut self.tape;
        let yc = t.constant(y.clone());
        let inner = t.dot(self.grad, yc)?;
        Ok(t.grad(inner, &[self.psi])?.remove(0))
    }

    fn solve(&mut self, rhs: &Tensor, method: &HypergradMethod) -> Result<(Tensor, SolveReport)> {
        let mut apply = |v: &Tensor| self.hessian_vector(v);
        solve(&mut apply, rhs, method)
    }
}

/// Implicit-function hypergradient `dU/dpsi - q^T H_phipsi` with `H q = dU/dphi`.
pub fn hypergrad_implicit(problem: &BilevelProblem, psi: &Tensor, phi_star: &Tensor, method: &HypergradMethod) -> Result<Hypergradient> {
    method.validate()?;
    check_stationary(problem, psi, phi_star)?;
    let (du_dpsi, du_dphi) = upper_partials(problem, psi, phi_star)?;
    let mut curv = Curvature::of_lower(problem, psi, phi_star)?;
    let (q, report) = curv.solve(&du_dphi, method)?;
    let correction = curv.mixed_transpose(&q)?;
    Ok(Hypergradient {
        grad: du_dpsi.sub(&correction)?,
        solve: Some(report),
        cg_iterations: report.iterations,
        multiplier: None,
        inactive: false,
    })
}

/// `dU/dpsi` with `phi_T` held constant.
pub fn hypergrad_first_order(problem: &BilevelProblem, psi: &Tensor, phi_t: &Tensor, method: &HypergradMethod) -> Result<FirstOrder> {
    let (du_dpsi, du_dphi) = upper_partials(problem, psi, phi_t)?;
    let stationary = problem.lower_gradient(psi, phi_t)?.norm() <= problem.lower_solver.tol;
    let error_estimate = if stationary {
        if du_dphi.norm() == 0.0 {
            Some(0.0)
        } else {
            let mut curv = Curvature::of_lower(problem, psi, phi_t)?;
            let (q, _) = curv.solve(&du_dphi, method)?;
            Some(curv.mixed_transpose(&q)?.norm())
        }
    } else {
        None
    };
    Ok(FirstOrder { grad: du_dpsi, error_estimate })
}

/// Feasibility tolerance on `xi` at the lower-level solution.
pub const CONSTRAINT_TOL: f64 = 1e-8;
const STATIONARITY_TOL: f64 = 1e-6;

/// Hypergradient through a lower level with one scalar constraint, from the
/// KKT system of the Lagrangian `L - lambda xi`.
pub fn hypergrad_constrained(problem: &BilevelProblem, psi: &Tensor, phi_star: &Tensor, method: &HypergradMethod) -> Result<Hypergradient> {
    method.validate()?;
    let constraint = problem.constraint.as_ref().ok_or(Error::Missing("constraint"))?;
    let mut tape = Tape::new();
    let p = tape.leaf(psi.clone());
    let f = tape.leaf(phi_star.clone());
    let l = (problem.lower)(&mut tape, p, f)?;
    let xi = (constraint.func)(&mut tape, p, f)?;
    let xi_value = tape.item(xi)?;
    let grad_l = tape.gradient(l, &[f], true)?[0];
    let grad_xi = tape.gradient(xi, &[f], true)?[0];
    let gl = tape.value(grad_l).clone();
    let c = tape.value(grad_xi).clone();
    let cc = c.dot(&c)?;
    let lambda = if cc > 0.0 { c.dot(&gl)? / cc } else { 0.0 };

    let inactive = match constraint.kind {
        ConstraintKind::Equality => false,
        ConstraintKind::Inequality => {
            if xi_value > CONSTRAINT_TOL {
                return Err(Error::ConstraintViolated { value: xi_value, tol: CONSTRAINT_TOL });
            }
            xi_value < -CONSTRAINT_TOL || gl.norm() <= problem.lower_solver.tol
        }
    };
    if inactive {
        let mut out = hypergrad_implicit(problem, psi, phi_star, method)?;
        out.multiplier = Some(0.0);
        out.inactive = true;
        return Ok(out);
    }
    if xi_value.abs() > CONSTRAINT_TOL {
        return Err(Error::ConstraintViolated { value: xi_value, tol: CONSTRAINT_TOL });
    }
    let residual = gl.sub(&c.scale(lambda))?.norm();
    if residual > STATIONARITY_TOL * (1.0 + gl.norm()) {
        return Err(Error::NotStationary { residual });
    }

    // Gradient of the Lagrangian, recorded so it can be differentiated again.
    let lam = tape.scalar(lambda);
    let scaled = tape.mul(lam, grad_xi)?;
    let grad_lag = tape.sub(grad_l, scaled)?;
    let xi_psi = tape.grad(xi, &[p])?.remove(0);
    let mut curv = Curvature { tape, psi: p, phi: f, grad: grad_lag };

    let (du_dpsi, du_dphi) = upper_partials(problem, psi, phi_star)?;
    let (a, rep_a) = curv.solve(&c, method)?;
    let (w, rep_w) = curv.solve(&du_dphi, method)?;
    let s = c.dot(&a)?;
    let condition = c.norm() * a.norm() / s.abs();
    if !(s.is_finite() && s != 0.0 && condition < 1e12) {
        return Err(Error::SingularConstraint { value: s, condition });
    }
    let alpha = c.dot(&w)? / s;
    let y = a.scale(alpha).sub(&w)?;
    let mixed = curv.mixed_transpose(&y)?;
    let grad = du_dpsi.add(&mixed)?.sub(&xi_psi.scale(alpha))?;
    let report = if !rep_a.converged { rep_a } else { rep_w };
    Ok(Hypergradient {
        grad,
        solve: Some(report),
        cg_iterations: rep_a.iterations + rep_w.iterations,
        multiplier: Some(lambda),
        inactive: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blo::lower::solve_lower;
    use crate::blo::problem::LowerSolverConfig;

    fn half_sq(t: &mut Tape, x: Var) -> ilearn_autodiff::Result<Var> {
        let s = t.dot(x, x)?;
        Ok(t.scale(s, 0.5))
    }

    /// `L = 0.5 |phi - k psi|^2`
    fn tracking(k: f64, upper: super::super::problem::CostFn, cfg: LowerSolverConfig) -> BilevelProblem {
        BilevelProblem::new(
            upper,
            Box::new(move |t, psi, phi| {
                let kp = t.scale(psi, k);
                let d = t.sub(phi, kp)?;
                half_sq(t, d)
            }),
            1,
            cfg,
        )
    }

    fn psi(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn unrolled_examples() {
        let p = tracking(1.0, Box::new(|t, _, phi| half_sq(t, phi)), LowerSolverConfig::gradient_descent(1, 1.0));
        assert_eq!(hypergrad_unrolled(&p, &psi(1.7)).unwrap().data(), &[1.7]);
        let p = p.with_lower_solver(LowerSolverConfig::gradient_descent(2, 1.0));
        assert_eq!(hypergrad_unrolled(&p, &psi(1.7)).unwrap().data(), &[1.7]);

        let p = tracking(2.0, Box::new(|t, _, phi| half_sq(t, phi)), LowerSolverConfig::gradient_descent(30, 0.5));
        let g = hypergrad_unrolled(&p, &psi(0.8)).unwrap();
        assert!((g.data()[0] - 3.2).abs() < 1e-6);
    }

    #[test]
    fn implicit_scalar_tracking() {
        let p = tracking(1.0, Box::new(|t, _, phi| half_sq(t, phi)), LowerSolverConfig::gradient_descent(200, 0.5));
        let x = psi(-1.3);
        let sol = solve_lower(&p, &x, false).unwrap();
        let h = hypergrad_implicit(&p, &x, &sol.phi, &HypergradMethod::default()).unwrap();
        assert!((h.grad.data()[0] + 1.3).abs() < 1e-8);
        assert!(!h.flagged());
    }

    #[test]
    fn implicit_linear_map() {
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        let wc = w.clone();
        let p = BilevelProblem::new(
            Box::new(|t, _, phi| half_sq(t, phi)),
            Box::new(move |t, psi, phi| {
                let m = t.constant(wc.clone());
                let col = t.reshape(psi, &[2, 1])?;
                let wp = t.matmul(m, col)?;
                let wp = t.reshape(wp, &[2])?;
                let d = t.sub(phi, wp)?;
                half_sq(t, d)
            }),
            2,
            LowerSolverConfig::gradient_descent(1, 1.0),
        );
        let x = Tensor::vector(vec![0.3, -0.7]);
        let phi = w.matmul(&x.reshape(&[2, 1]).unwrap()).unwrap().reshape(&[2]).unwrap();
        let h = hypergrad_implicit(&p, &x, &phi, &HypergradMethod::default()).unwrap();
        let wtw = w.transpose().unwrap().matmul(&w).unwrap();
        let expect = wtw.matmul(&x.reshape(&[2, 1]).unwrap()).unwrap();
        for (a, b) in h.grad.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_diagonal_quadratic() {
        let p = BilevelProblem::new(
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
            LowerSolverConfig::gradient_descent(1, 1.0),
        );
        let x = Tensor::vector(vec![1.0, 1.0]);
        let phi = Tensor::vector(vec![0.5, 0.25]);
        let h = hypergrad_implicit(&p, &x, &phi, &HypergradMethod::default()).unwrap();
        assert!((h.grad.data()[0] - 0.5).abs() < 1e-12 && (h.grad.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn implicit_rejects_unconverged() {
        let p = tracking(1.0, Box::new(|t, _, phi| half_sq(t, phi)), LowerSolverConfig::gradient_descent(1, 1.0));
        let err = hypergrad_implicit(&p, &psi(1.0), &psi(0.0), &HypergradMethod::default()).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }));
    }

    #[test]
    fn first_order_examples() {
        let m = HypergradMethod::default();
        let p = tracking(1.0, Box::new(|t, psi, _| half_sq(t, psi)), LowerSolverConfig::gradient_descent(1, 1.0));
        let fo = hypergrad_first_order(&p, &psi(2.0), &psi(2.0), &m).unwrap();
        assert_eq!(fo.grad.data(), &[2.0]);
        assert_eq!(fo.error_estimate, Some(0.0));

        let p = tracking(
            1.0,
            Box::new(|t, psi, phi| {
                let a = half_sq(t, phi)?;
                let b = half_sq(t, psi)?;
                t.add(a, b)
            }),
            LowerSolverConfig::gradient_descent(1, 1.0),
        );
        let fo = hypergrad_first_order(&p, &psi(-1.5), &psi(-1.5), &m).unwrap();
        assert_eq!(fo.grad.data(), &[-1.5]);
        assert!((fo.error_estimate.unwrap() - 1.5).abs() < 1e-12);
        let exact = hypergrad_implicit(&p, &psi(-1.5), &psi(-1.5), &m).unwrap();
        assert!((exact.grad.data()[0] + 3.0).abs() < 1e-12);
        // away from stationarity no estimate is offered
        assert!(hypergrad_first_order(&p, &psi(-1.5), &psi(0.0), &m).unwrap().error_estimate.is_none());
    }

    fn sum_constraint(kind: ConstraintKind, upper: super::super::problem::CostFn) -> BilevelProblem {
        BilevelProblem::new(upper, Box::new(|t, _, phi| half_sq(t, phi)), 2, LowerSolverConfig::closed_form()).with_constraint(
            kind,
            Box::new(|t, psi, phi| {
                let s = t.sum(phi);
                let p = t.sum(psi);
                t.sub(s, p)
            }),
        )
    }

    #[test]
    fn constrained_equality() {
        let m = HypergradMethod::default();
        let x = psi(1.4);
        let phi = Tensor::vector(vec![0.7, 0.7]);
        // U picks out each coordinate: gradients are d phi_i / d psi
        for i in 0..2 {
            let p = sum_constraint(ConstraintKind::Equality, Box::new(move |t, _, phi| t.index(phi, i)));
            let h = hypergrad_constrained(&p, &x, &phi, &m).unwrap();
            assert!((h.grad.data()[0] - 0.5).abs() < 1e-12, "{h:?}");
            assert!((h.multiplier.unwrap() - 0.7).abs() < 1e-12);
        }
        let p = sum_constraint(ConstraintKind::Equality, Box::new(|t, _, phi| t.dot(phi, phi)));
        let h = hypergrad_constrained(&p, &x, &phi, &m).unwrap();
        assert!((h.grad.data()[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn constrained_inequality_inactive_and_violated() {
        let m = HypergradMethod::default();
        // unconstrained minimum phi = 0 satisfies sum(phi) <= 1
        let p = sum_constraint(ConstraintKind::Inequality, Box::new(|t, psi, phi| {
            let a = t.dot(phi, phi)?;
            let b = t.dot(psi, psi)?;
            t.add(a, b)
        }));
        let h = hypergrad_constrained(&p, &psi(1.0), &Tensor::zeros(&[2]), &m).unwrap();
        assert!(h.inactive);
        let plain = hypergrad_implicit(&p, &psi(1.0), &Tensor::zeros(&[2]), &m).unwrap();
        assert_eq!(h.grad, plain.grad);

        let err = hypergrad_constrained(&p, &psi(-1.0), &Tensor::zeros(&[2]), &m).unwrap_err();
        assert!(matches!(err, Error::ConstraintViolated { .. }));
    }

    #[test]
    fn constrained_rejects_non_kkt_point() {
        let p = sum_constraint(ConstraintKind::Equality, Box::new(|t, _, phi| Ok(t.sum(phi))));
        let err = hypergrad_constrained(&p, &psi(1.0), &Tensor::vector(vec![1.0, 0.0]), &HypergradMethod::default()).unwrap_err();
        assert!(matches!(err, Error::NotStationary { .. }));
    }

    #[test]
    fn constrained_singular_system() {
        let p = BilevelProblem::new(
            Box::new(|t, _, phi| Ok(t.sum(phi))),
            Box::new(|t, _, phi| half_sq(t, phi)),
            2,
            LowerSolverConfig::closed_form(),
        )
        .with_constraint(ConstraintKind::Equality, Box::new(|t, psi, phi| {
            // xi = (phi_0)^2 - psi has zero gradient at phi_0 = 0
            let a = t.index(phi, 0)?;
            let a2 = t.square(a);
            let s = t.sum(psi);
            t.sub(a2, s)
        }));
        let err = hypergrad_constrained(&p, &psi(0.0), &Tensor::zeros(&[2]), &HypergradMethod::default()).unwrap_err();
        assert!(matches!(err, Error::SingularConstraint { .. }), "{err:?}");
    }
}
