//! Lower-level solvers. Every update is written with tape operations so the
//! same iteration serves the plain solve and the unrolled hypergradient.

use ilearn_autodiff::{Tape, Tensor, Var};

use super::problem::{BilevelProblem, LowerSolverKind};
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LowerSolution {
    pub phi: Tensor,
    /// Iterates `phi_0 .. phi_T` (only `phi*` for closed-form solvers).
    pub trajectory: Option<Vec<Tensor>>,
    pub converged: bool,
    pub grad_norm: f64,
    pub steps: usize,
}

/// Adam moments living on the current tape.
#[derive(Clone, Copy)]
pub(crate) struct AdamMoments {
    pub m: Var,
    pub v: Var,
}

pub(crate) struct StepOutput {
    pub next: Var,
    pub cost: f64,
    pub grad_norm: f64,
}

/// One update `phi -> phi'` of the configured iterative solver. `step` is
/// the 1-based iteration count (Adam bias correction).
pub(crate) fn lower_step(
    tape: &mut Tape,
    problem: &BilevelProblem,
    psi: Var,
    phi: Var,
    adam: &mut Option<AdamMoments>,
    step: usize,
    record: bool,
) -> Result<StepOutput> {
    let cfg = &problem.lower_solver;
    let l = (problem.lower)(tape, psi, phi)?;
    let cost = tape.item(l)?;
    match cfg.kind {
        LowerSolverKind::GradientDescent => {
            let g = tape.gradient(l, &[phi], record)?[0];
            let grad_norm = tape.value(g).norm();
            let d = tape.scale(g, cfg.step_size);
            let next = tape.sub(phi, d)?;
            Ok(StepOutput { next, cost, grad_norm })
        }
        LowerSolverKind::Adam => {
            let g = tape.gradient(l, &[phi], record)?[0];
            let grad_norm = tape.value(g).norm();
            let gm = tape.scale(g, 1.0 - ADAM_BETA1);
            let g2 = tape.square(g);
            let gv = tape.scale(g2, 1.0 - ADAM_BETA2);
            let (m, v) = match *adam {
                Some(AdamMoments { m, v }) => {
                    let m0 = tape.scale(m, ADAM_BETA1);
                    let v0 = tape.scale(v, ADAM_BETA2);
                    (tape.add(m0, gm)?, tape.add(v0, gv)?)
                }
                None => (gm, gv),
            };
            *adam = Some(AdamMoments { m, v });
            let t = step as i32;
            let mh = tape.scale(m, 1.0 / (1.0 - ADAM_BETA1.powi(t)));
            let vh = tape.scale(v, 1.0 / (1.0 - ADAM_BETA2.powi(t)));
            // sqrt(v + eps^2) keeps the update differentiable where v = 0.
            let vh = tape.add_scalar(vh, ADAM_EPS * ADAM_EPS);
            let denom = tape.sqrt(vh)?;
            let ratio = tape.div(mh, denom)?;
            let d = tape.scale(ratio, cfg.step_size);
            let next = tape.sub(phi, d)?;
            Ok(StepOutput { next, cost, grad_norm })
        }
        LowerSolverKind::GaussNewton | LowerSolverKind::LevenbergMarquardt { .. } => {
            let residuals = problem.residuals.as_ref().ok_or(Error::Missing("residuals for a Gauss-Newton lower solver"))?;
            let r = residuals(tape, psi, phi)?;
            let k = tape.value(r).numel();
            let n = tape.value(phi).numel();
            let r = tape.reshape(r, &[k])?;
            let picks = (0..k).map(|i| tape.index(r, i)).collect::<std::result::Result<Vec<_>, _>>()?;
            let mut rows = Vec::with_capacity(k);
            for ri in picks {
                let gi = tape.gradient(ri, &[phi], record)?[0];
                rows.push(tape.reshape(gi, &[1, n])?);
            }
            let jac = tape.concat(&rows, 0)?;
            let jt = tape.transpose(jac)?;
            let mut normal = tape.matmul(jt, jac)?;
            if let LowerSolverKind::LevenbergMarquardt { damping } = cfg.kind {
                let eye = tape.constant(Tensor::eye(n).scale(damping));
                normal = tape.add(normal, eye)?;
            }
            let rc = tape.reshape(r, &[k, 1])?;
            let jtr = tape.matmul(jt, rc)?;
            let grad_norm = tape.value(jtr).norm();
            let delta = tape.solve(normal, jtr)?;
            let delta = tape.reshape(delta, &[n])?;
            let d = tape.scale(delta, cfg.step_size);
            let next = tape.sub(phi, d)?;
            Ok(StepOutput { next, cost, grad_norm })
        }
        LowerSolverKind::ClosedForm => Err(Error::Config("closed-form solvers have no iterative step".into())),
    }
}

/// Solves the lower level at `psi` with the problem's solver configuration.
///
/// Iteration stops early once `|dL/dphi| <= tol`; `converged` reports that
/// gate at the returned iterate.
pub fn solve_lower(problem: &BilevelProblem, psi: &Tensor, keep_trajectory: bool) -> Result<LowerSolution> {
    let cfg = problem.lower_solver;
    cfg.validate()?;
    if cfg.kind == LowerSolverKind::ClosedForm {
        let solution = problem.closed_form.as_ref().ok_or(Error::Missing("closed-form lower solution"))?;
        let mut tape = Tape::new();
        let p = tape.constant(psi.clone());
        let phi = solution(&mut tape, p)?;
        let phi = tape.value(phi).clone();
        let cost = problem.lower_value(psi, &phi)?;
        if !cost.is_finite() {
            return Err(Error::NonFinite { step: 0, value: cost });
        }
        let grad_norm = problem.lower_gradient(psi, &phi)?.norm();
        return Ok(LowerSolution {
            trajectory: keep_trajectory.then(|| vec![phi.clone()]),
            phi,
            converged: grad_norm <= cfg.tol,
            grad_norm,
            steps: 1,
        });
    }

    let mut phi = (problem.init)(psi);
    let mut trajectory = keep_trajectory.then(|| vec![phi.clone()]);
    let mut moments: Option<(Tensor, Tensor)> = None;
    let mut steps = 0;
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let p = tape.constant(psi.clone());
        let f = tape.leaf(phi.clone());
        let mut adam = moments.as_ref().map(|(m, v)| AdamMoments { m: tape.constant(m.clone()), v: tape.constant(v.clone()) });
        let out = lower_step(&mut tape, problem, p, f, &mut adam, step, false)?;
        if !out.cost.is_finite() {
            return Err(Error::NonFinite { step: step - 1, value: out.cost });
        }
        if out.grad_norm <= cfg.tol {
            return Ok(LowerSolution { phi, trajectory, converged: true, grad_norm: out.grad_norm, steps });
        }
        phi = tape.value(out.next).clone();
        moments = adam.map(|a| (tape.value(a.m).clone(), tape.value(a.v).clone()));
        steps = step;
        if let Some(t) = trajectory.as_mut() {
            t.push(phi.clone());
        }
    }
    let cost = problem.lower_value(psi, &phi)?;
    if !cost.is_finite() {
        return Err(Error::NonFinite { step: steps, value: cost });
    }
    let grad_norm = problem.lower_gradient(psi, &phi)?.norm();
    Ok(LowerSolution { phi, trajectory, converged: grad_norm <= cfg.tol, grad_norm, steps })
}
