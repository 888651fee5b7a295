//! Matrix-free solvers for `H q = v` where `H` is only available through
//! Hessian-vector products.

use ilearn_autodiff::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearSolver {
    ConjugateGradient,
    /// Plain gradient descent on `0.5 q^T H q - q^T v`.
    GradientDescent { step: f64 },
}

/// How the implicit routes solve their linear systems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypergradMethod {
    pub solver: LinearSolver,
    pub max_iters: usize,
    /// Relative residual target `|H q - v| <= tol |v|`.
    pub tol: f64,
    /// First damping tried once non-positive curvature shows up; doubled
    /// on every further failure.
    pub initial_damping: f64,
}

impl Default for HypergradMethod {
    fn default() -> Self {
        HypergradMethod { solver: LinearSolver::ConjugateGradient, max_iters: 500, tol: 1e-10, initial_damping: 1e-6 }
    }
}

impl HypergradMethod {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("linear solve tolerance must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("linear solve needs max_iters >= 1".into()));
        }
        if !(self.initial_damping > 0.0) {
            return Err(Error::Config("initial damping must be > 0".into()));
        }
        if let LinearSolver::GradientDescent { step } = self.solver {
            if !(step > 0.0) {
                return Err(Error::Config("gradient-descent linear solver needs step > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    /// Operator applications across all damping restarts.
    pub iterations: usize,
    /// Final relative residual `|(H + damping I) q - v| / |v|`.
    pub residual: f64,
    pub damping: f64,
    /// False when the residual target was missed (a flagged result).
    pub converged: bool,
}

const MAX_RESTARTS: usize = 80;

enum Attempt {
    Done(Tensor, usize),
    NegativeCurvature(usize),
}

fn axpy(a: f64, x: &Tensor, y: &Tensor) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(xi, yi)| a * xi + yi).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn apply_damped(apply: &mut dyn FnMut(&Tensor) -> Result<Tensor>, x: &Tensor, damping: f64) -> Result<Tensor> {
    let hx = apply(x)?;
    Ok(if damping > 0.0 { axpy(damping, x, &hx) } else { hx })
}

fn cg_attempt(
    apply: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    rhs: &Tensor,
    damping: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Attempt> {
    let bnorm = rhs.norm();
    let mut x = Tensor::zeros(rhs.shape());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r)?;
    for k in 0..max_iters {
        let ap = apply_damped(apply, &p, damping)?;
        let curvature = p.dot(&ap)?;
        if curvature <= 0.0 {
            return Ok(Attempt::NegativeCurvature(k + 1));
        }
        let alpha = rs / curvature;
        x = axpy(alpha, &p, &x);
        r = axpy(-alpha, &ap, &r);
        let rs_new = r.dot(&r)?;
        if rs_new.sqrt() <= tol * bnorm {
            return Ok(Attempt::Done(x, k + 1));
        }
        p = axpy(rs_new / rs, &p, &r);
        rs = rs_new;
    }
    Ok(Attempt::Done(x, max_iters))
}

/// Solves `H q = rhs` given `apply(x) = H x`.
///
/// Conjugate gradient restarts with `H + damping I` whenever a search
/// direction with `d^T H d <= 0` appears, doubling the damping until the
/// iteration behaves. A residual above tolerance is reported, not raised.
pub fn solve(
    apply: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    rhs: &Tensor,
    method: &HypergradMethod,
) -> Result<(Tensor, SolveReport)> {
    method.validate()?;
    let bnorm = rhs.norm();
    if bnorm == 0.0 {
        let report = SolveReport { iterations: 0, residual: 0.0, damping: 0.0, converged: true };
        return Ok((Tensor::zeros(rhs.shape()), report));
    }
    let mut damping = 0.0;
    let mut iterations = 0;
    let q = match method.solver {
        LinearSolver::ConjugateGradient => {
            let mut restarts = 0;
            loop {
                match cg_attempt(apply, rhs, damping, method.max_iters, method.tol)? {
                    Attempt::Done(q, k) => {
                        iterations += k;
                        break q;
                    }
                    Attempt::NegativeCurvature(k) => {
                        iterations += k;
                        restarts += 1;
                        if restarts > MAX_RESTARTS {
                            return Err(Error::Config("damping did not restore positive curvature".into()));
                        }
                        damping = if damping == 0.0 { method.initial_damping } else { 2.0 * damping };
                    }
                }
            }
        }
        LinearSolver::GradientDescent { step } => {
            let mut q = Tensor::zeros(rhs.shape());
            for _ in 0..method.max_iters {
                let hq = apply_damped(apply, &q, damping)?;
                let resid = hq.sub(rhs)?;
                iterations += 1;
                if resid.norm() <= method.tol * bnorm {
                    break;
                }
                q = axpy(-step, &resid, &q);
            }
            q
        }
    };
    let hq = apply_damped(apply, &q, damping)?;
    let residual = hq.sub(rhs)?.norm() / bnorm;
    let converged = residual <= method.tol && residual.is_finite();
    Ok((q, SolveReport { iterations, residual, damping, converged }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: &[[f64; 3]; 3]) -> impl FnMut(&Tensor) -> Result<Tensor> + '_ {
        move |x: &Tensor| {
            let d = x.data();
            Ok(Tensor::vector((0..3).map(|i| (0..3).map(|j| m[i][j] * d[j]).sum()).collect()))
        }
    }

    #[test]
    fn cg_solves_spd_system() {
        let m = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let (q, rep) = solve(&mut dense(&m), &b, &HypergradMethod::default()).unwrap();
        assert!(rep.converged && rep.damping == 0.0);
        assert!(rep.iterations <= 4);
        let hq = dense(&m)(&q).unwrap();
        assert!(hq.sub(&b).unwrap().norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn negative_curvature_triggers_damping() {
        // indefinite: eigenvalues 1, 1, -1e-7
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1e-7]];
        let b = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let method = HypergradMethod { max_iters: 50, ..HypergradMethod::default() };
        let (_, rep) = solve(&mut dense(&m), &b, &method).unwrap();
        assert!(rep.damping >= 1e-6, "{rep:?}");
    }

    #[test]
    fn iteration_cap_flags_result() {
        let m = [[1.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 100.0]];
        let b = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let method = HypergradMethod { max_iters: 1, ..HypergradMethod::default() };
        let (_, rep) = solve(&mut dense(&m), &b, &method).unwrap();
        assert!(!rep.converged && rep.residual > 1e-10);
    }

    #[test]
    fn gradient_descent_solver() {
        let m = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.5]];
        let b = Tensor::vector(vec![2.0, 1.0, 3.0]);
        let method = HypergradMethod {
            solver: LinearSolver::GradientDescent { step: 0.4 },
            max_iters: 10_000,
            tol: 1e-12,
            ..HypergradMethod::default()
        };
        let (q, rep) = solve(&mut dense(&m), &b, &method).unwrap();
        assert!(rep.converged);
        assert!((q.data()[0] - 1.0).abs() < 1e-11 && (q.data()[2] - 2.0).abs() < 1e-11);
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (q, rep) = solve(&mut dense(&m), &Tensor::zeros(&[3]), &HypergradMethod::default()).unwrap();
        assert_eq!(q.norm(), 0.0);
        assert_eq!(rep.iterations, 0);
    }
}
