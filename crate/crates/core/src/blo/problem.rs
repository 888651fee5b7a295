use ilearn_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Scalar cost of the upper variables `psi` and lower variables `phi`.
pub type CostFn = Box<dyn Fn(&mut Tape, Var, Var) -> ilearn_autodiff::Result<Var>>;
/// Lower-level solution map `psi -> phi*` evaluated on the tape.
pub type ClosedFormFn = Box<dyn Fn(&mut Tape, Var) -> ilearn_autodiff::Result<Var>>;
/// Initial lower iterate from the upper variables.
pub type InitFn = Box<dyn Fn(&Tensor) -> Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `xi(psi, phi) = 0`
    Equality,
    /// `xi(psi, phi) <= 0`
    Inequality,
}

pub struct Constraint {
    pub kind: ConstraintKind,
    pub func: CostFn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LowerSolverKind {
    GradientDescent,
    Adam,
    /// Requires residuals with `L = 0.5 |r|^2`.
    GaussNewton,
    /// Gauss-Newton with a fixed damping added to `J^T J`.
    LevenbergMarquardt { damping: f64 },
    ClosedForm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerSolverConfig {
    pub kind: LowerSolverKind,
    /// Iteration budget `T`.
    pub steps: usize,
    /// Step size `eta`.
    pub step_size: f64,
    /// Convergence gate on `|dL/dphi|`.
    pub tol: f64,
}

impl LowerSolverConfig {
    pub fn gradient_descent(steps: usize, step_size: f64) -> Self {
        LowerSolverConfig { kind: LowerSolverKind::GradientDescent, steps, step_size, tol: 1e-8 }
    }

    pub fn closed_form() -> Self {
        LowerSolverConfig { kind: LowerSolverKind::ClosedForm, steps: 1, step_size: 1.0, tol: 1e-8 }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("lower solver needs steps >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!("lower solver step size must be > 0, got {}", self.step_size)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("lower solver tolerance must be > 0, got {}", self.tol)));
        }
        if let LowerSolverKind::LevenbergMarquardt { damping } = self.kind {
            if !(damping >= 0.0) {
                return Err(Error::Config("Levenberg-Marquardt damping must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// A bilevel problem: minimize `U(psi, phi*)` where `phi*` minimizes
/// `L(psi, .)`, optionally subject to a scalar constraint `xi(psi, phi)`.
///
/// `psi` and `phi` are flat vectors.
pub struct BilevelProblem {
    pub upper: CostFn,
    pub lower: CostFn,
    pub constraint: Option<Constraint>,
    /// Residual vector with `L = 0.5 |r|^2`, used by the Gauss-Newton kinds.
    pub residuals: Option<CostFn>,
    pub closed_form: Option<ClosedFormFn>,
    pub init: InitFn,
    pub lower_solver: LowerSolverConfig,
}

impl BilevelProblem {
    /// Problem with a zero initial lower iterate of dimension `phi_dim`.
    pub fn new(upper: CostFn, lower: CostFn, phi_dim: usize, lower_solver: LowerSolverConfig) -> Self {
        BilevelProblem {
            upper,
            lower,
            constraint: None,
            residuals: None,
            closed_form: None,
            init: Box::new(move |_| Tensor::zeros(&[phi_dim])),
            lower_solver,
        }
    }

    pub fn with_constraint(mut self, kind: ConstraintKind, func: CostFn) -> Self {
        self.constraint = Some(Constraint { kind, func });
        self
    }

    pub fn with_residuals(mut self, residuals: CostFn) -> Self {
        self.residuals = Some(residuals);
        self
    }

    pub fn with_closed_form(mut self, solution: ClosedFormFn) -> Self {
        self.closed_form = Some(solution);
        self
    }

    pub fn with_init(mut self, init: InitFn) -> Self {
        self.init = init;
        self
    }

    pub fn with_lower_solver(mut self, cfg: LowerSolverConfig) -> Self {
        self.lower_solver = cfg;
        self
    }

    /// `U(psi, phi)` as a plain number.
    pub fn upper_value(&self, psi: &Tensor, phi: &Tensor) -> Result<f64> {
        let mut t = Tape::new();
        let p = t.constant(psi.clone());
        let f = t.constant(phi.clone());
        let u = (self.upper)(&mut t, p, f)?;
        Ok(t.item(u)?)
    }

    pub fn lower_value(&self, psi: &Tensor, phi: &Tensor) -> Result<f64> {
        let mut t = Tape::new();
        let p = t.constant(psi.clone());
        let f = t.constant(phi.clone());
        let l = (self.lower)(&mut t, p, f)?;
        Ok(t.item(l)?)
    }

    /// `dL/dphi` at `(psi, phi)`.
    pub fn lower_gradient(&self, psi: &Tensor, phi: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = t.constant(psi.clone());
        let f = t.leaf(phi.clone());
        let l = (self.lower)(&mut t, p, f)?;
        Ok(t.grad(l, &[f])?.remove(0))
    }
}
