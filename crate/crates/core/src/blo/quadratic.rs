//! Random strongly convex quadratic bilevel problems with closed-form
//! solutions, used as oracles for the hypergradient routes.

use ilearn_autodiff::{Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::problem::{BilevelProblem, ConstraintKind, LowerSolverConfig};
use crate::error::{Error, Result};

/// `L = 0.5 phi^T A phi - phi^T (B psi + b)`,
/// `U = 0.5 phi^T P phi + psi^T C phi + 0.5 psi^T R psi + d^T phi`,
/// optionally with `xi = a^T phi + g^T psi - h = 0`.
#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub p: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub d: DVector<f64>,
    pub constraint: Option<LinearConstraint>,
}

#[derive(Clone, Debug)]
pub struct LinearConstraint {
    pub a: DVector<f64>,
    pub g: DVector<f64>,
    pub h: f64,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn spd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let m = uniform(rng, n, n);
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    // nalgebra is column-major
    Tensor::matrix(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec()).expect("matching size")
}

fn vec_tensor(v: &DVector<f64>) -> Tensor {
    Tensor::vector(v.as_slice().to_vec())
}

fn matvec(t: &mut Tape, m: &Tensor, x: Var) -> ilearn_autodiff::Result<Var> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    let mc = t.constant(m.clone());
    let xc = t.reshape(x, &[cols, 1])?;
    let y = t.matmul(mc, xc)?;
    t.reshape(y, &[rows])
}

impl QuadraticBilevel {
    /// Lower dimension `n`, upper dimension `m`.
    pub fn random(rng: &mut impl Rng, n: usize, m: usize) -> Self {
        let a = spd(rng, n, 0.5);
        let b = uniform(rng, n, m);
        let b0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let p = spd(rng, n, 0.1);
        let c = uniform(rng, m, n);
        let r = spd(rng, m, 0.1);
        let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        QuadraticBilevel { a, b, b0, p, c, r, d, constraint: None }
    }

    pub fn with_random_constraint(mut self, rng: &mut impl Rng) -> Self {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        a[0] += 1.5;
        let g = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        self.constraint = Some(LinearConstraint { a, g, h: rng.gen_range(-1.0..1.0) });
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    /// Step size `2 / (l_min + l_max)` and a step count reaching `|dL/dphi| <= tol`
    /// from `phi = 0` for any `psi` with `|B psi + b| <= scale`.
    pub fn gradient_descent_schedule(&self, scale: f64, tol: f64) -> (f64, usize) {
        let eig = self.a.clone().symmetric_eigen().eigenvalues;
        let lo = eig.min();
        let hi = eig.max();
        let eta = 2.0 / (lo + hi);
        let rate = (hi - lo) / (hi + lo);
        let steps = ((tol / (scale * hi / lo)).ln() / rate.ln()).ceil().max(1.0) as usize;
        (eta, steps)
    }

    fn lower_rhs(&self, psi: &DVector<f64>) -> DVector<f64> {
        &self.b * psi + &self.b0
    }

    /// `|B psi + b|`, the lower gradient norm at `phi = 0`.
    pub fn lower_rhs_norm(&self, psi: &DVector<f64>) -> f64 {
        self.lower_rhs(psi).norm()
    }

    /// Unconstrained or KKT solution `phi*(psi)` with its multiplier.
    pub fn solve(&self, psi: &DVector<f64>) -> Result<(DVector<f64>, Option<f64>)> {
        let rhs = self.lower_rhs(psi);
        match &self.constraint {
            None => {
                let phi = self.a.clone().cholesky().ok_or(Error::Config("lower Hessian not positive definite".into()))?.solve(&rhs);
                Ok((phi, None))
            }
            Some(con) => {
                let n = self.a.nrows();
                let mut k = DMatrix::zeros(n + 1, n + 1);
                k.view_mut((0, 0), (n, n)).copy_from(&self.a);
                for i in 0..n {
                    k[(i, n)] = con.a[i];
                    k[(n, i)] = con.a[i];
                }
                let mut f = DVector::zeros(n + 1);
                f.rows_mut(0, n).copy_from(&rhs);
                f[n] = con.h - con.g.dot(psi);
                let sol = k.lu().solve(&f).ok_or(Error::Config("singular KKT system".into()))?;
                // A phi - (B psi + b) = lambda a, so the second block holds -lambda
                Ok((sol.rows(0, n).into_owned(), Some(-sol[n])))
            }
        }
    }

    pub fn upper(&self, psi: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        0.5 * phi.dot(&(&self.p * phi)) + psi.dot(&(&self.c * phi)) + 0.5 * psi.dot(&(&self.r * psi)) + self.d.dot(phi)
    }

    /// `psi -> U(psi, phi*(psi))`.
    pub fn value(&self, psi: &DVector<f64>) -> Result<f64> {
        Ok(self.upper(psi, &self.solve(psi)?.0))
    }

    /// Exact hypergradient from `dphi*/dpsi`.
    pub fn analytic_hypergradient(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        let (phi, _) = self.solve(psi)?;
        let du_dphi = &self.p * &phi + self.c.transpose() * psi + &self.d;
        let du_dpsi = &self.c * &phi + &self.r * psi;
        let n = self.a.nrows();
        let a_inv = self.a.clone().try_inverse().ok_or(Error::Config("singular lower Hessian".into()))?;
        let jac = match &self.constraint {
            None => &a_inv * &self.b,
            Some(con) => {
                // phi = A^-1 (B psi + b + lambda a), a^T phi + g^T psi = h
                let ainv_a = &a_inv * &con.a;
                let s = con.a.dot(&ainv_a);
                let ainv_b = &a_inv * &self.b;
                let dlambda = -(con.a.transpose() * &ainv_b + con.g.transpose()) / s;
                ainv_b + &ainv_a * dlambda
            }
        };
        debug_assert_eq!(jac.nrows(), n);
        Ok(du_dpsi + jac.transpose() * du_dphi)
    }

    /// The problem on the tape, with `phi*` wired as the closed-form solver.
    pub fn problem(&self, lower_solver: LowerSolverConfig) -> BilevelProblem {
        let (a, b, b0) = (to_tensor(&self.a), to_tensor(&self.b), vec_tensor(&self.b0));
        let (p, c, r, d) = (to_tensor(&self.p), to_tensor(&self.c), to_tensor(&self.r), vec_tensor(&self.d));
        let n = self.a.nrows();
        let upper = Box::new(move |t: &mut Tape, psi: Var, phi: Var| {
            let pp = matvec(t, &p, phi)?;
            let quad = t.dot(phi, pp)?;
            let quad = t.scale(quad, 0.5);
            let cp = matvec(t, &c, phi)?;
            let cross = t.dot(psi, cp)?;
            let rp = matvec(t, &r, psi)?;
            let reg = t.dot(psi, rp)?;
            let reg = t.scale(reg, 0.5);
            let dc = t.constant(d.clone());
            let lin = t.dot(dc, phi)?;
            let s = t.add(quad, cross)?;
            let s = t.add(s, reg)?;
            t.add(s, lin)
        });
        let lower = Box::new(move |t: &mut Tape, psi: Var, phi: Var| {
            let ap = matvec(t, &a, phi)?;
            let quad = t.dot(phi, ap)?;
            let quad = t.scale(quad, 0.5);
            let bp = matvec(t, &b, psi)?;
            let bc = t.constant(b0.clone());
            let rhs = t.add(bp, bc)?;
            let lin = t.dot(phi, rhs)?;
            t.sub(quad, lin)
        });
        let me = self.clone();
        let closed = Box::new(move |t: &mut Tape, psi: Var| {
            let psi_v = DVector::from_column_slice(t.value(psi).data());
            let (phi, _) = me.solve(&psi_v).map_err(|e| ilearn_autodiff::AdError::Params(e.to_string()))?;
            Ok(t.constant(Tensor::vector(phi.as_slice().to_vec())))
        });
        let mut problem = BilevelProblem::new(upper, lower, n, lower_solver).with_closed_form(closed);
        if let Some(con) = &self.constraint {
            let (ca, cg, h) = (vec_tensor(&con.a), vec_tensor(&con.g), con.h);
            problem = problem.with_constraint(
                ConstraintKind::Equality,
                Box::new(move |t: &mut Tape, psi: Var, phi: Var| {
                    let ac = t.constant(ca.clone());
                    let gc = t.constant(cg.clone());
                    let x = t.dot(ac, phi)?;
                    let y = t.dot(gc, psi)?;
                    let s = t.add(x, y)?;
                    Ok(t.add_scalar(s, -h))
                }),
            );
        }
        problem
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference(f: impl Fn(&DVector<f64>) -> Result<f64>, x: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += eps;
        xm[i] -= eps;
        g[i] = (f(&xp)? - f(&xm)?) / (2.0 * eps);
    }
    Ok(g)
}

/// `|a - b| / max(|b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}
