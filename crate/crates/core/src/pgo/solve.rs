use ilearn_autodiff::{Tape, Tensor};
use serde::Serialize;

use super::graph::{Edge, PoseGraph2D};
use super::se2::{relative_residual, PoseVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnConfig {
    pub max_iters: usize,
    /// Stop once `|dL/dmu| <= tol`.
    pub tol: f64,
    /// Initial Levenberg-Marquardt damping; `None` is plain Gauss-Newton.
    pub damping: Option<f64>,
}

impl Default for GnConfig {
    fn default() -> Self {
        GnConfig { max_iters: 100, tol: 1e-9, damping: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GnReport {
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Normal equations were singular and damping was added.
    pub auto_damped: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    /// Norm of every accepted step.
    pub step_norms: Vec<f64>,
}

pub(crate) struct Linearization {
    pub cost: f64,
    pub jtj: nalgebra::DMatrix<f64>,
    pub jtr: nalgebra::DVector<f64>,
}

pub(crate) fn linearize(graph: &PoseGraph2D, phi: &Tensor) -> Result<Linearization> {
    let graph = graph.with_free_params(phi)?;
    let n = phi.numel();
    let mut jtj = nalgebra::DMatrix::zeros(n, n);
    let mut jtr = nalgebra::DVector::zeros(n);
    let mut cost = 0.0;
    for e in &graph.edges {
        let (r, jac) = edge_jacobian(&graph, e)?;
        let cols: Vec<Option<usize>> = (0..6).map(|c| {
            let node = if c < 3 { e.i } else { e.j };
            (node > 0).then(|| 3 * (node - 1) + c % 3)
        }).collect();
        for row in 0..3 {
            let w = e.info[row];
            cost += w * r[row] * r[row];
            for (a, ca) in cols.iter().enumerate() {
                let Some(ca) = *ca else { continue };
                jtr[ca] += w * jac[row][a] * r[row];
                for (b, cb) in cols.iter().enumerate() {
                    if let Some(cb) = *cb {
                        jtj[(ca, cb)] += w * jac[row][a] * jac[row][b];
                    }
                }
            }
        }
    }
    Ok(Linearization { cost, jtj, jtr })
}

/// Residual of one edge and its Jacobian with respect to `(P_i, P_j)`.
fn edge_jacobian(graph: &PoseGraph2D, e: &Edge) -> Result<([f64; 3], [[f64; 6]; 3])> {
    let (pi, pj) = (graph.nodes[e.i], graph.nodes[e.j]);
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::vector(vec![pi.x, pi.y, pi.theta, pj.x, pj.y, pj.theta]));
    let at = |tape: &mut Tape, k: usize| tape.index(leaf, k);
    let a = PoseVars { x: at(&mut tape, 0)?, y: at(&mut tape, 1)?, theta: at(&mut tape, 2)? };
    let b = PoseVars { x: at(&mut tape, 3)?, y: at(&mut tape, 4)?, theta: at(&mut tape, 5)? };
    let z = PoseVars::constant(&mut tape, &e.measurement);
    let res = relative_residual(&mut tape, a, b, z)?;
    let mut r = [0.0; 3];
    let mut jac = [[0.0; 6]; 3];
    for k in 0..3 {
        r[k] = tape.item(res[k])?;
        let g = tape.grad(res[k], &[leaf])?.remove(0);
        jac[k].copy_from_slice(g.data());
    }
    Ok((r, jac))
}

/// One damped normal-equation step `-(J'J + lambda I)^-1 J'r`.
pub fn gn_step(graph: &PoseGraph2D, damping: f64) -> Result<Tensor> {
    let lin = linearize(graph, &graph.free_params())?;
    let n = lin.jtr.len();
    let a = lin.jtj + nalgebra::DMatrix::identity(n, n) * damping;
    let d = a.lu().solve(&lin.jtr).ok_or(Error::Invalid("singular normal equations".into()))?;
    Ok(Tensor::vector(d.iter().map(|v| -v).collect()))
}

/// Gauss-Newton or Levenberg-Marquardt from the graph's current poses.
pub fn gauss_newton_solve(graph: &PoseGraph2D, cfg: &GnConfig) -> Result<(PoseGraph2D, GnReport)> {
    graph.validate()?;
    let mut phi = graph.free_params();
    let mut lambda = cfg.damping.unwrap_or(0.0);
    let mut auto_damped = false;
    let mut lin = linearize(graph, &phi)?;
    let mut costs = vec![lin.cost];
    let mut step_norms = Vec::new();
    let mut iterations = 0;
    let n = phi.numel();
    let mut grad_norm = 2.0 * lin.jtr.norm();
    while iterations < cfg.max_iters && grad_norm > cfg.tol {
        iterations += 1;
        let a = &lin.jtj + nalgebra::DMatrix::identity(n, n) * lambda;
        let Some(delta) = a.clone().cholesky().map(|c| c.solve(&lin.jtr)).or_else(|| a.lu().solve(&lin.jtr)) else {
            let scale = lin.jtj.diagonal().amax().max(1.0);
            lambda = if lambda == 0.0 { 1e-9 * scale } else { lambda * 10.0 };
            auto_damped = true;
            continue;
        };
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: iterations, value: f64::NAN });
        }
        let next = Tensor::vector(phi.data().iter().zip(delta.iter()).map(|(p, d)| p - d).collect());
        let trial = graph.with_free_params(&next)?;
        let trial_lin = linearize(&trial, &next)?;
        if cfg.damping.is_some() && trial_lin.cost > lin.cost {
            lambda = (lambda * 10.0).max(1e-12);
            continue;
        }
        if cfg.damping.is_some() {
            lambda = (lambda / 10.0).max(1e-12);
        }
        step_norms.push(delta.norm());
        phi = next;
        lin = trial_lin;
        costs.push(lin.cost);
        grad_norm = 2.0 * lin.jtr.norm();
    }
    let solved = graph.with_free_params(&phi)?;
    let report = GnReport { cost: lin.cost, grad_norm, iterations, converged: grad_norm <= cfg.tol, auto_damped, costs, step_norms };
    Ok((solved, report))
}
