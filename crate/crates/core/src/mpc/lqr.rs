//! Finite-horizon LQR by backward Riccati recursion, written with tape
//! operations so trajectories are differentiable in the plant parameter,
//! the initial state and the weights.

use ilearn_autodiff::{Tape, Tensor, Var};
use nalgebra::DMatrix;

use super::plant::LinearPlant;
use crate::error::{Error, Result};

/// Minimises `sum_k (x_{k+1} - r_{k+1})' Q (x_{k+1} - r_{k+1}) + l_k' x_{k+1} + u_k' R u_k`
/// over `k = 0 .. T-1` subject to the plant dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcProblem {
    pub horizon: usize,
    pub q: Tensor,
    pub r: Tensor,
    /// Per-step linear terms on `x_{k+1}` (empty means zero).
    pub linear: Vec<Tensor>,
    /// Targets for `x_1 .. x_T`.
    pub reference: Vec<Tensor>,
    pub x0: Tensor,
}

impl MpcProblem {
    /// Constant set-point tracking.
    pub fn tracking(horizon: usize, q: Tensor, r: Tensor, target: Tensor, x0: Tensor) -> Self {
        MpcProblem { horizon, q, r, linear: Vec::new(), reference: vec![target; horizon], x0 }
    }

    pub fn validate(&self, plant: &LinearPlant) -> Result<()> {
        let (n, m) = (plant.n(), plant.m());
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        if self.q.shape() != [n, n] || self.r.shape() != [m, m] {
            return Err(Error::Invalid(format!("weights must be {n}x{n} and {m}x{m}")));
        }
        if self.x0.numel() != n || self.reference.len() != self.horizon || self.reference.iter().any(|r| r.numel() != n) {
            return Err(Error::Invalid("initial state or reference has the wrong size".into()));
        }
        if !self.linear.is_empty() && (self.linear.len() != self.horizon || self.linear.iter().any(|l| l.numel() != n)) {
            return Err(Error::Invalid("linear terms must be empty or one per step".into()));
        }
        let r = DMatrix::from_row_slice(m, m, self.r.data());
        if (&r - r.transpose()).amax() > 1e-12 || r.cholesky().is_none() {
            return Err(Error::Invalid("control weight must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

/// Tape handles for the problem data.
#[derive(Clone, Debug)]
pub struct LqrInputs {
    pub a: Var,
    pub b: Var,
    pub q: Var,
    pub r: Var,
    pub x0: Var,
    pub reference: Vec<Var>,
    pub linear: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LqrVars {
    /// `x_0 .. x_T` as `[n, 1]` columns.
    pub states: Vec<Var>,
    /// `u_0 .. u_{T-1}` as `[m, 1]` columns.
    pub controls: Vec<Var>,
    /// Feedback gains `K_k` with `u_k = K_k x_k + k_k`.
    pub gains: Vec<Var>,
    pub offsets: Vec<Var>,
    /// Cost-to-go matrices `P_0 .. P_T`.
    pub value_matrices: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    pub states: Vec<Tensor>,
    pub controls: Vec<Tensor>,
    pub gains: Vec<Tensor>,
    pub offsets: Vec<Tensor>,
    pub value_matrices: Vec<Tensor>,
}

/// Riccati recursion and forward rollout on `tape`.
pub fn lqr_on_tape(tape: &mut Tape, inp: &LqrInputs) -> Result<LqrVars> {
    let n = tape.shape(inp.a)[0];
    let horizon = inp.reference.len();
    let at = tape.transpose(inp.a)?;
    let bt = tape.transpose(inp.b)?;
    let mut p = tape.constant(Tensor::zeros(&[n, n]));
    let mut s = tape.constant(Tensor::zeros(&[n, 1]));
    let mut gains = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    let mut value_matrices = vec![p];
    for k in (0..horizon).rev() {
        let qt = tape.add(inp.q, p)?;
        let rk = tape.reshape(inp.reference[k], &[n, 1])?;
        let qr = tape.matmul(inp.q, rk)?;
        let mut lin = tape.sub(s, qr)?;
        if let Some(&l) = inp.linear.get(k) {
            let l = tape.reshape(l, &[n, 1])?;
            let l = tape.scale(l, 0.5);
            lin = tape.add(lin, l)?;
        }
        let btq = tape.matmul(bt, qt)?;
        let btqb = tape.matmul(btq, inp.b)?;
        let g = tape.add(inp.r, btqb)?;
        let h = tape.matmul(btq, inp.a)?;
        let hl = tape.matmul(bt, lin)?;
        let kk = tape.solve(g, h)?;
        let kk = tape.neg(kk);
        let kf = tape.solve(g, hl)?;
        let kf = tape.neg(kf);
        let ht = tape.transpose(h)?;
        let atq = tape.matmul(at, qt)?;
        let atqa = tape.matmul(atq, inp.a)?;
        let hk = tape.matmul(ht, kk)?;
        p = tape.add(atqa, hk)?;
        let atl = tape.matmul(at, lin)?;
        let hkf = tape.matmul(ht, kf)?;
        s = tape.add(atl, hkf)?;
        gains.push(kk);
        offsets.push(kf);
        value_matrices.push(p);
    }
    gains.reverse();
    offsets.reverse();
    value_matrices.reverse();
    let mut x = tape.reshape(inp.x0, &[n, 1])?;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let kx = tape.matmul(gains[k], x)?;
        let u = tape.add(kx, offsets[k])?;
        let ax = tape.matmul(inp.a, x)?;
        let bu = tape.matmul(inp.b, u)?;
        x = tape.add(ax, bu)?;
        controls.push(u);
        states.push(x);
    }
    Ok(LqrVars { states, controls, gains, offsets, value_matrices })
}

/// Places the plant and problem on `tape`; `p` and `x0` may be supplied as
/// existing variables.
pub fn bind_problem(tape: &mut Tape, plant: &LinearPlant, problem: &MpcProblem, p: Option<Var>, x0: Option<Var>) -> Result<LqrInputs> {
    problem.validate(plant)?;
    let a = tape.constant(plant.a.clone());
    let b = match p {
        Some(p) => {
            let b0 = tape.constant(plant.b0.clone());
            tape.div(b0, p)?
        }
        None => tape.constant(plant.b()),
    };
    let q = tape.constant(problem.q.clone());
    let r = tape.constant(problem.r.clone());
    let x0 = match x0 {
        Some(v) => v,
        None => tape.constant(problem.x0.clone()),
    };
    let reference = problem.reference.iter().map(|t| tape.constant(t.clone())).collect();
    let linear = problem.linear.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(LqrInputs { a, b, q, r, x0, reference, linear })
}

fn columns(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| tape.value(*v).reshape(&[tape.value(*v).numel()]).expect("column")).collect()
}

fn matrices(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| tape.value(*v).clone()).collect()
}

pub fn lqr_solve(plant: &LinearPlant, problem: &MpcProblem) -> Result<LqrSolution> {
    let mut tape = Tape::new();
    let inp = bind_problem(&mut tape, plant, problem, None, None)?;
    let v = lqr_on_tape(&mut tape, &inp)?;
    Ok(LqrSolution {
        states: columns(&tape, &v.states),
        controls: columns(&tape, &v.controls),
        gains: matrices(&tape, &v.gains),
        offsets: columns(&tape, &v.offsets),
        value_matrices: matrices(&tape, &v.value_matrices),
    })
}

/// Upstream gradient on the optimal trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrUpstream {
    /// One per state `x_0 .. x_T` (empty means zero).
    pub states: Vec<Tensor>,
    /// One per control (empty means zero).
    pub controls: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrGradients {
    pub p: f64,
    pub x0: Tensor,
    pub q: Tensor,
    pub r: Tensor,
}

/// Pulls `upstream` back to the plant parameter, initial state and weights.
pub fn lqr_backward(plant: &LinearPlant, problem: &MpcProblem, upstream: &LqrUpstream) -> Result<LqrGradients> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::scalar(plant.p));
    let x0 = tape.leaf(problem.x0.clone());
    let mut inp = bind_problem(&mut tape, plant, problem, Some(p), Some(x0))?;
    inp.q = tape.leaf(problem.q.clone());
    inp.r = tape.leaf(problem.r.clone());
    let v = lqr_on_tape(&mut tape, &inp)?;
    let mut total = tape.scalar(0.0);
    for (vars, ups) in [(&v.states, &upstream.states), (&v.controls, &upstream.controls)] {
        if ups.is_empty() {
            continue;
        }
        if ups.len() != vars.len() {
            return Err(Error::Invalid(format!("upstream has {} entries for {} variables", ups.len(), vars.len())));
        }
        for (x, g) in vars.iter().zip(ups) {
            let shape = tape.shape(*x).to_vec();
            let g = tape.constant(g.reshape(&shape)?);
            let term = tape.mul(*x, g)?;
            let term = tape.sum(term);
            total = tape.add(total, term)?;
        }
    }
    let mut g = tape.grad(total, &[p, x0, inp.q, inp.r])?.into_iter();
    let (gp, gx, gq, gr) = (g.next().unwrap(), g.next().unwrap(), g.next().unwrap(), g.next().unwrap());
    Ok(LqrGradients { p: gp.item()?, x0: gx, q: gq, r: gr })
}
