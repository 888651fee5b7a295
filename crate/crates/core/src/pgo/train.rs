use std::rc::Rc;

use ilearn_autodiff::{Optimizer, OptimizerKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{residual_vector, Edge, PoseGraph2D};
use super::se2::{Pose2, PoseVars};
use super::solve::{gauss_newton_solve, GnConfig};
use crate::blo::{hypergrad_unrolled, BilevelProblem, LowerSolverConfig, LowerSolverKind};
use crate::error::{Error, Result};

/// Front-end parameters `theta = (b_x, b_y, b_theta, s)`.
pub const THETA_DIM: usize = 4;

/// Learnable odometry correction applied to raw relative motions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFrontEnd {
    pub bias: [f64; 3],
    pub scale: f64,
}

impl Default for SyntheticFrontEnd {
    fn default() -> Self {
        SyntheticFrontEnd { bias: [0.0; 3], scale: 1.0 }
    }
}

impl SyntheticFrontEnd {
    pub fn from_theta(theta: &Tensor) -> Result<Self> {
        let d = theta.data();
        if d.len() != THETA_DIM {
            return Err(Error::Invalid(format!("front-end expects {THETA_DIM} parameters, got {}", d.len())));
        }
        if !(d[3] > 0.0) {
            return Err(Error::Invalid(format!("front-end scale must be > 0, got {}", d[3])));
        }
        Ok(SyntheticFrontEnd { bias: [d[0], d[1], d[2]], scale: d[3] })
    }

    pub fn theta(&self) -> Tensor {
        Tensor::vector(vec![self.bias[0], self.bias[1], self.bias[2], self.scale])
    }

    /// `(s m_x + b_x, s m_y + b_y, m_theta + b_theta)`.
    pub fn apply(&self, m: &Pose2) -> Pose2 {
        Pose2::new(self.scale * m.x + self.bias[0], self.scale * m.y + self.bias[1], m.theta + self.bias[2])
    }
}

fn apply_on_tape(tape: &mut Tape, theta: Var, m: &Pose2) -> Result<PoseVars> {
    let b: Vec<Var> = (0..THETA_DIM).map(|k| tape.index(theta, k)).collect::<std::result::Result<_, _>>()?;
    let sx = tape.scale(b[3], m.x);
    let sy = tape.scale(b[3], m.y);
    Ok(PoseVars { x: tape.add(sx, b[0])?, y: tape.add(sy, b[1])?, theta: tape.add_scalar(b[2], m.theta) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub nodes: usize,
    pub step_length: f64,
    pub turn_std: f64,
    /// Raw odometry is `a z + c` per translation axis, `z_theta + c_theta` in heading.
    pub sensor_scale: f64,
    pub sensor_bias: [f64; 3],
    pub odom_noise: [f64; 3],
    pub odom_info: [f64; 3],
    /// Unbiased edges `k -> k + 2`.
    pub skip_noise: [f64; 3],
    pub skip_info: [f64; 3],
    /// Unbiased edges `k -> k + loop_stride`; 0 disables them.
    pub loop_stride: usize,
    pub iterations: usize,
    /// Adam step size for `b_x`, `b_y` and `s`.
    pub lr: f64,
    /// Adam step size for `b_theta`.
    pub heading_lr: f64,
    pub gn_max_iters: usize,
    pub eps_stat: f64,
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            nodes: 20,
            step_length: 1.0,
            turn_std: 0.3,
            sensor_scale: 1.2,
            sensor_bias: [0.1, -0.05, 0.03],
            odom_noise: [0.01, 0.01, 0.005],
            odom_info: [1.0, 1.0, 1.0],
            skip_noise: [0.01, 0.01, 0.005],
            skip_info: [10.0, 10.0, 10.0],
            loop_stride: 5,
            iterations: 50,
            lr: 0.005,
            heading_lr: 0.001,
            gn_max_iters: 50,
            eps_stat: 1e-9,
            seed: 0,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes < 3 {
            return bad(format!("nodes must be >= 3, got {}", self.nodes));
        }
        if !(self.sensor_scale > 0.0) {
            return bad(format!("sensor_scale must be > 0, got {}", self.sensor_scale));
        }
        let nonneg = |v: &[f64; 3]| v.iter().all(|x| *x >= 0.0 && x.is_finite());
        if !nonneg(&self.odom_noise) || !nonneg(&self.skip_noise) || !nonneg(&self.odom_info) || !nonneg(&self.skip_info) {
            return bad("noise and information weights must be finite and >= 0".into());
        }
        if !(self.lr > 0.0) || !(self.heading_lr > 0.0) || !(self.eps_stat > 0.0) || self.gn_max_iters == 0 {
            return bad("lr, heading_lr, eps_stat and gn_max_iters must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth, raw odometry and the unbiased skip and loop edges.
#[derive(Clone, Debug)]
pub struct SlamFixture {
    pub truth: Vec<Pose2>,
    /// Raw relative motion `k -> k + 1`.
    pub odometry: Vec<Pose2>,
    pub odom_info: [f64; 3],
    pub fixed_edges: Vec<Edge>,
}

pub fn generate_fixture(cfg: &SlamConfig, rng: &mut impl Rng) -> Result<SlamFixture> {
    cfg.validate()?;
    let turn = Normal::new(0.0, cfg.turn_std).map_err(|e| Error::Config(e.to_string()))?;
    let noise = |rng: &mut dyn rand::RngCore, std: &[f64; 3]| -> [f64; 3] {
        std.map(|s| if s > 0.0 { Normal::new(0.0, s).expect("positive std").sample(rng) } else { 0.0 })
    };
    let mut truth = vec![Pose2::identity()];
    for _ in 1..cfg.nodes {
        let step = Pose2::new(cfg.step_length, 0.0, turn.sample(rng));
        truth.push(truth.last().expect("nonempty").compose(&step));
    }
    let a = cfg.sensor_scale;
    let c = cfg.sensor_bias;
    let odometry = truth
        .windows(2)
        .map(|w| {
            let z = w[0].between(&w[1]);
            let e = noise(rng, &cfg.odom_noise);
            Pose2::new(a * z.x + c[0] + e[0], a * z.y + c[1] + e[1], z.theta + c[2] + e[2])
        })
        .collect();
    let mut fixed_edges = Vec::new();
    let mut add = |i: usize, j: usize, rng: &mut dyn rand::RngCore| {
        let z = truth[i].between(&truth[j]);
        let e = noise(rng, &cfg.skip_noise);
        fixed_edges.push(Edge { i, j, measurement: Pose2::new(z.x + e[0], z.y + e[1], z.theta + e[2]), info: cfg.skip_info });
    };
    for k in 0..cfg.nodes - 2 {
        add(k, k + 2, rng);
    }
    if cfg.loop_stride > 2 {
        for k in (0..cfg.nodes).step_by(cfg.loop_stride) {
            if k + cfg.loop_stride < cfg.nodes {
                add(k, k + cfg.loop_stride, rng);
            }
        }
    }
    Ok(SlamFixture { truth, odometry, odom_info: cfg.odom_info, fixed_edges })
}

impl SlamFixture {
    /// Front-end odometry composed from the true first pose.
    pub fn dead_reckoning(&self, fe: &SyntheticFrontEnd) -> Vec<Pose2> {
        let mut out = vec![self.truth[0]];
        for m in &self.odometry {
            out.push(out.last().expect("nonempty").compose(&fe.apply(m)));
        }
        out
    }

    /// Graph whose odometry edges carry the front-end output, initialized
    /// at dead reckoning. Odometry edges come first.
    pub fn graph(&self, fe: &SyntheticFrontEnd) -> Result<PoseGraph2D> {
        let mut edges: Vec<Edge> = self
            .odometry
            .iter()
            .enumerate()
            .map(|(k, m)| Edge { i: k, j: k + 1, measurement: fe.apply(m), info: self.odom_info })
            .collect();
        edges.extend_from_slice(&self.fixed_edges);
        PoseGraph2D::new(self.dead_reckoning(fe), edges)
    }

    /// Bilevel problem over `psi = theta`, `phi` = free poses, with
    /// `U = L = 0.5 |sqrt(W) r|^2` solved by Gauss-Newton.
    pub fn problem(self: &Rc<Self>, gn_steps: usize) -> Result<BilevelProblem> {
        let template = Rc::new(self.graph(&SyntheticFrontEnd::default())?);
        let fixture = Rc::clone(self);
        let residuals = {
            let (fixture, template) = (Rc::clone(&fixture), Rc::clone(&template));
            move |tape: &mut Tape, psi: Var, phi: Var| -> ilearn_autodiff::Result<Var> {
                let mut meas = Vec::with_capacity(template.edges.len());
                for m in &fixture.odometry {
                    meas.push(Some(apply_on_tape(tape, psi, m).map_err(into_ad)?));
                }
                residual_vector(tape, &template, phi, &meas).map_err(into_ad)
            }
        };
        let residuals = Rc::new(residuals);
        let cost = |r: Rc<dyn Fn(&mut Tape, Var, Var) -> ilearn_autodiff::Result<Var>>| {
            Box::new(move |tape: &mut Tape, psi: Var, phi: Var| {
                let v = r(tape, psi, phi)?;
                let sq = tape.square(v);
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            })
        };
        let phi_dim = 3 * (self.truth.len() - 1);
        let init = {
            let fixture = Rc::clone(&fixture);
            move |psi: &Tensor| match SyntheticFrontEnd::from_theta(psi) {
                Ok(fe) => Tensor::vector(fixture.dead_reckoning(&fe)[1..].iter().flat_map(|p| p.to_array()).collect()),
                Err(_) => Tensor::zeros(&[phi_dim]),
            }
        };
        let solver = LowerSolverConfig { kind: LowerSolverKind::GaussNewton, steps: gn_steps.max(1), step_size: 1.0, tol: 1e-9 };
        let r2 = Rc::clone(&residuals);
        Ok(BilevelProblem::new(cost(residuals.clone()), cost(residuals), phi_dim, solver)
            .with_residuals(Box::new(move |t, p, f| r2(t, p, f)))
            .with_init(Box::new(init)))
    }
}

fn into_ad(e: Error) -> ilearn_autodiff::AdError {
    match e {
        Error::Tape(e) => e,
        other => ilearn_autodiff::AdError::Domain { op: "pose graph", detail: other.to_string() },
    }
}

/// `dU/dtheta` with `mu*` held constant; rejected unless `|dL/dmu| <= eps_stat`.
pub fn one_step_hypergrad(problem: &BilevelProblem, theta: &Tensor, mu_star: &Tensor, eps_stat: f64) -> Result<Tensor> {
    let grad_norm = problem.lower_gradient(theta, mu_star)?.norm();
    if !(grad_norm <= eps_stat) {
        return Err(Error::NotConverged { grad_norm, tol: eps_stat });
    }
    let mut tape = Tape::new();
    let p = tape.leaf(theta.clone());
    let f = tape.constant(mu_star.clone());
    let u = (problem.upper)(&mut tape, p, f)?;
    Ok(tape.grad(u, &[p])?.remove(0))
}

/// Differentiates through `steps` Gauss-Newton iterations from dead reckoning.
pub fn unrolled_hypergrad(fixture: &Rc<SlamFixture>, theta: &Tensor, steps: usize) -> Result<Tensor> {
    hypergrad_unrolled(&fixture.problem(steps)?, theta)
}

/// Positional RMSE after expressing both trajectories relative to node 0.
pub fn ate(estimated: &[Pose2], ground_truth: &[Pose2]) -> Result<f64> {
    if estimated.len() != ground_truth.len() || estimated.is_empty() {
        return Err(Error::Invalid(format!("trajectory lengths differ: {} vs {}", estimated.len(), ground_truth.len())));
    }
    let (e0, g0) = (estimated[0].inverse(), ground_truth[0].inverse());
    let sum: f64 = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| {
            let (a, b) = (e0.compose(e), g0.compose(g));
            (a.x - b.x).powi(2) + (a.y - b.y).powi(2)
        })
        .sum();
    Ok((sum / estimated.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlamRow {
    pub iter: usize,
    pub ate_frontend: f64,
    pub ate_optimized: f64,
}

#[derive(Clone, Debug)]
pub struct SlamOutcome {
    pub front_end: SyntheticFrontEnd,
    pub history: Vec<SlamRow>,
    /// Lower-level cost at `mu*` per iteration.
    pub costs: Vec<f64>,
}

/// Front-end prediction, Gauss-Newton back-end, one-step hypergradient and
/// an Adam update of `theta`, repeated `iterations` times. The last row is
/// evaluated after the final update.
pub fn imperative_slam_train(fixture: &SlamFixture, cfg: &SlamConfig, init: SyntheticFrontEnd) -> Result<SlamOutcome> {
    cfg.validate()?;
    let fixture = Rc::new(fixture.clone());
    let problem = fixture.problem(1)?;
    let gn = GnConfig { max_iters: cfg.gn_max_iters, tol: 0.1 * cfg.eps_stat, damping: None };
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut heading = Optimizer::new(OptimizerKind::adam(cfg.heading_lr));
    let mut theta = init.theta();
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut costs = Vec::with_capacity(cfg.iterations + 1);
    for iter in 0..=cfg.iterations {
        let fe = SyntheticFrontEnd::from_theta(&theta)?;
        let graph = fixture.graph(&fe)?;
        let (solved, report) = gauss_newton_solve(&graph, &gn)?;
        history.push(SlamRow {
            iter,
            ate_frontend: ate(&graph.nodes, &fixture.truth)?,
            ate_optimized: ate(&solved.nodes, &fixture.truth)?,
        });
        costs.push(0.5 * report.cost);
        if iter == cfg.iterations {
            break;
        }
        let g = one_step_hypergrad(&problem, &theta, &solved.free_params(), cfg.eps_stat)
            .map_err(|e| Error::Aborted { iteration: iter, history: costs.clone(), reason: Box::new(e) })?;
        let mut next = opt.step_tensor(&theta, &g).into_data();
        let h = heading.step_tensor(&Tensor::vector(vec![theta.data()[2]]), &Tensor::vector(vec![g.data()[2]]));
        next[2] = h.data()[0];
        next[3] = next[3].max(1e-3);
        theta = Tensor::vector(next);
    }
    Ok(SlamOutcome { front_end: SyntheticFrontEnd::from_theta(&theta)?, history, costs })
}

/// Fixture from `cfg.seed`.
pub fn seeded_fixture(cfg: &SlamConfig) -> Result<SlamFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_fixture(cfg, &mut rng)
}
