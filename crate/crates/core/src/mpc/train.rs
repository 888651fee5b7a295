use std::collections::VecDeque;

use ilearn_autodiff::{Optimizer, OptimizerKind, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserNet;
use super::lqr::{bind_problem, lqr_on_tape, MpcProblem};
use super::metrics::control_metrics;
use super::plant::{simulate_step, LinearPlant};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpcConfig {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub p_true: f64,
    /// Relative offset of the initial estimate (0.5 means +50%).
    pub p_init_offset: f64,
    pub sigma_u: f64,
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub horizon: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Learning rate of the plant parameter.
    pub lr: f64,
    pub lr_denoiser: f64,
    /// Both learning rates decay geometrically to this fraction by the
    /// last step.
    pub lr_final_fraction: f64,
    pub window: usize,
    pub hidden: usize,
    /// Diagonal of the state weight.
    pub q: Vec<f64>,
    pub r: f64,
    /// Set-point amplitude; the sign alternates every episode.
    pub amplitude: f64,
    /// Steps per cosine half-cycle of the reference.
    pub ramp_steps: usize,
    /// Odd number of half-cycles before the reference holds at the new
    /// set-point.
    pub cycles: usize,
    /// Settling band as a fraction of the set-point step.
    pub band: f64,
    pub divergence_bound: f64,
    pub train_p: bool,
    pub train_denoiser: bool,
    pub seed: u64,
}

impl Default for ImpcConfig {
    fn default() -> Self {
        ImpcConfig {
            n: 2,
            m: 1,
            dt: 0.1,
            p_true: 1.0,
            p_init_offset: 0.5,
            sigma_u: 1e-4,
            sigma_x: 8.73e-2,
            sigma_w: 0.0,
            horizon: 10,
            episodes: 100,
            steps_per_episode: 60,
            lr: 0.005,
            lr_denoiser: 1e-3,
            lr_final_fraction: 0.1,
            window: 5,
            hidden: 16,
            q: vec![100.0, 1.0],
            r: 1e-4,
            amplitude: 1.0,
            ramp_steps: 10,
            cycles: 3,
            band: 0.05,
            divergence_bound: 1e3,
            train_p: true,
            train_denoiser: true,
            seed: 0,
        }
    }
}

impl ImpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n < 1 || self.m != 1 {
            return bad("the integrator-chain plant needs n >= 1 and m = 1");
        }
        if self.q.len() != self.n || self.q.iter().any(|v| !(*v >= 0.0)) {
            return bad("q must hold n nonnegative diagonal weights");
        }
        if !(self.p_true > 0.0) || !(1.0 + self.p_init_offset > 0.0) || !(self.dt > 0.0) || !(self.r > 0.0) {
            return bad("p_true, dt and r must be positive and p_init_offset > -1");
        }
        if self.ramp_steps == 0 || self.cycles % 2 == 0 {
            return bad("ramp_steps must be positive and cycles odd");
        }
        if self.horizon == 0 || self.episodes == 0 || self.steps_per_episode < 2 || self.window == 0 || self.hidden == 0 {
            return bad("horizon, episodes, window and hidden must be positive and steps_per_episode >= 2");
        }
        if [self.sigma_u, self.sigma_x, self.sigma_w].iter().any(|s| !(*s >= 0.0)) || !(self.lr > 0.0) || !(self.lr_denoiser > 0.0) || !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("noise stds must be nonnegative, learning rates positive and lr_final_fraction in (0, 1]");
        }
        if !(self.band > 0.0) || !(self.divergence_bound > 0.0) {
            return bad("band and divergence_bound must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub ul_loss: f64,
    pub p_hat: f64,
    pub rmse: f64,
    pub st: f64,
    pub sse: f64,
}

#[derive(Clone, Debug)]
pub struct ImpcOutcome {
    pub p_hat: f64,
    pub denoiser: DenoiserNet,
    pub history: Vec<EpisodeRow>,
    /// Per-episode RMSE of the denoised and of the raw measurements
    /// against the true state.
    pub estimate_rmse: Vec<f64>,
    pub measurement_rmse: Vec<f64>,
}

impl ImpcOutcome {
    pub fn relative_p_error(&self, p_true: f64) -> f64 {
        (self.p_hat - p_true).abs() / p_true
    }
}

/// Joint imperative training of the plant parameter and the denoiser.
pub fn impc_train(cfg: &ImpcConfig) -> Result<ImpcOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = LinearPlant::chain(cfg.n, cfg.dt, cfg.p_true)?.with_noise(cfg.sigma_u, cfg.sigma_x, cfg.sigma_w);
    let mut p_hat = cfg.p_true * (1.0 + cfg.p_init_offset);
    let mut model = truth.clone().with_p(p_hat);
    let mut denoiser = DenoiserNet::new(cfg.window, cfg.n, cfg.m, cfg.hidden, cfg.dt, &mut rng)?;
    let mut opt_p = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut opt_net = Optimizer::new(OptimizerKind::adam(cfg.lr_denoiser));
    let q = {
        let mut d = vec![0.0; cfg.n * cfg.n];
        for i in 0..cfg.n {
            d[i * cfg.n + i] = cfg.q[i];
        }
        Tensor::matrix(cfg.n, cfg.n, d)?
    };
    let r = Tensor::matrix(1, 1, vec![cfg.r])?;

    // start at the opposite set-point so every episode is the same step
    let mut x0 = vec![0.0; cfg.n];
    x0[0] = -cfg.amplitude;
    let mut x = Tensor::vector(x0);
    let mut window: VecDeque<Tensor> = std::iter::repeat(x.clone()).take(cfg.window).collect();
    let mut applied: VecDeque<Tensor> = std::iter::repeat(Tensor::zeros(&[cfg.m])).take(cfg.window).collect();
    let mut history = Vec::with_capacity(cfg.episodes);
    let mut estimate_rmse = Vec::with_capacity(cfg.episodes);
    let mut measurement_rmse = Vec::with_capacity(cfg.episodes);
    let mut global_step = 0usize;
    let total_steps = cfg.episodes * cfg.steps_per_episode;

    for episode in 0..cfg.episodes {
        let sign = if episode % 2 == 0 { 1.0 } else { -1.0 };
        let reference = |t: usize| -> Tensor {
            let mut v = vec![0.0; cfg.n];
            let phase = t.min(cfg.ramp_steps * cfg.cycles) as f64 / cfg.ramp_steps as f64;
            v[0] = -sign * cfg.amplitude * (std::f64::consts::PI * phase).cos();
            Tensor::vector(v)
        };
        let mut angle = Vec::with_capacity(cfg.steps_per_episode);
        let mut loss_sum = 0.0;
        let (mut est_sq, mut meas_sq) = (0.0, 0.0);
        let mut ref_angle = Vec::with_capacity(cfg.steps_per_episode);
        for t in 0..cfg.steps_per_episode {
            let mut tape = Tape::new();
            let bound = denoiser.params.bind(&mut tape);
            let p = tape.leaf(Tensor::scalar(p_hat));
            let w_now: Vec<Tensor> = window.iter().cloned().collect();
            let u_now: Vec<Tensor> = applied.iter().cloned().collect();
            let x_hat = denoiser.forward_on(&mut tape, &bound, &w_now, &u_now)?;
            let problem = MpcProblem {
                horizon: cfg.horizon,
                q: q.clone(),
                r: r.clone(),
                linear: Vec::new(),
                reference: (1..=cfg.horizon).map(|j| reference(t + j)).collect(),
                x0: tape.value(x_hat).reshape(&[cfg.n])?,
            };
            // the estimate enters the lower level as data
            let x_ll = tape.detach(x_hat);
            let inp = bind_problem(&mut tape, &model, &problem, Some(p), Some(x_ll))?;
            let sol = lqr_on_tape(&mut tape, &inp)?;
            let u = sol.controls[0];
            let u_val = tape.value(u).reshape(&[1])?;

            let (next, meas) = simulate_step(&truth, &x, &u_val, &mut rng)?;
            let norm = next.norm();
            if !(norm <= cfg.divergence_bound) {
                return Err(Error::Divergent { step: global_step, norm, bound: cfg.divergence_bound });
            }
            x = next;
            window.pop_front();
            window.push_back(meas.clone());
            applied.pop_front();
            applied.push_back(u_val.clone());
            angle.push(x.data()[0]);
            ref_angle.push(reference(t + 1).data()[0]);

            // model prediction from the estimate and the planned control
            let ax = tape.matmul(inp.a, x_hat)?;
            let bu = tape.matmul(inp.b, u)?;
            let predicted = tape.add(ax, bu)?;
            let w_next: Vec<Tensor> = window.iter().cloned().collect();
            let u_next: Vec<Tensor> = applied.iter().cloned().collect();
            est_sq += denoiser.estimate(&w_next, &u_next)?.sub(&x)?.norm().powi(2);
            let observed = tape.constant(meas.reshape(&[cfg.n, 1])?);
            meas_sq += meas.sub(&x)?.norm().powi(2);
            let diff = tape.sub(observed, predicted)?;
            let sq = tape.square(diff);
            let loss = tape.sum(sq);
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { step: global_step, value });
            }
            loss_sum += value;

            let mut wrt = vec![p];
            let names: Vec<String> = denoiser.params.iter().map(|prm| prm.name.clone()).collect();
            wrt.extend(names.iter().map(|nm| bound.get(nm)));
            let grads = tape.grad(loss, &wrt)?;
            let decay = cfg.lr_final_fraction.powf(global_step as f64 / (total_steps - 1).max(1) as f64);
            if cfg.train_p {
                let next_p = opt_p.step_tensor(&Tensor::scalar(p_hat), &grads[0]).item()?;
                // keep the estimate positive
                p_hat = (p_hat + decay * (next_p - p_hat)).max(1e-3 * cfg.p_true);
                model = model.with_p(p_hat);
            }
            if cfg.train_denoiser {
                let before = denoiser.params.clone();
                let map = names.into_iter().zip(grads.into_iter().skip(1)).collect();
                opt_net.step(&mut denoiser.params, &map)?;
                for prm in before.iter() {
                    let stepped = denoiser.params.value(&prm.name).clone();
                    let blended = prm.value.add(&stepped.sub(&prm.value)?.scale(decay))?;
                    denoiser.params.set(&prm.name, blended)?;
                }
            }
            global_step += 1;
        }
        let steps = cfg.steps_per_episode as f64;
        let cm = control_metrics(&angle, &ref_angle, cfg.band * 2.0 * cfg.amplitude)?;
        history.push(EpisodeRow { episode, ul_loss: loss_sum / steps, p_hat, rmse: cm.rmse, st: cm.st, sse: cm.sse });
        estimate_rmse.push((est_sq / steps).sqrt());
        measurement_rmse.push((meas_sq / steps).sqrt());
    }
    Ok(ImpcOutcome { p_hat, denoiser, history, estimate_rmse, measurement_rmse })
}
