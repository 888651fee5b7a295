use std::collections::BTreeMap;

use ilearn_autodiff::{Optimizer, OptimizerKind, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::MtspInstance;
use super::net::{AllocationNet, SurrogateNet};
use super::tsp::{minmax_cost, solve_assignment};
use crate::discrete::{control_variate_grad, score_function_grad, CategoricalDistribution, GradientSampleBatch, VarianceTracker};
use crate::error::{Error, Result};

/// Objective of the surrogate update, pooled over all allocation-network
/// parameters and samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateObjective {
    /// Mean squared per-sample estimate.
    #[default]
    SecondMoment,
    /// Mean squared deviation of per-sample estimates from their batch mean.
    BatchVariance,
}

/// Estimates for one instance and a batch of sampled allocations.
#[derive(Clone, Debug)]
pub struct ImtspGrad {
    /// Mean control-variate estimate (score-function estimate without a
    /// surrogate), keyed by parameter name.
    pub theta: BTreeMap<String, Tensor>,
    /// Gradient of the surrogate objective.
    pub gamma: Option<BTreeMap<String, Tensor>>,
    /// `L' = s(f(x; theta); gamma)`.
    pub surrogate_value: Option<f64>,
    /// Per-sample estimates, flattened in parameter-name order.
    pub per_sample: Vec<Tensor>,
    /// Per-sample score-function estimates `L grad log f`.
    pub score_per_sample: Vec<Tensor>,
}

fn flatten(parts: &[Tensor]) -> Tensor {
    Tensor::vector(parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn unflatten(flat: &Tensor, like: &[(String, Vec<usize>)]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut at = 0;
    for (name, shape) in like {
        let n: usize = shape.iter().product();
        out.insert(name.clone(), Tensor::new(shape.clone(), flat.data()[at..at + n].to_vec()).expect("sizes"));
        at += n;
    }
    out
}

/// `[L - L'] grad log f + grad s(f)` per sample, and the surrogate
/// objective's gradient. `L'` is cut from the allocation parameters.
pub fn imtsp_grad(
    net: &AllocationNet,
    surrogate: Option<&SurrogateNet>,
    inst: &MtspInstance,
    samples: &[Vec<usize>],
    costs: &[f64],
    objective: SurrogateObjective,
) -> Result<ImtspGrad> {
    if samples.is_empty() || samples.len() != costs.len() {
        return Err(Error::Invalid(format!("{} samples with {} costs", samples.len(), costs.len())));
    }
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let names: Vec<String> = bound.names().map(str::to_string).collect();
    let theta_vars = bound.vars();
    let layout: Vec<(String, Vec<usize>)> = names.iter().zip(&theta_vars).map(|(n, v)| (n.clone(), tape.shape(*v).to_vec())).collect();
    let logits = net.logits_on(&mut tape, &bound, inst)?;
    let dist = CategoricalDistribution::from_logits(tape.value(logits).clone())?;
    let mut scores = Vec::with_capacity(samples.len());
    for z in samples {
        let d_logits = tape.constant(dist.score(z)?);
        let lp = tape.mul(logits, d_logits)?;
        let lp = tape.sum(lp);
        scores.push(flatten(&tape.grad(lp, &theta_vars)?));
    }
    let score_per_sample: Vec<Tensor> = scores.iter().zip(costs).map(|(s, c)| s.scale(*c)).collect();
    let batch = GradientSampleBatch::new(costs.to_vec(), scores.clone());
    let Some(surrogate) = surrogate else {
        let mean = score_function_grad(&batch)?;
        return Ok(ImtspGrad { theta: unflatten(&mean, &layout), gamma: None, surrogate_value: None, per_sample: score_per_sample.clone(), score_per_sample });
    };
    let sb = surrogate.params.bind(&mut tape);
    let gamma_vars = sb.vars();
    let probs = tape.softmax(logits)?;
    let s = surrogate.forward_on(&mut tape, &sb, inst, probs)?;
    let l_prime = tape.item(s)?;
    let g_parts = tape.gradient(s, &theta_vars, true)?;
    let g_value = flatten(&g_parts.iter().map(|g| tape.value(*g).clone()).collect::<Vec<_>>());
    let batch = batch.with_surrogate(vec![l_prime; costs.len()], vec![g_value; costs.len()]);
    let mean = control_variate_grad(&batch)?;
    let per_sample = batch.control_variate_terms()?;

    // Surrogate objective as a function of gamma through L' and grad s.
    let (b, p) = (costs.len(), scores[0].numel());
    let s_mat = tape.constant(Tensor::matrix(b, p, scores.iter().flat_map(|t| t.data().iter().copied()).collect())?);
    let l = tape.constant(Tensor::matrix(b, 1, costs.to_vec())?);
    let c = tape.sub(l, s)?;
    let mut rows = tape.mul(s_mat, c)?;
    match objective {
        SurrogateObjective::SecondMoment => {
            let flat: Vec<Var> = g_parts
                .iter()
                .map(|g| {
                    let n = tape.value(*g).numel();
                    tape.reshape(*g, &[1, n])
                })
                .collect::<std::result::Result<_, _>>()?;
            let g_row = tape.concat(&flat, 1)?;
            rows = tape.add(rows, g_row)?;
        }
        SurrogateObjective::BatchVariance => {
            let m = tape.sum_axis(rows, 0)?;
            let m = tape.scale(m, 1.0 / b as f64);
            rows = tape.sub(rows, m)?;
        }
    }
    let sq = tape.square(rows);
    let obj = tape.mean(sq);
    let gamma_grads = tape.grad(obj, &gamma_vars)?;
    let gamma = sb.names().map(str::to_string).zip(gamma_grads).collect();
    Ok(ImtspGrad { theta: unflatten(&mean, &layout), gamma: Some(gamma), surrogate_value: Some(l_prime), per_sample, score_per_sample })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImtspConfig {
    pub agents: usize,
    pub min_cities: usize,
    pub max_cities: usize,
    pub iterations: usize,
    /// Allocations sampled per iteration.
    pub batch: usize,
    pub lr: f64,
    pub lr_surrogate: f64,
    /// Both step sizes decay geometrically to this fraction by the last
    /// iteration.
    pub lr_final_fraction: f64,
    pub use_surrogate: bool,
    pub objective: SurrogateObjective,
    /// Iterations excluded from the variance comparison.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ImtspConfig {
    fn default() -> Self {
        ImtspConfig {
            agents: 5,
            min_cities: 20,
            max_cities: 50,
            iterations: 4000,
            batch: 16,
            lr: 1e-3,
            lr_surrogate: 1e-3,
            lr_final_fraction: 1.0,
            use_surrogate: true,
            objective: SurrogateObjective::default(),
            warmup: 20,
            seed: 0,
        }
    }
}

impl ImtspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.agents == 0 {
            return bad("agents must be >= 1".into());
        }
        if self.min_cities < self.agents || self.max_cities < self.min_cities {
            return bad(format!("need agents <= min_cities <= max_cities, got {} / {} / {}", self.agents, self.min_cities, self.max_cities));
        }
        if self.batch < 2 {
            return bad("batch must be >= 2".into());
        }
        if !(self.lr > 0.0) || !(self.lr_surrogate > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad(format!("lr_final_fraction must lie in (0, 1], got {}", self.lr_final_fraction));
        }
        Ok(())
    }

    pub fn instance(&self, rng: &mut impl Rng) -> Result<MtspInstance> {
        let n = rng.gen_range(self.min_cities..=self.max_cities);
        MtspInstance::random(rng, n, self.agents)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImtspRow {
    pub iter: usize,
    pub mean_minmax: f64,
    /// `ln` of the pooled per-sample variance of the estimate used.
    pub log_grad_variance: f64,
    /// Same for the score-function estimate on the same samples.
    pub log_score_variance: f64,
}

#[derive(Clone, Debug)]
pub struct ImtspOutcome {
    pub net: AllocationNet,
    pub surrogate: Option<SurrogateNet>,
    pub history: Vec<ImtspRow>,
}

fn log_variance(samples: &[Tensor]) -> Result<f64> {
    let mut tracker = VarianceTracker::new();
    for s in samples {
        tracker.push(s)?;
    }
    Ok(tracker.mean_log_variance())
}

/// Adam step scaled by `decay` (Adam is invariant to gradient scale, so the
/// update itself is shrunk).
fn step(opt: &mut Optimizer, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, decay: f64) -> Result<()> {
    let before = params.clone();
    opt.step(params, grads)?;
    if decay != 1.0 {
        for p in before.iter() {
            let stepped = params.value(&p.name);
            let blended = p.value.add(&stepped.sub(&p.value)?.scale(decay))?;
            params.set(&p.name, blended)?;
        }
    }
    Ok(())
}

/// Min-max cost of `assignment`.
pub fn assignment_cost(inst: &MtspInstance, assignment: &[usize]) -> f64 {
    minmax_cost(&solve_assignment(&inst.cities, inst.depot, inst.agents, assignment))
}

/// Sample allocations, solve the per-agent tours, step the allocation
/// network with the control-variate estimate and the surrogate with its
/// variance objective.
pub fn imtsp_train(cfg: &ImtspConfig) -> Result<ImtspOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = AllocationNet::random(cfg.agents, &mut rng);
    let mut surrogate = cfg.use_surrogate.then(|| SurrogateNet::random(cfg.max_cities, cfg.agents, &mut rng));
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut opt_s = Optimizer::new(OptimizerKind::adam(cfg.lr_surrogate));
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let inst = cfg.instance(&mut rng)?;
        let dist = CategoricalDistribution::from_logits(net.logits(&inst)?)?;
        let samples: Vec<Vec<usize>> = (0..cfg.batch).map(|_| dist.sample(&mut rng)).collect();
        let costs: Vec<f64> = samples.iter().map(|z| assignment_cost(&inst, z)).collect();
        let g = imtsp_grad(&net, surrogate.as_ref(), &inst, &samples, &costs, cfg.objective)?;
        history.push(ImtspRow {
            iter,
            mean_minmax: costs.iter().sum::<f64>() / costs.len() as f64,
            log_grad_variance: log_variance(&g.per_sample)?,
            log_score_variance: log_variance(&g.score_per_sample)?,
        });
        if g.theta.values().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite { step: iter, value: f64::NAN });
        }
        let decay = cfg.lr_final_fraction.powf(iter as f64 / (cfg.iterations - 1).max(1) as f64);
        step(&mut opt, &mut net.params, &g.theta, decay)?;
        if let (Some(s), Some(gg)) = (surrogate.as_mut(), g.gamma.as_ref()) {
            step(&mut opt_s, &mut s.params, gg, decay)?;
        }
    }
    Ok(ImtspOutcome { net, surrogate, history })
}

/// Sweep heuristic: cities sorted by angle around the depot, split into
/// contiguous blocks of near-equal size.
pub fn sector_assignment(inst: &MtspInstance) -> Vec<usize> {
    let n = inst.len();
    let mut out = vec![0; n];
    for (k, &i) in inst.sweep_order().iter().enumerate() {
        out[i] = k * inst.agents / n;
    }
    out
}

/// Greedy (most likely) allocation cost per instance.
pub fn evaluate_greedy(net: &AllocationNet, instances: &[MtspInstance]) -> Result<Vec<f64>> {
    instances.iter().map(|inst| Ok(assignment_cost(inst, &net.greedy(inst)?))).collect()
}

/// Best of the greedy allocation and `samples` sampled allocations per
/// instance.
pub fn evaluate_sampled(net: &AllocationNet, instances: &[MtspInstance], samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instances
        .iter()
        .map(|inst| {
            let logits = net.logits(inst)?;
            let greedy = logits.data().chunks(net.agents).map(argmax).collect::<Vec<_>>();
            let dist = CategoricalDistribution::from_logits(logits)?;
            let mut best = assignment_cost(inst, &greedy);
            for _ in 0..samples {
                best = best.min(assignment_cost(inst, &dist.sample(&mut rng)));
            }
            Ok(best)
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

pub fn evaluate_sector(instances: &[MtspInstance]) -> Vec<f64> {
    instances.iter().map(|inst| assignment_cost(inst, &sector_assignment(inst))).collect()
}

/// Fraction of post-warmup rows where the estimate's variance is below the
/// score-function variance.
pub fn variance_dominance(history: &[ImtspRow], warmup: usize) -> f64 {
    let rows = &history[warmup.min(history.len())..];
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.log_grad_variance < r.log_score_variance).count() as f64 / rows.len() as f64
}
