//! Gradient estimators through discrete sampling: score function,
//! reparameterization and the surrogate control variate, with variance
//! tracking across mini-batches.

use std::io::Write;

use ilearn_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Row-wise categorical distribution over the last axis of `logits`.
#[derive(Clone, Debug)]
pub struct CategoricalDistribution {
    logits: Tensor,
    probs: Tensor,
}

impl CategoricalDistribution {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.rank() == 0 || logits.rank() > 2 || logits.numel() == 0 {
            return Err(Error::Invalid(format!("categorical logits must be a non-empty vector or matrix, got {:?}", logits.shape())));
        }
        if !logits.all_finite() {
            return Err(Error::Invalid("categorical logits must be finite".into()));
        }
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let p = tape.softmax(l)?;
        let probs = tape.value(p).clone();
        Ok(CategoricalDistribution { logits, probs })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        if self.logits.rank() == 1 {
            1
        } else {
            self.logits.shape()[0]
        }
    }

    pub fn categories(&self) -> usize {
        *self.logits.shape().last().expect("non-empty shape")
    }

    fn row(&self, i: usize) -> &[f64] {
        let k = self.categories();
        &self.probs.data()[i * k..(i + 1) * k]
    }

    /// One category per row by inverse-CDF sampling.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let u: f64 = rng.gen();
                let row = self.row(i);
                let mut acc = 0.0;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return j;
                    }
                }
                // rounding left u above the total mass; take the last supported category
                row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
            })
            .collect()
    }

    pub fn probability(&self, sample: &[usize]) -> f64 {
        sample.iter().enumerate().map(|(i, &j)| self.row(i)[j]).product()
    }

    pub fn log_prob(&self, sample: &[usize]) -> f64 {
        sample.iter().enumerate().map(|(i, &j)| self.row(i)[j].ln()).sum()
    }

    /// `d log f(sample) / d logits = onehot(sample) - probs`.
    pub fn score(&self, sample: &[usize]) -> Result<Tensor> {
        if sample.len() != self.rows() {
            return Err(Error::Invalid(format!("sample has {} rows, distribution has {}", sample.len(), self.rows())));
        }
        let k = self.categories();
        let mut g: Vec<f64> = self.probs.data().iter().map(|p| -p).collect();
        for (i, &j) in sample.iter().enumerate() {
            if j >= k {
                return Err(Error::Invalid(format!("category {j} out of range {k}")));
            }
            g[i * k + j] += 1.0;
        }
        Ok(Tensor::new(self.logits.shape().to_vec(), g)?)
    }

    /// Every joint outcome (row-major odometer order). Only sensible for
    /// small spaces.
    pub fn outcomes(&self) -> Vec<Vec<usize>> {
        let rows = self.rows();
        let k = self.categories();
        let total = k.pow(rows as u32);
        (0..total)
            .map(|mut idx| {
                let mut z = vec![0; rows];
                for r in (0..rows).rev() {
                    z[r] = idx % k;
                    idx /= k;
                }
                z
            })
            .collect()
    }
}

/// Per-sample quantities for one estimator evaluation.
#[derive(Clone, Debug, Default)]
pub struct GradientSampleBatch {
    /// `L(z_i)`
    pub costs: Vec<f64>,
    /// `d log f(z_i | theta) / d theta`
    pub scores: Vec<Tensor>,
    /// `L'(z_i)`
    pub surrogate_values: Option<Vec<f64>>,
    /// Pathwise gradient of the surrogate through the relaxed input.
    pub surrogate_grads: Option<Vec<Tensor>>,
}

impl GradientSampleBatch {
    pub fn new(costs: Vec<f64>, scores: Vec<Tensor>) -> Self {
        GradientSampleBatch { costs, scores, surrogate_values: None, surrogate_grads: None }
    }

    pub fn with_surrogate(mut self, values: Vec<f64>, grads: Vec<Tensor>) -> Self {
        self.surrogate_values = Some(values);
        self.surrogate_grads = Some(grads);
        self
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.costs.is_empty() {
            return Err(Error::Invalid("empty sample batch".into()));
        }
        if self.scores.len() != self.costs.len() {
            return Err(Error::Invalid(format!("{} costs but {} score gradients", self.costs.len(), self.scores.len())));
        }
        let shape = self.scores[0].shape();
        if self.scores.iter().any(|s| s.shape() != shape) {
            return Err(Error::Invalid("score gradients differ in shape".into()));
        }
        Ok(())
    }

    /// Per-sample score-function terms `L(z_i) grad log f(z_i)`.
    pub fn score_terms(&self) -> Result<Vec<Tensor>> {
        self.check()?;
        Ok(self.costs.iter().zip(&self.scores).map(|(c, s)| s.scale(*c)).collect())
    }

    /// Per-sample control-variate terms
    /// `(L(z_i) - L'(z_i)) grad log f(z_i) + grad s`.
    pub fn control_variate_terms(&self) -> Result<Vec<Tensor>> {
        self.check()?;
        let values = self.surrogate_values.as_ref().ok_or(Error::Missing("surrogate values"))?;
        let grads = self.surrogate_grads.as_ref().ok_or(Error::Missing("surrogate pathwise gradients"))?;
        if values.len() != self.len() || grads.len() != self.len() {
            return Err(Error::Invalid("surrogate arrays must match the sample count".into()));
        }
        self.costs
            .iter()
            .zip(values)
            .zip(self.scores.iter().zip(grads))
            .map(|((c, v), (s, g))| Ok(s.scale(c - v).add(g)?))
            .collect()
    }
}

fn mean(terms: &[Tensor]) -> Tensor {
    let n = terms.len() as f64;
    let mut acc = vec![0.0; terms[0].numel()];
    for t in terms {
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    Tensor::new(terms[0].shape().to_vec(), acc.into_iter().map(|a| a / n).collect()).expect("same shape")
}

/// `(1/S) sum L(z_i) grad log f(z_i)`.
pub fn score_function_grad(batch: &GradientSampleBatch) -> Result<Tensor> {
    Ok(mean(&batch.score_terms()?))
}

/// Control-variate estimator with `gamma = -1`.
pub fn control_variate_grad(batch: &GradientSampleBatch) -> Result<Tensor> {
    Ok(mean(&batch.control_variate_terms()?))
}

/// `(1/S) sum d g(T(theta, eps_i)) / d theta`.
pub fn reparam_grad<T, G>(transform: T, cost: G, theta: &Tensor, eps: &[Tensor]) -> Result<Tensor>
where
    T: Fn(&mut Tape, Var, Var) -> ilearn_autodiff::Result<Var>,
    G: Fn(&mut Tape, Var) -> ilearn_autodiff::Result<Var>,
{
    if eps.is_empty() {
        return Err(Error::Invalid("reparameterization needs at least one sample".into()));
    }
    let mut acc = Tensor::zeros(theta.shape());
    for e in eps {
        let mut tape = Tape::new();
        let th = tape.leaf(theta.clone());
        let ev = tape.constant(e.clone());
        let z = transform(&mut tape, th, ev)?;
        let g = cost(&mut tape, z)?;
        acc = acc.add(&tape.grad(g, &[th])?.remove(0))?;
    }
    Ok(acc.scale(1.0 / eps.len() as f64))
}

/// `gamma* = -cov(X, Y) / var(Y)`.
pub fn optimal_gamma(cov_xy: f64, var_y: f64) -> Result<f64> {
    if !(var_y > 0.0) {
        return Err(Error::Invalid(format!("control variate variance must be > 0, got {var_y}")));
    }
    Ok(-cov_xy / var_y)
}

/// Variance ratio `1 - rho^2` left after the optimal control variate.
pub fn variance_reduction_factor(rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Invalid(format!("correlation must lie in [-1, 1], got {rho}")));
    }
    Ok(1.0 - rho * rho)
}

/// Running per-component moments of gradient estimates.
#[derive(Clone, Debug, Default)]
pub struct VarianceTracker {
    count: usize,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub iteration: usize,
    pub mean_log_variance: f64,
}

#[derive(Clone, Debug)]
pub struct VarianceReport {
    /// One row per batch from the second on.
    pub series: Vec<VarianceRow>,
    /// Final per-component variance.
    pub variance: Vec<f64>,
}

impl VarianceTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, grad: &Tensor) -> Result<()> {
        if self.count == 0 {
            self.mean = vec![0.0; grad.numel()];
            self.mean_sq = vec![0.0; grad.numel()];
        } else if grad.numel() != self.mean.len() {
            return Err(Error::Invalid(format!("gradient has {} components, tracker holds {}", grad.numel(), self.mean.len())));
        }
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for ((m, s), g) in self.mean.iter_mut().zip(self.mean_sq.iter_mut()).zip(grad.data()) {
            *m += (g - *m) * w;
            *s += (g * g - *s) * w;
        }
        Ok(())
    }

    /// Population variance `E[g^2] - E[g]^2`, clamped at zero.
    pub fn variance(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.mean_sq).map(|(m, s)| (s - m * m).max(0.0)).collect()
    }

    pub fn mean_variance(&self) -> f64 {
        let v = self.variance();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// `ln` of the component-averaged variance (floored at the smallest
    /// positive double so identical gradients stay finite).
    pub fn mean_log_variance(&self) -> f64 {
        self.mean_variance().max(f64::MIN_POSITIVE).ln()
    }
}

/// Feeds mini-batch gradients through a tracker and reports the series.
pub fn track_variance(tracker: &mut VarianceTracker, batches: &[Tensor]) -> Result<VarianceReport> {
    if tracker.count() + batches.len() < 2 {
        return Err(Error::Invalid("variance tracking needs at least 2 mini-batches".into()));
    }
    let mut series = Vec::new();
    for b in batches {
        tracker.push(b)?;
        if tracker.count() >= 2 {
            series.push(VarianceRow { iteration: tracker.count(), mean_log_variance: tracker.mean_log_variance() });
        }
    }
    Ok(VarianceReport { series, variance: tracker.variance() })
}

/// CSV with columns `iteration,mean_log_variance`.
pub fn write_variance_csv(rows: &[VarianceRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,mean_log_variance")?;
    for r in rows {
        writeln!(out, "{},{}", r.iteration, r.mean_log_variance)?;
    }
    Ok(())
}
