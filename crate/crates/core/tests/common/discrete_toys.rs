use ilearn::discrete::{control_variate_grad, score_function_grad, CategoricalDistribution, GradientSampleBatch};
use ilearn_autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent categorical rows with a non-additive cost table and an
/// affine (in the one-hot sample) surrogate.
pub struct Toy {
    pub logits: Tensor,
    pub table: Vec<Vec<f64>>,
    pub coupling: f64,
    pub weights: Tensor,
}

impl Toy {
    pub fn random(seed: u64, rows: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::matrix(rows, k, (0..rows * k).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let table = (0..rows).map(|_| (0..k).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect();
        let weights = Tensor::matrix(rows, k, (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        Toy { logits, table, coupling: rng.gen_range(0.2..1.0), weights }
    }

    pub fn cost(&self, z: &[usize]) -> f64 {
        let additive: f64 = z.iter().enumerate().map(|(r, &j)| self.table[r][j]).sum();
        let idx: usize = z.iter().sum();
        additive + self.coupling * (idx as f64).sin()
    }

    /// Surrogate `s(P) = <W, P>` on a one-hot sample.
    pub fn surrogate_at(&self, z: &[usize]) -> f64 {
        let k = self.logits.shape()[1];
        z.iter().enumerate().map(|(r, &j)| self.weights.data()[r * k + j]).sum()
    }

    /// Gradient of `s(softmax(logits))` through the probabilities.
    pub fn surrogate_pathwise(&self) -> Tensor {
        let mut t = Tape::new();
        let l = t.leaf(self.logits.clone());
        let p = t.softmax(l).unwrap();
        let w = t.constant(self.weights.clone());
        let s = t.mul(w, p).unwrap();
        let s = t.sum(s);
        t.grad(s, &[l]).unwrap().remove(0)
    }

    /// Exact `d E[L] / d logits` by differentiating the enumerated expectation.
    pub fn exact_gradient(&self) -> Tensor {
        let dist = CategoricalDistribution::from_logits(self.logits.clone()).unwrap();
        let k = self.logits.shape()[1];
        let mut t = Tape::new();
        let l = t.leaf(self.logits.clone());
        let p = t.softmax(l).unwrap();
        let flat = t.reshape(p, &[self.logits.numel()]).unwrap();
        let mut total = t.scalar(0.0);
        for z in dist.outcomes() {
            let mut prob = t.scalar(1.0);
            for (r, &j) in z.iter().enumerate() {
                let pj = t.index(flat, r * k + j).unwrap();
                prob = t.mul(prob, pj).unwrap();
            }
            let term = t.scale(prob, self.cost(&z));
            total = t.add(total, term).unwrap();
        }
        t.grad(total, &[l]).unwrap().remove(0)
    }

    /// Exact expectation of an estimator by summing over all outcomes.
    pub fn expected_estimate(&self, control_variate: bool) -> Tensor {
        let dist = CategoricalDistribution::from_logits(self.logits.clone()).unwrap();
        let path = self.surrogate_pathwise();
        let mut acc = Tensor::zeros(self.logits.shape());
        for z in dist.outcomes() {
            let batch = GradientSampleBatch::new(vec![self.cost(&z)], vec![dist.score(&z).unwrap()]);
            let est = if control_variate {
                control_variate_grad(&batch.with_surrogate(vec![self.surrogate_at(&z)], vec![path.clone()])).unwrap()
            } else {
                score_function_grad(&batch).unwrap()
            };
            acc = acc.add(&est.scale(dist.probability(&z))).unwrap();
        }
        acc
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Probability-weighted correlation between cost and surrogate.
pub fn correlation(probs: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let mx: f64 = probs.iter().zip(x).map(|(p, v)| p * v).sum();
    let my: f64 = probs.iter().zip(y).map(|(p, v)| p * v).sum();
    let cov: f64 = probs.iter().zip(x.iter().zip(y)).map(|(p, (a, b))| p * (a - mx) * (b - my)).sum();
    let vx: f64 = probs.iter().zip(x).map(|(p, a)| p * (a - mx).powi(2)).sum();
    let vy: f64 = probs.iter().zip(y).map(|(p, b)| p * (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub struct DominanceRun {
    pub rho: f64,
    pub score_variance: f64,
    pub cv_variance: f64,
}

impl DominanceRun {
    pub fn ratio(&self) -> f64 {
        self.cv_variance / self.score_variance
    }
}

/// Single categorical over `k` outcomes: a surrogate table is fitted by
/// gradient descent on the squared error against a noisy copy of the cost,
/// then both estimators are sampled.
pub fn variance_dominance(seed: u64, k: usize, samples: usize) -> DominanceRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::vector((0..k).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cost: Vec<f64> = (0..k).map(|_| 1.0 + rng.gen_range(0.0..2.0)).collect();
    let dist = CategoricalDistribution::from_logits(logits.clone()).unwrap();
    let probs = dist.probs().data().to_vec();

    let mut w = vec![0.0; k];
    for _ in 0..2000 {
        for j in 0..k {
            // the noisy target keeps the fit imperfect
            let target = cost[j] + 0.1 * ((j * 7 % 5) as f64 - 2.0);
            w[j] -= 0.05 * (w[j] - target);
        }
    }
    let rho = correlation(&probs, &cost, &w);
    let mut t = Tape::new();
    let l = t.leaf(logits);
    let p = t.softmax(l).unwrap();
    let wc = t.constant(Tensor::vector(w.clone()));
    let s = t.dot(wc, p).unwrap();
    let path = t.grad(s, &[l]).unwrap().remove(0);

    let mut score_terms = Vec::with_capacity(samples);
    let mut cv_terms = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z = dist.sample(&mut rng);
        let batch = GradientSampleBatch::new(vec![cost[z[0]]], vec![dist.score(&z).unwrap()]);
        score_terms.push(score_function_grad(&batch).unwrap());
        cv_terms.push(control_variate_grad(&batch.with_surrogate(vec![w[z[0]]], vec![path.clone()])).unwrap());
    }
    DominanceRun { rho, score_variance: total_variance(&score_terms), cv_variance: total_variance(&cv_terms) }
}

/// Sum over components of the sample variance.
pub fn total_variance(terms: &[Tensor]) -> f64 {
    let n = terms.len() as f64;
    let dim = terms[0].numel();
    (0..dim)
        .map(|c| {
            let m = terms.iter().map(|t| t.data()[c]).sum::<f64>() / n;
            terms.iter().map(|t| (t.data()[c] - m).powi(2)).sum::<f64>() / n
        })
        .sum()
}
