//! Allocation network (per-city perceptron with a row softmax) and the
//! surrogate network used as a control variate.

use std::f64::consts::TAU;

use ilearn_autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::instance::{dist, MtspInstance};
use crate::error::{Error, Result};

/// x, y, dx, dy, r, cos and sin of the polar angle, of the sweep rank and
/// of the distance-weighted sweep rank (ranks scaled to a full turn).
pub const CITY_FEATURES: usize = 11;
pub const ALLOC_HIDDEN: usize = 64;
pub const SURROGATE_HIDDEN: usize = 256;
/// City count, depot x, depot y, mean depot distance.
pub const SUMMARY_FEATURES: usize = 4;

fn normal_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / shape[0] as f64).sqrt()).expect("positive std");
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| normal.sample(rng)).collect()).expect("sizes")
}

fn build(layers: &[(&str, Vec<usize>, bool)], rng: Option<&mut dyn rand::RngCore>) -> ParamStore {
    let mut params = ParamStore::new();
    let mut rng = rng;
    for (name, shape, random) in layers {
        let value = match (&mut rng, random) {
            (Some(r), true) => normal_init(shape, r),
            _ => Tensor::zeros(shape),
        };
        params.insert(name, value, true).expect("unique names");
    }
    params
}

fn check(params: &ParamStore, names: &[&str]) -> Result<()> {
    for n in names {
        if params.get(n).is_none() {
            return Err(Error::Invalid(format!("weights lack {n}")));
        }
    }
    Ok(())
}

/// Per-city inputs `[N, CITY_FEATURES]`.
pub fn city_features(inst: &MtspInstance) -> Tensor {
    let n = inst.len();
    let angles = inst.angles();
    let radii: Vec<f64> = inst.cities.iter().map(|c| dist(*c, inst.depot)).collect();
    let total_r: f64 = radii.iter().sum::<f64>().max(1e-12);
    let mut rank = vec![0.0; n];
    let mut weighted = vec![0.0; n];
    let mut acc = 0.0;
    for (k, &i) in inst.sweep_order().iter().enumerate() {
        rank[i] = (k as f64 + 0.5) / n as f64;
        acc += radii[i];
        weighted[i] = (acc - 0.5 * radii[i]) / total_r;
    }
    let mut x = Vec::with_capacity(n * CITY_FEATURES);
    for (i, c) in inst.cities.iter().enumerate() {
        let (dx, dy) = (c[0] - inst.depot[0], c[1] - inst.depot[1]);
        let (q, w) = (TAU * rank[i], TAU * weighted[i]);
        x.extend([c[0], c[1], dx, dy, radii[i], angles[i].cos(), angles[i].sin(), q.cos(), q.sin(), w.cos(), w.sin()]);
    }
    Tensor::matrix(n, CITY_FEATURES, x).expect("sizes")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationNet {
    pub params: ParamStore,
    pub agents: usize,
}

const ALLOC_NAMES: [&str; 7] = ["w1", "b1", "w2", "b2", "w3", "b3", "skip"];

fn alloc_layers(agents: usize) -> Vec<(&'static str, Vec<usize>, bool)> {
    vec![
        ("w1", vec![CITY_FEATURES, ALLOC_HIDDEN], true),
        ("b1", vec![1, ALLOC_HIDDEN], false),
        ("w2", vec![ALLOC_HIDDEN, ALLOC_HIDDEN], true),
        ("b2", vec![1, ALLOC_HIDDEN], false),
        ("w3", vec![ALLOC_HIDDEN, agents], true),
        ("b3", vec![1, agents], false),
        ("skip", vec![CITY_FEATURES, agents], false),
    ]
}

impl AllocationNet {
    /// All weights zero: uniform rows.
    pub fn zeros(agents: usize) -> Self {
        AllocationNet { params: build(&alloc_layers(agents), None), agents }
    }

    pub fn random(agents: usize, rng: &mut impl Rng) -> Self {
        AllocationNet { params: build(&alloc_layers(agents), Some(rng)), agents }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        check(&params, &ALLOC_NAMES)?;
        let agents = params.value("b3").numel();
        Ok(AllocationNet { params, agents })
    }

    /// Logits `[N, M]`.
    pub fn logits_on(&self, tape: &mut Tape, bound: &Bound, inst: &MtspInstance) -> Result<Var> {
        if inst.agents != self.agents {
            return Err(Error::Invalid(format!("net has {} agents, instance {}", self.agents, inst.agents)));
        }
        let x = tape.constant(city_features(inst));
        let mut h = x;
        for k in 1..=3 {
            let z = tape.matmul(h, bound.get(&format!("w{k}")))?;
            let z = tape.add(z, bound.get(&format!("b{k}")))?;
            h = if k < 3 { tape.relu(z) } else { z };
        }
        let skip = tape.matmul(x, bound.get("skip"))?;
        Ok(tape.add(h, skip)?)
    }

    /// Row-softmax probabilities `[N, M]`.
    pub fn probs_on(&self, tape: &mut Tape, bound: &Bound, inst: &MtspInstance) -> Result<Var> {
        let l = self.logits_on(tape, bound, inst)?;
        Ok(tape.softmax(l)?)
    }

    pub fn logits(&self, inst: &MtspInstance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let l = self.logits_on(&mut tape, &bound, inst)?;
        Ok(tape.value(l).clone())
    }

    /// Most likely agent per city.
    pub fn greedy(&self, inst: &MtspInstance) -> Result<Vec<usize>> {
        let l = self.logits(inst)?;
        Ok(l.data()
            .chunks(self.agents)
            .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateNet {
    pub params: ParamStore,
    pub max_cities: usize,
    pub agents: usize,
}

const SURR_NAMES: [&str; 6] = ["s1", "t1", "s2", "t2", "s3", "t3"];

fn surrogate_layers(max_cities: usize, agents: usize) -> Vec<(&'static str, Vec<usize>, bool)> {
    let d = max_cities * agents + SUMMARY_FEATURES;
    vec![
        ("s1", vec![d, SURROGATE_HIDDEN], true),
        ("t1", vec![1, SURROGATE_HIDDEN], false),
        ("s2", vec![SURROGATE_HIDDEN, SURROGATE_HIDDEN], true),
        ("t2", vec![1, SURROGATE_HIDDEN], false),
        ("s3", vec![SURROGATE_HIDDEN, 1], false),
        ("t3", vec![1, 1], false),
    ]
}

impl SurrogateNet {
    /// Hidden weights scaled-normal, output layer zero.
    pub fn random(max_cities: usize, agents: usize, rng: &mut impl Rng) -> Self {
        SurrogateNet { params: build(&surrogate_layers(max_cities, agents), Some(rng)), max_cities, agents }
    }

    pub fn zeros(max_cities: usize, agents: usize) -> Self {
        SurrogateNet { params: build(&surrogate_layers(max_cities, agents), None), max_cities, agents }
    }

    pub fn from_params(params: ParamStore, max_cities: usize, agents: usize) -> Result<Self> {
        check(&params, &SURR_NAMES)?;
        if params.value("s1").shape()[0] != max_cities * agents + SUMMARY_FEATURES {
            return Err(Error::Invalid("surrogate input width does not match max_cities and agents".into()));
        }
        Ok(SurrogateNet { params, max_cities, agents })
    }

    /// `s(probs)`: probabilities zero-padded to `max_cities` rows and
    /// flattened, followed by the instance summary.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, inst: &MtspInstance, probs: Var) -> Result<Var> {
        let n = inst.len();
        if n > self.max_cities || inst.agents != self.agents {
            return Err(Error::Invalid(format!("surrogate sized for {} cities and {} agents", self.max_cities, self.agents)));
        }
        let padded = tape.pad(probs, 0, 0, self.max_cities)?;
        let flat = tape.reshape(padded, &[1, self.max_cities * self.agents])?;
        let mean_r = inst.cities.iter().map(|c| dist(*c, inst.depot)).sum::<f64>() / n as f64;
        let summary = tape.constant(Tensor::matrix(1, SUMMARY_FEATURES, vec![n as f64 / self.max_cities as f64, inst.depot[0], inst.depot[1], mean_r])?);
        let mut h = tape.concat(&[flat, summary], 1)?;
        for (w, b) in [("s1", "t1"), ("s2", "t2"), ("s3", "t3")] {
            let z = tape.matmul(h, bound.get(w))?;
            let z = tape.add(z, bound.get(b))?;
            h = if w == "s3" { z } else { tape.tanh(z) };
        }
        Ok(tape.reshape(h, &[])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = MtspInstance::random(&mut rng, 7, 3).unwrap();
        let net = AllocationNet::zeros(3);
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape);
        let p = net.probs_on(&mut tape, &b, &inst).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = MtspInstance::random(&mut rng, 30, 5).unwrap();
        let net = AllocationNet::random(5, &mut rng);
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape);
        let p = net.probs_on(&mut tape, &b, &inst).unwrap();
        for row in tape.value(p).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn sweep_ranks_cover_the_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = MtspInstance::random(&mut rng, 10, 2).unwrap();
        let f = city_features(&inst);
        let mut ranks: Vec<f64> = f.data().chunks(CITY_FEATURES).map(|r| r[8].atan2(r[7]).rem_euclid(TAU) / TAU).collect();
        ranks.sort_by(f64::total_cmp);
        for (k, r) in ranks.iter().enumerate() {
            assert!((r - (k as f64 + 0.5) / 10.0).abs() < 1e-12);
        }
    }
}
