//! Heuristic network: two neighbourhood-aggregate layers over per-cell
//! features, a per-cell two-layer perceptron, a linear skip on the
//! goal-relative distances, and a softplus head.

use ilearn_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::diff::NEIGHBOR_KERNEL;
use super::grid::GridPlanInstance;
use crate::error::Result;

/// Map, start, goal, |dr|, |dc|, Euclidean, octile (distances scaled by
/// `1 / (H + W)`).
pub const FEATURES: usize = 7;
/// Unscaled Euclidean and octile distances.
pub const SKIP_FEATURES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicNetConfig {
    pub conv_width: usize,
    pub mlp_width: usize,
}

impl Default for HeuristicNetConfig {
    fn default() -> Self {
        HeuristicNetConfig { conv_width: 16, mlp_width: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeuristicNet {
    pub params: ParamStore,
}

const NAMES: [&str; 11] = ["c1_self", "c1_nbr", "c1_bias", "c2_self", "c2_nbr", "c2_bias", "m1_w", "m1_b", "m2_w", "m2_b", "skip"];

fn shapes(cfg: &HeuristicNetConfig) -> [Vec<usize>; 11] {
    let (c, m) = (cfg.conv_width, cfg.mlp_width);
    [
        vec![FEATURES, c],
        vec![FEATURES, c],
        vec![1, c],
        vec![c, c],
        vec![c, c],
        vec![1, c],
        vec![c, m],
        vec![1, m],
        vec![m, 1],
        vec![1, 1],
        vec![SKIP_FEATURES, 1],
    ]
}

/// Per-cell inputs `[H*W, FEATURES]` and skip inputs `[H*W, SKIP_FEATURES]`.
pub fn features(inst: &GridPlanInstance) -> (Tensor, Tensor) {
    let enc = inst.encode();
    let eu = inst.euclidean_to_goal();
    let oc = inst.octile_to_goal();
    let norm = 1.0 / (inst.height() + inst.width()) as f64;
    let (gr, gc) = inst.goal();
    let n = inst.len();
    let mut x = Vec::with_capacity(n * FEATURES);
    let mut s = Vec::with_capacity(n * SKIP_FEATURES);
    for i in 0..n {
        let (r, c) = inst.cell(i);
        x.extend_from_slice(&enc.data()[3 * i..3 * i + 3]);
        x.extend([r.abs_diff(gr) as f64 * norm, c.abs_diff(gc) as f64 * norm, eu[i] * norm, oc[i] * norm]);
        s.extend([eu[i], oc[i]]);
    }
    (Tensor::matrix(n, FEATURES, x).expect("sizes"), Tensor::matrix(n, SKIP_FEATURES, s).expect("sizes"))
}

impl HeuristicNet {
    /// All weights zero: the output is `ln 2` everywhere.
    pub fn zeros(cfg: &HeuristicNetConfig) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in NAMES.iter().zip(shapes(cfg)) {
            params.insert(name, Tensor::zeros(&shape), true).expect("unique names");
        }
        HeuristicNet { params }
    }

    /// Scaled-normal hidden weights; output layer, biases and skip zero.
    pub fn random(cfg: &HeuristicNetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in NAMES.iter().zip(shapes(cfg)) {
            let zero = name.ends_with("bias") || name.ends_with("_b") || *name == "m2_w" || *name == "skip";
            let value = if zero {
                Tensor::zeros(&shape)
            } else {
                let normal = Normal::new(0.0, (1.0 / shape[0] as f64).sqrt()).expect("positive std");
                Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| normal.sample(rng)).collect()).expect("sizes")
            };
            params.insert(name, value, true).expect("unique names");
        }
        HeuristicNet { params }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        for name in NAMES {
            if params.get(name).is_none() {
                return Err(crate::Error::Invalid(format!("heuristic weights lack {name}")));
            }
        }
        Ok(HeuristicNet { params })
    }

    /// `[H, W]` heuristic on `tape`, reading weights from `bound`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &ilearn_autodiff::Bound, inst: &GridPlanInstance) -> Result<Var> {
        let (h, w) = (inst.height(), inst.width());
        let n = inst.len();
        let (x, skip) = features(inst);
        let x = tape.constant(x);
        let skip = tape.constant(skip);
        let layer = |tape: &mut Tape, x: Var, prefix: &str| -> Result<Var> {
            let c = tape.shape(x)[1];
            let grid = tape.reshape(x, &[h, w, c])?;
            let mut kernel = NEIGHBOR_KERNEL;
            kernel.iter_mut().for_each(|k| *k /= 8.0);
            let nb = tape.aggregate(grid, kernel)?;
            let nb = tape.reshape(nb, &[n, c])?;
            let a = tape.matmul(x, bound.get(&format!("{prefix}_self")))?;
            let b = tape.matmul(nb, bound.get(&format!("{prefix}_nbr")))?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, bound.get(&format!("{prefix}_bias")))?;
            Ok(tape.relu(s))
        };
        let z = layer(tape, x, "c1")?;
        let z = layer(tape, z, "c2")?;
        let m = tape.matmul(z, bound.get("m1_w"))?;
        let m = tape.add(m, bound.get("m1_b"))?;
        let m = tape.relu(m);
        let o = tape.matmul(m, bound.get("m2_w"))?;
        let o = tape.add(o, bound.get("m2_b"))?;
        let sk = tape.matmul(skip, bound.get("skip"))?;
        let o = tape.add(o, sk)?;
        let o = tape.softplus(o);
        Ok(tape.reshape(o, &[h, w])?)
    }

    /// Heuristic values without gradients.
    pub fn forward(&self, inst: &GridPlanInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h = self.forward_on(&mut tape, &bound, inst)?;
        Ok(tape.value(h).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_is_ln2() {
        let inst = GridPlanInstance::open(5, 4, (0, 0), (4, 3)).unwrap();
        let h = HeuristicNet::zeros(&HeuristicNetConfig::default()).forward(&inst).unwrap();
        assert_eq!(h.len(), 20);
        assert!(h.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn random_net_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = GridPlanInstance::open(6, 6, (1, 1), (4, 5)).unwrap();
        for _ in 0..5 {
            let mut net = HeuristicNet::random(&HeuristicNetConfig::default(), &mut rng);
            net.params.set("m2_w", Tensor::matrix(32, 1, (0..32).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap()).unwrap();
            assert!(net.forward(&inst).unwrap().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
