use ilearn_autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Two-layer perceptron on a window of measurements and the controls
/// applied between them, predicting a correction to the latest measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub params: ParamStore,
    pub window: usize,
    pub n: usize,
    pub m: usize,
    /// Multiplies controls on input.
    pub control_scale: f64,
}

impl DenoiserNet {
    /// Hidden layer random, output layer zero (the estimate starts as the
    /// raw latest measurement).
    pub fn new(window: usize, n: usize, m: usize, hidden: usize, control_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if window == 0 || n == 0 || hidden == 0 {
            return Err(Error::Invalid("denoiser sizes must be positive".into()));
        }
        let inputs = window * (n + m);
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::matrix(inputs, hidden, (0..inputs * hidden).map(|_| normal.sample(rng)).collect())?, true)?;
        params.insert("b1", Tensor::zeros(&[1, hidden]), true)?;
        params.insert("w2", Tensor::zeros(&[hidden, n]), true)?;
        params.insert("b2", Tensor::zeros(&[1, n]), true)?;
        Ok(DenoiserNet { params, window, n, m, control_scale })
    }

    /// `[n, 1]` estimate from the last `window` measurements and the
    /// controls applied before each of them (oldest first).
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, window: &[Tensor], controls: &[Tensor]) -> Result<Var> {
        if window.len() != self.window || window.iter().any(|m| m.numel() != self.n) {
            return Err(Error::Invalid(format!("denoiser expects {} measurements of size {}", self.window, self.n)));
        }
        if controls.len() != self.window || controls.iter().any(|u| u.numel() != self.m) {
            return Err(Error::Invalid(format!("denoiser expects {} controls of size {}", self.window, self.m)));
        }
        let last = window[self.window - 1].data();
        let mut input: Vec<f64> = window.iter().flat_map(|m| m.data().iter().zip(last).map(|(a, b)| a - b)).collect();
        input.extend(controls.iter().flat_map(|u| u.data().iter().map(|v| v * self.control_scale)));
        let x = tape.constant(Tensor::matrix(1, input.len(), input)?);
        let h = tape.matmul(x, bound.get("w1"))?;
        let h = tape.add(h, bound.get("b1"))?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, bound.get("w2"))?;
        let o = tape.add(o, bound.get("b2"))?;
        let o = tape.reshape(o, &[self.n, 1])?;
        let base = tape.constant(Tensor::matrix(self.n, 1, last.to_vec())?);
        Ok(tape.add(base, o)?)
    }

    pub fn estimate(&self, window: &[Tensor], controls: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let v = self.forward_on(&mut tape, &bound, window, controls)?;
        Ok(tape.value(v).reshape(&[self.n])?)
    }
}
