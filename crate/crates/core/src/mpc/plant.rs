use ilearn_autodiff::Tensor;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `x+ = A x + B(p) u` with `B(p) = B0 / p`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPlant {
    pub a: Tensor,
    pub b0: Tensor,
    pub p: f64,
    /// Control noise std.
    pub sigma_u: f64,
    /// Measurement noise std.
    pub sigma_x: f64,
    /// Process noise std.
    pub sigma_w: f64,
}

impl LinearPlant {
    pub fn new(a: Tensor, b0: Tensor, p: f64) -> Result<Self> {
        let (n, n2) = (a.shape().first().copied().unwrap_or(0), a.shape().get(1).copied().unwrap_or(0));
        if a.rank() != 2 || n != n2 || n == 0 {
            return Err(Error::Invalid(format!("A must be square, got {:?}", a.shape())));
        }
        if b0.rank() != 2 || b0.shape()[0] != n || b0.shape()[1] == 0 {
            return Err(Error::Invalid(format!("B0 must be {n}xm, got {:?}", b0.shape())));
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Invalid(format!("plant parameter must be positive, got {p}")));
        }
        Ok(LinearPlant { a, b0, p, sigma_u: 0.0, sigma_x: 0.0, sigma_w: 0.0 })
    }

    /// Integrator chain of `n` states driven through the last one, e.g.
    /// angle and rate for `n = 2`.
    pub fn chain(n: usize, dt: f64, p: f64) -> Result<Self> {
        if n == 0 || !(dt > 0.0) {
            return Err(Error::Invalid("chain needs n >= 1 and dt > 0".into()));
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
            if i + 1 < n {
                a[i * n + i + 1] = dt;
            }
        }
        let mut b = vec![0.0; n];
        b[n - 1] = dt;
        LinearPlant::new(Tensor::matrix(n, n, a)?, Tensor::matrix(n, 1, b)?, p)
    }

    pub fn with_noise(mut self, sigma_u: f64, sigma_x: f64, sigma_w: f64) -> Self {
        self.sigma_u = sigma_u;
        self.sigma_x = sigma_x;
        self.sigma_w = sigma_w;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn n(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.b0.shape()[1]
    }

    pub fn b(&self) -> Tensor {
        self.b0.scale(1.0 / self.p)
    }

    /// Noise-free `A x + B u`.
    pub fn step(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        let ax = self.a.matmul(&x.reshape(&[self.n(), 1])?)?;
        let bu = self.b().matmul(&u.reshape(&[self.m(), 1])?)?;
        Ok(ax.add(&bu)?.reshape(&[self.n()])?)
    }
}

/// One noisy step: returns the next state and its noisy measurement.
pub fn simulate_step(plant: &LinearPlant, x: &Tensor, u: &Tensor, rng: &mut impl rand::RngCore) -> Result<(Tensor, Tensor)> {
    let gauss = |std: f64| Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()));
    let (nu, nw, nv) = (gauss(plant.sigma_u)?, gauss(plant.sigma_w)?, gauss(plant.sigma_x)?);
    let noisy = |t: &Tensor, d: &Normal<f64>, rng: &mut dyn rand::RngCore| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + d.sample(rng)).collect()).expect("same shape")
    };
    let u_noisy = noisy(u, &nu, rng);
    let next = noisy(&plant.step(x, &u_noisy)?, &nw, rng);
    let meas = noisy(&next, &nv, rng);
    Ok((next, meas))
}
