use ilearn_autodiff::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `f(x) = w2 . tanh(W1 x + b1) + 0.5 x^T A x + sum softplus(x)`.
#[derive(Clone)]
pub struct Smooth {
    pub n: usize,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    a: Vec<Vec<f64>>,
}

impl Smooth {
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 4;
        let mut row = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w1 = (0..h).map(|_| row(n)).collect();
        let b1 = row(h);
        let w2 = row(h);
        let a = (0..n).map(|_| row(n)).collect();
        Smooth { n, w1, b1, w2, a }
    }

    pub fn on_tape(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (n, h) = (self.n, self.w1.len());
        let w1 = t.constant(Tensor::matrix(h, n, self.w1.concat())?);
        let b1 = t.constant(Tensor::matrix(h, 1, self.b1.clone())?);
        let w2 = t.constant(Tensor::matrix(1, h, self.w2.clone())?);
        let a = t.constant(Tensor::matrix(n, n, self.a.concat())?);
        let xc = t.reshape(x, &[n, 1])?;
        let z = t.matmul(w1, xc)?;
        let z = t.add(z, b1)?;
        let z = t.tanh(z);
        let o = t.matmul(w2, z)?;
        let o = t.sum(o);
        let ax = t.matmul(a, xc)?;
        let q = t.dot(ax, xc)?;
        let q = t.scale(q, 0.5);
        let sp = t.softplus(x);
        let sp = t.sum(sp);
        let s = t.add(o, q)?;
        t.add(s, sp)
    }

    /// Hessian written out by hand.
    pub fn hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut hess = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                hess[i][j] = 0.5 * (self.a[i][j] + self.a[j][i]);
            }
            let s = 1.0 / (1.0 + (-x[i]).exp());
            hess[i][i] += s * (1.0 - s);
        }
        for (k, wk) in self.w1.iter().enumerate() {
            let z: f64 = wk.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[k];
            let th = z.tanh();
            let curv = self.w2[k] * -2.0 * th * (1.0 - th * th);
            for i in 0..n {
                for j in 0..n {
                    hess[i][j] += curv * wk[i] * wk[j];
                }
            }
        }
        hess
    }
}
