use ilearn_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Planar rigid transform; `theta` stays in `(-pi, pi]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

pub fn wrap(theta: f64) -> f64 {
    if theta > -std::f64::consts::PI && theta <= std::f64::consts::PI {
        return theta;
    }
    let w = theta.sin().atan2(theta.cos());
    if w <= -std::f64::consts::PI { w + 2.0 * std::f64::consts::PI } else { w }
}

/// `(theta / 2) cot(theta / 2)` with its series near zero.
fn half_cot(theta: f64) -> f64 {
    if theta.abs() < 1e-4 {
        1.0 - theta * theta / 12.0
    } else {
        let h = 0.5 * theta;
        h * h.cos() / h.sin()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 { x, y, theta: wrap(theta) }
    }

    pub fn identity() -> Self {
        Pose2::default()
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Tangent coordinates `(rho_x, rho_y, theta)`.
    pub fn log(&self) -> [f64; 3] {
        let a = half_cot(self.theta);
        let h = 0.5 * self.theta;
        [a * self.x + h * self.y, -h * self.x + a * self.y, self.theta]
    }

    pub fn exp(v: [f64; 3]) -> Pose2 {
        let t = v[2];
        let (s, c) = if t.abs() < 1e-4 { (1.0 - t * t / 6.0, 0.5 * t) } else { (t.sin() / t, (1.0 - t.cos()) / t) };
        Pose2::new(s * v[0] - c * v[1], c * v[0] + s * v[1], t)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Scalar tape handles of a pose.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub x: Var,
    pub y: Var,
    pub theta: Var,
}

impl PoseVars {
    pub fn constant(tape: &mut Tape, p: &Pose2) -> Self {
        PoseVars { x: tape.scalar(p.x), y: tape.scalar(p.y), theta: tape.scalar(p.theta) }
    }
}

/// `R(-theta) (x, y)`.
fn rotate_back(tape: &mut Tape, theta: Var, x: Var, y: Var) -> Result<(Var, Var)> {
    let c = tape.cos(theta);
    let s = tape.sin(theta);
    let cx = tape.mul(c, x)?;
    let sy = tape.mul(s, y)?;
    let sx = tape.mul(s, x)?;
    let cy = tape.mul(c, y)?;
    Ok((tape.add(cx, sy)?, tape.sub(cy, sx)?))
}

/// `vee(log(Z^-1 (P_i^-1 P_j)))` on the tape.
pub fn relative_residual(tape: &mut Tape, pi: PoseVars, pj: PoseVars, z: PoseVars) -> Result<[Var; 3]> {
    let dx = tape.sub(pj.x, pi.x)?;
    let dy = tape.sub(pj.y, pi.y)?;
    let (tx, ty) = rotate_back(tape, pi.theta, dx, dy)?;
    let ex = tape.sub(tx, z.x)?;
    let ey = tape.sub(ty, z.y)?;
    let (ex, ey) = rotate_back(tape, z.theta, ex, ey)?;
    let phi = tape.sub(pj.theta, pi.theta)?;
    let phi = tape.sub(phi, z.theta)?;
    let phi = tape.wrap_angle(phi);
    let theta = tape.value(phi).item()?;
    let h = tape.scale(phi, 0.5);
    let a = if theta.abs() < 1e-4 {
        let sq = tape.square(phi);
        tape.affine(sq, -1.0 / 12.0, 1.0)
    } else {
        let c = tape.cos(h);
        let s = tape.sin(h);
        let cot = tape.div(c, s)?;
        tape.mul(h, cot)?
    };
    let ax = tape.mul(a, ex)?;
    let hy = tape.mul(h, ey)?;
    let hx = tape.mul(h, ex)?;
    let ay = tape.mul(a, ey)?;
    Ok([tape.add(ax, hy)?, tape.sub(ay, hx)?, phi])
}
