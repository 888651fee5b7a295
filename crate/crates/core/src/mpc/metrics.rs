use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ControlMetrics {
    /// Settling time in steps.
    pub st: f64,
    pub rmse: f64,
    pub sse: f64,
    /// The trajectory never entered the band before its final tenth.
    pub unsettled: bool,
}

/// Settling time, RMSE against `reference` and steady-state error. The
/// steady value is the mean of the final tenth of the trajectory.
pub fn control_metrics(trajectory: &[f64], reference: &[f64], band: f64) -> Result<ControlMetrics> {
    let n = trajectory.len();
    if n < 2 || reference.len() != n {
        return Err(Error::Invalid(format!("need at least 2 samples and a matching reference ({n} vs {})", reference.len())));
    }
    let tail = (n / 10).max(1);
    let steady = trajectory[n - tail..].iter().sum::<f64>() / tail as f64;
    let mut settle = n;
    for t in (0..n).rev() {
        if (trajectory[t] - steady).abs() > band {
            break;
        }
        settle = t;
    }
    let unsettled = settle >= n - tail;
    let st = if unsettled { n as f64 } else { settle as f64 };
    let rmse = (trajectory.iter().zip(reference).map(|(x, r)| (x - r).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(ControlMetrics { st, rmse, sse: (steady - reference[n - 1]).abs(), unsettled })
}
