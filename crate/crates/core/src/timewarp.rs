//! The time-warp integral ∫₀^u exp(β'X(t)) dt for step covariate paths.
//!
//! Both the integral and its inverse are exact segment sums, so they can sit
//! inside the solver's inner loop.

use crate::data::CovariatePath;
use crate::error::{Error, Result};

/// Largest linear predictor accepted before exp() is considered out of range.
pub const MAX_EXPONENT: f64 = 700.0;

/// Regression coefficients for one quantile level.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    pub q: f64,
}

impl Coefficients {
    pub fn new(beta: Vec<f64>, q: f64) -> Result<Self> {
        check_quantile(q)?;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain(format!("coefficients must be finite: {beta:?}")));
        }
        Ok(Self { beta, q })
    }

    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }
}

pub(crate) fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile level must lie in (0, 1), got {q}")))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// exp(β'x) with the overflow guard.
#[inline]
pub(crate) fn segment_rate(beta: &[f64], x: &[f64]) -> Result<f64> {
    let eta = dot(beta, x);
    if eta > MAX_EXPONENT || eta.is_nan() {
        return Err(Error::Range(format!("linear predictor {eta} out of range at beta = {beta:?}")));
    }
    Ok(eta.exp())
}

fn check_dims(path: &CovariatePath, beta: &[f64]) -> Result<()> {
    if path.dim() != beta.len() {
        return Err(Error::Dimension { expected: path.dim(), found: beta.len() });
    }
    Ok(())
}

/// warp_integral(path, beta, upper) = ∫₀^upper exp(β'X(t)) dt.
pub fn warp_integral(path: &CovariatePath, beta: &[f64], upper: f64) -> Result<f64> {
    check_dims(path, beta)?;
    if !(upper >= 0.0) {
        return Err(Error::Domain(format!("warp integral upper limit must be >= 0, got {upper}")));
    }
    let mut total = 0.0;
    for (start, end, x) in path.segments() {
        if start >= upper {
            break;
        }
        let len = end.min(upper) - start;
        total += len * segment_rate(beta, x)?;
    }
    Ok(total)
}

/// warp_inverse(path, beta, target): the θ with warp_integral(path, beta, θ) = target.
pub fn warp_inverse(path: &CovariatePath, beta: &[f64], target: f64) -> Result<f64> {
    check_dims(path, beta)?;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Domain(format!("warp inverse target must be positive, got {target}")));
    }
    let mut acc = 0.0;
    for (start, end, x) in path.segments() {
        let rate = segment_rate(beta, x)?;
        let mass = (end - start) * rate;
        if end.is_infinite() || acc + mass >= target {
            return Ok(start + (target - acc) / rate);
        }
        acc += mass;
    }
    unreachable!("last segment of a covariate path is unbounded")
}
