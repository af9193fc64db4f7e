//! Small summary statistics used by the bootstrap and the study harness.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> Option<f64> {
    (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64)
}

/// Sample standard deviation (divisor n − 1); `None` below two values.
///
/// Deviations are taken from the first value so that a constant sample gives exactly 0.
pub fn sd(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let d: Vec<f64> = x.iter().map(|v| v - x[0]).collect();
    let m = mean(&d)?;
    let ss: f64 = d.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (x.len() - 1) as f64).sqrt())
}

/// Linear-interpolation sample quantile (Hyndman–Fan type 7).
pub fn quantile(x: &[f64], p: f64) -> Option<f64> {
    if x.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn median(x: &[f64]) -> Option<f64> {
    quantile(x, 0.5)
}

/// The normal interquartile range of a unit-variance distribution.
pub const NORMAL_IQR: f64 = 1.349;

/// Interquartile range divided by 1.349; `None` below two values.
pub fn iqsd(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    Some((quantile(x, 0.75)? - quantile(x, 0.25)?) / NORMAL_IQR)
}

/// Φ⁻¹(p).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}
