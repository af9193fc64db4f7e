//! Product-limit and Nelson–Aalen estimates of the censoring distribution.
//!
//! Censoring (`delta == false`) is the event here and observed failures are
//! the censored observations. At a tied time failures leave the risk set
//! before the censorings are counted.

use num_traits::Num;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Floor applied to Ĝ before it is used as a divisor.
pub const SURVIVAL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Ĝ(t), right-continuous value.
    Right,
    /// Ĝ(t−), the left limit.
    Left,
}

/// One step of the product-limit recursion at a censoring time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmStep<T> {
    pub time: f64,
    pub at_risk: T,
    pub censored: T,
    pub hazard: T,
    pub survival: T,
}

/// Runs the product-limit / Nelson–Aalen recursion over `(time, is_censoring, weight)`
/// records, in any numeric type so the recursion can be checked in exact arithmetic.
pub fn product_limit<T>(records: &[(f64, bool, T)]) -> Vec<KmStep<T>>
where
    T: Num + Copy,
{
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].0.total_cmp(&records[b].0));

    let mut remaining = records.iter().fold(T::zero(), |acc, r| acc + r.2);
    let mut surv = T::one();
    let mut steps = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = records[order[k]].0;
        let mut failed = T::zero();
        let mut censored = T::zero();
        let mut any_censored = false;
        while k < order.len() && records[order[k]].0 == t {
            let (_, is_cens, w) = records[order[k]];
            if is_cens {
                censored = censored + w;
                any_censored = true;
            } else {
                failed = failed + w;
            }
            k += 1;
        }
        if any_censored {
            let at_risk = remaining - failed;
            let hazard = censored / at_risk;
            surv = surv * (T::one() - hazard);
            steps.push(KmStep { time: t, at_risk, censored, hazard, survival: surv });
        }
        remaining = remaining - failed - censored;
    }
    steps
}

/// Step-function estimate of the censoring survival Ĝ and cumulative hazard Λ̂_G.
#[derive(Debug, Clone, PartialEq)]
pub struct CensorCurve {
    jump_times: Vec<f64>,
    survival: Vec<f64>,
    cumhaz: Vec<f64>,
    increments: Vec<f64>,
}

impl CensorCurve {
    /// Fits the (optionally weighted) censoring curve from `(Y, Δ)` pairs.
    pub fn fit(times: &[f64], events: &[bool], weights: Option<&[f64]>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Empty);
        }
        if events.len() != times.len() {
            return Err(Error::Dimension { expected: times.len(), found: events.len() });
        }
        if let Some(w) = weights {
            if w.len() != times.len() {
                return Err(Error::Dimension { expected: times.len(), found: w.len() });
            }
            if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
                return Err(Error::Domain(format!("weights must be positive and finite, got {bad}")));
            }
        }
        let records: Vec<(f64, bool, f64)> = times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &d))| (t, !d, weights.map_or(1.0, |w| w[i])))
            .collect();
        let steps = product_limit(&records);
        let mut cum = 0.0;
        let mut curve = Self {
            jump_times: Vec::with_capacity(steps.len()),
            survival: Vec::with_capacity(steps.len()),
            cumhaz: Vec::with_capacity(steps.len()),
            increments: Vec::with_capacity(steps.len()),
        };
        for s in steps {
            cum += s.hazard;
            curve.jump_times.push(s.time);
            curve.survival.push(s.survival);
            curve.cumhaz.push(cum);
            curve.increments.push(s.hazard);
        }
        Ok(curve)
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Ĝ at each jump time (right-continuous values).
    pub fn survival_values(&self) -> &[f64] {
        &self.survival
    }

    pub fn cumhaz_values(&self) -> &[f64] {
        &self.cumhaz
    }

    fn index(&self, t: f64, side: Side) -> usize {
        match side {
            Side::Right => self.jump_times.partition_point(|&s| s <= t),
            Side::Left => self.jump_times.partition_point(|&s| s < t),
        }
    }

    pub fn survival_at(&self, t: f64, side: Side) -> f64 {
        match self.index(t, side) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    pub fn cumhaz_at(&self, t: f64, side: Side) -> f64 {
        match self.index(t, side) {
            0 => 0.0,
            k => self.cumhaz[k - 1],
        }
    }

    /// Discrete Nelson–Aalen increments dΛ̂_G(t_j).
    pub fn cumhaz_increments(&self) -> Vec<(f64, f64)> {
        self.jump_times.iter().copied().zip(self.increments.iter().copied()).collect()
    }

    /// The Ĝ value used as an inverse weight at `t`.
    ///
    /// Ĝ(t) is replaced by its left limit when it is exactly zero (the largest
    /// observation is a censoring), then floored at [`SURVIVAL_FLOOR`]. The flag
    /// reports whether the floor was applied.
    pub fn weight_divisor(&self, t: f64) -> (f64, bool) {
        let mut g = self.survival_at(t, Side::Right);
        if g == 0.0 {
            g = self.survival_at(t, Side::Left);
        }
        if g < SURVIVAL_FLOOR {
            (SURVIVAL_FLOOR, true)
        } else {
            (g, false)
        }
    }
}

/// fit_censor_km(dataset, weights)
pub fn fit_censor_km(dataset: &Dataset, weights: Option<&[f64]>) -> Result<CensorCurve> {
    if dataset.is_empty() {
        return Err(Error::Empty);
    }
    CensorCurve::fit(&dataset.times(), &dataset.events(), weights)
}

/// survival_at(curve, t, side)
pub fn survival_at(curve: &CensorCurve, t: f64, side: Side) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("survival evaluated at negative time {t}")));
    }
    Ok(curve.survival_at(t, side))
}

/// cumhaz_increments(curve)
pub fn cumhaz_increments(curve: &CensorCurve) -> Vec<(f64, f64)> {
    curve.cumhaz_increments()
}
