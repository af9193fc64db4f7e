//! The augmented (doubly robust) estimating equation
//!
//! U_n^DR(β) = U_n(β) + n⁻¹ Σ_i Σ_{t_j ≤ Y_i} Q(t_j, β, H_i(t_j)) (dN_{Gi}(t_j) − dΛ̂_G(t_j)) / Ĝ(t_j)
//!
//! where t_j runs over the censoring jump times of the pooled sample.

mod monte_carlo;

pub use monte_carlo::{monte_carlo_q, MonteCarloQ};

use crate::censor::{fit_censor_km, CensorCurve};
use crate::data::{CovariatePath, Dataset, Subject};
use crate::error::{Error, Result};
use crate::estimator::{solve, start_set, EstimatingEquation, Indicator, QuantileFit, SolverConfig};
use crate::timewarp::{check_quantile, warp_integral};

/// What is known about a subject at time `s`: its instruments and the
/// covariate path on [0, s].
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub subject: usize,
    pub z: &'a [f64],
    pub s: f64,
    path: &'a CovariatePath,
}

impl<'a> History<'a> {
    pub fn new(subject: usize, z: &'a [f64], path: &'a CovariatePath, s: f64) -> Self {
        Self { subject, z, s, path }
    }

    /// Segments of the path starting before `s`, with the last one cut at `s`.
    pub fn visible_segments(&self) -> impl Iterator<Item = (f64, f64, &'a [f64])> + '_ {
        let s = self.s;
        self.path.segments().take_while(move |(start, _, _)| *start < s).map(move |(a, b, x)| (a, b.min(s), x))
    }
}

/// A working model for the conditional expectation
/// Q(s, β, H(s)) = E{Z(I[∫₀^T exp(β'X) > 1] − q) | T ≥ s, H(s)}.
pub trait PositedModel: Sync {
    fn name(&self) -> String;

    /// Monte-Carlo draws per evaluation, 0 for deterministic models.
    fn draws(&self) -> usize {
        0
    }

    fn seed(&self) -> Option<u64> {
        None
    }

    fn q_value(&self, s: f64, beta: &[f64], history: &History<'_>, q: f64) -> Result<Vec<f64>>;

    /// Whether Q vanishes identically.
    fn is_zero(&self) -> bool {
        false
    }

    /// Builds the per-subject augmentation sums. The default calls `q_value`
    /// at every jump; models override this with faster equivalents.
    fn prepare<'a>(&'a self, dataset: &'a Dataset, jumps: &'a CensoringJumps, q: f64) -> Result<Box<dyn Augmenter + 'a>> {
        Ok(Box::new(PointwiseAugmenter { model: self, dataset, jumps, q }))
    }
}

/// Per-subject augmentation Σ_{t_j ≤ Y_i} Q(t_j)·c_ij.
pub trait Augmenter: Sync {
    fn subject_term(&self, i: usize, beta: &[f64]) -> Result<Vec<f64>>;
}

/// Q ≡ 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl PositedModel for ZeroModel {
    fn name(&self) -> String {
        "zero".into()
    }

    fn q_value(&self, _s: f64, beta: &[f64], _h: &History<'_>, _q: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; beta.len()])
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// A user-supplied Q as a closure.
pub struct FnModel<F> {
    name: String,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(f64, &[f64], &History<'_>, f64) -> Result<Vec<f64>> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> PositedModel for FnModel<F>
where
    F: Fn(f64, &[f64], &History<'_>, f64) -> Result<Vec<f64>> + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn q_value(&self, s: f64, beta: &[f64], h: &History<'_>, q: f64) -> Result<Vec<f64>> {
        (self.f)(s, beta, h, q)
    }
}

/// Censoring jump times with dΛ̂_G and the Ĝ divisor used at each.
#[derive(Debug, Clone)]
pub struct CensoringJumps {
    pub times: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub divisor: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

impl CensoringJumps {
    pub fn from_curve(curve: &CensorCurve) -> Self {
        let inc = curve.cumhaz_increments();
        Self {
            times: inc.iter().map(|p| p.0).collect(),
            dlambda: inc.iter().map(|p| p.1).collect(),
            divisor: inc.iter().map(|p| curve.weight_divisor(p.0).0).collect(),
            cumhaz: curve.cumhaz_values().to_vec(),
        }
    }

    /// Number of jumps at or before `y`.
    pub fn count_upto(&self, y: f64) -> usize {
        self.times.partition_point(|&t| t <= y)
    }

    /// (t_j, c_ij) for t_j ≤ Y_i with c_ij = (dN_{Gi}(t_j) − dΛ̂_G(t_j)) / Ĝ(t_j).
    pub fn increments<'a>(&'a self, subject: &'a Subject) -> impl Iterator<Item = (f64, f64)> + 'a {
        self.increments_within(subject, self.count_upto(subject.y))
    }

    /// As [`increments`](Self::increments) over the first `upto` jumps regardless of Y_i.
    pub fn increments_within<'a>(&'a self, subject: &'a Subject, upto: usize) -> impl Iterator<Item = (f64, f64)> + 'a {
        (0..upto.min(self.times.len())).map(move |j| {
            let t = self.times[j];
            let at_risk = subject.y >= t;
            let dn = f64::from(u8::from(!subject.delta && subject.y == t));
            let c = if at_risk { (dn - self.dlambda[j]) / self.divisor[j] } else { 0.0 };
            (t, c)
        })
    }
}

struct PointwiseAugmenter<'a, M: PositedModel + ?Sized> {
    model: &'a M,
    dataset: &'a Dataset,
    jumps: &'a CensoringJumps,
    q: f64,
}

impl<M: PositedModel + ?Sized> Augmenter for PointwiseAugmenter<'_, M> {
    fn subject_term(&self, i: usize, beta: &[f64]) -> Result<Vec<f64>> {
        let s = &self.dataset.subjects()[i];
        let mut acc = vec![0.0; beta.len()];
        for (t, c) in self.jumps.increments(s) {
            let h = History::new(i, &s.z, &s.path, t);
            let qv = self.model.q_value(t, beta, &h, self.q)?;
            check_q_bound(&qv, &s.z, self.q)?;
            for (a, v) in acc.iter_mut().zip(&qv) {
                *a += v * c;
            }
        }
        Ok(acc)
    }
}

fn check_q_bound(qv: &[f64], z: &[f64], q: f64) -> Result<()> {
    let zmax = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = zmax * q.max(1.0 - q) * (1.0 + 1e-12);
    if qv.len() != z.len() {
        return Err(Error::Dimension { expected: z.len(), found: qv.len() });
    }
    if let Some(v) = qv.iter().find(|v| !(v.is_finite() && v.abs() <= bound)) {
        return Err(Error::Domain(format!("posited model returned {v}, outside the bound {bound}")));
    }
    Ok(())
}

/// m(H_i, β) = Z_i (I[∫₀^{T_i} exp(β'X_i) > 1] − q) for an uncensored subject.
pub fn m_function(subject: &Subject, beta: &[f64], q: f64) -> Result<Vec<f64>> {
    check_quantile(q)?;
    if !subject.delta {
        return Err(Error::Domain("m is only defined for uncensored subjects".into()));
    }
    let w = warp_integral(&subject.path, beta, subject.y)?;
    let c = Indicator::Exact.apply(w - 1.0) - q;
    Ok(subject.z.iter().map(|z| z * c).collect())
}

/// U_n^DR prepared for repeated evaluation.
pub struct DrEquation<'a> {
    base: EstimatingEquation,
    dataset: &'a Dataset,
    jumps: &'a CensoringJumps,
    augmenter: Option<Box<dyn Augmenter + 'a>>,
}

impl<'a> DrEquation<'a> {
    pub fn new(
        dataset: &'a Dataset,
        q: f64,
        curve: &CensorCurve,
        jumps: &'a CensoringJumps,
        model: &'a dyn PositedModel,
        indicator: Indicator,
    ) -> Result<Self> {
        let base = EstimatingEquation::new(dataset, q, curve, indicator, None)?;
        let augmenter = if model.is_zero() || jumps.times.is_empty() {
            None
        } else {
            Some(model.prepare(dataset, jumps, q)?)
        };
        Ok(Self { base, dataset, jumps, augmenter })
    }

    pub fn base(&self) -> &EstimatingEquation {
        &self.base
    }

    /// The augmentation summed over subjects, before dividing by n.
    pub fn augmentation(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let mut total = vec![0.0; beta.len()];
        let Some(aug) = &self.augmenter else {
            return Ok(total);
        };
        for (i, s) in self.dataset.subjects().iter().enumerate() {
            let k = self.jumps.count_upto(s.y);
            if k == 0 {
                continue;
            }
            let a = aug.subject_term(i, beta)?;
            let zmax = s.z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gmin = self.jumps.divisor[..k].iter().copied().fold(f64::INFINITY, f64::min);
            let bound = zmax * (1.0 + self.jumps.cumhaz[k - 1]) / gmin * (1.0 + 1e-9);
            if let Some(v) = a.iter().find(|v| !(v.abs() <= bound)) {
                return Err(Error::Domain(format!(
                    "augmentation {v} for subject {i} exceeds its bound {bound}"
                )));
            }
            for (t, v) in total.iter_mut().zip(&a) {
                *t += v;
            }
        }
        Ok(total)
    }

    pub fn evaluate(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let mut u = self.base.evaluate(beta)?;
        if self.augmenter.is_some() {
            let a = self.augmentation(beta)?;
            if a.iter().any(|v| *v != 0.0) {
                let n = self.dataset.len() as f64;
                for (uk, ak) in u.iter_mut().zip(&a) {
                    *uk += ak / n;
                }
            }
        }
        Ok(u)
    }
}

/// dr_estimating_equation(dataset, beta, q, curve, model, a)
pub fn dr_estimating_equation(
    dataset: &Dataset,
    beta: &[f64],
    q: f64,
    curve: &CensorCurve,
    model: &dyn PositedModel,
    indicator: Indicator,
) -> Result<Vec<f64>> {
    let jumps = CensoringJumps::from_curve(curve);
    let eq = DrEquation::new(dataset, q, curve, &jumps, model, indicator)?;
    eq.evaluate(beta)
}

/// fit_dr(dataset, q, config, model)
pub fn fit_dr(dataset: &Dataset, q: f64, config: &SolverConfig, model: &dyn PositedModel) -> Result<QuantileFit> {
    fit_dr_from(dataset, q, config, model, None)
}

/// [`fit_dr`] trying `warm_start` alone before the full start set.
pub fn fit_dr_from(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
    model: &dyn PositedModel,
    warm_start: Option<&[f64]>,
) -> Result<QuantileFit> {
    config.validate()?;
    dataset.ensure_valid()?;
    check_quantile(q)?;
    let curve = fit_censor_km(dataset, None)?;
    let jumps = CensoringJumps::from_curve(&curve);
    let eq = DrEquation::new(dataset, q, &curve, &jumps, model, config.indicator())?;
    let (ne, cc) = (eq.base.n_events(), eq.base.clamp_count());
    let u = |b: &[f64]| eq.evaluate(b);
    if let Some(w) = warm_start {
        let (fit, _) = solve(u, &[w.to_vec()], q, config, ne, cc)?;
        if fit.converged {
            return Ok(fit);
        }
    }
    let starts = start_set(&eq.base.intercept_start(), config)?;
    Ok(solve(u, &starts, q, config, ne, cc)?.0)
}
