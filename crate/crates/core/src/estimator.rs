//! The inverse-probability-of-censoring weighted estimating equation
//!
//! U_n(β) = n⁻¹ Σ w_i Δ_i Z_i / Ĝ(Y_i) · (κ(∫₀^{Y_i} exp(β'X_i) dt − 1) − q)
//!
//! and its solution by norm minimisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::censor::{fit_censor_km, CensorCurve};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::solver::{self, Candidate, MultiStartOptions};
use crate::timewarp::{check_quantile, dot, Coefficients, MAX_EXPONENT};

/// 1 / (1 + exp(−a·x)), evaluated without overflow for any a·x.
pub fn smoothed_indicator(x: f64, a: f64) -> f64 {
    let t = a * x;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// The indicator I(x > 0) or its logistic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Indicator {
    Exact,
    Smoothed(f64),
}

impl Indicator {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Indicator::Exact => f64::from(u8::from(x > 0.0)),
            Indicator::Smoothed(a) => smoothed_indicator(x, a),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SolverConfig {
    /// Logistic sharpness `a`; `f64::INFINITY` selects the exact indicator.
    pub smoothing_a: f64,
    /// Target on ‖U_n(β)‖.
    pub tolerance: f64,
    /// Simplex iterations per start.
    pub max_iterations: usize,
    /// Explicit starting vectors. When empty the default start set is used.
    pub starts: Vec<Vec<f64>>,
    /// Random perturbations of the intercept-only start added to the default set.
    pub random_starts: usize,
    pub perturbation_scale: f64,
    pub seed: u64,
    /// Broyden root-finding after the simplex stage.
    pub polish: bool,
    /// Simplex restarts per start while the residual is above tolerance.
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            smoothing_a: 20.0,
            tolerance: 1e-6,
            max_iterations: 2000,
            starts: Vec::new(),
            random_starts: 4,
            perturbation_scale: 1.0,
            seed: 0,
            polish: false,
            restarts: 0,
        }
    }
}

impl SolverConfig {
    /// Defaults for simulated data (a = 20).
    pub fn simulation() -> Self {
        Self::default()
    }

    /// Defaults for real data: a = 100, whose sharper surface needs more and
    /// wider starts and the Broyden stage.
    pub fn real_data() -> Self {
        Self {
            smoothing_a: 100.0,
            max_iterations: 5000,
            random_starts: 30,
            perturbation_scale: 2.0,
            polish: true,
            restarts: 5,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_a > 0.0) {
            return Err(Error::Config(format!("smoothing_a must be > 0, got {}", self.smoothing_a)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn indicator(&self) -> Indicator {
        if self.smoothing_a.is_infinite() {
            Indicator::Exact
        } else {
            Indicator::Smoothed(self.smoothing_a)
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct QuantileFit {
    pub coefficients: Coefficients,
    pub residual_norm: f64,
    pub residual: Vec<f64>,
    pub converged: bool,
    pub n_events_used: usize,
    /// Number of Ĝ(Y_i) values raised to the survival floor.
    pub clamp_count: usize,
    pub start_index: usize,
    pub smoothing_a: f64,
    pub evaluations: usize,
}

impl QuantileFit {
    pub fn beta(&self) -> &[f64] {
        &self.coefficients.beta
    }
}

/// One uncensored subject's term, with its path clipped to [0, Y_i].
#[derive(Debug, Clone)]
struct EventTerm {
    weight: f64,
    z: Vec<f64>,
    lengths: Vec<f64>,
    /// Segment values, `lengths.len() * dim` entries.
    values: Vec<f64>,
}

/// U_n prepared for repeated evaluation at different β.
#[derive(Debug, Clone)]
pub struct EstimatingEquation {
    dim: usize,
    n: usize,
    q: f64,
    indicator: Indicator,
    terms: Vec<EventTerm>,
    clamp_count: usize,
}

impl EstimatingEquation {
    pub fn new(
        dataset: &Dataset,
        q: f64,
        curve: &CensorCurve,
        indicator: Indicator,
        subject_weights: Option<&[f64]>,
    ) -> Result<Self> {
        check_quantile(q)?;
        if dataset.is_empty() {
            return Err(Error::Empty);
        }
        if dataset.n_events() == 0 {
            return Err(Error::NoEvents);
        }
        if let Indicator::Smoothed(a) = indicator {
            if !(a > 0.0) {
                return Err(Error::Domain(format!("smoothing constant must be > 0, got {a}")));
            }
        }
        if let Some(w) = subject_weights {
            if w.len() != dataset.len() {
                return Err(Error::Dimension { expected: dataset.len(), found: w.len() });
            }
        }
        let dim = dataset.dim();
        let mut terms = Vec::with_capacity(dataset.n_events());
        let mut clamp_count = 0;
        for (i, s) in dataset.subjects().iter().enumerate() {
            if s.path.dim() != dim || s.z.len() != dim {
                return Err(Error::Dimension { expected: dim, found: s.z.len() });
            }
            if !s.delta {
                continue;
            }
            let (g, clamped) = curve.weight_divisor(s.y);
            clamp_count += usize::from(clamped);
            let w = subject_weights.map_or(1.0, |w| w[i]);
            let mut lengths = Vec::new();
            let mut values = Vec::new();
            for (start, end, x) in s.path.segments() {
                if start >= s.y {
                    break;
                }
                lengths.push(end.min(s.y) - start);
                values.extend_from_slice(x);
            }
            terms.push(EventTerm { weight: w / g, z: s.z.clone(), lengths, values });
        }
        Ok(Self { dim, n: dataset.len(), q, indicator, terms, clamp_count })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_events(&self) -> usize {
        self.terms.len()
    }

    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn with_indicator(mut self, indicator: Indicator) -> Self {
        self.indicator = indicator;
        self
    }

    pub fn evaluate(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: beta.len() });
        }
        let mut u = vec![0.0; self.dim];
        // the intercept coordinate is 1 on every segment, so exp(β₀) factors out
        if beta[0] > MAX_EXPONENT || beta[0].is_nan() {
            return Err(Error::Range(format!("intercept {} out of range", beta[0])));
        }
        let scale = beta[0].exp();
        for t in &self.terms {
            let mut warp = 0.0;
            for (k, len) in t.lengths.iter().enumerate() {
                let rest = dot(&beta[1..], &t.values[k * self.dim + 1..(k + 1) * self.dim]);
                let eta = beta[0] + rest;
                if eta > MAX_EXPONENT || eta.is_nan() {
                    return Err(Error::Range(format!(
                        "linear predictor {eta} out of range at beta = {beta:?}"
                    )));
                }
                warp += if rest == 0.0 { *len } else { len * rest.exp() };
            }
            warp *= scale;
            let c = t.weight * (self.indicator.apply(warp - 1.0) - self.q);
            for (uk, zk) in u.iter_mut().zip(&t.z) {
                *uk += c * zk;
            }
        }
        let n = self.n as f64;
        for uk in &mut u {
            *uk /= n;
        }
        Ok(u)
    }

    /// ∂U/∂β (row k, column l) for the smoothed indicator.
    pub fn jacobian(&self, beta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let Indicator::Smoothed(a) = self.indicator else {
            return Err(Error::Domain("the exact indicator has no derivative".into()));
        };
        if beta.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: beta.len() });
        }
        let mut jac = vec![vec![0.0; self.dim]; self.dim];
        let mut dwarp = vec![0.0; self.dim];
        for t in &self.terms {
            let mut warp = 0.0;
            dwarp.iter_mut().for_each(|d| *d = 0.0);
            for (k, len) in t.lengths.iter().enumerate() {
                let x = &t.values[k * self.dim..(k + 1) * self.dim];
                let eta = dot(beta, x);
                if eta > MAX_EXPONENT || eta.is_nan() {
                    return Err(Error::Range(format!("linear predictor {eta} out of range at beta = {beta:?}")));
                }
                let r = len * eta.exp();
                warp += r;
                for (d, xl) in dwarp.iter_mut().zip(x) {
                    *d += r * xl;
                }
            }
            let s = smoothed_indicator(warp - 1.0, a);
            let c = t.weight * a * s * (1.0 - s);
            for (row, zk) in jac.iter_mut().zip(&t.z) {
                for (v, d) in row.iter_mut().zip(&dwarp) {
                    *v += c * zk * d;
                }
            }
        }
        let n = self.n as f64;
        jac.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(jac)
    }

    /// ∇‖U(β)‖² = 2 Jᵀ U.
    pub fn objective_gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let u = self.evaluate(beta)?;
        let jac = self.jacobian(beta)?;
        Ok((0..self.dim).map(|l| 2.0 * (0..self.dim).map(|k| jac[k][l] * u[k]).sum::<f64>()).collect())
    }

    /// β with every non-intercept coefficient zero and the intercept solving
    /// the intercept equation under the exact indicator.
    ///
    /// Under that β the indicator is I(Y > e^{−β₀}), so e^{−β₀} is the
    /// weighted (1 − q) quantile of the uncensored Y.
    pub fn intercept_start(&self) -> Vec<f64> {
        let mut pts: Vec<(f64, f64)> =
            self.terms.iter().map(|t| (t.lengths.iter().sum::<f64>(), t.weight)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pts.iter().map(|p| p.1).sum();
        let mut acc = 0.0;
        let mut y = pts.last().map_or(1.0, |p| p.0);
        for &(t, w) in &pts {
            acc += w;
            if acc >= (1.0 - self.q) * total {
                y = t;
                break;
            }
        }
        if !(y > 0.0) {
            y = pts.iter().map(|p| p.0).find(|&t| t > 0.0).unwrap_or(1.0);
        }
        let mut beta = vec![0.0; self.dim];
        beta[0] = -y.ln();
        beta
    }
}

/// estimating_equation(dataset, beta, q, curve, a, subject_weights)
pub fn estimating_equation(
    dataset: &Dataset,
    beta: &[f64],
    q: f64,
    curve: &CensorCurve,
    indicator: Indicator,
    subject_weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    EstimatingEquation::new(dataset, q, curve, indicator, subject_weights)?.evaluate(beta)
}

/// The starting vectors used when `config.starts` is empty: the intercept-only
/// solution, the zero vector, and `random_starts` Gaussian perturbations of the first.
pub fn default_starts(intercept_start: &[f64], config: &SolverConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts = vec![intercept_start.to_vec(), vec![0.0; intercept_start.len()]];
    for _ in 0..config.random_starts {
        starts.push(
            intercept_start
                .iter()
                .map(|b| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    b + config.perturbation_scale * e
                })
                .collect(),
        );
    }
    starts
}

pub(crate) fn start_set(intercept_start: &[f64], config: &SolverConfig) -> Result<Vec<Vec<f64>>> {
    if config.starts.is_empty() {
        return Ok(default_starts(intercept_start, config));
    }
    for s in &config.starts {
        if s.len() != intercept_start.len() {
            return Err(Error::Dimension { expected: intercept_start.len(), found: s.len() });
        }
    }
    Ok(config.starts.clone())
}

/// Runs the multi-start solver on any estimating function and packages the winner.
pub(crate) fn solve<F>(
    u: F,
    starts: &[Vec<f64>],
    q: f64,
    config: &SolverConfig,
    n_events: usize,
    clamp_count: usize,
) -> Result<(QuantileFit, Vec<Candidate>)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let opts = MultiStartOptions {
        tolerance: config.tolerance,
        max_iterations: config.max_iterations,
        polish: config.polish,
        restarts: config.restarts,
    };
    let candidates = solver::solve_starts(u, starts, &opts)?;
    let best = solver::select(&candidates, config.tolerance)
        .ok_or_else(|| Error::Config("no starting vectors".into()))?;
    let fit = QuantileFit {
        coefficients: Coefficients::new(best.beta.clone(), q)?,
        residual_norm: best.residual_norm,
        residual: best.residual.clone(),
        converged: best.residual_norm <= config.tolerance,
        n_events_used: n_events,
        clamp_count,
        start_index: best.start_index,
        smoothing_a: config.smoothing_a,
        evaluations: candidates.iter().map(|c| c.evaluations).sum(),
    };
    Ok((fit, candidates))
}

fn warn_if_few_events(n_events: usize, dim: usize) {
    if n_events < dim + 1 {
        log::warn!("only {n_events} events for {dim} coefficients; the fit is poorly determined");
    }
}

/// Fits β(q) with per-subject weights (the bootstrap path). `warm_start`, when
/// given, is tried alone first and the full start set is used only if it fails
/// to reach the tolerance.
pub fn fit_weighted(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
    subject_weights: Option<&[f64]>,
    warm_start: Option<&[f64]>,
) -> Result<QuantileFit> {
    config.validate()?;
    dataset.ensure_valid()?;
    check_quantile(q)?;
    let curve = fit_censor_km(dataset, subject_weights)?;
    let eq = EstimatingEquation::new(dataset, q, &curve, config.indicator(), subject_weights)?;
    warn_if_few_events(eq.n_events(), eq.dim());
    let u = |b: &[f64]| eq.evaluate(b);
    if let Some(w) = warm_start {
        let (fit, _) = solve(u, &[w.to_vec()], q, config, eq.n_events(), eq.clamp_count())?;
        if fit.converged {
            return Ok(fit);
        }
    }
    let starts = start_set(&eq.intercept_start(), config)?;
    let (fit, _) = solve(u, &starts, q, config, eq.n_events(), eq.clamp_count())?;
    Ok(fit)
}

/// fit(dataset, q, config)
pub fn fit(dataset: &Dataset, q: f64, config: &SolverConfig) -> Result<QuantileFit> {
    fit_weighted(dataset, q, config, None, None)
}

/// Like [`fit`] but also returns every start's candidate.
pub fn fit_with_candidates(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
) -> Result<(QuantileFit, Vec<Candidate>)> {
    config.validate()?;
    dataset.ensure_valid()?;
    check_quantile(q)?;
    let curve = fit_censor_km(dataset, None)?;
    let eq = EstimatingEquation::new(dataset, q, &curve, config.indicator(), None)?;
    warn_if_few_events(eq.n_events(), eq.dim());
    let starts = start_set(&eq.intercept_start(), config)?;
    solve(|b| eq.evaluate(b), &starts, q, config, eq.n_events(), eq.clamp_count())
}
