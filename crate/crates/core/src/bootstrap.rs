//! Multiplier bootstrap with unit-exponential subject weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{fit, fit_weighted, QuantileFit, SolverConfig};
use crate::stats;

/// How replicate weights are drawn. `Unit` forces every weight to 1 and exists
/// to check that the weighted path collapses onto the point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum WeightScheme {
    #[default]
    Exponential,
    Unit,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub scheme: WeightScheme,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, level: f64, seed: u64) -> Self {
        Self { replicates, level, seed, scheme: WeightScheme::Exponential }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("need at least 2 replicates, got {}", self.replicates)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must be in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BootstrapResult {
    pub estimate: QuantileFit,
    /// Converged replicates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub percentile_lower: Vec<f64>,
    pub percentile_upper: Vec<f64>,
    pub n_failed: usize,
    pub level: f64,
}

impl BootstrapResult {
    /// Whether the normal-approximation interval for coefficient `k` contains `value`.
    pub fn covers(&self, k: usize, value: f64) -> bool {
        self.ci_lower[k] <= value && value <= self.ci_upper[k]
    }
}

/// The weights for replicate `b`: a function of `(seed, b)` only.
pub fn replicate_weights(n: usize, seed: u64, b: usize, scheme: WeightScheme) -> Vec<f64> {
    match scheme {
        WeightScheme::Unit => vec![1.0; n],
        WeightScheme::Exponential => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            (0..n).map(|_| Exp1.sample(&mut rng)).collect()
        }
    }
}

/// bootstrap(dataset, q, config, B, level, seed)
pub fn bootstrap(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_with(dataset, q, config, &BootstrapOptions::new(replicates, level, seed))
}

pub fn bootstrap_with(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    opts.validate()?;
    let estimate = fit(dataset, q, config)?;
    bootstrap_around(dataset, q, config, opts, estimate)
}

/// Runs the replicates around an already computed point estimate.
pub fn bootstrap_around(
    dataset: &Dataset,
    q: f64,
    config: &SolverConfig,
    opts: &BootstrapOptions,
    estimate: QuantileFit,
) -> Result<BootstrapResult> {
    opts.validate()?;
    let n = dataset.len();
    let fits: Vec<Result<QuantileFit>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let w = replicate_weights(n, opts.seed, b, opts.scheme);
            fit_weighted(dataset, q, config, Some(&w), Some(estimate.beta()))
        })
        .collect();
    let mut replicates = Vec::with_capacity(opts.replicates);
    let mut n_failed = 0;
    for r in fits {
        match r {
            Ok(f) if f.converged => replicates.push(f.coefficients.beta),
            Ok(_) | Err(Error::Range(_)) | Err(Error::NoEvents) => n_failed += 1,
            Err(e) => return Err(e),
        }
    }
    if replicates.len() < 2 {
        return Err(Error::Bootstrap { converged: replicates.len(), requested: opts.replicates });
    }
    let z = stats::normal_quantile(0.5 + opts.level / 2.0)?;
    let p = estimate.beta().len();
    let (mut se, mut lo, mut hi, mut plo, mut phi) = (vec![], vec![], vec![], vec![], vec![]);
    for k in 0..p {
        let col: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
        let s = stats::sd(&col).unwrap_or(0.0);
        let b = estimate.beta()[k];
        se.push(s);
        lo.push(b - z * s);
        hi.push(b + z * s);
        plo.push(stats::quantile(&col, (1.0 - opts.level) / 2.0).unwrap_or(b));
        phi.push(stats::quantile(&col, (1.0 + opts.level) / 2.0).unwrap_or(b));
    }
    if n_failed > 0 {
        log::info!("{n_failed} of {} bootstrap replicates did not converge", opts.replicates);
    }
    Ok(BootstrapResult {
        estimate,
        replicates,
        se,
        ci_lower: lo,
        ci_upper: hi,
        percentile_lower: plo,
        percentile_upper: phi,
        n_failed,
        level: opts.level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_depend_only_on_seed_and_index() {
        let a = replicate_weights(5, 9, 3, WeightScheme::Exponential);
        let b = replicate_weights(5, 9, 3, WeightScheme::Exponential);
        let c = replicate_weights(5, 9, 4, WeightScheme::Exponential);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|w| *w > 0.0));
        assert_eq!(replicate_weights(3, 1, 0, WeightScheme::Unit), vec![1.0; 3]);
    }

    #[test]
    fn options_are_checked() {
        assert!(BootstrapOptions::new(1, 0.95, 0).validate().is_err());
        assert!(BootstrapOptions::new(10, 1.0, 0).validate().is_err());
        assert!(BootstrapOptions::new(10, 0.9, 0).validate().is_ok());
    }
}
