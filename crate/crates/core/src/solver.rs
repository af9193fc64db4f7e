//! Derivative-free minimisation of ‖U(β)‖² with multiple starts.
//!
//! The simplex stage works for both the exact (step) and smoothed indicator.
//! An optional Broyden stage then treats U(β) = 0 as a square root-finding
//! problem and keeps its answer only if the residual shrinks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Stop as soon as the objective drops to this value.
    pub target: f64,
    /// Simplex diameter tolerance (absolute).
    pub xtol: f64,
    /// Objective spread tolerance (absolute).
    pub ftol: f64,
    /// Give up after this many iterations without the best value falling by
    /// a relative 1e-9. Zero disables the check.
    pub stall_iterations: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iterations: 2000, target: 0.0, xtol: 1e-10, ftol: 1e-20, stall_iterations: 250 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Out-of-range points count as +∞ so the simplex backs away from them.
fn eval_or_inf<F>(f: &mut F, x: &[f64], evals: &mut usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    *evals += 1;
    match f(x) {
        Ok(v) if v.is_nan() => Ok(f64::INFINITY),
        Ok(v) => Ok(v),
        Err(Error::Range(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
///
/// The initial simplex perturbs each coordinate by 5%, or by 2.5e-4 when it is zero.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut evals = 0;
    let f0 = match f(x0) {
        Ok(v) if v.is_finite() => v,
        Ok(v) => return Err(Error::Range(format!("objective is {v} at start beta = {x0:?}"))),
        Err(Error::Range(m)) => return Err(Error::Range(format!("at start beta = {x0:?}: {m}"))),
        Err(e) => return Err(e),
    };
    evals += 1;
    if f0 <= opts.target {
        return Ok(Minimum { x: x0.to_vec(), f: f0, iterations: 0, evaluations: evals });
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] != 0.0 { 1.05 * x[i] } else { 2.5e-4 };
        let fx = eval_or_inf(&mut f, &x, &mut evals)?;
        simplex.push((x, fx));
    }

    let mut iterations = 0;
    let (mut record, mut record_at) = (f64::INFINITY, 0);
    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        if best <= opts.target {
            break;
        }
        if best < record * (1.0 - 1e-9) {
            (record, record_at) = (best, iterations);
        } else if opts.stall_iterations > 0 && iterations - record_at >= opts.stall_iterations {
            break;
        }
        let worst = simplex[n].1;
        let xspread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if xspread <= opts.xtol && (worst - best).abs() <= opts.ftol {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (c - w)).collect()
        };

        let xr = along(1.0);
        let fr = eval_or_inf(&mut f, &xr, &mut evals)?;
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval_or_inf(&mut f, &xe, &mut evals)?;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        // outside contraction when the reflection beat the worst vertex, inside otherwise
        let xc = if fr < simplex[n].1 { along(0.5) } else { along(-0.5) };
        let fc = eval_or_inf(&mut f, &xc, &mut evals)?;
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let x_best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let xs: Vec<f64> = x_best.iter().zip(&v.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
            let fs = eval_or_inf(&mut f, &xs, &mut evals)?;
            *v = (xs, fs);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Ok(Minimum { x, f: fx, iterations, evaluations: evals })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Broyden's method on the square system U(β) = 0, started from `x0`.
///
/// Returns the best point seen and its residual vector.
pub fn broyden<F>(mut u: F, x0: &[f64], tol: f64, max_iterations: usize) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut ux = DVector::from_vec(u(x0)?);
    if ux.len() != n {
        return Err(Error::Dimension { expected: n, found: ux.len() });
    }
    // forward-difference starting Jacobian
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xh = x.clone();
        xh[j] += h;
        let uh = match u(xh.as_slice()) {
            Ok(v) => DVector::from_vec(v),
            Err(Error::Range(_)) => return Ok((x0.to_vec(), ux.as_slice().to_vec())),
            Err(e) => return Err(e),
        };
        jac.set_column(j, &((uh - &ux) / h));
    }
    for _ in 0..max_iterations {
        if ux.norm() <= tol {
            break;
        }
        let Some(step) = jac.clone().lu().solve(&(-&ux)) else { break };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let xn = &x + &step * t;
            match u(xn.as_slice()) {
                Ok(v) => {
                    let un = DVector::from_vec(v);
                    if un.norm() < ux.norm() {
                        accepted = Some((xn, un));
                        break;
                    }
                }
                Err(Error::Range(_)) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((xn, un)) = accepted else { break };
        let dx = &xn - &x;
        let du = &un - &ux;
        let denom = dx.dot(&dx);
        if denom > 0.0 {
            let corr = (du - &jac * &dx) / denom;
            jac += corr * dx.transpose();
        }
        x = xn;
        ux = un;
    }
    Ok((x.as_slice().to_vec(), ux.as_slice().to_vec()))
}

/// One solved start.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub start_index: usize,
    pub start_norm: f64,
    pub beta: Vec<f64>,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct MultiStartOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub polish: bool,
    /// Fresh-simplex restarts from a start's result while it stays above tolerance.
    pub restarts: usize,
}

/// Minimises ‖U‖ from every start and keeps one candidate per start.
pub fn solve_starts<F>(u: F, starts: &[Vec<f64>], opts: &MultiStartOptions) -> Result<Vec<Candidate>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let objective = |b: &[f64]| -> Result<f64> { u(b).map(|v| v.iter().map(|x| x * x).sum()) };
    let nm = NelderMeadOptions {
        max_iterations: opts.max_iterations,
        target: opts.tolerance * opts.tolerance,
        ..NelderMeadOptions::default()
    };
    let mut out = Vec::with_capacity(starts.len());
    for (k, start) in starts.iter().enumerate() {
        let start_norm = norm(&u(start).map_err(|e| match e {
            Error::Range(m) => Error::Range(format!("at start beta = {start:?}: {m}")),
            other => other,
        })?);
        let mut m = nelder_mead(objective, start, &nm)?;
        let mut evaluations = m.evaluations;
        for _ in 0..opts.restarts {
            if m.f <= nm.target {
                break;
            }
            let again = nelder_mead(objective, &m.x, &nm)?;
            evaluations += again.evaluations;
            if !(again.f < m.f) {
                break;
            }
            m = again;
        }
        let mut beta = m.x;
        let mut residual = u(&beta)?;
        if opts.polish && norm(&residual) > opts.tolerance {
            let counted = |b: &[f64]| {
                evaluations += 1;
                u(b)
            };
            let (b2, r2) = broyden(counted, &beta, opts.tolerance, 50)?;
            if norm(&r2) < norm(&residual) {
                beta = b2;
                residual = r2;
            }
        }
        let residual_norm = norm(&residual);
        if !residual_norm.is_finite() {
            return Err(Error::Range(format!("non-finite residual at beta = {beta:?}")));
        }
        out.push(Candidate { start_index: k, start_norm, beta, residual, residual_norm, evaluations });
    }
    Ok(out)
}

/// Picks the reported solution.
///
/// Every candidate within `tolerance` counts as a root; among roots the one
/// with the smallest ‖β‖ wins. Without a root the smallest residual wins,
/// then the smallest ‖β‖. Remaining ties go to the earliest start.
pub fn select(candidates: &[Candidate], tolerance: f64) -> Option<&Candidate> {
    let roots: Vec<&Candidate> = candidates.iter().filter(|c| c.residual_norm <= tolerance).collect();
    let key = |c: &&Candidate| (norm(&c.beta), c.start_index);
    if !roots.is_empty() {
        return roots.into_iter().min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    }
    candidates.iter().min_by(|a, b| {
        a.residual_norm
            .total_cmp(&b.residual_norm)
            .then(norm(&a.beta).total_cmp(&norm(&b.beta)))
            .then(a.start_index.cmp(&b.start_index))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |x: &[f64]| Ok((x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2));
        let m = nelder_mead(f, &[0.0, 0.0], &NelderMeadOptions::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] + 2.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| Ok(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        let opts = NelderMeadOptions { max_iterations: 5000, ..Default::default() };
        let m = nelder_mead(f, &[-1.2, 1.0], &opts).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn range_errors_are_avoided_not_fatal() {
        let f = |x: &[f64]| {
            if x[0] > 0.5 {
                Err(Error::Range("too big".into()))
            } else {
                Ok((x[0] - 1.0).powi(2))
            }
        };
        let m = nelder_mead(f, &[0.0], &NelderMeadOptions::default()).unwrap();
        assert!(m.x[0] <= 0.5 && m.x[0] > 0.49);
        let g = |_: &[f64]| -> Result<f64> { Err(Error::Range("nope".into())) };
        assert!(matches!(nelder_mead(g, &[3.0], &NelderMeadOptions::default()), Err(Error::Range(_))));
    }

    #[test]
    fn broyden_solves_smooth_system() {
        let u = |x: &[f64]| Ok(vec![x[0] * x[0] - 2.0, x[0] + x[1] - 3.0]);
        let (x, r) = broyden(u, &[1.0, 1.0], 1e-12, 100).unwrap();
        assert!(norm(&r) < 1e-10);
        assert!((x[0] - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn selection_prefers_small_roots_then_small_residuals() {
        let c = |i, b: Vec<f64>, r| Candidate {
            start_index: i,
            start_norm: 1.0,
            beta: b,
            residual: vec![r],
            residual_norm: r,
            evaluations: 0,
        };
        let cands = vec![c(0, vec![5.0], 1e-9), c(1, vec![1.0], 5e-7), c(2, vec![0.1], 1e-3)];
        assert_eq!(select(&cands, 1e-6).unwrap().start_index, 1);
        assert_eq!(select(&cands, 1e-12).unwrap().start_index, 0);
        let tied = vec![c(0, vec![1.0], 1e-3), c(1, vec![-1.0], 1e-3)];
        assert_eq!(select(&tied, 1e-6).unwrap().start_index, 0);
    }
}
