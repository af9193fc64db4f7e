//! Q under the simulation law, by conditional Monte Carlo.
//!
//! Given S = (S₁, S₂) the event I[∫₀^T exp(β'X) > 1] is {τ̃ > κ(β, S)} with
//! κ = ∫₀^θ exp(β°'X), θ solving ∫₀^θ exp(β'X) = 1, and T ≥ s is {τ̃ ≥ a(s, S)}.
//! The gamma law of τ̃ is integrated exactly, so only the dosages (and, with
//! random changepoints, the unseen changepoints) are simulated:
//!
//! π = Σ_m P(τ̃ > max(κ_m, a_m) | S_m) / Σ_m P(τ̃ > a_m | S_m),  Q = Z(π − q).
//!
//! Draws are common across β and keyed by (subject, number of changepoints seen).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use statrs::function::gamma::gamma_ur;

use super::{Augmenter, CensoringJumps, History, PositedModel, PointwiseAugmenter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::sim::{derive_seed, gamma_median, Changepoints, ScenarioConfig, DOSE_SCALE, DOSE_SHAPE};
use crate::timewarp::MAX_EXPONENT;

#[derive(Debug, Clone)]
pub struct MonteCarloQ {
    beta_true: [f64; 3],
    changepoints: Changepoints,
    draws: usize,
    seed: u64,
}

/// monte_carlo_q(scenario, M, seed)
pub fn monte_carlo_q(scenario: &ScenarioConfig, draws: usize, seed: u64) -> Result<MonteCarloQ> {
    MonteCarloQ::new(scenario, draws, seed)
}

#[derive(Debug, Clone, Copy)]
struct Continuation {
    v1: f64,
    v2: f64,
    e1: f64,
    e2: f64,
}

/// The gamma law of τ̃ given S₁.
#[derive(Debug, Clone, Copy)]
struct TauLaw {
    shape: f64,
    rate: f64,
}

impl TauLaw {
    fn new(s1: f64) -> Result<Self> {
        Ok(Self { shape: s1, rate: gamma_median(s1)? })
    }

    fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            1.0
        } else if !x.is_finite() {
            0.0
        } else {
            gamma_ur(self.shape, x * self.rate)
        }
    }
}

/// ∫₀^t of a three-piece step function with rates r on [0,w1), [w1,w2), [w2,∞).
fn warp3(t: f64, w1: f64, w2: f64, r: [f64; 3]) -> f64 {
    r[0] * t.min(w1) + r[1] * (t - w1).clamp(0.0, w2 - w1) + r[2] * (t - w2).max(0.0)
}

fn inverse3(v: f64, w1: f64, w2: f64, r: [f64; 3]) -> f64 {
    let first = r[0] * w1;
    if v <= first {
        return v / r[0];
    }
    let second = r[1] * (w2 - w1);
    if v - first <= second {
        return w1 + (v - first) / r[1];
    }
    w2 + (v - first - second) / r[2]
}

fn rates(beta: &[f64], s1: f64, s2: f64) -> Result<[f64; 3]> {
    let eta = [beta[0], beta[0] + beta[1] * s1, beta[0] + beta[2] * s2];
    if let Some(e) = eta.iter().find(|e| **e > MAX_EXPONENT || e.is_nan()) {
        return Err(Error::Range(format!("linear predictor {e} out of range at beta = {beta:?}")));
    }
    Ok(eta.map(f64::exp))
}

impl MonteCarloQ {
    pub fn new(scenario: &ScenarioConfig, draws: usize, seed: u64) -> Result<Self> {
        if draws < 1 {
            return Err(Error::Config("Monte-Carlo Q needs at least one draw".into()));
        }
        scenario.validate()?;
        Ok(Self { beta_true: scenario.beta_true, changepoints: scenario.changepoints, draws, seed })
    }

    fn continuations(&self, subject: usize, region: usize) -> Vec<Continuation> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, subject as u64, region as u64));
        let dose = Gamma::new(DOSE_SHAPE, DOSE_SCALE).expect("valid dose law");
        (0..self.draws)
            .map(|_| Continuation {
                v1: dose.sample(&mut rng),
                v2: dose.sample(&mut rng),
                e1: Exp1.sample(&mut rng),
                e2: Exp1.sample(&mut rng),
            })
            .collect()
    }

    /// Changepoints and dosages for one continuation given what is seen at `s`.
    fn complete(&self, seen: &Seen, z: &[f64], s: f64, c: &Continuation) -> (f64, f64, f64, f64) {
        let s1 = seen.s1.unwrap_or(c.v1 + z[1] / 2.0);
        let s2 = seen.s2.unwrap_or(c.v2 + z[2] / 2.0);
        let (w1, w2) = match self.changepoints {
            Changepoints::Fixed { w1, w2 } => (w1, w2),
            Changepoints::Exponential { mean } => {
                let w1 = seen.w1.unwrap_or(s + mean * c.e1);
                let w2 = seen.w2.unwrap_or(w1.max(s) + mean * c.e2);
                (w1, w2)
            }
        };
        (w1, w2, s1, s2)
    }

    /// π for one history, averaging over the continuations.
    fn pi(&self, seen: &Seen, z: &[f64], s: f64, beta: &[f64], subject: usize) -> Result<f64> {
        let conts = self.continuations(subject, seen.region());
        let (mut num, mut den) = (0.0, 0.0);
        for c in &conts {
            let (w1, w2, s1, s2) = self.complete(seen, z, s, c);
            let law = TauLaw::new(s1)?;
            let rt = rates(&self.beta_true, s1, s2)?;
            let a = warp3(s, w1, w2, rt);
            let kappa = warp3(inverse3(1.0, w1, w2, rates(beta, s1, s2)?), w1, w2, rt);
            num += law.survival(kappa.max(a));
            den += law.survival(a);
        }
        Ok(num / den.max(f64::MIN_POSITIVE))
    }
}

/// Dosages and changepoints revealed by a history.
#[derive(Debug, Clone, Copy, Default)]
struct Seen {
    w1: Option<f64>,
    w2: Option<f64>,
    s1: Option<f64>,
    s2: Option<f64>,
}

impl Seen {
    fn from_history(h: &History<'_>) -> Result<Self> {
        let mut seen = Seen::default();
        for (k, (start, _, x)) in h.visible_segments().enumerate() {
            match k {
                0 => {}
                1 => {
                    seen.w1 = Some(start);
                    seen.s1 = Some(x[1]);
                }
                2 => {
                    seen.w2 = Some(start);
                    seen.s2 = Some(x[2]);
                }
                _ => return Err(Error::Domain("dosage paths have at most three segments".into())),
            }
        }
        Ok(seen)
    }

    fn region(&self) -> usize {
        usize::from(self.w1.is_some()) + usize::from(self.w2.is_some())
    }
}

impl PositedModel for MonteCarloQ {
    fn name(&self) -> String {
        format!("monte-carlo ({})", self.changepoints.label())
    }

    fn draws(&self) -> usize {
        self.draws
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn q_value(&self, s: f64, beta: &[f64], h: &History<'_>, q: f64) -> Result<Vec<f64>> {
        if beta.len() != 3 || h.z.len() != 3 {
            return Err(Error::Dimension { expected: 3, found: beta.len().min(h.z.len()) });
        }
        let seen = Seen::from_history(h)?;
        let pi = self.pi(&seen, h.z, s, beta, h.subject)?;
        Ok(h.z.iter().map(|z| z * (pi - q)).collect())
    }

    fn prepare<'a>(&'a self, dataset: &'a Dataset, jumps: &'a CensoringJumps, q: f64) -> Result<Box<dyn Augmenter + 'a>> {
        match self.changepoints {
            Changepoints::Fixed { w1, w2 } => Ok(Box::new(FixedAugmenter::new(self, dataset, jumps, q, w1, w2)?)),
            Changepoints::Exponential { .. } => Ok(Box::new(PointwiseAugmenter { model: self, dataset, jumps, q })),
        }
    }
}

/// Jumps of one region with the sums needed to evaluate Σ_j c_j N_j/D_j quickly.
///
/// `a` is ascending; `ratio[k] = Σ_{j<k} c_j/D_j`, `plain[k] = Σ_{j<k} c_j`.
#[derive(Debug, Clone, Default)]
struct RegionSums {
    a: Vec<f64>,
    ratio: Vec<f64>,
    plain: Vec<f64>,
}

impl RegionSums {
    fn new(a: Vec<f64>, c: &[f64], d: &[f64]) -> Self {
        let mut ratio = vec![0.0];
        let mut plain = vec![0.0];
        for (cj, dj) in c.iter().zip(d) {
            ratio.push(ratio.last().unwrap() + cj / dj.max(f64::MIN_POSITIVE));
            plain.push(plain.last().unwrap() + cj);
        }
        Self { a, ratio, plain }
    }

    fn split(&self, kappa: f64) -> usize {
        self.a.partition_point(|&a| a < kappa)
    }
}

/// Scenario with known dosages after the first changepoint.
struct Known {
    law: TauLaw,
    s2: f64,
    sums: RegionSums,
}

/// Before the first changepoint: both dosages drawn.
struct Early {
    laws: Vec<TauLaw>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    sums: RegionSums,
    /// Per draw, suffix sums Σ_{j≥k} c_j S_m(a_j)/D_j.
    tails: Vec<Vec<f64>>,
}

/// Between the changepoints: S₁ seen, S₂ drawn.
struct Middle {
    law: TauLaw,
    s1: f64,
    s2: Vec<f64>,
    sums: RegionSums,
}

struct SubjectPlan {
    z: Vec<f64>,
    total_c: f64,
    early: Option<Early>,
    middle: Option<Middle>,
    late: Option<Known>,
}

struct FixedAugmenter {
    beta_true: [f64; 3],
    q: f64,
    w1: f64,
    w2: f64,
    plans: Vec<SubjectPlan>,
}

impl FixedAugmenter {
    fn new(model: &MonteCarloQ, dataset: &Dataset, jumps: &CensoringJumps, q: f64, w1: f64, w2: f64) -> Result<Self> {
        let bt = model.beta_true;
        let mut plans = Vec::with_capacity(dataset.len());
        for (i, s) in dataset.subjects().iter().enumerate() {
            if s.dim() != 3 {
                return Err(Error::Dimension { expected: 3, found: s.dim() });
            }
            let bp = s.path.breakpoints();
            if bp.len() > 3 || bp.iter().zip([0.0, w1, w2]).any(|(a, b)| *a != b) {
                return Err(Error::Domain(format!(
                    "subject {i} does not have changepoints ({w1}, {w2}) assumed by the posited model"
                )));
            }
            let seen_dose = |k: usize| -> Result<f64> {
                if bp.len() > k {
                    Ok(s.path.segment_value(k)[k])
                } else {
                    Err(Error::Domain(format!("subject {i} is followed past a changepoint its path lacks")))
                }
            };
            let inc: Vec<(f64, f64)> = jumps.increments(s).collect();
            let total_c = inc.iter().map(|p| p.1).sum();
            let z = s.z.clone();
            let part = |lo: f64, hi: f64| -> (Vec<f64>, Vec<f64>) {
                inc.iter().filter(|(t, _)| *t > lo && *t <= hi).map(|&(t, c)| (t, c)).unzip()
            };

            let (t1, c1) = part(f64::NEG_INFINITY, w1);
            let early = if t1.is_empty() {
                None
            } else {
                let conts = model.continuations(i, 0);
                let s1: Vec<f64> = conts.iter().map(|c| c.v1 + z[1] / 2.0).collect();
                let s2: Vec<f64> = conts.iter().map(|c| c.v2 + z[2] / 2.0).collect();
                let laws = s1.iter().map(|&v| TauLaw::new(v)).collect::<Result<Vec<_>>>()?;
                let r0 = bt[0].exp();
                let a: Vec<f64> = t1.iter().map(|t| r0 * t).collect();
                let surv: Vec<Vec<f64>> = laws.iter().map(|l| a.iter().map(|&x| l.survival(x)).collect()).collect();
                let m = laws.len() as f64;
                let d: Vec<f64> = (0..a.len()).map(|j| surv.iter().map(|s| s[j]).sum::<f64>() / m).collect();
                let tails = surv
                    .iter()
                    .map(|sm| {
                        let mut tail = vec![0.0; a.len() + 1];
                        for j in (0..a.len()).rev() {
                            tail[j] = tail[j + 1] + c1[j] * sm[j] / d[j].max(f64::MIN_POSITIVE);
                        }
                        tail
                    })
                    .collect();
                Some(Early { laws, s1, s2, sums: RegionSums::new(a, &c1, &d), tails })
            };

            let (t2, c2) = part(w1, w2);
            let middle = if t2.is_empty() {
                None
            } else {
                let path_s1 = seen_dose(1)?;
                let law = TauLaw::new(path_s1)?;
                let rt = rates(&bt, path_s1, 0.0)?;
                let a: Vec<f64> = t2.iter().map(|&t| warp3(t, w1, w2, rt)).collect();
                let d: Vec<f64> = a.iter().map(|&x| law.survival(x)).collect();
                let s2 = model.continuations(i, 1).iter().map(|c| c.v2 + z[2] / 2.0).collect();
                Some(Middle { law, s1: path_s1, s2, sums: RegionSums::new(a, &c2, &d) })
            };

            let (t3, c3) = part(w2, f64::INFINITY);
            let late = if t3.is_empty() {
                None
            } else {
                let (path_s1, path_s2) = (seen_dose(1)?, seen_dose(2)?);
                let law = TauLaw::new(path_s1)?;
                let rt = rates(&bt, path_s1, path_s2)?;
                let a: Vec<f64> = t3.iter().map(|&t| warp3(t, w1, w2, rt)).collect();
                let d: Vec<f64> = a.iter().map(|&x| law.survival(x)).collect();
                Some(Known { law, s2: path_s2, sums: RegionSums::new(a, &c3, &d) })
            };
            plans.push(SubjectPlan { z, total_c, early, middle, late });
        }
        Ok(Self { beta_true: bt, q, w1, w2, plans })
    }

    fn kappa(&self, beta: &[f64], s1: f64, s2: f64) -> Result<f64> {
        let t = inverse3(1.0, self.w1, self.w2, rates(beta, s1, s2)?);
        Ok(warp3(t, self.w1, self.w2, rates(&self.beta_true, s1, s2)?))
    }
}

impl Augmenter for FixedAugmenter {
    fn subject_term(&self, i: usize, beta: &[f64]) -> Result<Vec<f64>> {
        let p = &self.plans[i];
        let mut pi_sum = 0.0;
        if let Some(e) = &p.early {
            let mut acc = 0.0;
            for (m, law) in e.laws.iter().enumerate() {
                let kappa = self.kappa(beta, e.s1[m], e.s2[m])?;
                let k = e.sums.split(kappa);
                acc += law.survival(kappa) * e.sums.ratio[k] + e.tails[m][k];
            }
            pi_sum += acc / e.laws.len() as f64;
        }
        if let Some(mid) = &p.middle {
            let total = *mid.sums.plain.last().unwrap();
            let mut acc = 0.0;
            for &s2 in &mid.s2 {
                let kappa = self.kappa(beta, mid.s1, s2)?;
                let k = mid.sums.split(kappa);
                acc += mid.law.survival(kappa) * mid.sums.ratio[k] + (total - mid.sums.plain[k]);
            }
            pi_sum += acc / mid.s2.len() as f64;
        }
        if let Some(l) = &p.late {
            let total = *l.sums.plain.last().unwrap();
            let kappa = self.kappa(beta, l.law.shape, l.s2)?;
            let k = l.sums.split(kappa);
            pi_sum += l.law.survival(kappa) * l.sums.ratio[k] + (total - l.sums.plain[k]);
        }
        let scalar = pi_sum - self.q * p.total_c;
        Ok(p.z.iter().map(|z| z * scalar).collect())
    }
}
