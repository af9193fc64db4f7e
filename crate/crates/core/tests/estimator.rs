use proptest::prelude::*;
use qrtd::censor::fit_censor_km;
use qrtd::estimator::{estimating_equation, fit_with_candidates, smoothed_indicator};
use qrtd::sim::{generate, generate_with_rate, ScenarioConfig};
use qrtd::{fit, CovariatePath, Dataset, EstimatingEquation, Error, Indicator, SolverConfig, Subject};

fn path(starts: &[f64], xs: &[f64]) -> CovariatePath {
    CovariatePath::new(starts.to_vec(), xs.iter().map(|x| vec![1.0, *x]).collect()).unwrap()
}

/// Six subjects, two covariates, censorings at 2 and 5.
fn six() -> Dataset {
    let rows: [(f64, bool, &[f64], &[f64], f64); 6] = [
        (1.0, true, &[0.0], &[0.3], 0.5),
        (2.0, false, &[0.0, 1.0], &[0.0, 1.0], 1.0),
        (3.0, true, &[0.0, 0.5, 2.0], &[-0.4, 0.8, 0.1], 0.2),
        (4.0, true, &[0.0, 3.5], &[1.2, -1.0], 2.0),
        (5.0, false, &[0.0], &[0.7], 0.3),
        (6.0, true, &[0.0, 1.5], &[0.0, 0.9], 1.5),
    ];
    Dataset::new(rows.iter().map(|(y, d, s, x, z)| Subject::new(*y, *d, path(s, x), vec![1.0, *z])).collect())
}

/// Term-by-term U_n with the hand-computed censoring curve
/// Ĝ = 1 on [0, 2), 4/5 on [2, 5), 2/5 from 5.
fn six_oracle(beta: &[f64], q: f64, a: Option<f64>) -> Vec<f64> {
    let g = |t: f64| if t < 2.0 { 1.0 } else if t < 5.0 { 0.8 } else { 0.4 };
    let ds = six();
    let mut u = vec![0.0, 0.0];
    for s in ds.subjects() {
        if !s.delta {
            continue;
        }
        let bp = s.path.breakpoints();
        let mut warp = 0.0;
        for k in 0..bp.len() {
            let lo = bp[k];
            let hi = bp.get(k + 1).copied().unwrap_or(f64::INFINITY).min(s.y);
            if lo >= s.y {
                break;
            }
            let x = s.path.segment_value(k);
            warp += (hi - lo) * (beta[0] * x[0] + beta[1] * x[1]).exp();
        }
        let ind = match a {
            Some(a) => 1.0 / (1.0 + (-a * (warp - 1.0)).exp()),
            None => f64::from(u8::from(warp > 1.0)),
        };
        for k in 0..2 {
            u[k] += s.z[k] / g(s.y) * (ind - q) / 6.0;
        }
    }
    u
}

#[test]
fn six_subject_oracle() {
    let ds = six();
    let curve = fit_censor_km(&ds, None).unwrap();
    for beta in [[0.0, 0.0], [-1.0, 0.5], [-1.4, -0.3], [0.2, 1.1]] {
        for q in [0.25, 0.5, 0.8] {
            let exact = estimating_equation(&ds, &beta, q, &curve, Indicator::Exact, None).unwrap();
            let want = six_oracle(&beta, q, None);
            let smooth = estimating_equation(&ds, &beta, q, &curve, Indicator::Smoothed(20.0), None).unwrap();
            let want_s = six_oracle(&beta, q, Some(20.0));
            for k in 0..2 {
                assert!((exact[k] - want[k]).abs() < 1e-14, "{beta:?} {q}: {exact:?} vs {want:?}");
                assert!((smooth[k] - want_s[k]).abs() < 1e-14, "{beta:?} {q}: {smooth:?} vs {want_s:?}");
            }
        }
    }
}

#[test]
fn balanced_pair() {
    let one = |y| Subject::new(y, true, CovariatePath::constant(vec![1.0]).unwrap(), vec![1.0]);
    let ds = Dataset::new(vec![one(2.0), one(0.5)]);
    let curve = fit_censor_km(&ds, None).unwrap();
    assert_eq!(estimating_equation(&ds, &[0.0], 0.5, &curve, Indicator::Exact, None).unwrap(), vec![0.0]);
    assert_eq!(estimating_equation(&ds, &[3.0], 0.5, &curve, Indicator::Exact, None).unwrap(), vec![0.5]);
}

#[test]
fn smoothed_indicator_values() {
    assert_eq!(smoothed_indicator(0.0, 3.0), 0.5);
    assert_eq!(smoothed_indicator(1.0, 20.0), 1.0 / (1.0 + (-20f64).exp()));
    assert_eq!(smoothed_indicator(0.1, 1e6), 1.0);
    assert_eq!(smoothed_indicator(-0.1, 1e6), 0.0);
    assert!(smoothed_indicator(-1e6, 1.0) >= 0.0);
}

#[test]
fn all_censored_is_no_events() {
    let ds = Dataset::new(vec![Subject::new(1.0, false, CovariatePath::constant(vec![1.0]).unwrap(), vec![1.0])]);
    let curve = fit_censor_km(&ds, None).unwrap();
    assert!(matches!(estimating_equation(&ds, &[0.0], 0.5, &curve, Indicator::Exact, None), Err(Error::NoEvents)));
    assert!(matches!(fit(&ds, 0.5, &SolverConfig::default()), Err(Error::NoEvents)));
}

#[test]
fn intercept_only_order_statistic() {
    let ys = [0.31, 2.4, 1.7, 0.05, 0.92, 3.3, 1.1, 0.66, 4.8, 0.2];
    let ds = Dataset::new(
        ys.iter().map(|y| Subject::new(*y, true, CovariatePath::constant(vec![1.0]).unwrap(), vec![1.0])).collect(),
    );
    let cfg = SolverConfig { smoothing_a: f64::INFINITY, ..SolverConfig::default() };
    let f = fit(&ds, 0.5, &cfg).unwrap();
    assert!(f.converged);
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    // I(Y e^{β₀} > 1) splits the sample in half for e^{−β₀} in [Y(5), Y(6)).
    let cut = (-f.beta()[0]).exp();
    assert!(sorted[4] <= cut && cut < sorted[5], "{cut} not in [{}, {})", sorted[4], sorted[5]);
}

#[test]
fn simulated_fit_is_near_truth() {
    let sim = generate(&ScenarioConfig::fixed(1000, 0.2, 77)).unwrap();
    let f = fit(&sim.dataset, 0.5, &SolverConfig::simulation()).unwrap();
    assert!(f.converged);
    let b = f.beta();
    // About four sampling SDs at n = 1000.
    assert!((b[0] + 1.0).abs() < 1.0 && (b[1] - 1.0).abs() < 0.5 && (b[2] - 1.0).abs() < 1.2, "{b:?}");
    assert!(f.residual_norm <= 1e-6);
    assert_eq!(f.n_events_used, sim.dataset.n_events());
}

#[test]
fn descent_from_every_start() {
    let sim = generate(&ScenarioConfig::fixed(200, 0.3, 3)).unwrap();
    let (f, cands) = fit_with_candidates(&sim.dataset, 0.5, &SolverConfig::simulation()).unwrap();
    assert_eq!(cands.len(), 6);
    for c in &cands {
        assert!(c.residual_norm <= c.start_norm, "start {} rose", c.start_index);
        assert!(f.residual_norm <= c.residual_norm || c.residual_norm <= 1e-6);
    }
}

#[test]
fn unconverged_fit_is_still_returned() {
    let sim = generate(&ScenarioConfig::fixed(100, 0.2, 4)).unwrap();
    let cfg = SolverConfig { max_iterations: 1, tolerance: 1e-300, random_starts: 0, ..SolverConfig::default() };
    let f = fit(&sim.dataset, 0.5, &cfg).unwrap();
    assert!(!f.converged);
    assert!(f.residual_norm > 0.0);
}

#[test]
fn overflow_names_beta() {
    let sim = generate(&ScenarioConfig::fixed(50, 0.2, 4)).unwrap();
    let cfg = SolverConfig { starts: vec![vec![800.0, 0.0, 0.0]], ..SolverConfig::default() };
    match fit(&sim.dataset, 0.5, &cfg) {
        Err(Error::Range(m)) => assert!(m.contains("beta"), "{m}"),
        other => panic!("expected a range error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let sim = generate(&ScenarioConfig::fixed(50, 0.2, 4)).unwrap();
    for cfg in [
        SolverConfig { smoothing_a: 0.0, ..SolverConfig::default() },
        SolverConfig { tolerance: -1.0, ..SolverConfig::default() },
        SolverConfig { max_iterations: 0, ..SolverConfig::default() },
    ] {
        assert!(matches!(fit(&sim.dataset, 0.5, &cfg), Err(Error::Config(_))));
    }
    assert!(fit(&sim.dataset, 1.5, &SolverConfig::default()).is_err());
}

#[test]
fn smoothing_converges_to_exact() {
    let sim = generate(&ScenarioConfig::fixed(300, 0.2, 12)).unwrap();
    let curve = fit_censor_km(&sim.dataset, None).unwrap();
    let exact = EstimatingEquation::new(&sim.dataset, 0.5, &curve, Indicator::Exact, None).unwrap();
    let mut sups = Vec::new();
    for a in [20.0, 100.0, 1000.0] {
        let eq = exact.clone().with_indicator(Indicator::Smoothed(a));
        let mut sup = 0.0f64;
        for i in 0..7 {
            for j in 0..7 {
                let beta = [-1.6 + 0.2 * f64::from(i), 0.4 + 0.2 * f64::from(j), 1.0];
                let d = eq.evaluate(&beta).unwrap();
                let e = exact.evaluate(&beta).unwrap();
                sup = d.iter().zip(&e).fold(sup, |m, (x, y)| m.max((x - y).abs()));
            }
        }
        sups.push(sup);
    }
    assert!(sups[0] > sups[1] && sups[1] > sups[2], "{sups:?}");
}

#[test]
fn unit_weights_match_unweighted() {
    let sim = generate(&ScenarioConfig::fixed(200, 0.2, 21)).unwrap();
    let ones = vec![1.0; sim.dataset.len()];
    let plain = fit_censor_km(&sim.dataset, None).unwrap();
    let weighted = fit_censor_km(&sim.dataset, Some(&ones)).unwrap();
    for beta in [[-1.0, 1.0, 1.0], [0.3, -0.2, 0.5]] {
        let a = estimating_equation(&sim.dataset, &beta, 0.5, &plain, Indicator::Smoothed(20.0), None).unwrap();
        let b = estimating_equation(&sim.dataset, &beta, 0.5, &weighted, Indicator::Smoothed(20.0), Some(&ones))
            .unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn exact_indicator_is_piecewise_constant() {
    let sim = generate(&ScenarioConfig::fixed(100, 0.2, 5)).unwrap();
    let curve = fit_censor_km(&sim.dataset, None).unwrap();
    let eq = EstimatingEquation::new(&sim.dataset, 0.5, &curve, Indicator::Exact, None).unwrap();
    let u = eq.evaluate(&[-1.0, 1.0, 1.0]).unwrap();
    assert_eq!(u, eq.evaluate(&[-1.0 + 1e-13, 1.0, 1.0]).unwrap());
    assert!(eq.jacobian(&[-1.0, 1.0, 1.0]).is_err());
}

fn doubled(ds: &Dataset) -> Dataset {
    Dataset::new(
        ds.subjects()
            .iter()
            .map(|s| {
                let z = s.z.iter().enumerate().map(|(k, v)| if k == 0 { *v } else { 2.0 * v }).collect();
                Subject::new(s.y, s.delta, s.path.clone(), z)
            })
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn doubling_instruments_scales_coordinates(
        seed in 0u64..1000,
        b0 in -2.0f64..0.5, b1 in -1.0f64..2.0, b2 in -1.0f64..2.0,
    ) {
        let sim = generate_with_rate(&ScenarioConfig::fixed(60, 0.2, seed), 0.15).unwrap();
        let twice = doubled(&sim.dataset);
        let curve = fit_censor_km(&sim.dataset, None).unwrap();
        let beta = [b0, b1, b2];
        let u = estimating_equation(&sim.dataset, &beta, 0.5, &curve, Indicator::Exact, None).unwrap();
        let v = estimating_equation(&twice, &beta, 0.5, &curve, Indicator::Exact, None).unwrap();
        prop_assert_eq!(v[0].to_bits(), u[0].to_bits());
        prop_assert_eq!(v[1].to_bits(), (2.0 * u[1]).to_bits());
        prop_assert_eq!(v[2].to_bits(), (2.0 * u[2]).to_bits());
        // The zero sets therefore coincide.
        prop_assert_eq!(u.iter().all(|x| *x == 0.0), v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn smoothed_is_bounded_by_weights(seed in 0u64..1000, b0 in -3.0f64..1.0) {
        let sim = generate_with_rate(&ScenarioConfig::fixed(40, 0.3, seed), 0.25).unwrap();
        let curve = fit_censor_km(&sim.dataset, None).unwrap();
        let u = estimating_equation(&sim.dataset, &[b0, 1.0, 1.0], 0.5, &curve, Indicator::Smoothed(20.0), None).unwrap();
        let bound: f64 = sim.dataset.subjects().iter().filter(|s| s.delta).map(|s| {
            let (g, _) = curve.weight_divisor(s.y);
            0.5 * s.z.iter().fold(0.0f64, |m, z| m.max(z.abs())) / g
        }).sum::<f64>() / sim.dataset.len() as f64;
        prop_assert!(u.iter().all(|x| x.abs() <= bound * (1.0 + 1e-12)));
    }
}
