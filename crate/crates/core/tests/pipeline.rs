//! End-to-end checks of the calibrate -> stress -> simulate -> analytics chain.

use dynstress::analytics::{self, ForecastSettings};
use dynstress::calibrate::{self, CalibrationOptions, Multipliers};
use dynstress::fst;
use dynstress::model::{
    BivariateModel, CompoundPoissonModel, Constraint, ConstraintKind, Dependence, SeverityDistribution, StressSpec,
};
use dynstress::simulate::{self, Path};
use dynstress::stress::{self, DynamicsOptions, Resampling, StressedDynamics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn running() -> CompoundPoissonModel {
    CompoundPoissonModel::new(5.0, SeverityDistribution::gamma(2.0, 1.0), 1.0).unwrap()
}

fn build(model: &CompoundPoissonModel, spec: &StressSpec) -> StressedDynamics {
    let mult = calibrate::solve_general_multipliers(model, spec, &CalibrationOptions::default()).unwrap();
    StressedDynamics::new(model, spec, &mult, &DynamicsOptions::default()).unwrap()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s / n.sqrt())
}

#[test]
fn reference_empirical_var() {
    let e = simulate::simulate_reference(&running(), 200_000, 1).unwrap();
    let v = analytics::empirical_var(&e.terminal(0), 0.9).unwrap();
    assert!((v - 17.4).abs() < 0.1, "{v}");
}

#[test]
fn cvar_stress_reaches_target_in_simulation() {
    let m = running();
    let q = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let cvar_p = calibrate::reference_cvar(&m, 0.9, 1.0).unwrap();
    let s = 1.12 * cvar_p;
    let spec = StressSpec::at(vec![Constraint::var(q, 0.9).unwrap(), Constraint::cvar(q, s, 0.9).unwrap()], 1.0);
    let d = build(&m, &spec);
    let e = simulate::simulate_stressed(&d, 10_000, 1e-3, 5).unwrap();
    let cvar_q = analytics::empirical_cvar(&e.terminal(0), 0.9).unwrap();
    assert!((cvar_q / s - 1.0).abs() < 0.02, "{cvar_q} vs {s}");
}

#[test]
fn measure_change_consistency() {
    let m = running();
    let q = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let d = build(&m, &StressSpec::at(vec![Constraint::var(q, 0.9).unwrap()], 1.0));
    let qs = d.stress_constraints()[0].0.kind.threshold().unwrap();
    let mut r = simulate::simulate_reference(&m, 100_000, 21).unwrap();
    r.attach_rn(&d);
    let s = simulate::simulate_stressed(&d, 10_000, 1e-3, 22).unwrap();
    let gs: [Box<dyn Fn(f64) -> f64>; 3] = [
        Box::new(|x| x),
        Box::new(move |x| if x < qs { 1.0 } else { 0.0 }),
        Box::new(move |x| (x - qs).max(0.0)),
    ];
    for g in &gs {
        let is: Vec<f64> = r.paths.iter().map(|p| p.rn_weight * g(p.terminal(0))).collect();
        let plain: Vec<f64> = s.terminal(0).iter().map(|x| g(*x)).collect();
        let (a, sa) = mean_se(&is);
        let (b, sb) = mean_se(&plain);
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
    }
}

#[test]
fn early_stress_switches_off_after_stress_time() {
    let m = running();
    let q = calibrate::var_uplift_threshold(&m, 0.8, 0.2, 0.5).unwrap();
    let d = build(&m, &StressSpec::at(vec![Constraint::var(q, 0.8).unwrap()], 0.5));
    for t in [0.5001, 0.7, 1.0] {
        for x in [0.0, 5.0, 12.0] {
            assert_eq!(d.kernel(t, x, 1.3).unwrap(), 1.0);
            assert_eq!(d.intensity(t, x).unwrap(), 5.0);
        }
    }
    assert!(d.kernel(0.25, q - 1.0, 2.0).unwrap() > 1.0);
    let qs = d.stress_constraints()[0].0.kind.threshold().unwrap();
    let e = simulate::simulate_stressed(&d, 10_000, 1e-3, 31).unwrap();
    let p = e.states_at(0.5, 0).iter().filter(|x| **x < qs).count() as f64 / 1e4;
    assert!((p - 0.8).abs() < 0.015, "{p}");
    // After T-dagger the increments follow the reference law: mean kappa * 0.5 * 2.
    let inc: Vec<f64> = e.paths.iter().map(|p| p.terminal(0) - p.state_at(0.5, 0)).collect();
    let (mi, se) = mean_se(&inc);
    assert!((mi - 5.0).abs() < 3.0 * se, "{mi}");
}

#[test]
fn two_time_kernel_and_constraints() {
    let m = running();
    let q1 = calibrate::var_uplift_threshold(&m, 0.8, 0.1, 0.5).unwrap();
    let q2 = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let spec = StressSpec {
        constraints: vec![Constraint::var(q1, 0.8).unwrap()],
        stress_time: 0.5,
        terminal: Some(Constraint::var(q2, 0.9).unwrap()),
    };
    let mult = calibrate::solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
    let d = StressedDynamics::new(&m, &spec, &mult, &DynamicsOptions::default()).unwrap();
    assert!(d.is_two_time());
    let (e1, e2) = (mult.values[0], mult.values[1]);
    let q2s = d.terminal_constraint().unwrap().0.kind.threshold().unwrap();
    let q1s = d.stress_constraints()[0].0.kind.threshold().unwrap();

    // After T-dagger only the terminal stage acts: closed-form VaR kernel.
    for (t, x, y) in [(0.6, 10.0, 3.0), (0.9, 18.0, 2.5), (0.75, 5.0, 0.5)] {
        let a = stress::two_time_kernel(&d, t, x, y).unwrap();
        let b = stress::var_kernel_closed_form(&m, e2, q2s, t, x, y).unwrap();
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    // Both constraints hold under importance sampling.
    let mut r = simulate::simulate_reference(&m, 100_000, 41).unwrap();
    r.attach_rn(&d);
    let n = r.len() as f64;
    let p1 = r.paths.iter().filter(|p| p.state_at(0.5, 0) < q1s).map(|p| p.rn_weight).sum::<f64>() / n;
    let p2 = r.paths.iter().filter(|p| p.terminal(0) < q2s).map(|p| p.rn_weight).sum::<f64>() / n;
    assert!((p1 - 0.8).abs() < 0.01 && (p2 - 0.9).abs() < 0.01, "{p1} {p2} ({e1}, {e2})");

    // Pathwise identity across the glued stages.
    for p in r.paths.iter().take(30) {
        let a = simulate::rn_pathwise(&d, p).unwrap();
        assert!((a / p.rn_weight - 1.0).abs() < 1e-3);
    }
}

#[test]
fn inactive_early_constraint_reduces_to_terminal_stress() {
    let m = running();
    let q2 = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let single = StressSpec::at(vec![Constraint::var(q2, 0.9).unwrap()], 1.0);
    let ds = build(&m, &single);
    let eta = ds.stress_constraints()[0].1;
    let early = Constraint::var(10.0, 0.5).unwrap();
    let spec = StressSpec { constraints: vec![early.clone()], stress_time: 0.5, terminal: Some(single.constraints[0].clone()) };
    let mult = Multipliers {
        values: vec![0.0, eta],
        residuals: vec![0.0, 0.0],
        constraints: vec![early, single.constraints[0].clone()],
        iterations: 0,
    };
    let d = StressedDynamics::new(&m, &spec, &mult, &DynamicsOptions::default()).unwrap();
    for (t, x, y) in [(0.1, 3.0, 2.0), (0.45, 12.0, 4.0), (0.8, 18.0, 1.0)] {
        let a = d.kernel(t, x, y).unwrap();
        let b = ds.kernel(t, x, y).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn independence_copula_keeps_second_marginal() {
    let g = SeverityDistribution::gamma(2.0, 1.0);
    let e2 = SeverityDistribution::exponential(2.0);
    let b = BivariateModel::new(5.0, [g, e2.clone()], Dependence::Independence, 1.0).unwrap();
    let one = b.component_one();
    let q = calibrate::var_uplift_threshold(&one, 0.9, 0.15, 1.0).unwrap();
    let d = build(&one, &StressSpec::at(vec![Constraint::var(q, 0.9).unwrap()], 1.0));
    let pool = simulate::bivariate_pool(&b, 20_000, 3);
    let (t, x) = (0.95, q - 3.0);
    let w: Vec<f64> = pool.chunks(2).map(|j| d.kernel(t, x, j[0]).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let idx = stress::resample_indices(&w, 20_000, Resampling::Multinomial, &mut rng).unwrap();
    let y1: Vec<f64> = idx.iter().map(|i| pool[2 * i]).collect();
    let mut y2: Vec<f64> = idx.iter().map(|i| pool[2 * i + 1]).collect();
    // The stress moves the first marginal but not the second.
    assert!(y1.iter().sum::<f64>() / 2e4 > 2.2);
    y2.sort_by(f64::total_cmp);
    let n = y2.len() as f64;
    let ks = y2
        .iter()
        .enumerate()
        .map(|(k, v)| (e2.cdf(*v) - k as f64 / n).abs().max(((k + 1) as f64 / n - e2.cdf(*v)).abs()))
        .fold(0.0, f64::max);
    // Resampling duplicates draws; compare against the pool-size critical value loosely.
    assert!(ks < 2.0 * 1.628 / n.sqrt(), "{ks}");
}

#[test]
fn stressed_severity_shapes_near_horizon() {
    let m = running();
    let q = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let d = build(&m, &StressSpec::at(vec![Constraint::var(q, 0.9).unwrap()], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, _) = stress::stressed_severity_draws(&d, 0.999, 18.0, 50_000, Resampling::Multinomial, &mut rng).unwrap();
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    assert!(mean > 2.3, "{mean}");
    // Frequencies follow h*(t,x,y) G(dy) / kappa_hat.
    let g = SeverityDistribution::gamma(2.0, 1.0);
    let refs: Vec<f64> = (0..400_000).map(|_| g.sample(&mut rng)).collect();
    let hs: Vec<f64> = refs.iter().map(|y| d.kernel(0.999, 18.0, *y).unwrap()).collect();
    let norm = hs.iter().sum::<f64>();
    for c in [1.0, 2.0, 4.0] {
        let want = refs.iter().zip(&hs).filter(|(y, _)| **y > c).map(|(_, h)| h).sum::<f64>() / norm;
        let got = a.iter().filter(|y| **y > c).count() as f64 / a.len() as f64;
        assert!((got - want).abs() < 0.01, "P*(y>{c}) {got} vs {want}");
    }

    // x = 16: two modes either side of y = q - x.
    let (b, _) = stress::stressed_severity_draws(&d, 0.999, 16.0, 200_000, Resampling::Multinomial, &mut rng).unwrap();
    let mut hist = [0usize; 20];
    for y in &b {
        if *y < 10.0 {
            hist[(y / 0.5) as usize] += 1;
        }
    }
    let cut = ((q - 16.0) / 0.5) as usize;
    let left = *hist[..cut].iter().max().unwrap();
    let right = hist[cut + 1];
    let dip = hist[cut - 1].min(hist[cut]);
    assert!(right > dip && left > dip, "{hist:?}");
}

fn quiet_path() -> Path {
    Path { times: vec![], jumps: vec![], dim: 1, rn_weight: 1.0 }
}

#[test]
fn forecasts_reference_and_stressed() {
    let m = running();
    let settings = ForecastSettings { n_paths: 4000, ..Default::default() };
    let grid = [0.0, 0.25, 0.5, 0.75];
    let r = StressedDynamics::unstressed(&m, &DynamicsOptions::default());
    let busy = Path { times: vec![0.1, 0.3], jumps: vec![6.0, 7.0], dim: 1, rn_weight: 1.0 };
    let quiet = analytics::incremental_forecast(&r, &quiet_path(), &grid, &settings).unwrap();
    let loud = analytics::incremental_forecast(&r, &busy, &grid, &settings).unwrap();
    for ((_, a), (_, b)) in quiet.iter().zip(&loud) {
        assert!((a.mean - 2.5).abs() < 3.0 * a.se_mean);
        assert_eq!(a, b);
        assert!(a.cvar >= a.var);
    }

    let q = calibrate::var_uplift_threshold(&m, 0.9, 0.15, 1.0).unwrap();
    let d = build(&m, &StressSpec::at(vec![Constraint::var(q, 0.9).unwrap()], 1.0));
    let f = analytics::incremental_forecast(&d, &quiet_path(), &grid, &settings).unwrap();
    for w in f.windows(2) {
        assert!(w[1].1.mean <= w[0].1.mean + 1e-9, "{:?}", f.iter().map(|r| r.1.mean).collect::<Vec<_>>());
    }
    assert!(f[0].1.mean > 2.5);
    assert!(analytics::incremental_forecast(&d, &quiet_path(), &[0.9], &settings).is_err());
}

#[test]
fn fst_probabilities_match_oracle_across_thresholds() {
    let m = running();
    let grid = calibrate::default_grid(&m, &[], fst::DEFAULT_POINTS).unwrap();
    let law = fst::FstEngine::new(&m, grid.clone()).lattice_law(0.7);
    for q in [0.5, 3.0, 7.7, 12.0, 25.0] {
        let qs = grid.snap_edge(q);
        let a = law.expect(|x| if x < qs { 1.0 } else { 0.0 });
        let b = fst::oracle_tail_prob(&m, qs, 0.7).unwrap();
        assert!((a - b).abs() < 1e-4, "{q}: {a} vs {b}");
    }
}

#[test]
fn monte_carlo_backend_agrees_with_lattice() {
    let m = running();
    let spec = StressSpec::at(vec![Constraint::new(ConstraintKind::Mean, 12.0).unwrap()], 1.0);
    let lat = calibrate::solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
    let opts = CalibrationOptions {
        backend: calibrate::ExpectationBackend::MonteCarlo { samples: 400_000, seed: 3 },
        ..Default::default()
    };
    let mc = calibrate::solve_general_multipliers(&m, &spec, &opts).unwrap();
    // Mean tilt: K'(-eta) = 12 with K the cumulant of X_T.
    assert!((lat.values[0] - mc.values[0]).abs() < 5e-3, "{:?} {:?}", lat.values, mc.values);
}
