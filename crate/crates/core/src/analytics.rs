//! Risk measures, forecasts, rank correlation and what-if search.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibrate::{self, CalibrationOptions};
use crate::error::{Error, Result};
use crate::model::{BivariateModel, Constraint, StressSpec};
use crate::simulate::{self, Path};
use crate::stress::{DynamicsOptions, StressedDynamics};

/// Lower quantile of sorted data: the smallest value whose empirical CDF is >= alpha.
pub fn sorted_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let k = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn check_sample(samples: &[f64], alpha: f64, upper_open: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Numerical("empty sample".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("sample contains NaN".into()));
    }
    let ok = if upper_open { (0.0..1.0).contains(&alpha) } else { (0.0..=1.0).contains(&alpha) };
    if !ok {
        return Err(Error::InvalidConstraint(format!("level {alpha} outside [0, 1)")));
    }
    Ok(())
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// inf{z : F(z) >= alpha} of the empirical distribution.
pub fn empirical_var(samples: &[f64], alpha: f64) -> Result<f64> {
    check_sample(samples, alpha, false)?;
    Ok(sorted_quantile(&sorted(samples), alpha))
}

/// VaR + E[(X - VaR)+] / (1 - alpha) with the empirical VaR.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    check_sample(samples, alpha, true)?;
    let v = empirical_var(samples, alpha)?;
    let excess = samples.iter().map(|x| (x - v).max(0.0)).sum::<f64>() / samples.len() as f64;
    Ok(v + excess / (1.0 - alpha))
}

/// Weighted lower quantile; weights need not be normalised.
pub fn weighted_var(samples: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    check_sample(samples, alpha, false)?;
    if weights.len() != samples.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Numerical("weights must be non-negative and match the sample".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("weights sum to zero".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|a, b| samples[*a].total_cmp(&samples[*b]));
    let mut acc = 0.0;
    for i in &idx {
        acc += weights[*i] / total;
        if acc >= alpha - 1e-12 && weights[*i] > 0.0 {
            return Ok(samples[*i]);
        }
    }
    Ok(samples[*idx.last().unwrap()])
}

pub fn weighted_cvar(samples: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    check_sample(samples, alpha, true)?;
    let v = weighted_var(samples, weights, alpha)?;
    let total: f64 = weights.iter().sum();
    let excess: f64 = samples.iter().zip(weights).map(|(x, w)| w * (x - v).max(0.0)).sum::<f64>() / total;
    Ok(v + excess / (1.0 - alpha))
}

/// Risk summary at one level; standard errors from 20 batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskReport {
    pub alpha: f64,
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
    pub se_var: f64,
    pub se_cvar: f64,
    pub se_mean: f64,
}

const BATCHES: usize = 20;

impl RiskReport {
    pub fn from_samples(samples: &[f64], alpha: f64) -> Result<Self> {
        check_sample(samples, alpha, true)?;
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let var = empirical_var(samples, alpha)?;
        let cvar = empirical_cvar(samples, alpha)?;
        let (se_var, se_cvar) = if samples.len() >= BATCHES * 10 {
            let b = samples.len() / BATCHES;
            let mut vs = Vec::with_capacity(BATCHES);
            let mut cs = Vec::with_capacity(BATCHES);
            for k in 0..BATCHES {
                let chunk = &samples[k * b..(k + 1) * b];
                vs.push(empirical_var(chunk, alpha)?);
                cs.push(empirical_cvar(chunk, alpha)?);
            }
            (batch_se(&vs), batch_se(&cs))
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(Self { alpha, var, cvar, mean, se_var, se_cvar, se_mean: sd / n.sqrt() })
    }
}

/// Standard error of the full-sample statistic from batch estimates.
fn batch_se(v: &[f64]) -> f64 {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSettings {
    pub delta: f64,
    pub alpha: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self { delta: 0.25, alpha: 0.9, n_paths: 10_000, dt: 1e-3, seed: 1 }
    }
}

/// Risk of X_{t + delta} - X_t under the dynamics given the conditioning
/// path's state at each grid time.
pub fn incremental_forecast(
    dynamics: &StressedDynamics,
    path: &Path,
    grid: &[f64],
    settings: &ForecastSettings,
) -> Result<Vec<(f64, RiskReport)>> {
    let horizon = dynamics.model().horizon;
    grid.iter()
        .map(|t| {
            if *t + settings.delta > horizon + 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "forecast from t = {t} with delta = {} passes T = {horizon}",
                    settings.delta
                )));
            }
            let x = path.state_at(*t, 0);
            let inc = simulate::simulate_stressed_increments(
                dynamics,
                *t,
                x,
                settings.delta,
                settings.n_paths,
                settings.dt,
                settings.seed,
            )?;
            Ok((*t, RiskReport::from_samples(&inc, settings.alpha)?))
        })
        .collect()
}

/// Rows (t, mean, var, cvar, scenario_id).
pub fn forecast_csv(scenarios: &[(String, Vec<(f64, RiskReport)>)]) -> String {
    let mut s = String::from("t,mean,var90,cvar90,scenario_id\n");
    for (id, rows) in scenarios {
        for (t, r) in rows {
            s.push_str(&format!("{t},{},{},{},{id}\n", r.mean, r.var, r.cvar));
        }
    }
    s
}

/// Average ranks (1-based), ties sharing their mean rank; also the number of
/// observations that belong to a tie group.
fn ranks(v: &[f64]) -> (Vec<f64>, usize) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut tied = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        if j > i {
            tied += j - i + 1;
        }
        i = j + 1;
    }
    (r, tied)
}

/// Spearman's rho with a Fisher-z confidence half-width using the variance
/// (1 + rho^2 / 2) / (n - 3).
pub fn spearman_rho_ci(x: &[f64], y: &[f64], confidence: f64) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() || n < 10 {
        return Err(Error::Numerical("need at least 10 paired observations".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConstraint(format!("confidence {confidence} outside (0, 1)")));
    }
    let (rx, tx) = ranks(x);
    let (ry, ty) = ranks(y);
    if 2 * tx > n || 2 * ty > n {
        return Err(Error::Numerical("more than half of the observations are tied".into()));
    }
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 - 1e-15 {
        return Ok((rho, 0.0));
    }
    let zq = Normal::standard().inverse_cdf(0.5 + 0.5 * confidence);
    let se = ((1.0 + rho * rho / 2.0) / (n as f64 - 3.0)).sqrt();
    let z = rho.atanh();
    let (lo, hi) = ((z - zq * se).tanh(), (z + zq * se).tanh());
    Ok((rho, 0.5 * (hi - lo)))
}

/// Knobs of the what-if search.
#[derive(Debug, Clone, PartialEq)]
pub struct WhatIfSettings {
    /// Level of the terminal aggregate VaR target.
    pub target_alpha: f64,
    /// Required ratio of stressed to reference aggregate VaR.
    pub uplift: f64,
    /// Stress time as a fraction of T.
    pub stress_fraction: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Bisection resolution in percentage points.
    pub resolution_pct: f64,
    pub max_pct: f64,
    pub dynamics: DynamicsOptions,
    pub calibration: CalibrationOptions,
}

impl Default for WhatIfSettings {
    fn default() -> Self {
        Self {
            target_alpha: 0.9,
            uplift: 1.05,
            stress_fraction: 0.5,
            n_paths: 10_000,
            dt: 1e-3,
            seed: 2024,
            resolution_pct: 0.5,
            max_pct: 200.0,
            dynamics: DynamicsOptions::default(),
            calibration: CalibrationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhatIfResult {
    pub alpha_levels: Vec<f64>,
    pub required_stress_pct: Vec<f64>,
    pub target: String,
}

impl WhatIfResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,required_stress_pct\n");
        for (a, p) in self.alpha_levels.iter().zip(&self.required_stress_pct) {
            s.push_str(&format!("{a},{p}\n"));
        }
        s
    }

    /// Soft check: required stress does not increase with alpha by more than `tol` pp.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.required_stress_pct.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

/// Aggregate terminal VaR of the bivariate model after raising
/// VaR_alpha(X1) at the stress time by `pct` percent.
pub fn whatif_aggregate_var(bimodel: &BivariateModel, alpha: f64, pct: f64, s: &WhatIfSettings) -> Result<f64> {
    let one = bimodel.component_one();
    let t_dag = s.stress_fraction * bimodel.horizon;
    let ens = if pct <= 0.0 {
        simulate::simulate_bivariate_reference(bimodel, s.n_paths, s.seed)?
    } else {
        let v = calibrate::reference_var(&one, alpha, t_dag)?;
        let spec = StressSpec::at(vec![Constraint::var((1.0 + pct / 100.0) * v, alpha)?], t_dag);
        let mult = calibrate::solve_general_multipliers(&one, &spec, &s.calibration)?;
        let dynamics = StressedDynamics::new(&one, &spec, &mult, &s.dynamics)?;
        simulate::simulate_bivariate_stressed(bimodel, &dynamics, s.n_paths, s.dt, s.seed)?
    };
    let agg: Vec<f64> = ens.paths.iter().map(|p| p.terminal(0) + p.terminal(1)).collect();
    empirical_var(&agg, s.target_alpha)
}

/// Minimal stress (percent, to `resolution_pct`) on VaR_alpha(X1) at the
/// stress time such that the aggregate terminal VaR reaches the uplift.
pub fn whatif_required_stress(bimodel: &BivariateModel, alpha: f64, s: &WhatIfSettings) -> Result<f64> {
    let reference = whatif_aggregate_var(bimodel, alpha, 0.0, s)?;
    let goal = s.uplift * reference;
    if reference >= goal {
        return Ok(0.0);
    }
    let hits = |pct: f64| -> Result<bool> { Ok(whatif_aggregate_var(bimodel, alpha, pct, s)? >= goal) };
    let (mut lo, mut hi) = (0.0, 8.0_f64.min(s.max_pct));
    while !hits(hi)? {
        if hi >= s.max_pct {
            return Err(Error::Infeasible(format!(
                "no stress up to {}% reaches {}x the aggregate VaR",
                s.max_pct, s.uplift
            )));
        }
        lo = hi;
        hi = (2.0 * hi).min(s.max_pct);
    }
    while hi - lo > s.resolution_pct {
        let mid = 0.5 * (lo + hi);
        if hits(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn whatif_search(bimodel: &BivariateModel, alphas: &[f64], s: &WhatIfSettings) -> Result<WhatIfResult> {
    let required = alphas
        .iter()
        .map(|a| whatif_required_stress(bimodel, *a, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(WhatIfResult {
        alpha_levels: alphas.to_vec(),
        required_stress_pct: required,
        target: format!(
            "VaR_{}(X1_T + X2_T) >= {} x reference, stress at {} T",
            s.target_alpha, s.uplift, s.stress_fraction
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn order_statistics() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_var(&v, 0.9).unwrap(), 90.0);
        assert_abs_diff_eq!(empirical_cvar(&v, 0.9).unwrap(), 95.5, epsilon = 1e-12);
        assert_abs_diff_eq!(empirical_cvar(&v, 0.0).unwrap(), 50.5, epsilon = 1e-12);
        assert_eq!(empirical_var(&[3.0; 200], 0.7).unwrap(), 3.0);
        assert_eq!(empirical_cvar(&[3.0; 200], 0.7).unwrap(), 3.0);
        assert!(empirical_var(&[], 0.5).is_err());
    }

    #[test]
    fn cvar_oracle_by_enumeration() {
        // Direct tail average for alpha * n integral.
        let v: Vec<f64> = (1..=1000).map(|k| (k as f64).sqrt()).collect();
        let direct = v[950..].iter().sum::<f64>() / 50.0;
        assert_abs_diff_eq!(empirical_cvar(&v, 0.95).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn weighted_matches_unweighted() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let w = vec![2.0; 100];
        assert_eq!(weighted_var(&v, &w, 0.9).unwrap(), 90.0);
        assert_abs_diff_eq!(weighted_cvar(&v, &w, 0.9).unwrap(), 95.5, epsilon = 1e-9);
    }

    #[test]
    fn spearman_basics() {
        let x: Vec<f64> = (0..50).map(|k| (k as f64 * 0.37).sin()).collect();
        let (r, h) = spearman_rho_ci(&x, &x, 0.95).unwrap();
        assert_eq!((r, h), (1.0, 0.0));
        let y: Vec<f64> = x.iter().map(|v| -v.powi(3)).collect();
        assert_abs_diff_eq!(spearman_rho_ci(&x, &y, 0.95).unwrap().0, -1.0, epsilon = 1e-12);
        assert!(spearman_rho_ci(&[1.0; 20], &x[..20], 0.95).is_err());
    }

    #[test]
    fn fisher_half_width() {
        // n = 10003, rho = 0: half-width = 1.96 / 100.
        let n = 10_003;
        let x: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let y: Vec<f64> = (0..n).map(|k| ((k * 7919) % n) as f64).collect();
        let (r, h) = spearman_rho_ci(&x, &y, 0.95).unwrap();
        let se = ((1.0 + r * r / 2.0) / (n as f64 - 3.0)).sqrt();
        let expect = 0.5 * ((r.atanh() + 1.959964 * se).tanh() - (r.atanh() - 1.959964 * se).tanh());
        assert_abs_diff_eq!(h, expect, epsilon = 1e-6);
    }

    #[test]
    fn report_invariants() {
        let v: Vec<f64> = (0..4000).map(|k| ((k * 37) % 1000) as f64).collect();
        let r = RiskReport::from_samples(&v, 0.9).unwrap();
        assert!(r.cvar >= r.var);
        assert!(r.se_var >= 0.0 && r.se_cvar >= 0.0 && r.se_mean >= 0.0);
    }
}
