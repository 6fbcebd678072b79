//! Fourier space time-stepping for conditional expectations of X.
//!
//! On a uniform periodic grid the backward equation of a compound Poisson
//! process diagonalises under the DFT: each frequency evolves as
//! exp(Psi(zeta) tau) with Psi = kappa (phi_xi - 1).

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::model::CompoundPoissonModel;

/// Default number of grid points after padding.
pub const DEFAULT_POINTS: usize = 1 << 14;
/// Default number of time nodes per surface.
pub const DEFAULT_TIMES: usize = 201;
/// Smallest admissible surface value.
pub const POSITIVITY_FLOOR: f64 = 1e-300;

/// Psi(zeta) = kappa (phi(zeta) - 1).
pub fn levy_exponent(model: &CompoundPoissonModel, zeta: f64) -> Complex64 {
    model.kappa * (model.severity.cf(zeta) - 1.0)
}

/// Uniform grid x_j = j dx on [0, 2 x_phys).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub dx: f64,
    pub n_points: usize,
    /// Right end of the physical (unpadded) domain.
    pub x_phys: f64,
}

impl SpatialGrid {
    /// Grid with x_phys = E[X_horizon] + 10 sd(X_horizon), extended to
    /// q_max + 5 sd (rounded up to half an sd) for far-tail thresholds;
    /// padded by a factor of two. Snapping thresholds leaves the grid unchanged.
    pub fn for_model(
        model: &CompoundPoissonModel,
        thresholds: &[f64],
        horizon: f64,
        n_points: usize,
    ) -> Result<Self> {
        if !n_points.is_power_of_two() || n_points < 1 << 10 {
            return Err(Error::Numerical(format!(
                "grid size must be a power of two >= 1024, got {n_points}"
            )));
        }
        let q_max = thresholds.iter().cloned().fold(0.0_f64, f64::max);
        let sd = model.variance_at(horizon).sqrt();
        let base = model.mean_at(horizon) + 10.0 * sd;
        let x_phys = if q_max + 5.0 * sd > base {
            ((q_max + 5.0 * sd) / (0.5 * sd)).ceil() * 0.5 * sd
        } else {
            base
        };
        if !(x_phys.is_finite() && x_phys > 0.0) {
            return Err(Error::Numerical("degenerate spatial domain".into()));
        }
        Ok(Self { dx: 2.0 * x_phys / n_points as f64, n_points, x_phys })
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.dx * (self.n_points - 1) as f64
    }

    /// Nodes with x <= x_phys.
    pub fn n_phys(&self) -> usize {
        ((self.x_phys / self.dx).floor() as usize + 1).min(self.n_points)
    }

    /// Angular frequency of DFT bin k (wrapped to the symmetric range).
    pub fn zeta(&self, k: usize) -> f64 {
        let n = self.n_points as i64;
        let k = k as i64;
        let kk = if k <= n / 2 { k } else { k - n };
        2.0 * std::f64::consts::PI * kk as f64 / (n as f64 * self.dx)
    }

    /// Nearest cell edge (k + 1/2) dx.
    pub fn snap_edge(&self, q: f64) -> f64 {
        let k = (q / self.dx - 0.5).round().max(0.0);
        (k + 0.5) * self.dx
    }

    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.n_points).map(|j| f(self.x(j))).collect()
    }
}

/// Transform machinery shared by all surfaces of one model and grid.
#[derive(Clone)]
pub struct FstEngine {
    pub grid: SpatialGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    psi: Vec<Complex64>,
    phi: Vec<Complex64>,
}

impl std::fmt::Debug for FstEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FstEngine").field("grid", &self.grid).finish()
    }
}

impl FstEngine {
    pub fn new(model: &CompoundPoissonModel, grid: SpatialGrid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n_points);
        let inverse = planner.plan_fft_inverse(grid.n_points);
        let phi: Vec<Complex64> =
            (0..grid.n_points).map(|k| model.severity.cf(grid.zeta(k))).collect();
        let psi = phi.iter().map(|p| model.kappa * (p - 1.0)).collect();
        Self { grid, forward, inverse, psi, phi }
    }

    pub fn transform(&self, g: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = g.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// E[g(x + X_tau)] on the grid from the transform of g. With
    /// `jump_average`, additionally averages over one extra jump.
    pub fn propagate_hat(&self, g_hat: &[Complex64], tau: f64, jump_average: bool) -> Vec<f64> {
        let n = self.grid.n_points as f64;
        let mut buf: Vec<Complex64> = g_hat
            .iter()
            .zip(&self.psi)
            .zip(&self.phi)
            .map(|((g, psi), phi)| {
                let v = g * (psi * tau).exp();
                if jump_average {
                    v * phi
                } else {
                    v
                }
            })
            .collect();
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n).collect()
    }

    pub fn propagate(&self, g: &[f64], tau: f64) -> Vec<f64> {
        if tau == 0.0 {
            return g.to_vec();
        }
        self.propagate_hat(&self.transform(g), tau, false)
    }

    /// Lattice law of X_tau: E[F(X_tau)] = sum_m p_m F(x_m) for grid functions F.
    pub fn lattice_law(&self, tau: f64) -> LatticeLaw {
        let n = self.grid.n_points;
        let mut buf: Vec<Complex64> = self.psi.iter().map(|psi| (psi * tau).exp()).collect();
        self.forward.process(&mut buf);
        let p = buf.iter().map(|c| c.re / n as f64).collect();
        LatticeLaw { grid: self.grid.clone(), p }
    }
}

/// Discrete law of X_tau on the grid (signed weights summing to one).
#[derive(Debug, Clone)]
pub struct LatticeLaw {
    pub grid: SpatialGrid,
    pub p: Vec<f64>,
}

impl LatticeLaw {
    /// Weights restricted to the physical domain.
    pub fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.grid.n_phys()).map(move |j| (self.grid.x(j), self.p[j]))
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.support().map(|(x, p)| p * f(x)).sum()
    }

    /// Smallest and largest grid states carrying probability above `eps`.
    pub fn essential_range(&self, eps: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, p) in self.support() {
            if p > eps {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        (lo, hi)
    }
}

/// Time weights of the cubic Lagrange interpolant at a fixed t.
#[derive(Debug, Clone, Copy)]
pub struct TimeSlice {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

/// omega(t_j, x_k) on a time x space grid.
#[derive(Debug, Clone)]
pub struct ExpectationSurface {
    pub grid: SpatialGrid,
    pub times: Vec<f64>,
    values: Vec<f64>,
    jump_avg: Option<Vec<f64>>,
    /// Snapped discontinuity locations of the terminal condition.
    edges: Vec<f64>,
}

impl ExpectationSurface {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.grid.n_points;
        &self.values[j * n..(j + 1) * n]
    }

    pub fn jump_row(&self, j: usize) -> Option<&[f64]> {
        let n = self.grid.n_points;
        self.jump_avg.as_ref().map(|v| &v[j * n..(j + 1) * n])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn slice(&self, t: f64) -> TimeSlice {
        let times = &self.times;
        let m = times.len();
        if m == 1 {
            return TimeSlice { idx: [0; 4], w: [1.0, 0.0, 0.0, 0.0], len: 1 };
        }
        let t = t.clamp(times[0], times[m - 1]);
        let cell = times.partition_point(|s| *s <= t).saturating_sub(1).min(m - 2);
        if t == times[cell] {
            return TimeSlice { idx: [cell, 0, 0, 0], w: [1.0, 0.0, 0.0, 0.0], len: 1 };
        }
        let npts = m.min(4);
        let start = (cell as i64 - 1).clamp(0, (m - npts) as i64) as usize;
        let mut idx = [0usize; 4];
        let mut w = [0.0; 4];
        for a in 0..npts {
            idx[a] = start + a;
            let mut l = 1.0;
            for b in 0..npts {
                if a != b {
                    l *= (t - times[start + b]) / (times[start + a] - times[start + b]);
                }
            }
            w[a] = l;
        }
        TimeSlice { idx, w, len: npts }
    }

    fn spatial(&self, row: &[f64], x: f64, respect_edges: bool) -> f64 {
        let grid = &self.grid;
        let last = grid.n_phys() + (grid.n_points - grid.n_phys()) / 2;
        let u = (x / grid.dx).clamp(0.0, (last - 1) as f64);
        let mut k = (u.floor() as usize).min(last - 2);
        let mut w = u - k as f64;
        if respect_edges && w > 0.0 {
            let (xl, xr) = (grid.x(k), grid.x(k + 1));
            if let Some(e) = self.edges.iter().find(|e| **e > xl && **e < xr) {
                if x < *e {
                    if k == 0 {
                        return row[0];
                    }
                    k -= 1;
                    w += 1.0;
                } else {
                    k += 1;
                    w -= 1.0;
                }
            }
        }
        row[k] + (row[k + 1] - row[k]) * w
    }

    fn combine<F: Fn(usize) -> f64>(slice: &TimeSlice, f: F) -> f64 {
        (0..slice.len).map(|a| slice.w[a] * f(slice.idx[a])).sum()
    }

    pub fn eval_slice(&self, slice: &TimeSlice, x: f64) -> f64 {
        Self::combine(slice, |j| self.spatial(self.row(j), x, true))
    }

    /// E[omega(t, x + xi)], requires the surface to be built with jump averages.
    pub fn eval_jump_slice(&self, slice: &TimeSlice, x: f64) -> Option<f64> {
        self.jump_avg.as_ref()?;
        Some(Self::combine(slice, |j| self.spatial(self.jump_row(j).unwrap(), x, false)))
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        self.eval_slice(&self.slice(t), x)
    }

    pub fn eval_jump(&self, t: f64, x: f64) -> Option<f64> {
        self.eval_jump_slice(&self.slice(t), x)
    }

    /// CSV body (t, x, omega) restricted to the physical domain.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,omega\n");
        for (j, t) in self.times.iter().enumerate() {
            let row = self.row(j);
            for k in 0..self.grid.n_phys() {
                s.push_str(&format!("{t},{},{}\n", self.grid.x(k), row[k]));
            }
        }
        s
    }
}

/// `n` equally spaced times from `t0` to `t1` inclusive.
pub fn uniform_times(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![t1];
    }
    (0..n).map(|j| t0 + (t1 - t0) * j as f64 / (n - 1) as f64).collect()
}

/// omega(t, x) = E_{t,x}[g(X_{t_dagger})] for each time in `times`.
///
/// `edges` lists snapped discontinuities of `g`, used to keep spatial
/// interpolation on one side of a jump. With `jump_average` the surface
/// also stores E[omega(t, x + xi)].
pub fn fst_solve(
    engine: &FstEngine,
    g: &[f64],
    times: &[f64],
    t_dagger: f64,
    edges: Vec<f64>,
    jump_average: bool,
) -> Result<ExpectationSurface> {
    let grid = engine.grid.clone();
    if g.len() != grid.n_points {
        return Err(Error::Numerical("terminal condition length differs from grid".into()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("terminal condition is not finite".into()));
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Numerical("time grid must be non-empty and ascending".into()));
    }
    if *times.last().unwrap() > t_dagger + 1e-12 {
        return Err(Error::Numerical("time grid extends past the stress time".into()));
    }
    let g_hat = engine.transform(g);
    let rows: Vec<(Vec<f64>, Option<Vec<f64>>)> = times
        .par_iter()
        .map(|t| {
            let tau = (t_dagger - t).max(0.0);
            let w = if tau == 0.0 { g.to_vec() } else { engine.propagate_hat(&g_hat, tau, false) };
            let a = jump_average.then(|| engine.propagate_hat(&g_hat, tau, true));
            (w, a)
        })
        .collect();
    let n = grid.n_points;
    let mut values = Vec::with_capacity(times.len() * n);
    let mut jump = jump_average.then(|| Vec::with_capacity(times.len() * n));
    for (w, a) in rows {
        values.extend_from_slice(&w);
        if let (Some(j), Some(a)) = (jump.as_mut(), a) {
            j.extend_from_slice(&a);
        }
    }
    let check_len = grid.n_phys() + (n - grid.n_phys()) / 2;
    for (j, t) in times.iter().enumerate() {
        let row = &values[j * n..j * n + check_len];
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite surface value {v} at t = {t}")));
        }
    }
    Ok(ExpectationSurface { grid, times: times.to_vec(), values, jump_avg: jump, edges })
}

fn poisson_ln_pmf(n: usize, lambda: f64) -> f64 {
    n as f64 * lambda.ln() - lambda - ln_gamma(n as f64 + 1.0)
}

fn gamma_family(model: &CompoundPoissonModel) -> Result<(f64, f64)> {
    model.severity.gamma_params().ok_or_else(|| {
        Error::InvalidModel("series oracle needs a gamma or exponential severity".into())
    })
}

/// P(X_t < q) by the Poisson mixture of gamma laws.
pub fn oracle_tail_prob(model: &CompoundPoissonModel, q: f64, t: f64) -> Result<f64> {
    let (a, b) = gamma_family(model)?;
    if q <= 0.0 {
        return Ok(0.0);
    }
    let lambda = model.kappa * t;
    if lambda == 0.0 {
        return Ok(1.0);
    }
    let mut total = (-lambda).exp();
    let mut mass = total;
    let mut n = 1usize;
    loop {
        let pn = poisson_ln_pmf(n, lambda).exp();
        total += pn * gamma_lr(n as f64 * a, b * q);
        mass += pn;
        if (1.0 - mass < 1e-12 && n as f64 > lambda) || n > 100_000 {
            break;
        }
        n += 1;
    }
    Ok(total.min(1.0))
}

/// (E[e^{-theta X_t} 1{X_t > q}], E[X_t e^{-theta X_t} 1{X_t > q}]) for gamma
/// severities; requires theta > -rate.
pub fn oracle_tilted_tail(
    model: &CompoundPoissonModel,
    q: f64,
    theta: f64,
    t: f64,
) -> Result<(f64, f64)> {
    let (m0, m1, ln_scale) = tilted_tail_scaled(model, q, theta, t)?;
    let s = ln_scale.exp();
    Ok((m0 * s, m1 * s))
}

/// Same as [`oracle_tilted_tail`] but returns (m0, m1, ln_scale) with the true
/// moments equal to m * exp(ln_scale), so strongly tilted cases do not overflow.
pub(crate) fn tilted_tail_scaled(
    model: &CompoundPoissonModel,
    q: f64,
    theta: f64,
    t: f64,
) -> Result<(f64, f64, f64)> {
    let (a, b) = gamma_family(model)?;
    if theta <= -b {
        return Err(Error::Numerical(format!(
            "exponential moment of order {} is infinite",
            -theta
        )));
    }
    let lambda = model.kappa * t;
    let bt = b + theta;
    let ln_r = (b / bt).ln();
    let atom = if q < 0.0 { (-lambda).exp() } else { 0.0 };
    if lambda == 0.0 {
        return Ok((atom, 0.0, 0.0));
    }
    let ln_w = |n: usize| poisson_ln_pmf(n, lambda) + n as f64 * a * ln_r;
    let mode = (lambda * (a * ln_r).exp()).floor().max(1.0) as usize;
    let ln_scale = ln_w(mode).max(ln_w(mode + 1)).max((-lambda).max(-700.0));
    let qq = q.max(0.0);
    let (mut m0, mut m1) = (atom * (-ln_scale).exp(), 0.0);
    let mut n = 1usize;
    loop {
        let na = n as f64 * a;
        let w = (ln_w(n) - ln_scale).exp();
        let (u0, u1) = if qq > 0.0 {
            (gamma_ur(na, bt * qq), gamma_ur(na + 1.0, bt * qq))
        } else {
            (1.0, 1.0)
        };
        m0 += w * u0;
        m1 += w * (na / bt) * u1;
        if (n > mode + 1 && w < 1e-17 * m0.max(1e-300) && w * na / bt < 1e-17 * m1.max(1e-300))
            || n > 1_000_000
        {
            break;
        }
        n += 1;
    }
    Ok((m0, m1, ln_scale))
}

/// Lower alpha-quantile of X_t from the series oracle.
pub fn oracle_var(model: &CompoundPoissonModel, alpha: f64, t: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConstraint(format!("level {alpha} must lie in (0,1)")));
    }
    if oracle_tail_prob(model, f64::MIN_POSITIVE, t)? >= alpha {
        return Ok(0.0);
    }
    let mut hi = model.mean_at(t) + 4.0 * model.variance_at(t).sqrt();
    while oracle_tail_prob(model, hi, t)? < alpha {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if oracle_tail_prob(model, mid, t)? < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// CVaR_alpha(X_t) = VaR + E[(X - VaR)_+] / (1 - alpha) from the series oracle.
pub fn oracle_cvar(model: &CompoundPoissonModel, alpha: f64, t: f64) -> Result<f64> {
    let v = oracle_var(model, alpha, t)?;
    let (m0, m1) = oracle_tilted_tail(model, v, 0.0, t)?;
    Ok(v + (m1 - v * m0) / (1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SeverityDistribution;
    use approx::assert_abs_diff_eq;

    fn running() -> CompoundPoissonModel {
        CompoundPoissonModel::new(5.0, SeverityDistribution::gamma(2.0, 1.0), 1.0).unwrap()
    }

    fn engine(q: &[f64]) -> FstEngine {
        let m = running();
        let grid = SpatialGrid::for_model(&m, q, 1.0, DEFAULT_POINTS).unwrap();
        FstEngine::new(&m, grid)
    }

    #[test]
    fn levy_exponent_values() {
        let m = running();
        let z = levy_exponent(&m, 0.0);
        assert_abs_diff_eq!(z.norm(), 0.0);
        let z = levy_exponent(&m, 1.0);
        assert_abs_diff_eq!(z.re, -5.0, epsilon = 1e-13);
        assert_abs_diff_eq!(z.im, 2.5, epsilon = 1e-13);
        let e = CompoundPoissonModel::new(1.0, SeverityDistribution::exponential(2.0), 1.0).unwrap();
        let z = levy_exponent(&e, 2.0);
        assert_abs_diff_eq!(z.re, -0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(z.im, 0.5, epsilon = 1e-13);
    }

    #[test]
    fn grid_resolution_matches_defaults() {
        let e = engine(&[19.97]);
        assert!(e.grid.dx < 0.01);
        assert!(e.grid.x_phys >= 19.97 + 5.0 * 30f64.sqrt());
    }

    #[test]
    fn constants_are_invariant() {
        let e = engine(&[17.4]);
        let g = vec![1.0; e.grid.n_points];
        let times = uniform_times(0.0, 1.0, 11);
        let s = fst_solve(&e, &g, &times, 1.0, vec![], true).unwrap();
        for j in 0..times.len() {
            for k in (0..e.grid.n_phys()).step_by(97) {
                assert_abs_diff_eq!(s.row(j)[k], 1.0, epsilon = 1e-10);
                assert_abs_diff_eq!(s.jump_row(j).unwrap()[k], 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn terminal_row_is_exact() {
        let e = engine(&[17.4]);
        let q = e.grid.snap_edge(17.4);
        let g = e.grid.sample(|x| if x < q { 1.0 } else { 0.0 });
        let s = fst_solve(&e, &g, &uniform_times(0.0, 1.0, 5), 1.0, vec![q], false).unwrap();
        assert_eq!(s.row(4), &g[..]);
    }

    #[test]
    fn indicator_matches_oracle_at_origin() {
        let e = engine(&[17.4]);
        let q = e.grid.snap_edge(17.4);
        let g = e.grid.sample(|x| if x < q { 1.0 } else { 0.0 });
        let s = fst_solve(&e, &g, &[0.0, 1.0], 1.0, vec![q], false).unwrap();
        let fst = s.eval(0.0, 0.0);
        let oracle = oracle_tail_prob(&running(), q, 1.0).unwrap();
        assert!((fst - oracle).abs() < 1e-4, "{fst} vs {oracle}");
        assert!((fst - 0.90).abs() < 0.005);
    }

    #[test]
    fn oracle_known_values() {
        let m = running();
        let v = oracle_var(&m, 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(v, 17.3647, epsilon = 1e-3);
        let p = oracle_tail_prob(&m, 19.97, 1.0).unwrap();
        assert_abs_diff_eq!(p, 0.949162, epsilon = 1e-5);
        assert_abs_diff_eq!(oracle_tail_prob(&m, 0.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(oracle_tail_prob(&m, 1e-9, 1.0).unwrap(), (-5.0_f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(oracle_tail_prob(&m, 3.0, 0.0).unwrap(), 1.0);
        let cv = oracle_cvar(&m, 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(cv, 20.9788, epsilon = 1e-3);
    }

    #[test]
    fn tilted_tail_consistency() {
        let m = running();
        let (m0, m1) = oracle_tilted_tail(&m, -1.0, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m1, 10.0, epsilon = 1e-8);
        // E[e^{-theta X}] = exp(kappa((b/(b+theta))^a - 1))
        let (z, _) = oracle_tilted_tail(&m, -1.0, 0.1, 1.0).unwrap();
        let exact = (5.0 * ((1.0_f64 / 1.1).powi(2) - 1.0)).exp();
        assert_abs_diff_eq!(z, exact, epsilon = 1e-12);
        assert!(oracle_tilted_tail(&m, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn lattice_law_sums_to_one_and_has_right_mean() {
        let e = engine(&[19.97]);
        let law = e.lattice_law(1.0);
        assert_abs_diff_eq!(law.expect(|_| 1.0), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(law.expect(|x| x), 10.0, epsilon = 1e-4);
    }

    #[test]
    fn time_interpolation_is_smooth() {
        let e = engine(&[19.97]);
        let q = e.grid.snap_edge(19.97);
        let g = e.grid.sample(|x| if x < q { 0.5 } else { 1.0 });
        let s = fst_solve(&e, &g, &uniform_times(0.0, 1.0, 201), 1.0, vec![q], false).unwrap();
        let t = 0.4567;
        let exact = e.propagate(&g, 1.0 - t);
        let k = 1500;
        assert_abs_diff_eq!(s.eval(t, e.grid.x(k)), exact[k], epsilon = 1e-8);
    }
}
