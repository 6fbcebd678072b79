//! Path simulation under the reference and stressed measures, and
//! Radon-Nikodym derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{BivariateModel, CompoundPoissonModel, Dependence};
use crate::stress::StressedDynamics;

const CHUNK: usize = 1 << 14;

/// Per-path (or per-chunk) generator: master seed plus a stream id.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let n: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    n as u64
}

/// `n` draws of X_t under the reference measure.
pub fn sample_terminal(model: &CompoundPoissonModel, t: f64, n: usize, seed: u64) -> Vec<f64> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| {
                    let k = poisson_count(model.kappa * t, &mut rng);
                    (0..k).map(|_| model.severity.sample(&mut rng)).sum::<f64>()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `n` draws of (X_{t1}, X_{t2}) with t1 <= t2 under the reference measure.
pub fn sample_pair(model: &CompoundPoissonModel, t1: f64, t2: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| {
                    let mut draw = |dt: f64| {
                        let k = poisson_count(model.kappa * dt, &mut rng);
                        (0..k).map(|_| model.severity.sample(&mut rng)).sum::<f64>()
                    };
                    let a = draw(t1);
                    (a, a + draw((t2 - t1).max(0.0)))
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Reference,
    Stressed,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Reference => "reference",
            Measure::Stressed => "stressed",
        }
    }
}

/// A jump path on [0, T]; jump sizes are stored row-major with `dim`
/// components per event.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub jumps: Vec<f64>,
    pub dim: usize,
    /// Terminal RN derivative for reference paths, 1 otherwise.
    pub rn_weight: f64,
}

impl Path {
    pub fn n_jumps(&self) -> usize {
        self.times.len()
    }

    pub fn jump(&self, i: usize) -> &[f64] {
        &self.jumps[i * self.dim..(i + 1) * self.dim]
    }

    /// Right-continuous state of component `comp` at time t.
    pub fn state_at(&self, t: f64, comp: usize) -> f64 {
        let n = self.times.partition_point(|s| *s <= t);
        (0..n).fold(0.0, |a, i| a + self.jumps[i * self.dim + comp])
    }

    pub fn terminal(&self, comp: usize) -> f64 {
        self.state_at(f64::INFINITY, comp)
    }

    /// Sum of all components at time t.
    pub fn aggregate_at(&self, t: f64) -> f64 {
        (0..self.dim).map(|c| self.state_at(t, c)).sum()
    }

    pub fn trajectory(&self, grid: &[f64], comp: usize) -> Vec<f64> {
        grid.iter().map(|t| self.state_at(*t, comp)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: Vec<Path>,
    pub seed: u64,
    pub measure: Measure,
    pub horizon: f64,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn terminal(&self, comp: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.terminal(comp)).collect()
    }

    pub fn states_at(&self, t: f64, comp: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.state_at(t, comp)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.rn_weight).collect()
    }

    /// Sets each path's weight to the terminal RN derivative of `dynamics`.
    pub fn attach_rn(&mut self, dynamics: &StressedDynamics) {
        for p in &mut self.paths {
            p.rn_weight = rn_of_path(dynamics, p);
        }
    }

    /// CSV: path_id, t, X1[, X2] on `grid` for the first `max_paths` paths.
    pub fn paths_csv(&self, grid: &[f64], max_paths: usize) -> String {
        let dim = self.paths.first().map(|p| p.dim).unwrap_or(1);
        let mut s = String::from("path_id,t");
        for c in 0..dim {
            s.push_str(&format!(",X{}", c + 1));
        }
        s.push('\n');
        for (i, p) in self.paths.iter().take(max_paths).enumerate() {
            for t in grid {
                s.push_str(&format!("{i},{t}"));
                for c in 0..dim {
                    s.push_str(&format!(",{}", p.state_at(*t, c)));
                }
                s.push('\n');
            }
        }
        s
    }

    /// Rows (measure, t, q10, q50, q90) of component `comp`.
    pub fn summary_rows(&self, grid: &[f64], comp: usize) -> Vec<(f64, [f64; 3])> {
        grid.iter()
            .map(|t| {
                let mut v = self.states_at(*t, comp);
                v.sort_by(f64::total_cmp);
                let q = |a: f64| crate::analytics::sorted_quantile(&v, a);
                (*t, [q(0.1), q(0.5), q(0.9)])
            })
            .collect()
    }
}

/// Header plus rows of several ensembles' summaries.
pub fn summary_csv(ensembles: &[&PathEnsemble], grid: &[f64], comp: usize) -> String {
    let mut s = String::from("measure,t,q10,q50,q90\n");
    for e in ensembles {
        for (t, q) in e.summary_rows(grid, comp) {
            s.push_str(&format!("{},{t},{},{},{}\n", e.measure.name(), q[0], q[1], q[2]));
        }
    }
    s
}

fn reference_path<R: Rng + ?Sized, F: FnMut(&mut R, &mut Vec<f64>)>(
    rate: f64,
    horizon: f64,
    dim: usize,
    rng: &mut R,
    mut draw: F,
) -> Path {
    let mut times = Vec::new();
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e / rate;
        if t > horizon {
            break;
        }
        times.push(t);
        draw(rng, &mut jumps);
    }
    Path { times, jumps, dim, rn_weight: 1.0 }
}

/// Exact simulation: exponential inter-arrival times, i.i.d. severities.
pub fn simulate_reference(model: &CompoundPoissonModel, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidModel("need at least one path".into()));
    }
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            reference_path(model.kappa, model.horizon, 1, &mut rng, |r, j| j.push(model.severity.sample(r)))
        })
        .collect();
    Ok(PathEnsemble { paths, seed, measure: Measure::Reference, horizon: model.horizon })
}

pub fn simulate_bivariate_reference(bimodel: &BivariateModel, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    bimodel.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidModel("need at least one path".into()));
    }
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            reference_path(bimodel.kappa, bimodel.horizon, 2, &mut rng, |r, j| {
                j.extend_from_slice(&bimodel.sample_jump(r))
            })
        })
        .collect();
    Ok(PathEnsemble { paths, seed, measure: Measure::Reference, horizon: bimodel.horizon })
}

/// Jump law driving a stressed simulation: total reference rate, probability
/// that the stressed coordinate does not move, and a pool of joint draws.
struct JumpSource<'a> {
    dim: usize,
    rate: f64,
    p_zero: f64,
    pool: &'a [f64],
    fresh: &'a (dyn Fn(&mut ChaCha8Rng, &mut Vec<f64>) + Sync),
}

struct Window {
    t0: f64,
    x0: f64,
    t_end: f64,
    dt: f64,
    n_steps: usize,
}

fn stressed_path(
    dynamics: &StressedDynamics,
    src: &JumpSource<'_>,
    win: &Window,
    rng: &mut ChaCha8Rng,
) -> Result<Path> {
    let (horizon, dt) = (win.t_end, win.dt);
    let dim = src.dim;
    let pool_len = src.pool.len() / dim;
    let window = dynamics.window().min(pool_len);
    let active = dynamics.active_until();
    let mut times = Vec::new();
    let mut jumps = Vec::new();
    let mut x = win.x0;
    let mut acc = 0.0;
    let mut threshold: f64 = Exp1.sample(rng);
    let mut weights = vec![0.0; window];
    for k in 0..win.n_steps {
        let t = win.t0 + k as f64 * dt;
        if t >= active - 1e-12 {
            // Kernel is one from here on: continue exactly with the same
            // hazard threshold.
            let mut s = t + (threshold - acc) / src.rate;
            while s <= horizon {
                times.push(s);
                (src.fresh)(rng, &mut jumps);
                let e: f64 = Exp1.sample(rng);
                s += e / src.rate;
            }
            break;
        }
        let view = dynamics.view(t);
        let omega_x = view.omega(x);
        if !(omega_x > crate::fst::POSITIVITY_FLOOR) {
            return Err(Error::Numerical(format!("omega underflow at (t, x) = ({t}, {x})")));
        }
        let kappa = src.rate * src.p_zero + view.intensity(x);
        let p = kappa * dt;
        if !(p < 1.0) {
            return Err(Error::Numerical(format!(
                "jump probability {p} >= 1 at (t, x) = ({t}, {x}); reduce the time step"
            )));
        }
        acc += -(-p).ln_1p();
        if acc < threshold {
            continue;
        }
        acc = 0.0;
        threshold = Exp1.sample(rng);
        // Algorithm 1 on a window of the reference pool.
        let offset = rng.random_range(0..pool_len);
        let mut total = 0.0;
        for (i, w) in weights.iter_mut().enumerate() {
            let y = src.pool[((offset + i) % pool_len) * dim];
            total += view.kernel_with(omega_x, x, y);
            *w = total;
        }
        if !(total > 0.0) {
            return Err(Error::Numerical("all severity weights vanish".into()));
        }
        let u = rng.random::<f64>() * total;
        let pick = weights.partition_point(|c| *c <= u).min(window - 1);
        let row = ((offset + pick) % pool_len) * dim;
        let y = &src.pool[row..row + dim];
        times.push(t + dt);
        jumps.extend_from_slice(y);
        x += y[0];
    }
    Ok(Path { times, jumps, dim, rn_weight: 1.0 })
}

fn window(t0: f64, x0: f64, t_end: f64, dt: f64) -> Result<Window> {
    let len = t_end - t0;
    if !(dt > 0.0 && dt <= len) {
        return Err(Error::InvalidModel(format!("time step {dt} must lie in (0, {len}]")));
    }
    let n_steps = (len / dt).round().max(1.0) as usize;
    Ok(Window { t0, x0, t_end, dt: len / n_steps as f64, n_steps })
}

fn run_stressed(
    dynamics: &StressedDynamics,
    src: &JumpSource<'_>,
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidModel("need at least one path".into()));
    }
    let win = window(0.0, 0.0, horizon, dt)?;
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            stressed_path(dynamics, src, &win, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble { paths, seed, measure: Measure::Stressed, horizon })
}

/// Fixed-step Bernoulli scheme under Q*: one jump trial per step with
/// probability kappa*(t, X_t) dt, severities by Algorithm 1.
pub fn simulate_stressed(
    dynamics: &StressedDynamics,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathEnsemble> {
    let model = dynamics.model().clone();
    let fresh = move |r: &mut ChaCha8Rng, j: &mut Vec<f64>| j.push(model.severity.sample(r));
    let src = JumpSource {
        dim: 1,
        rate: dynamics.model().kappa,
        p_zero: 0.0,
        pool: dynamics.severity_pool(),
        fresh: &fresh,
    };
    run_stressed(dynamics, &src, dynamics.model().horizon, n_paths, dt, seed)
}

/// Increments X_{t0 + delta} - X_{t0} under Q* given X_{t0} = x0.
pub fn simulate_stressed_increments(
    dynamics: &StressedDynamics,
    t0: f64,
    x0: f64,
    delta: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let model = dynamics.model();
    if !(t0 >= 0.0 && delta > 0.0 && t0 + delta <= model.horizon + 1e-12) {
        return Err(Error::InvalidModel(format!(
            "forecast window [{t0}, {}] leaves [0, T]",
            t0 + delta
        )));
    }
    let m = model.clone();
    let fresh = move |r: &mut ChaCha8Rng, j: &mut Vec<f64>| j.push(m.severity.sample(r));
    let src = JumpSource { dim: 1, rate: model.kappa, p_zero: 0.0, pool: dynamics.severity_pool(), fresh: &fresh };
    let win = window(t0, x0, (t0 + delta).min(model.horizon), dt.min(delta))?;
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            stressed_path(dynamics, &src, &win, &mut rng).map(|p| p.terminal(0))
        })
        .collect()
}

/// Joint draws of the bivariate severity used as the Algorithm 1 pool.
pub fn bivariate_pool(bimodel: &BivariateModel, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0xb1);
    let mut v = Vec::with_capacity(2 * size);
    for _ in 0..size.max(1) {
        v.extend_from_slice(&bimodel.sample_jump(&mut rng));
    }
    v
}

/// Stressed bivariate paths: the stress acts on component one through
/// `dynamics` (built on `bimodel.component_one()`); joint draws are
/// weighted by the kernel in their first coordinate.
pub fn simulate_bivariate_stressed(
    bimodel: &BivariateModel,
    dynamics: &StressedDynamics,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathEnsemble> {
    bimodel.validate()?;
    let p_zero = match bimodel.dependence {
        Dependence::IndependentMixture { p } => 1.0 - p,
        _ => 0.0,
    };
    let one = bimodel.component_one();
    if (one.kappa - dynamics.model().kappa).abs() > 1e-12 * one.kappa
        || (one.horizon - dynamics.model().horizon).abs() > 1e-12
    {
        return Err(Error::InvalidModel(
            "dynamics must be built on the first component of the bivariate model".into(),
        ));
    }
    let pool = bivariate_pool(bimodel, dynamics.severity_pool().len(), seed ^ 0x9e37_79b9_7f4a_7c15);
    let bm = bimodel.clone();
    let fresh = move |r: &mut ChaCha8Rng, j: &mut Vec<f64>| j.extend_from_slice(&bm.sample_jump(r));
    let src = JumpSource { dim: 2, rate: bimodel.kappa, p_zero, pool: &pool, fresh: &fresh };
    run_stressed(dynamics, &src, bimodel.horizon, n_paths, dt, seed)
}

/// Terminal RN derivative from the state at the stress time (and at T for
/// two-time stresses).
pub fn rn_terminal(dynamics: &StressedDynamics, x: f64) -> f64 {
    dynamics.rn_terminal(x)
}

/// RN derivative of a reference path, reading X at the stress time and at T.
pub fn rn_of_path(dynamics: &StressedDynamics, path: &Path) -> f64 {
    let xs = path.state_at(dynamics.stress_time(), 0);
    dynamics.rn_two_time(xs, path.terminal(0))
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Integral of kappa*(t, x) - kappa over [a, b] at fixed x; Gauss-Legendre
/// on every surface time cell.
fn compensator(dynamics: &StressedDynamics, x: f64, a: f64, b: f64) -> Result<f64> {
    let kappa = dynamics.model().kappa;
    let mut total = 0.0;
    for stage in dynamics.stages() {
        let (lo, hi) = (a.max(stage.t_start), b.min(stage.t_end));
        if hi <= lo {
            continue;
        }
        let times = &stage.surface.times;
        let mut cuts = vec![lo];
        cuts.extend(times.iter().copied().filter(|s| *s > lo && *s < hi));
        cuts.push(hi);
        for w in cuts.windows(2) {
            let (mid, half) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            for (z, g) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let t = mid + half * z;
                let k = dynamics.intensity(t, x)?;
                total += g * half * (k - kappa);
            }
        }
    }
    Ok(total)
}

/// exp{ sum log h*(t_j, X_{t_j-}, y_j) - int (kappa* - kappa) dt } along a
/// univariate path with exact jump times.
pub fn rn_pathwise(dynamics: &StressedDynamics, path: &Path) -> Result<f64> {
    if dynamics.stages().is_empty() {
        return Ok(1.0);
    }
    let end = dynamics.active_until();
    let mut log = 0.0;
    let mut x = 0.0;
    let mut t_prev = 0.0;
    for i in 0..path.n_jumps() {
        let t = path.times[i];
        if t > end {
            break;
        }
        let y = path.jump(i)[0];
        log -= compensator(dynamics, x, t_prev, t)?;
        log += dynamics.kernel(t, x, y)?.ln();
        x += y;
        t_prev = t;
    }
    log -= compensator(dynamics, x, t_prev, end)?;
    Ok(log.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SeverityDistribution;

    fn running() -> CompoundPoissonModel {
        CompoundPoissonModel::new(5.0, SeverityDistribution::gamma(2.0, 1.0), 1.0).unwrap()
    }

    #[test]
    fn reference_moments() {
        let e = simulate_reference(&running(), 100_000, 3).unwrap();
        let n = e.len() as f64;
        let mean_jumps = e.paths.iter().map(|p| p.n_jumps() as f64).sum::<f64>() / n;
        assert!((mean_jumps - 5.0).abs() < 3.0 * (5.0 / n).sqrt());
        let mean_x = e.terminal(0).iter().sum::<f64>() / n;
        assert!((mean_x - 10.0).abs() < 3.0 * (30.0 / n).sqrt());
    }

    #[test]
    fn reproducible_and_state_is_cumsum() {
        let a = simulate_reference(&running(), 50, 9).unwrap();
        let b = simulate_reference(&running(), 50, 9).unwrap();
        assert_eq!(a.paths, b.paths);
        let p = &a.paths[0];
        assert!(p.times.windows(2).all(|w| w[0] < w[1]));
        assert!((p.state_at(1.0, 0) - p.jumps.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(p.state_at(0.0, 0), 0.0);
    }

    #[test]
    fn sample_terminal_mean() {
        let x = sample_terminal(&running(), 0.5, 200_000, 1);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        assert!((m - 5.0).abs() < 0.05);
        let pairs = sample_pair(&running(), 0.5, 1.0, 1000, 2);
        assert!(pairs.iter().all(|(a, b)| b >= a));
    }

    #[test]
    fn rejects_coarse_step() {
        let d = crate::stress::StressedDynamics::unstressed(&running(), &Default::default());
        assert!(simulate_stressed(&d, 10, 2.0, 1).is_err());
    }
}
