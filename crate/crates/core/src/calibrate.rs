//! Lagrange multipliers of the KL-minimal stress.
//!
//! The multipliers minimise the convex dual
//! `Phi(eta) = log E[exp(-eta . f(X))] + eta . c`, whose gradient is
//! `c - E^Q[f]`. VaR and CVaR stresses have (semi-)closed forms.

use crate::error::{Error, Result};
use crate::fst::{self, FstEngine, SpatialGrid};
use crate::model::{CompoundPoissonModel, Constraint, ConstraintKind, StressSpec};

/// How expectations of X at the stress time are computed.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpectationBackend {
    /// Signed lattice law from the FST grid (deterministic).
    Lattice { n_points: usize },
    /// Exact samples on common random numbers.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for ExpectationBackend {
    fn default() -> Self {
        Self::Lattice { n_points: fst::DEFAULT_POINTS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub backend: ExpectationBackend,
    /// Relative gradient tolerance of the dual problem.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { backend: ExpectationBackend::default(), tolerance: 1e-10, max_iterations: 200 }
    }
}

/// Calibrated multipliers. `constraints` are the constraints actually
/// solved (thresholds may be snapped to grid edges); for two-time problems
/// the first entry belongs to the early stage and the last to T.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub iterations: usize,
}

impl Multipliers {
    /// Zero multipliers for the given constraints.
    pub fn zero(constraints: Vec<Constraint>) -> Self {
        Self {
            values: vec![0.0; constraints.len()],
            residuals: vec![0.0; constraints.len()],
            constraints,
            iterations: 0,
        }
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Report rows: kind, threshold, target, multiplier, residual, iterations.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("kind,threshold,target,multiplier,residual,iterations\n");
        for ((c, eta), r) in self.constraints.iter().zip(&self.values).zip(&self.residuals) {
            let thr = c.kind.threshold().map(|q| q.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{thr},{},{eta},{r:e},{}\n",
                c.kind.name(),
                c.target,
                self.iterations
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleInterval {
    pub lower: f64,
    pub upper: f64,
}

impl FeasibleInterval {
    pub fn contains(&self, c: f64) -> bool {
        c > self.lower && c < self.upper
    }
}

/// Weighted sample of X at the stress time.
struct WeightedStates {
    x: Vec<f64>,
    w: Vec<f64>,
}

const LATTICE_EPS: f64 = 1e-14;

impl WeightedStates {
    fn lattice(engine: &FstEngine, t: f64) -> Self {
        let law = engine.lattice_law(t);
        let (x, w) = law.support().unzip();
        Self { x, w }
    }

    fn monte_carlo(model: &CompoundPoissonModel, t: f64, samples: usize, seed: u64) -> Self {
        let x = crate::simulate::sample_terminal(model, t, samples, seed);
        let w = vec![1.0 / samples as f64; samples];
        Self { x, w }
    }

    fn range_of(&self, f: &ConstraintKind) -> (f64, f64) {
        let eps = if self.w.len() > 1 && self.w.iter().all(|w| *w == self.w[0]) { 0.0 } else { LATTICE_EPS };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, w) in self.x.iter().zip(&self.w) {
            if *w > eps {
                let v = f.eval(*x);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

fn engine_for(
    model: &CompoundPoissonModel,
    thresholds: &[f64],
    n_points: usize,
) -> Result<FstEngine> {
    let grid = SpatialGrid::for_model(model, thresholds, model.horizon, n_points)?;
    Ok(FstEngine::new(model, grid))
}

/// Grid shared by calibration and dynamics for a model and its thresholds.
pub fn default_grid(
    model: &CompoundPoissonModel,
    thresholds: &[f64],
    n_points: usize,
) -> Result<SpatialGrid> {
    SpatialGrid::for_model(model, thresholds, model.horizon, n_points)
}

fn snap(c: &Constraint, grid: &SpatialGrid) -> Constraint {
    match c.kind.threshold() {
        Some(q) => Constraint { kind: c.kind.with_threshold(grid.snap_edge(q)), target: c.target },
        None => c.clone(),
    }
}

fn check_not_constant(lo: f64, hi: f64, c: &Constraint) -> Result<()> {
    if hi - lo <= 1e-14 * (1.0 + lo.abs()) {
        return Err(Error::Infeasible(format!(
            "{} constraint is constant ({lo}) on the support; only c = {lo} is attainable",
            c.kind.name()
        )));
    }
    Ok(())
}

/// Admissible range of targets c = E^Q[f(X_T)] reachable by tilts exp(s f)
/// with s in [a, b]. Infinite ends map to the essential range of f(X_T).
pub fn feasible_interval(
    model: &CompoundPoissonModel,
    f: &ConstraintKind,
    a: f64,
    b: f64,
) -> Result<FeasibleInterval> {
    if !(a < b) {
        return Err(Error::InvalidConstraint("need a < b".into()));
    }
    let thresholds: Vec<f64> = f.threshold().into_iter().collect();
    let engine = engine_for(model, &thresholds, fst::DEFAULT_POINTS)?;
    let f = match f.threshold() {
        Some(q) => f.with_threshold(engine.grid.snap_edge(q)),
        None => f.clone(),
    };
    let states = WeightedStates::lattice(&engine, model.horizon);
    let (lo, hi) = states.range_of(&f);
    check_not_constant(lo, hi, &Constraint { kind: f.clone(), target: lo })?;
    let tilted = |s: f64| -> Result<f64> {
        let vals: Vec<f64> = states.x.iter().map(|x| f.eval(*x)).collect();
        let shift = vals
            .iter()
            .zip(&states.w)
            .filter(|(_, w)| **w > LATTICE_EPS)
            .map(|(v, _)| s * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m) = (0.0, 0.0);
        for (v, w) in vals.iter().zip(&states.w) {
            let e = w * (s * v - shift).exp();
            z += e;
            m += e * v;
        }
        let r = m / z;
        if !r.is_finite() {
            return Err(Error::Numerical(format!("cumulant of f(X_T) not finite at s = {s}")));
        }
        Ok(r)
    };
    let lower = if a.is_finite() { tilted(a)? } else { lo };
    let upper = if b.is_finite() { tilted(b)? } else { hi };
    Ok(FeasibleInterval { lower, upper })
}

/// eta = log[(1 - alpha) P(X < q) / (alpha P(X >= q))] at the stress time T.
pub fn solve_var_multiplier(
    model: &CompoundPoissonModel,
    q: f64,
    alpha: f64,
) -> Result<Multipliers> {
    let constraint = Constraint::var(q, alpha)?;
    let p = prob_below(model, q, model.horizon)?;
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::Infeasible(format!(
            "P(X_T < {q}) = {p}; the indicator stress needs 0 < P < 1"
        )));
    }
    let eta = ((1.0 - alpha) * p / (alpha * (1.0 - p))).ln();
    let e = (-eta).exp();
    let qprob = e * p / (e * p + 1.0 - p);
    Ok(Multipliers {
        values: vec![eta],
        residuals: vec![qprob - alpha],
        constraints: vec![constraint],
        iterations: 0,
    })
}

fn prob_below(model: &CompoundPoissonModel, q: f64, t: f64) -> Result<f64> {
    if model.severity.gamma_params().is_some() {
        return fst::oracle_tail_prob(model, q, t);
    }
    let engine = engine_for(model, &[q], fst::DEFAULT_POINTS)?;
    let q = engine.grid.snap_edge(q);
    Ok(engine.lattice_law(t).expect(|x| if x < q { 1.0 } else { 0.0 }))
}

/// Tail moments (E[e^{-th(X-q)} 1{X>q}], E[e^{-th(X-q)} (X-q) 1{X>q}]) in
/// log-scaled form: true values are m * exp(ln_scale).
fn tail_moments(
    model: &CompoundPoissonModel,
    q: f64,
    theta: f64,
    lattice: Option<&WeightedStates>,
) -> Result<(f64, f64, f64)> {
    match lattice {
        None => {
            let (m0, m1, ln_s) = fst::tilted_tail_scaled(model, q, theta, model.horizon)?;
            // e^{-theta X} -> e^{-theta (X - q)} and X -> X - q.
            Ok((m0, m1 - q * m0, ln_s + theta * q))
        }
        Some(states) => {
            let shift = states
                .x
                .iter()
                .filter(|x| **x > q)
                .map(|x| -theta * (x - q))
                .fold(f64::NEG_INFINITY, f64::max);
            if !shift.is_finite() {
                return Ok((0.0, 0.0, 0.0));
            }
            let (mut m0, mut m1) = (0.0, 0.0);
            for (x, w) in states.x.iter().zip(&states.w) {
                if *x > q {
                    let e = w * (-theta * (x - q) - shift).exp();
                    m0 += e;
                    m1 += e * (x - q);
                }
            }
            Ok((m0, m1, shift))
        }
    }
}

/// Finds a root of a monotone map on [lo, hi] by a bisection-guarded secant
/// (Illinois) iteration.
pub fn bracketed_root<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<(f64, usize)> {
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    if flo == 0.0 {
        return Ok((lo, 0));
    }
    if fhi == 0.0 {
        return Ok((hi, 0));
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Numerical(format!(
            "root not bracketed on [{lo}, {hi}] ({flo}, {fhi})"
        )));
    }
    let mut side = 0i8;
    for it in 1..=500 {
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !x.is_finite() || x <= lo || x >= hi || it % 8 == 0 {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x)?;
        if fx.abs() < tol || (hi - lo) < 1e-15 * (1.0 + x.abs()) {
            return Ok((x, it));
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::NoConvergence {
        context: "bracketed root".into(),
        iterations: 500,
        residual: f64::NAN,
    })
}

/// Multipliers (eta1, eta2) for Q(X_T < q) = alpha together with
/// E^Q[(X_T - q)_+] = (s - q)(1 - alpha).
pub fn solve_cvar_multipliers(
    model: &CompoundPoissonModel,
    q: f64,
    s: f64,
    alpha: f64,
) -> Result<Multipliers> {
    let var_c = Constraint::var(q, alpha)?;
    if !(s > q) {
        return Err(Error::Infeasible(format!("CVaR target s = {s} must exceed q = {q}")));
    }
    let cvar_c = Constraint::cvar(q, s, alpha)?;
    let lattice = if model.severity.gamma_params().is_some() {
        None
    } else {
        let engine = engine_for(model, &[q], fst::DEFAULT_POINTS)?;
        Some(WeightedStates::lattice(&engine, model.horizon))
    };
    let lattice = lattice.as_ref();
    let p_below = match lattice {
        None => fst::oracle_tail_prob(model, q, model.horizon)?,
        Some(st) => st.x.iter().zip(&st.w).filter(|(x, _)| **x < q).map(|(_, w)| w).sum(),
    };
    if p_below <= 0.0 || p_below >= 1.0 {
        return Err(Error::Infeasible(format!("P(X_T < {q}) = {p_below} leaves no room to stress")));
    }
    let target = s - q;
    // Conditional tilted mean excess, decreasing in eta2.
    let excess = |eta2: f64| -> Result<f64> {
        let (m0, m1, _) = tail_moments(model, q, eta2, lattice)?;
        if m0 <= 0.0 {
            return Err(Error::Infeasible(format!("no mass above q = {q}")));
        }
        Ok(m1 / m0 - target)
    };
    let lower_limit = match model.severity.gamma_params() {
        Some((_, b)) => -b,
        None => f64::NEG_INFINITY,
    };
    let f0 = excess(0.0)?;
    let (mut lo, mut hi) = (0.0, 0.0);
    if f0 < 0.0 {
        // Need a heavier tilt towards large losses: eta2 < 0.
        let mut step: f64 = 0.05;
        let mut k = 0;
        loop {
            lo = (-step).max(if lower_limit.is_finite() { lower_limit * (1.0 - 0.5_f64.powi(k + 1)) } else { -step });
            if excess(lo)? > 0.0 {
                break;
            }
            hi = lo;
            step *= 2.0;
            k += 1;
            if k > 60 {
                return Err(Error::Infeasible(format!(
                    "CVaR target s = {s} not reachable within the moment-finiteness region"
                )));
            }
        }
    } else if f0 > 0.0 {
        let mut step: f64 = 0.05;
        let mut k = 0;
        loop {
            hi = step;
            if excess(hi)? < 0.0 {
                break;
            }
            lo = hi;
            step *= 2.0;
            k += 1;
            if k > 60 {
                return Err(Error::Infeasible(format!(
                    "CVaR target s = {s} is below the attainable tail mean"
                )));
            }
        }
    }
    let (eta2, iterations) = if f0 == 0.0 {
        (0.0, 0)
    } else {
        let e_lo = excess(lo)?;
        let e_hi = excess(hi)?;
        if !(e_lo > e_hi) {
            return Err(Error::Numerical(
                "tilted tail mean is not decreasing on the bracket".into(),
            ));
        }
        bracketed_root(&excess, lo, hi, 1e-10 * (1.0 + target))?
    };
    let (m0, m1, ln_s) = tail_moments(model, q, eta2, lattice)?;
    // E[e^{-eta2 (X-q)} 1{X >= q}] = m0 e^{ln_s}
    let ln_tail = m0.ln() + ln_s;
    let eta1 = ((1.0 - alpha) / alpha * p_below).ln() - ln_tail;
    // Residuals from the tilted measure.
    let z = (-eta1).exp() * p_below + m0 * ln_s.exp();
    let q_below = (-eta1).exp() * p_below / z;
    let q_excess = m1 * ln_s.exp() / z;
    Ok(Multipliers {
        values: vec![eta1, eta2],
        residuals: vec![q_below - alpha, q_excess - cvar_c.target],
        constraints: vec![var_c, cvar_c],
        iterations,
    })
}

/// Moments of the tilted measure: (log Z, E^Q[f_i]).
type Moments = (f64, Vec<f64>);

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|i, j| a[*i][col].abs().total_cmp(&a[*j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Damped Newton on the dual with a central-difference Hessian.
fn newton_dual<F: Fn(&[f64]) -> Result<Moments>>(
    targets: &[f64],
    moments: F,
    opts: &CalibrationOptions,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let n = targets.len();
    let phi_grad = |eta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (lnz, m) = moments(eta)?;
        let phi = lnz + eta.iter().zip(targets).map(|(e, c)| e * c).sum::<f64>();
        let g: Vec<f64> = targets.iter().zip(&m).map(|(c, mi)| c - mi).collect();
        if !phi.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("tilted moments not finite".into()));
        }
        Ok((phi, g))
    };
    let scale: Vec<f64> = targets.iter().map(|c| 1.0 + c.abs()).collect();
    let converged =
        |g: &[f64]| g.iter().zip(&scale).all(|(gi, s)| gi.abs() < opts.tolerance * s);
    let mut eta = vec![0.0; n];
    let (mut phi, mut g) = phi_grad(&eta)?;
    for it in 0..opts.max_iterations {
        if converged(&g) {
            return Ok((eta, g.iter().map(|v| -v).collect(), it));
        }
        let mut hess = vec![vec![0.0; n]; n];
        for j in 0..n {
            let h = 1e-5 * (1.0 + eta[j].abs());
            let mut ep = eta.clone();
            let mut em = eta.clone();
            ep[j] += h;
            em[j] -= h;
            let (_, gp) = phi_grad(&ep)?;
            let (_, gm) = phi_grad(&em)?;
            for i in 0..n {
                hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (hess[i][j] + hess[j][i]);
                hess[i][j] = avg;
                hess[j][i] = avg;
            }
        }
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut dir = gauss_solve(hess, neg_g.clone()).unwrap_or_else(|| neg_g.clone());
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope < 0.0) {
            dir = neg_g;
            slope = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = eta.iter().zip(&dir).map(|(e, d)| e + step * d).collect();
            if let Ok((p, gt)) = phi_grad(&trial) {
                if p <= phi + 1e-4 * step * slope || (p - phi).abs() < 1e-15 * (1.0 + phi.abs()) {
                    eta = trial;
                    phi = p;
                    g = gt;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if converged(&g) {
        return Ok((eta, g.iter().map(|v| -v).collect(), opts.max_iterations));
    }
    Err(Error::NoConvergence {
        context: "dual Newton for the constraint system".into(),
        iterations: opts.max_iterations,
        residual: g.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
    })
}

fn check_support(states: &WeightedStates, constraints: &[Constraint]) -> Result<()> {
    for c in constraints {
        let (lo, hi) = states.range_of(&c.kind);
        check_not_constant(lo, hi, c)?;
        if !(c.target > lo && c.target < hi) {
            return Err(Error::Infeasible(format!(
                "target {} of the {} constraint lies outside the support ({lo}, {hi})",
                c.target,
                c.kind.name()
            )));
        }
    }
    Ok(())
}

fn weighted_moments(states: &WeightedStates, f: &[Vec<f64>], eta: &[f64]) -> Result<Moments> {
    let expo: Vec<f64> = (0..states.x.len())
        .map(|m| -f.iter().zip(eta).map(|(fi, e)| e * fi[m]).sum::<f64>())
        .collect();
    let shift = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut m = vec![0.0; f.len()];
    for (k, (e, w)) in expo.iter().zip(&states.w).enumerate() {
        let v = w * (e - shift).exp();
        z += v;
        for (i, fi) in f.iter().enumerate() {
            m[i] += v * fi[k];
        }
    }
    if !(z > 0.0) {
        return Err(Error::Numerical("normalising constant is not positive".into()));
    }
    Ok((z.ln() + shift, m.iter().map(|v| v / z).collect()))
}

/// Solves the moment system for all constraints of a single-stage spec.
pub fn solve_general_multipliers(
    model: &CompoundPoissonModel,
    spec: &StressSpec,
    opts: &CalibrationOptions,
) -> Result<Multipliers> {
    spec.validate(model.horizon)?;
    if spec.terminal.is_some() {
        return solve_two_time_spec(model, spec, opts);
    }
    if spec.constraints.is_empty() {
        return Ok(Multipliers::zero(vec![]));
    }
    let thresholds: Vec<f64> = spec.constraints.iter().filter_map(|c| c.kind.threshold()).collect();
    let (states, constraints) = match opts.backend {
        ExpectationBackend::Lattice { n_points } => {
            let engine = engine_for(model, &thresholds, n_points)?;
            let cs: Vec<Constraint> = spec.constraints.iter().map(|c| snap(c, &engine.grid)).collect();
            (WeightedStates::lattice(&engine, spec.stress_time), cs)
        }
        ExpectationBackend::MonteCarlo { samples, seed } => (
            WeightedStates::monte_carlo(model, spec.stress_time, samples, seed),
            spec.constraints.clone(),
        ),
    };
    check_support(&states, &constraints)?;
    let f: Vec<Vec<f64>> = constraints
        .iter()
        .map(|c| states.x.iter().map(|x| c.eval(*x)).collect())
        .collect();
    let targets: Vec<f64> = constraints.iter().map(|c| c.target).collect();
    let (values, residuals, iterations) =
        newton_dual(&targets, |eta| weighted_moments(&states, &f, eta), opts)?;
    Ok(Multipliers { values, residuals, constraints, iterations })
}

fn solve_two_time_spec(
    model: &CompoundPoissonModel,
    spec: &StressSpec,
    opts: &CalibrationOptions,
) -> Result<Multipliers> {
    if spec.constraints.len() != 1 {
        return Err(Error::InvalidConstraint(
            "the two-time problem takes exactly one early constraint".into(),
        ));
    }
    let terminal = spec.terminal.as_ref().unwrap();
    solve_two_time_multipliers(model, &spec.constraints[0], spec.stress_time, terminal, opts)
}

/// Multipliers (eta_dagger, eta) for E^Q[f_dagger(X_{T_dagger})] = c_dagger and
/// E^Q[f(X_T)] = c. The returned values are ordered (early, terminal).
pub fn solve_two_time_multipliers(
    model: &CompoundPoissonModel,
    early: &Constraint,
    t_dagger: f64,
    terminal: &Constraint,
    opts: &CalibrationOptions,
) -> Result<Multipliers> {
    if !(t_dagger > 0.0 && t_dagger < model.horizon) {
        return Err(Error::InvalidConstraint(format!(
            "early stress time {t_dagger} must lie in (0, {})",
            model.horizon
        )));
    }
    early.validate()?;
    terminal.validate()?;
    let thresholds: Vec<f64> =
        [early, terminal].iter().filter_map(|c| c.kind.threshold()).collect();
    let targets = [early.target, terminal.target];
    match opts.backend {
        ExpectationBackend::Lattice { n_points } => {
            let engine = engine_for(model, &thresholds, n_points)?;
            let early = snap(early, &engine.grid);
            let terminal = snap(terminal, &engine.grid);
            let first = WeightedStates::lattice(&engine, t_dagger);
            check_support(&first, std::slice::from_ref(&early))?;
            let last = WeightedStates::lattice(&engine, model.horizon);
            check_support(&last, std::slice::from_ref(&terminal))?;
            let tau = model.horizon - t_dagger;
            let f_dag: Vec<f64> = first.x.iter().map(|x| early.eval(*x)).collect();
            let f_term = engine.grid.sample(|x| terminal.eval(x));
            let moments = |eta: &[f64]| -> Result<Moments> {
                let (ed, et) = (eta[0], eta[1]);
                let shift_t = f_term
                    .iter()
                    .take(engine.grid.n_phys())
                    .map(|v| -et * v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let g: Vec<f64> = f_term.iter().map(|v| (-et * v - shift_t).min(700.0).exp()).collect();
                let gf: Vec<f64> = g.iter().zip(&f_term).map(|(a, b)| a * b).collect();
                let b = engine.propagate(&g, tau);
                let c = engine.propagate(&gf, tau);
                let shift_d = f_dag.iter().map(|v| -ed * v).fold(f64::NEG_INFINITY, f64::max);
                let (mut z, mut m_dag, mut m_term) = (0.0, 0.0, 0.0);
                for k in 0..first.x.len() {
                    let wd = first.w[k] * (-ed * f_dag[k] - shift_d).exp();
                    z += wd * b[k];
                    m_dag += wd * b[k] * f_dag[k];
                    m_term += wd * c[k];
                }
                if !(z > 0.0) {
                    return Err(Error::Numerical("two-time normaliser not positive".into()));
                }
                Ok((z.ln() + shift_d + shift_t, vec![m_dag / z, m_term / z]))
            };
            let (values, residuals, iterations) = newton_dual(&targets, moments, opts)?;
            Ok(Multipliers { values, residuals, constraints: vec![early, terminal], iterations })
        }
        ExpectationBackend::MonteCarlo { samples, seed } => {
            let pairs = crate::simulate::sample_pair(model, t_dagger, model.horizon, samples, seed);
            let states = WeightedStates {
                x: vec![0.0; samples],
                w: vec![1.0 / samples as f64; samples],
            };
            let f = vec![
                pairs.iter().map(|(a, _)| early.eval(*a)).collect::<Vec<f64>>(),
                pairs.iter().map(|(_, b)| terminal.eval(*b)).collect::<Vec<f64>>(),
            ];
            for (fi, c) in f.iter().zip([early, terminal]) {
                let lo = fi.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = fi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                check_not_constant(lo, hi, c)?;
                if !(c.target > lo && c.target < hi) {
                    return Err(Error::Infeasible(format!(
                        "target {} outside the sampled support ({lo}, {hi})",
                        c.target
                    )));
                }
            }
            let (values, residuals, iterations) =
                newton_dual(&targets, |eta| weighted_moments(&states, &f, eta), opts)?;
            Ok(Multipliers {
                values,
                residuals,
                constraints: vec![early.clone(), terminal.clone()],
                iterations,
            })
        }
    }
}

/// Convenience: the stress of a relative VaR uplift, q = (1 + uplift) VaR_alpha.
pub fn var_uplift_threshold(model: &CompoundPoissonModel, alpha: f64, uplift: f64, t: f64) -> Result<f64> {
    let v = reference_var(model, alpha, t)?;
    Ok((1.0 + uplift) * v)
}

/// VaR_alpha(X_t) under the reference measure (series oracle or lattice).
pub fn reference_var(model: &CompoundPoissonModel, alpha: f64, t: f64) -> Result<f64> {
    if model.severity.gamma_params().is_some() {
        return fst::oracle_var(model, alpha, t);
    }
    let engine = engine_for(model, &[], fst::DEFAULT_POINTS)?;
    let law = engine.lattice_law(t);
    let mut acc = 0.0;
    for (x, p) in law.support() {
        acc += p;
        if acc >= alpha {
            return Ok(x);
        }
    }
    Err(Error::Numerical("quantile beyond the grid".into()))
}

/// CVaR_alpha(X_t) under the reference measure.
pub fn reference_cvar(model: &CompoundPoissonModel, alpha: f64, t: f64) -> Result<f64> {
    if model.severity.gamma_params().is_some() {
        return fst::oracle_cvar(model, alpha, t);
    }
    let v = reference_var(model, alpha, t)?;
    let engine = engine_for(model, &[], fst::DEFAULT_POINTS)?;
    let law = engine.lattice_law(t);
    Ok(v + law.expect(|x| (x - v).max(0.0)) / (1.0 - alpha))
}

/// s such that the CVaR multiplier equation has root eta2 (inverse map).
pub fn cvar_target_for_eta2(model: &CompoundPoissonModel, q: f64, eta2: f64) -> Result<f64> {
    let (m0, m1, _) = tail_moments(model, q, eta2, None)?;
    Ok(q + m1 / m0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SeverityDistribution;
    use approx::assert_abs_diff_eq;

    fn running() -> CompoundPoissonModel {
        CompoundPoissonModel::new(5.0, SeverityDistribution::gamma(2.0, 1.0), 1.0).unwrap()
    }

    #[test]
    fn var_multiplier_example() {
        let m = running();
        let r = solve_var_multiplier(&m, 19.97, 0.9).unwrap();
        assert_abs_diff_eq!(r.values[0], 0.729700, epsilon = 1e-5);
        assert!(r.residuals[0].abs() < 1e-12);
        assert_abs_diff_eq!(5.0 * r.values[0].exp(), 10.37, epsilon = 0.01);
    }

    #[test]
    fn var_multiplier_sign_law() {
        let m = running();
        let v = fst::oracle_var(&m, 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(solve_var_multiplier(&m, v, 0.9).unwrap().values[0], 0.0, epsilon = 1e-8);
        assert!(solve_var_multiplier(&m, 0.9 * v, 0.9).unwrap().values[0] < 0.0);
        assert!(solve_var_multiplier(&m, 1.1 * v, 0.9).unwrap().values[0] > 0.0);
    }

    #[test]
    fn cvar_multipliers_literal_stress() {
        let m = running();
        let s = 1.12 * fst::oracle_cvar(&m, 0.9, 1.0).unwrap();
        let r = solve_cvar_multipliers(&m, 19.97, s, 0.9).unwrap();
        assert_abs_diff_eq!(r.values[1], -0.0157, epsilon = 5e-4);
        assert_abs_diff_eq!(r.values[0], 0.676, epsilon = 2e-3);
        assert!(r.max_abs_residual() < 1e-8);
    }

    #[test]
    fn cvar_multipliers_back_solved_example() {
        let m = running();
        let eta2 = 1.0 / (5.87_f64 / 5.0).sqrt() - 1.0;
        let s = cvar_target_for_eta2(&m, 19.97, eta2).unwrap();
        assert_abs_diff_eq!(s, 24.286, epsilon = 0.01);
        let r = solve_cvar_multipliers(&m, 19.97, s, 0.9).unwrap();
        assert_abs_diff_eq!(r.values[1], eta2, epsilon = 1e-8);
        assert_abs_diff_eq!(r.values[0], (9.08_f64 / 5.87).ln(), epsilon = 2e-3);
    }

    #[test]
    fn cvar_zero_tilt_at_tail_mean() {
        let m = running();
        let (m0, m1) = fst::oracle_tilted_tail(&m, 19.97, 0.0, 1.0).unwrap();
        let r = solve_cvar_multipliers(&m, 19.97, m1 / m0, 0.9).unwrap();
        assert_abs_diff_eq!(r.values[1], 0.0, epsilon = 1e-8);
        let r = solve_cvar_multipliers(&m, 19.97, m1 / m0 + 1.0, 0.9).unwrap();
        assert!(r.values[1] < 0.0);
    }

    #[test]
    fn general_matches_closed_forms() {
        let m = running();
        let grid = default_grid(&m, &[19.97], fst::DEFAULT_POINTS).unwrap();
        let q = grid.snap_edge(19.97);
        let spec = StressSpec::at(vec![Constraint::var(q, 0.9).unwrap()], 1.0);
        let g = solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
        let c = solve_var_multiplier(&m, q, 0.9).unwrap();
        assert!((g.values[0] - c.values[0]).abs() < 1e-3, "{:?} {:?}", g.values, c.values);

        let s = 1.12 * fst::oracle_cvar(&m, 0.9, 1.0).unwrap();
        let spec = StressSpec::at(
            vec![Constraint::var(q, 0.9).unwrap(), Constraint::cvar(q, s, 0.9).unwrap()],
            1.0,
        );
        let g = solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
        let c = solve_cvar_multipliers(&m, q, s, 0.9).unwrap();
        for i in 0..2 {
            assert!((g.values[i] - c.values[i]).abs() < 1e-3, "{:?} {:?}", g.values, c.values);
        }
    }

    #[test]
    fn unstressed_targets_give_zero() {
        let m = running();
        let grid = default_grid(&m, &[15.0], fst::DEFAULT_POINTS).unwrap();
        let q = grid.snap_edge(15.0);
        let p = fst::FstEngine::new(&m, grid).lattice_law(1.0).expect(|x| if x < q { 1.0 } else { 0.0 });
        let spec = StressSpec::at(
            vec![Constraint::var(q, p).unwrap(), Constraint::new(ConstraintKind::Mean, 10.0).unwrap()],
            1.0,
        );
        let g = solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
        for v in &g.values {
            assert!(v.abs() < 1e-5, "{:?}", g.values);
        }
    }

    #[test]
    fn feasible_interval_examples() {
        let m = running();
        let fi = feasible_interval(&m, &ConstraintKind::Mean, -0.1, 0.1).unwrap();
        // K'(s) = kappa a b^a / (b - s)^{a+1}
        let kp = |s: f64| 5.0 * 2.0 / (1.0 - s).powi(3);
        assert_abs_diff_eq!(fi.lower, kp(-0.1), epsilon = 2e-3);
        assert_abs_diff_eq!(fi.upper, kp(0.1), epsilon = 2e-3);
        assert!(fi.contains(10.0));
        let ind = feasible_interval(
            &m,
            &ConstraintKind::IndicatorBelow { q: 17.4 },
            f64::NEG_INFINITY,
            f64::INFINITY,
        )
        .unwrap();
        assert_eq!((ind.lower, ind.upper), (0.0, 1.0));
        let g = crate::model::GridFunction::new(0.0, 1.0, vec![3.0, 3.0]).unwrap();
        assert!(matches!(
            feasible_interval(&m, &ConstraintKind::Generic(g), -1.0, 1.0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let m = running();
        let spec = StressSpec::at(vec![Constraint::new(ConstraintKind::Mean, -1.0).unwrap()], 1.0);
        assert!(matches!(
            solve_general_multipliers(&m, &spec, &CalibrationOptions::default()),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(solve_cvar_multipliers(&m, 19.97, 19.0, 0.9), Err(Error::Infeasible(_))));
    }

    #[test]
    fn two_time_reduces_and_vanishes() {
        let m = running();
        let opts = CalibrationOptions::default();
        let grid = default_grid(&m, &[8.0, 19.97], fst::DEFAULT_POINTS).unwrap();
        let engine = FstEngine::new(&m, grid.clone());
        let q1 = grid.snap_edge(8.0);
        let q2 = grid.snap_edge(19.97);
        let p1 = engine.lattice_law(0.5).expect(|x| if x < q1 { 1.0 } else { 0.0 });
        let p2 = engine.lattice_law(1.0).expect(|x| if x < q2 { 1.0 } else { 0.0 });
        let r = solve_two_time_multipliers(
            &m,
            &Constraint::var(q1, p1).unwrap(),
            0.5,
            &Constraint::var(q2, p2).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(r.values.iter().all(|v| v.abs() < 1e-6), "{:?}", r.values);

        // Early target equal to its value under the terminal-only stress:
        // the early multiplier vanishes and the terminal one matches.
        let single = solve_general_multipliers(
            &m,
            &StressSpec::at(vec![Constraint::var(q2, 0.9).unwrap()], 1.0),
            &opts,
        )
        .unwrap();
        let eta = single.values[0];
        let g = grid.sample(|x| if x < q2 { (-eta).exp() } else { 1.0 });
        let omega_mid = engine.propagate(&g, 0.5);
        let law = engine.lattice_law(0.5);
        let z: f64 = law.support().map(|(x, p)| p * omega_mid[(x / grid.dx).round() as usize]).sum();
        let c_dag = law
            .support()
            .map(|(x, p)| p * omega_mid[(x / grid.dx).round() as usize] * if x < q1 { 1.0 } else { 0.0 })
            .sum::<f64>()
            / z;
        let r = solve_two_time_multipliers(
            &m,
            &Constraint::var(q1, c_dag).unwrap(),
            0.5,
            &Constraint::var(q2, 0.9).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(r.values[0].abs() < 1e-6, "{:?}", r.values);
        assert!((r.values[1] - eta).abs() < 1e-6, "{:?} vs {eta}", r.values);
    }
}
