//! Girsanov kernel, stressed intensity and stressed severity sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibrate::Multipliers;
use crate::error::{Error, Result};
use crate::fst::{self, ExpectationSurface, FstEngine, SpatialGrid, TimeSlice};
use crate::model::{CompoundPoissonModel, Constraint, ConstraintKind, SeverityDistribution, StressSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsOptions {
    pub n_points: usize,
    pub n_times: usize,
    /// Reference severity draws kept for Algorithm 1.
    pub pool_size: usize,
    /// Draws reweighted per stressed jump.
    pub window: usize,
    pub seed: u64,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            n_points: fst::DEFAULT_POINTS,
            n_times: fst::DEFAULT_TIMES,
            pool_size: 1 << 16,
            window: 2048,
            seed: 0x5eed,
        }
    }
}

/// One FST stage covering [t_start, t_end].
#[derive(Debug, Clone)]
pub struct Stage {
    pub t_start: f64,
    pub t_end: f64,
    pub surface: ExpectationSurface,
}

/// Calibrated stressed dynamics: kernel h*(t,x,y), intensity kappa*(t,x) and
/// stressed severity sampler. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct StressedDynamics {
    model: CompoundPoissonModel,
    multipliers: Multipliers,
    stress_time: f64,
    /// Constraints at the stress time (first stage).
    early: Vec<(Constraint, f64)>,
    /// Constraint at the horizon for two-time problems.
    terminal: Option<(Constraint, f64)>,
    stages: Vec<Stage>,
    ln_normalizer: f64,
    pool: Vec<f64>,
    window: usize,
    grid: Option<SpatialGrid>,
}

/// Kernel evaluator frozen at one time.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    kappa: f64,
    stage: Option<(&'a ExpectationSurface, TimeSlice)>,
}

impl View<'_> {
    pub fn is_identity(&self) -> bool {
        self.stage.is_none()
    }

    pub fn omega(&self, x: f64) -> f64 {
        match &self.stage {
            Some((s, sl)) => s.eval_slice(sl, x),
            None => 1.0,
        }
    }

    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        match &self.stage {
            Some((s, sl)) => s.eval_slice(sl, x + y) / s.eval_slice(sl, x),
            None => 1.0,
        }
    }

    /// Kernel with the denominator omega(t, x) supplied by the caller.
    pub fn kernel_with(&self, omega_x: f64, x: f64, y: f64) -> f64 {
        match &self.stage {
            Some((s, sl)) => s.eval_slice(sl, x + y) / omega_x,
            None => 1.0,
        }
    }

    pub fn intensity(&self, x: f64) -> f64 {
        match &self.stage {
            Some((s, sl)) => {
                self.kappa * s.eval_jump_slice(sl, x).expect("jump averages") / s.eval_slice(sl, x)
            }
            None => self.kappa,
        }
    }
}

fn log_tilt(constraints: &[(Constraint, f64)], x: f64) -> f64 {
    -constraints.iter().map(|(c, eta)| eta * c.eval(x)).sum::<f64>()
}

fn indicator_edges(constraints: &[(Constraint, f64)]) -> Vec<f64> {
    constraints
        .iter()
        .filter_map(|(c, eta)| match c.kind {
            ConstraintKind::IndicatorBelow { q } if *eta != 0.0 => Some(q),
            _ => None,
        })
        .collect()
}

fn snapped(c: &Constraint, grid: &SpatialGrid) -> Constraint {
    match c.kind.threshold() {
        Some(q) => Constraint { kind: c.kind.with_threshold(grid.snap_edge(q)), target: c.target },
        None => c.clone(),
    }
}

/// Terminal condition exp(log_tilt - shift) on the grid, with the shift
/// taken over the physical domain.
fn tilted_condition(grid: &SpatialGrid, cs: &[(Constraint, f64)]) -> (Vec<f64>, f64) {
    let lg = grid.sample(|x| log_tilt(cs, x));
    let shift = lg[..grid.n_phys()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lg.iter().map(|v| (v - shift).min(700.0).exp()).collect(), shift)
}

fn check_positive(surface: &ExpectationSurface) -> Result<()> {
    let grid = &surface.grid;
    let len = grid.n_phys() + (grid.n_points - grid.n_phys()) / 2;
    for j in 0..surface.n_times() {
        if let Some(v) = surface.row(j)[..len].iter().find(|v| !(**v > fst::POSITIVITY_FLOOR)) {
            return Err(Error::Numerical(format!(
                "surface value {v:e} below the positivity floor at t = {}; grid underflow",
                surface.times[j]
            )));
        }
    }
    Ok(())
}

impl StressedDynamics {
    /// Builds the dynamics for a calibrated spec. The multipliers' constraint
    /// list holds the stress-time constraints followed by the terminal one.
    pub fn new(
        model: &CompoundPoissonModel,
        spec: &StressSpec,
        multipliers: &Multipliers,
        opts: &DynamicsOptions,
    ) -> Result<Self> {
        spec.validate(model.horizon)?;
        let n_early = spec.constraints.len();
        let expected = n_early + usize::from(spec.terminal.is_some());
        if multipliers.values.len() != expected || multipliers.constraints.len() != expected {
            return Err(Error::InvalidConstraint(format!(
                "expected {expected} multipliers, got {}",
                multipliers.values.len()
            )));
        }
        let thresholds: Vec<f64> =
            multipliers.constraints.iter().filter_map(|c| c.kind.threshold()).collect();
        let grid = SpatialGrid::for_model(model, &thresholds, model.horizon, opts.n_points)?;
        let engine = FstEngine::new(model, grid.clone());
        let pair = |k: usize| (snapped(&multipliers.constraints[k], &grid), multipliers.values[k]);
        let early: Vec<(Constraint, f64)> = (0..n_early).map(pair).collect();
        let terminal = spec.terminal.as_ref().map(|_| pair(n_early));

        let mut stages = Vec::new();
        let ln_normalizer;
        match &terminal {
            None => {
                let (g, shift) = tilted_condition(&grid, &early);
                let times = fst::uniform_times(0.0, spec.stress_time, opts.n_times);
                let surface =
                    fst::fst_solve(&engine, &g, &times, spec.stress_time, indicator_edges(&early), true)?;
                check_positive(&surface)?;
                ln_normalizer = surface.row(0)[0].ln() + shift;
                stages.push(Stage { t_start: 0.0, t_end: spec.stress_time, surface });
            }
            Some(term) => {
                let term_list = std::slice::from_ref(term);
                let (g2, shift2) = tilted_condition(&grid, term_list);
                let times2 = fst::uniform_times(spec.stress_time, model.horizon, opts.n_times);
                let s2 = fst::fst_solve(&engine, &g2, &times2, model.horizon, indicator_edges(term_list), true)?;
                check_positive(&s2)?;
                let (e1, shift1) = tilted_condition(&grid, &early);
                let g1: Vec<f64> = e1.iter().zip(s2.row(0)).map(|(a, b)| a * b).collect();
                let mut edges = indicator_edges(&early);
                edges.extend(indicator_edges(term_list));
                let times1 = fst::uniform_times(0.0, spec.stress_time, opts.n_times);
                let s1 = fst::fst_solve(&engine, &g1, &times1, spec.stress_time, edges, true)?;
                check_positive(&s1)?;
                ln_normalizer = s1.row(0)[0].ln() + shift1 + shift2;
                stages.push(Stage { t_start: 0.0, t_end: spec.stress_time, surface: s1 });
                stages.push(Stage { t_start: spec.stress_time, t_end: model.horizon, surface: s2 });
            }
        }
        Ok(Self {
            model: model.clone(),
            multipliers: multipliers.clone(),
            stress_time: spec.stress_time,
            early,
            terminal,
            stages,
            ln_normalizer,
            pool: severity_pool(&model.severity, opts.pool_size, opts.seed),
            window: opts.window.min(opts.pool_size).max(1),
            grid: Some(grid),
        })
    }

    /// Reference dynamics (h = 1 everywhere).
    pub fn unstressed(model: &CompoundPoissonModel, opts: &DynamicsOptions) -> Self {
        Self {
            model: model.clone(),
            multipliers: Multipliers::zero(vec![]),
            stress_time: model.horizon,
            early: vec![],
            terminal: None,
            stages: vec![],
            ln_normalizer: 0.0,
            pool: severity_pool(&model.severity, opts.pool_size, opts.seed),
            window: opts.window.min(opts.pool_size).max(1),
            grid: None,
        }
    }

    pub fn model(&self) -> &CompoundPoissonModel {
        &self.model
    }

    pub fn multipliers(&self) -> &Multipliers {
        &self.multipliers
    }

    pub fn stress_time(&self) -> f64 {
        self.stress_time
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn grid(&self) -> Option<&SpatialGrid> {
        self.grid.as_ref()
    }

    pub fn is_two_time(&self) -> bool {
        self.terminal.is_some()
    }

    /// Constraints with their multipliers as used by the surfaces.
    pub fn stress_constraints(&self) -> &[(Constraint, f64)] {
        &self.early
    }

    pub fn terminal_constraint(&self) -> Option<&(Constraint, f64)> {
        self.terminal.as_ref()
    }

    /// Latest time at which the kernel can differ from one.
    pub fn active_until(&self) -> f64 {
        self.stages.last().map(|s| s.t_end).unwrap_or(0.0)
    }

    pub fn severity_pool(&self) -> &[f64] {
        &self.pool
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn stage_at(&self, t: f64) -> Option<&Stage> {
        match self.stages.len() {
            0 => None,
            1 => (t <= self.stages[0].t_end).then(|| &self.stages[0]),
            _ => {
                if t < self.stages[0].t_end {
                    Some(&self.stages[0])
                } else if t <= self.stages[1].t_end {
                    Some(&self.stages[1])
                } else {
                    None
                }
            }
        }
    }

    pub fn view(&self, t: f64) -> View<'_> {
        View {
            kappa: self.model.kappa,
            stage: self.stage_at(t).map(|s| (&s.surface, s.surface.slice(t))),
        }
    }

    fn checked(&self, v: f64, what: &str, t: f64, x: f64) -> Result<f64> {
        if v > fst::POSITIVITY_FLOOR && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("{what} = {v:e} at (t, x) = ({t}, {x}) underflows")))
        }
    }

    /// omega(t, x) up to the constant normalisation of the stage.
    pub fn omega(&self, t: f64, x: f64) -> Result<f64> {
        self.checked(self.view(t).omega(x), "omega", t, x)
    }

    /// h*(t, x, y) = omega(t, x + y) / omega(t, x); one after the last stage.
    pub fn kernel(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        let v = self.view(t);
        if v.is_identity() {
            return Ok(1.0);
        }
        let den = self.checked(v.omega(x), "omega", t, x)?;
        self.checked(v.kernel_with(den, x, y), "kernel", t, x)
    }

    /// kappa*(t, x) = kappa E[h*(t, x, xi)].
    pub fn intensity(&self, t: f64, x: f64) -> Result<f64> {
        let v = self.view(t);
        if v.is_identity() {
            return Ok(self.model.kappa);
        }
        self.checked(v.omega(x), "omega", t, x)?;
        self.checked(v.intensity(x), "intensity", t, x)
    }

    /// kappa* by quadrature over severity CDF increments; an independent
    /// check of the jump-averaged surface.
    pub fn intensity_quadrature(&self, t: f64, x: f64, n: usize) -> Result<f64> {
        let sev = &self.model.severity;
        let y_max = sev.quantile(1.0 - 1e-10);
        let v = self.view(t);
        let den = self.checked(v.omega(x), "omega", t, x)?;
        let mut acc = 0.0;
        let mut prev = 0.0;
        // Split cells at the kernel discontinuities y = q - x.
        let mut nodes: Vec<f64> = (0..=n).map(|k| y_max * k as f64 / n as f64).collect();
        if let Some(s) = self.stage_at(t) {
            for e in s.surface.edges() {
                if *e - x > 0.0 && *e - x < y_max {
                    nodes.push(*e - x);
                }
            }
        }
        nodes.sort_by(f64::total_cmp);
        for w in nodes.windows(2) {
            let cdf = sev.cdf(w[1]);
            let mid = 0.5 * (w[0] + w[1]);
            acc += v.kernel_with(den, x, mid) * (cdf - prev);
            prev = cdf;
        }
        acc += v.kernel_with(den, x, y_max) * (1.0 - prev);
        Ok(self.model.kappa * acc)
    }

    pub fn ln_normalizer(&self) -> f64 {
        self.ln_normalizer
    }

    /// log of the unnormalised density exp(-sum eta f) at the constraint times.
    pub fn log_tilt(&self, x_stress: f64, x_horizon: f64) -> f64 {
        let mut l = log_tilt(&self.early, x_stress);
        if let Some(t) = &self.terminal {
            l += log_tilt(std::slice::from_ref(t), x_horizon);
        }
        l
    }

    /// dQ*/dP given X at the stress time (and at T for two-time stresses).
    pub fn rn_two_time(&self, x_stress: f64, x_horizon: f64) -> f64 {
        (self.log_tilt(x_stress, x_horizon) - self.ln_normalizer).exp()
    }

    /// dQ*/dP = exp(-sum eta f(x)) / E[exp(-sum eta f(X))] with x the state at
    /// the stress time.
    pub fn rn_terminal(&self, x: f64) -> f64 {
        self.rn_two_time(x, x)
    }
}

fn severity_pool(sev: &SeverityDistribution, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xfeed);
    (0..n.max(1)).map(|_| sev.sample(&mut rng)).collect()
}

/// Resampling scheme for Algorithm 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

/// Picks `n` indices proportional to `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    scheme: Resampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical("all resampling weights are zero".into()));
    }
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cum.push(acc);
    }
    let pick = |u: f64| cum.partition_point(|c| *c < u).min(weights.len() - 1);
    Ok(match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random::<f64>() / n as f64;
            (0..n).map(|k| pick(u0 + k as f64 / n as f64)).collect()
        }
    })
}

/// Algorithm 1: draw from G, weight by h*(t, x, .), resample to an
/// unweighted sample of G*(t, x, .). Also returns the kernel-weighted
/// intensity estimate kappa * mean(h).
pub fn stressed_severity_draws<R: Rng + ?Sized>(
    dynamics: &StressedDynamics,
    t: f64,
    x: f64,
    n_draws: usize,
    scheme: Resampling,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if n_draws == 0 {
        return Err(Error::Numerical("need at least one draw".into()));
    }
    let sev = &dynamics.model().severity;
    let draws: Vec<f64> = (0..n_draws).map(|_| sev.sample(rng)).collect();
    let view = dynamics.view(t);
    let den = dynamics.omega(t, x)?;
    let weights: Vec<f64> = draws.iter().map(|y| view.kernel_with(den, x, *y)).collect();
    let kappa_hat = dynamics.model().kappa * weights.iter().sum::<f64>() / n_draws as f64;
    let idx = resample_indices(&weights, n_draws, scheme, rng)?;
    Ok((idx.iter().map(|i| draws[*i]).collect(), kappa_hat))
}

/// Eq. for the VaR kernel via increment probabilities of X over [t, T].
pub fn var_kernel_closed_form(
    model: &CompoundPoissonModel,
    eta: f64,
    q: f64,
    t: f64,
    x: f64,
    y: f64,
) -> Result<f64> {
    let tau = (model.horizon - t).max(0.0);
    let d = (-eta).exp() - 1.0;
    let num = 1.0 + d * fst::oracle_tail_prob(model, q - x - y, tau)?;
    let den = 1.0 + d * fst::oracle_tail_prob(model, q - x, tau)?;
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    VaR,
    CVaR,
}

/// E[e^{-theta xi} 1{xi >= z}].
fn tilted_severity_tail(sev: &SeverityDistribution, theta: f64, z: f64) -> Result<f64> {
    match sev {
        SeverityDistribution::Tabulated(t) => Ok(t
            .values()
            .iter()
            .zip(t.weights())
            .filter(|(v, _)| **v >= z)
            .map(|(v, w)| w * (-theta * v).exp())
            .sum()),
        _ => {
            let (a, b) = sev.gamma_params().unwrap();
            if theta <= -b {
                return Err(Error::Numerical(format!(
                    "eta2 = {theta} <= -rate: stressed intensity limit is infinite"
                )));
            }
            let tilted = SeverityDistribution::gamma(a, b + theta);
            Ok((b / (b + theta)).powf(a) * (1.0 - tilted.cdf(z)))
        }
    }
}

/// t -> T limits of (h*, kappa*) for VaR (multipliers [eta]) and CVaR
/// (multipliers [eta1, eta2]) stresses.
pub fn limit_formulas(
    kind: LimitKind,
    model: &CompoundPoissonModel,
    multipliers: &[f64],
    q: f64,
    x: f64,
    y: f64,
) -> Result<(f64, f64)> {
    let kappa = model.kappa;
    let g = &model.severity;
    match kind {
        LimitKind::VaR => {
            let eta = *multipliers
                .first()
                .ok_or_else(|| Error::InvalidConstraint("missing VaR multiplier".into()))?;
            if x > q {
                return Ok((1.0, kappa));
            }
            let h = if x < q - y { 1.0 } else { eta.exp() };
            let k = kappa * (eta.exp() + (1.0 - eta.exp()) * g.cdf(q - x));
            Ok((h, k))
        }
        LimitKind::CVaR => {
            if multipliers.len() < 2 {
                return Err(Error::InvalidConstraint("CVaR limits need (eta1, eta2)".into()));
            }
            let (eta1, eta2) = (multipliers[0], multipliers[1]);
            if x > q {
                let k = kappa * tilted_severity_tail(g, eta2, 0.0)?;
                return Ok(((-eta2 * y).exp(), k));
            }
            let h = if y < q - x { 1.0 } else { (eta1 - eta2 * (x + y - q)).exp() };
            let below = if q - x > 0.0 { g.cdf(q - x) } else { 0.0 };
            let k = kappa
                * (below + (eta1 - eta2 * (x - q)).exp() * tilted_severity_tail(g, eta2, q - x)?);
            Ok((h, k))
        }
    }
}

/// Kernel of the two-time problem (Prop. on constraints at T-dagger and T).
pub fn two_time_kernel(dynamics: &StressedDynamics, t: f64, x: f64, y: f64) -> Result<f64> {
    dynamics.kernel(t, x, y)
}

/// CSV (t, x, kappa_star) over `times` x `xs`.
pub fn intensity_surface_csv(dynamics: &StressedDynamics, times: &[f64], xs: &[f64]) -> Result<String> {
    let mut s = String::from("t,x,kappa_star\n");
    for t in times {
        let v = dynamics.view(*t);
        for x in xs {
            let k = v.intensity(*x);
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::Numerical(format!("kappa* = {k} at ({t}, {x})")));
            }
            s.push_str(&format!("{t},{x},{k}\n"));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{self, CalibrationOptions};
    use approx::assert_abs_diff_eq;

    fn running() -> CompoundPoissonModel {
        CompoundPoissonModel::new(5.0, SeverityDistribution::gamma(2.0, 1.0), 1.0).unwrap()
    }

    fn var_dynamics() -> StressedDynamics {
        let m = running();
        let spec = StressSpec::at(vec![Constraint::var(19.97, 0.9).unwrap()], 1.0);
        let mult = calibrate::solve_general_multipliers(&m, &spec, &CalibrationOptions::default()).unwrap();
        StressedDynamics::new(&m, &spec, &mult, &DynamicsOptions::default()).unwrap()
    }

    #[test]
    fn zero_multipliers_give_identity() {
        let m = running();
        let spec = StressSpec::at(vec![Constraint::var(19.97, 0.9).unwrap()], 1.0);
        let zero = Multipliers::zero(spec.constraints.clone());
        let d = StressedDynamics::new(&m, &spec, &zero, &DynamicsOptions::default()).unwrap();
        for (t, x, y) in [(0.0, 0.0, 1.0), (0.5, 10.0, 3.0), (0.99, 19.0, 2.0)] {
            assert_abs_diff_eq!(d.kernel(t, x, y).unwrap(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(d.intensity(t, x).unwrap(), 5.0, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(d.rn_terminal(12.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn var_kernel_is_one_above_q() {
        let d = var_dynamics();
        let q = d.stress_constraints()[0].0.kind.threshold().unwrap();
        for t in [0.0, 0.5, 0.999] {
            for y in [0.1, 2.0, 7.0] {
                assert_abs_diff_eq!(d.kernel(t, q + 0.3, y).unwrap(), 1.0, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(d.intensity(t, q + 0.3).unwrap(), 5.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn kernel_matches_closed_form() {
        let d = var_dynamics();
        let eta = d.stress_constraints()[0].1;
        let q = d.stress_constraints()[0].0.kind.threshold().unwrap();
        let m = running();
        for t in [0.0, 0.3, 0.8, 0.97] {
            for x in [0.0, 5.3, 12.1, 17.77, 19.5] {
                for y in [0.0, 0.4, 1.7, 3.2] {
                    let a = d.kernel(t, x, y).unwrap();
                    let b = var_kernel_closed_form(&m, eta, q, t, x, y).unwrap();
                    assert!((a - b).abs() < 1e-3, "t={t} x={x} y={y}: {a} vs {b}");
                }
            }
        }
        assert_abs_diff_eq!(var_kernel_closed_form(&m, eta, q, 0.4, 3.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn quadrature_cross_check() {
        let d = var_dynamics();
        for (t, x) in [(0.2, 3.0), (0.9, 17.0), (0.99, 19.5)] {
            let a = d.intensity(t, x).unwrap();
            let b = d.intensity_quadrature(t, x, 4096).unwrap();
            assert!((a / b - 1.0).abs() < 2e-3, "({t},{x}): {a} vs {b}");
        }
    }

    #[test]
    fn resampled_mean_kernel_matches_intensity() {
        let d = var_dynamics();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (draws, k_hat) = stressed_severity_draws(&d, 0.95, 18.5, 100_000, Resampling::Multinomial, &mut rng).unwrap();
        assert_eq!(draws.len(), 100_000);
        let k = d.intensity(0.95, 18.5).unwrap();
        assert!((k_hat / k - 1.0).abs() < 0.02, "{k_hat} vs {k}");
        let (sys, _) = stressed_severity_draws(&d, 0.95, 18.5, 1000, Resampling::Systematic, &mut rng).unwrap();
        assert_eq!(sys.len(), 1000);
    }

    #[test]
    fn resample_rejects_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(resample_indices(&[0.0, 0.0], 3, Resampling::Multinomial, &mut rng).is_err());
        let idx = resample_indices(&[0.0, 1.0], 5, Resampling::Systematic, &mut rng).unwrap();
        assert!(idx.iter().all(|i| *i == 1));
    }

    #[test]
    fn var_limit_formulas() {
        let m = running();
        let eta = calibrate::solve_var_multiplier(&m, 19.97, 0.9).unwrap().values[0];
        let (h, k) = limit_formulas(LimitKind::VaR, &m, &[eta], 19.97, 21.0, 1.0).unwrap();
        assert_eq!((h, k), (1.0, 5.0));
        let (h, _) = limit_formulas(LimitKind::VaR, &m, &[eta], 19.97, 19.0, 2.0).unwrap();
        assert_abs_diff_eq!(h, eta.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(h, 2.074, epsilon = 1e-3);
        let (_, k) = limit_formulas(LimitKind::VaR, &m, &[eta], 19.97, 19.97, 0.0).unwrap();
        assert_abs_diff_eq!(k, 10.37, epsilon = 0.01);
    }

    #[test]
    fn cvar_limit_formulas() {
        let m = running();
        let eta2 = 1.0 / (5.87_f64 / 5.0).sqrt() - 1.0;
        let eta1 = (9.08_f64 / 5.87).ln();
        let (h, k) = limit_formulas(LimitKind::CVaR, &m, &[eta1, eta2], 19.97, 21.0, 1.5).unwrap();
        assert_abs_diff_eq!(h, (-eta2 * 1.5).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(k, 5.87, epsilon = 1e-9);
        let (_, k) = limit_formulas(LimitKind::CVaR, &m, &[eta1, eta2], 19.97, 19.97, 0.0).unwrap();
        assert_abs_diff_eq!(k, 9.08, epsilon = 1e-9);
        assert!(limit_formulas(LimitKind::CVaR, &m, &[0.0, -1.5], 19.97, 21.0, 0.0).is_err());
    }
}
