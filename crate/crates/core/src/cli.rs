//! Configuration-driven command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analytics::{self, ForecastSettings, RiskReport, WhatIfSettings};
use crate::calibrate::{self, CalibrationOptions, ExpectationBackend, Multipliers};
use crate::error::{Error, Result};
use crate::model::{
    BivariateModel, CompoundPoissonModel, Constraint, ConstraintKind, Dependence, GridFunction,
    SeverityDistribution, StressSpec, Tabulated,
};
use crate::simulate::{self, PathEnsemble};
use crate::stress::{self, DynamicsOptions, Resampling, StressedDynamics};

pub const CSV_VERSION_LINE: &str = "# dynstress-csv v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Calibrate,
    Surface,
    Severity,
    Simulate,
    Bivariate,
    Whatif,
    Forecast,
}

#[derive(Debug, Parser)]
#[command(name = "dynstress", version, about = "Stressed dynamics for compound Poisson loss processes")]
pub struct Cli {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub command: Command,
    #[arg(long, env = "DYNSTRESS_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "DYNSTRESS_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SeverityConfig {
    Gamma { shape: f64, rate: f64 },
    Exponential { rate: f64 },
    Tabulated { values: Vec<f64>, weights: Vec<f64> },
}

impl SeverityConfig {
    fn build(&self) -> Result<SeverityDistribution> {
        let d = match self {
            SeverityConfig::Gamma { shape, rate } => SeverityDistribution::gamma(*shape, *rate),
            SeverityConfig::Exponential { rate } => SeverityDistribution::exponential(*rate),
            SeverityConfig::Tabulated { values, weights } => {
                SeverityDistribution::Tabulated(Tabulated::new(values.clone(), weights.clone())?)
            }
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kappa: f64,
    pub horizon: f64,
    pub severity: SeverityConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintType {
    /// Q(X < q) = alpha; q given or (1 + uplift) * VaR_alpha.
    Var,
    /// CVaR_alpha = s; s given or (1 + uplift) * CVaR_alpha; q defaults to VaR_alpha.
    Cvar,
    Indicator,
    Excess,
    Mean,
    /// Values from a two-column CSV (x, f) on a uniform grid.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub kind: Option<ConstraintType>,
    pub q: Option<f64>,
    pub alpha: Option<f64>,
    pub s: Option<f64>,
    pub uplift: Option<f64>,
    pub target: Option<f64>,
    pub grid_file: Option<PathBuf>,
}

fn need(v: Option<f64>, what: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("constraint is missing `{what}`")))
}

impl ConstraintConfig {
    fn build(&self, model: &CompoundPoissonModel, t: f64, base: &FsPath) -> Result<Constraint> {
        let kind = self.kind.ok_or_else(|| Error::Config("constraint is missing `kind`".into()))?;
        match kind {
            ConstraintType::Var => {
                let alpha = need(self.alpha, "alpha")?;
                let q = match (self.q, self.uplift) {
                    (Some(q), None) => q,
                    (None, Some(u)) => calibrate::var_uplift_threshold(model, alpha, u, t)?,
                    _ => return Err(Error::Config("var constraint needs exactly one of `q`, `uplift`".into())),
                };
                Constraint::var(q, alpha)
            }
            ConstraintType::Cvar => {
                let alpha = need(self.alpha, "alpha")?;
                let q = match self.q {
                    Some(q) => q,
                    None => calibrate::reference_var(model, alpha, t)?,
                };
                let s = match (self.s, self.uplift) {
                    (Some(s), None) => s,
                    (None, Some(u)) => (1.0 + u) * calibrate::reference_cvar(model, alpha, t)?,
                    _ => return Err(Error::Config("cvar constraint needs exactly one of `s`, `uplift`".into())),
                };
                Constraint::cvar(q, s, alpha)
            }
            ConstraintType::Indicator => Constraint::new(
                ConstraintKind::IndicatorBelow { q: need(self.q, "q")? },
                need(self.target, "target")?,
            ),
            ConstraintType::Excess => Constraint::new(
                ConstraintKind::ExcessAbove { q: need(self.q, "q")? },
                need(self.target, "target")?,
            ),
            ConstraintType::Mean => Constraint::new(ConstraintKind::Mean, need(self.target, "target")?),
            ConstraintType::Generic => {
                let file = self
                    .grid_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("generic constraint needs `grid_file`".into()))?;
                let g = read_grid_function(&base.join(file))?;
                Constraint::new(ConstraintKind::Generic(g), need(self.target, "target")?)
            }
        }
    }
}

fn read_grid_function(path: &FsPath) -> Result<GridFunction> {
    let text = fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut fs_ = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            return Err(Error::Config(format!("{}: expected `x,f` rows", path.display())));
        };
        let (Ok(x), Ok(f)) = (a.parse::<f64>(), b.parse::<f64>()) else {
            continue; // header
        };
        xs.push(x);
        fs_.push(f);
    }
    if xs.len() < 2 {
        return Err(Error::Config(format!("{}: need at least two rows", path.display())));
    }
    let dx = xs[1] - xs[0];
    if xs.windows(2).any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * (1.0 + dx.abs())) {
        return Err(Error::Config(format!("{}: x must be uniformly spaced", path.display())));
    }
    GridFunction::new(xs[0], dx, fs_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    pub stress_time: Option<f64>,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    pub terminal: Option<ConstraintConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DependenceConfig {
    Independence,
    T { rho: f64, df: f64 },
    Gumbel { theta: f64 },
    Frank { theta: f64 },
    Mixture { p: f64 },
}

impl DependenceConfig {
    fn build(&self) -> Dependence {
        match self {
            DependenceConfig::Independence => Dependence::Independence,
            DependenceConfig::T { rho, df } => Dependence::TCopula { rho: *rho, df: *df },
            DependenceConfig::Gumbel { theta } => Dependence::Gumbel { theta: *theta },
            DependenceConfig::Frank { theta } => Dependence::Frank { theta: *theta },
            DependenceConfig::Mixture { p } => Dependence::IndependentMixture { p: *p },
        }
    }

    fn label(&self) -> &'static str {
        match self {
            DependenceConfig::Independence => "independence",
            DependenceConfig::T { .. } => "t",
            DependenceConfig::Gumbel { .. } => "gumbel",
            DependenceConfig::Frank { .. } => "frank",
            DependenceConfig::Mixture { .. } => "mixture",
        }
    }
}

/// Second component and dependence; the first component is `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BivariateConfig {
    pub second: SeverityConfig,
    pub dependence: DependenceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Lattice,
    Montecarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub n_points: usize,
    pub n_times: usize,
    pub dt: f64,
    pub n_paths: usize,
    pub n_reference_paths: usize,
    pub seed: u64,
    pub workers: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backend: BackendKind,
    pub mc_samples: usize,
    pub pool_size: usize,
    pub window: usize,
    pub surface_times: usize,
    pub surface_x_step: f64,
    pub surface_x_max: f64,
    pub path_grid_step: f64,
    pub export_paths: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        let d = DynamicsOptions::default();
        Self {
            n_points: d.n_points,
            n_times: d.n_times,
            dt: 1e-3,
            n_paths: 10_000,
            n_reference_paths: 100_000,
            seed: 20240,
            workers: 0,
            tolerance: 1e-10,
            max_iterations: 200,
            backend: BackendKind::Lattice,
            mc_samples: 1_000_000,
            pool_size: d.pool_size,
            window: d.window,
            surface_times: 101,
            surface_x_step: 0.1,
            surface_x_max: 0.0,
            path_grid_step: 0.01,
            export_paths: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityExportConfig {
    /// (t, x) pairs.
    pub points: Vec<[f64; 2]>,
    pub n_draws: usize,
    pub systematic: bool,
}

impl Default for SeverityExportConfig {
    fn default() -> Self {
        Self { points: vec![[1.0, 16.0], [1.0, 18.0]], n_draws: 10_000, systematic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhatIfConfig {
    pub alphas: Vec<f64>,
    pub uplift: f64,
    pub target_alpha: f64,
    pub stress_fraction: f64,
    pub resolution_pct: f64,
    pub max_pct: f64,
}

impl Default for WhatIfConfig {
    fn default() -> Self {
        let d = WhatIfSettings::default();
        Self {
            alphas: vec![0.5, 0.8],
            uplift: d.uplift,
            target_alpha: d.target_alpha,
            stress_fraction: d.stress_fraction,
            resolution_pct: d.resolution_pct,
            max_pct: d.max_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub delta: f64,
    pub grid_step: f64,
    pub alpha: f64,
    pub scenarios: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { delta: 0.25, grid_step: 0.05, alpha: 0.9, scenarios: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stress: Option<StressConfig>,
    pub bivariate: Option<BivariateConfig>,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub severity_export: SeverityExportConfig,
    #[serde(default)]
    pub whatif: WhatIfConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> Result<CompoundPoissonModel> {
        CompoundPoissonModel::new(self.model.kappa, self.model.severity.build()?, self.model.horizon)
    }

    pub fn bivariate_model(&self) -> Result<BivariateModel> {
        let b = self
            .bivariate
            .as_ref()
            .ok_or_else(|| Error::Config("missing [bivariate] section".into()))?;
        BivariateModel::new(
            self.model.kappa,
            [self.model.severity.build()?, b.second.build()?],
            b.dependence.build(),
            self.model.horizon,
        )
    }

    /// Stress spec for `model` (the first component in the bivariate case).
    pub fn spec(&self, model: &CompoundPoissonModel, base: &FsPath) -> Result<StressSpec> {
        let Some(st) = &self.stress else {
            return Ok(StressSpec::at(vec![], model.horizon));
        };
        let t = st.stress_time.unwrap_or(model.horizon);
        let constraints = st
            .constraints
            .iter()
            .map(|c| c.build(model, t, base))
            .collect::<Result<Vec<_>>>()?;
        let terminal = st.terminal.as_ref().map(|c| c.build(model, model.horizon, base)).transpose()?;
        let spec = StressSpec { constraints, stress_time: t, terminal };
        spec.validate(model.horizon)?;
        Ok(spec)
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        let n = &self.numerics;
        CalibrationOptions {
            backend: match n.backend {
                BackendKind::Lattice => ExpectationBackend::Lattice { n_points: n.n_points },
                BackendKind::Montecarlo => ExpectationBackend::MonteCarlo { samples: n.mc_samples, seed: n.seed },
            },
            tolerance: n.tolerance,
            max_iterations: n.max_iterations,
        }
    }

    pub fn dynamics_options(&self) -> DynamicsOptions {
        let n = &self.numerics;
        DynamicsOptions {
            n_points: n.n_points,
            n_times: n.n_times,
            pool_size: n.pool_size,
            window: n.window,
            seed: n.seed,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidModel(_) | Error::InvalidConstraint(_) => 2,
        Error::Infeasible(_) => 3,
        Error::NoConvergence { .. } | Error::Numerical(_) => 4,
        Error::Io(_) => 5,
    }
}

/// Writes versioned CSV artifacts atomically into one directory.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &FsPath {
        &self.dir
    }

    /// Temp file plus rename.
    pub fn write_raw(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write_raw(name, &format!("{CSV_VERSION_LINE} {}\n{body}", name.trim_end_matches(".csv")))
    }
}

struct Context {
    cfg: RunConfig,
    base: PathBuf,
    out: Output,
}

impl Context {
    fn calibrated(&self) -> Result<(CompoundPoissonModel, StressSpec, Multipliers)> {
        let model = match &self.cfg.bivariate {
            Some(_) => self.cfg.bivariate_model()?.component_one(),
            None => self.cfg.model()?,
        };
        let spec = self.cfg.spec(&model, &self.base)?;
        let mult = calibrate::solve_general_multipliers(&model, &spec, &self.cfg.calibration_options())?;
        Ok((model, spec, mult))
    }

    fn dynamics(&self) -> Result<(StressedDynamics, Multipliers)> {
        let (model, spec, mult) = self.calibrated()?;
        let opts = self.cfg.dynamics_options();
        let d = if spec.constraints.is_empty() {
            StressedDynamics::unstressed(&model, &opts)
        } else {
            StressedDynamics::new(&model, &spec, &mult, &opts)?
        };
        self.out.write_csv("multipliers.csv", &mult.report_csv())?;
        Ok((d, mult))
    }
}

fn grid(t0: f64, t1: f64, step: f64) -> Vec<f64> {
    let n = ((t1 - t0) / step).round().max(1.0) as usize;
    (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
}

fn report_row(measure: &str, r: &RiskReport) -> String {
    format!(
        "{measure},{},{},{},{},{},{},{}\n",
        r.alpha, r.mean, r.var, r.cvar, r.se_mean, r.se_var, r.se_cvar
    )
}

const REPORT_HEADER: &str = "measure,alpha,mean,var,cvar,se_mean,se_var,se_cvar\n";

fn cmd_calibrate(ctx: &Context) -> Result<()> {
    let (_, _, mult) = ctx.calibrated()?;
    ctx.out.write_csv("multipliers.csv", &mult.report_csv())?;
    Ok(())
}

fn cmd_surface(ctx: &Context) -> Result<()> {
    let (d, _) = ctx.dynamics()?;
    let n = &ctx.cfg.numerics;
    let model = d.model();
    let t_end = if d.stages().is_empty() { model.horizon } else { d.active_until() };
    let times: Vec<f64> = (0..n.surface_times.max(2))
        .map(|k| t_end * k as f64 / (n.surface_times.max(2) - 1) as f64)
        .collect();
    let x_max = if n.surface_x_max > 0.0 {
        n.surface_x_max
    } else {
        let q = d
            .multipliers()
            .constraints
            .iter()
            .filter_map(|c| c.kind.threshold())
            .fold(model.mean_at(model.horizon), f64::max);
        1.3 * q
    };
    let xs = grid(0.0, x_max, n.surface_x_step);
    ctx.out.write_csv("kappa_star.csv", &stress::intensity_surface_csv(&d, &times, &xs)?)?;
    Ok(())
}

fn cmd_severity(ctx: &Context) -> Result<()> {
    let (d, _) = ctx.dynamics()?;
    let se = &ctx.cfg.severity_export;
    let scheme = if se.systematic { Resampling::Systematic } else { Resampling::Multinomial };
    let mut body = String::from("t,x,kappa_hat,draw\n");
    for (k, [t, x]) in se.points.iter().enumerate() {
        let mut rng = simulate::stream_rng(ctx.cfg.numerics.seed, k as u64);
        let (draws, kappa_hat) = stress::stressed_severity_draws(&d, *t, *x, se.n_draws, scheme, &mut rng)?;
        for y in draws {
            body.push_str(&format!("{t},{x},{kappa_hat},{y}\n"));
        }
    }
    ctx.out.write_csv("severity_draws.csv", &body)?;
    Ok(())
}

fn constraint_rows(d: &StressedDynamics, stressed: &PathEnsemble, reference: &PathEnsemble) -> String {
    let mut s = String::from("kind,threshold,target,stressed_estimate,importance_estimate\n");
    let t = d.stress_time();
    for (c, _) in d.stress_constraints() {
        let st = stressed.states_at(t, 0);
        let plain = st.iter().map(|x| c.eval(*x)).sum::<f64>() / st.len() as f64;
        let is = reference
            .paths
            .iter()
            .map(|p| p.rn_weight * c.eval(p.state_at(t, 0)))
            .sum::<f64>()
            / reference.len() as f64;
        let q = c.kind.threshold().map(|q| q.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{q},{},{plain},{is}\n", c.kind.name(), c.target));
    }
    s
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let (d, _) = ctx.dynamics()?;
    let n = &ctx.cfg.numerics;
    let model = d.model().clone();
    let stressed = simulate::simulate_stressed(&d, n.n_paths, n.dt, n.seed)?;
    let mut reference = simulate::simulate_reference(&model, n.n_reference_paths, n.seed ^ 0x5a5a)?;
    reference.attach_rn(&d);
    let g = grid(0.0, model.horizon, n.path_grid_step);
    ctx.out.write_csv("paths_stressed.csv", &stressed.paths_csv(&g, n.export_paths))?;
    ctx.out.write_csv("paths_reference.csv", &reference.paths_csv(&g, n.export_paths))?;
    ctx.out.write_csv("summary.csv", &simulate::summary_csv(&[&reference, &stressed], &g, 0))?;
    let mut rep = String::from(REPORT_HEADER);
    rep.push_str(&report_row("reference", &RiskReport::from_samples(&reference.terminal(0), 0.9)?));
    rep.push_str(&report_row("stressed", &RiskReport::from_samples(&stressed.terminal(0), 0.9)?));
    ctx.out.write_csv("report.csv", &rep)?;
    ctx.out.write_csv("constraints.csv", &constraint_rows(&d, &stressed, &reference))?;
    Ok(())
}

fn cmd_bivariate(ctx: &Context) -> Result<()> {
    let b = ctx.cfg.bivariate_model()?;
    let (d, _) = ctx.dynamics()?;
    let n = &ctx.cfg.numerics;
    let reference = simulate::simulate_bivariate_reference(&b, n.n_paths, n.seed)?;
    let stressed = simulate::simulate_bivariate_stressed(&b, &d, n.n_paths, n.dt, n.seed)?;
    let g = grid(0.0, b.horizon, n.path_grid_step);
    ctx.out.write_csv("paths_stressed.csv", &stressed.paths_csv(&g, n.export_paths))?;
    ctx.out.write_csv("paths_reference.csv", &reference.paths_csv(&g, n.export_paths))?;
    for c in 0..2 {
        ctx.out.write_csv(
            &format!("summary_x{}.csv", c + 1),
            &simulate::summary_csv(&[&reference, &stressed], &g, c),
        )?;
    }
    let (rp, cp) = analytics::spearman_rho_ci(&reference.terminal(0), &reference.terminal(1), 0.95)?;
    let (rq, cq) = analytics::spearman_rho_ci(&stressed.terminal(0), &stressed.terminal(1), 0.95)?;
    let label = ctx.cfg.bivariate.as_ref().unwrap().dependence.label();
    ctx.out.write_csv("spearman.csv", &format!("copula,rho_P,ci_P,rho_Q,ci_Q\n{label},{rp},{cp},{rq},{cq}\n"))?;
    Ok(())
}

fn cmd_whatif(ctx: &Context) -> Result<()> {
    let b = ctx.cfg.bivariate_model()?;
    let w = &ctx.cfg.whatif;
    let n = &ctx.cfg.numerics;
    let settings = WhatIfSettings {
        target_alpha: w.target_alpha,
        uplift: w.uplift,
        stress_fraction: w.stress_fraction,
        n_paths: n.n_paths,
        dt: n.dt,
        seed: n.seed,
        resolution_pct: w.resolution_pct,
        max_pct: w.max_pct,
        dynamics: ctx.cfg.dynamics_options(),
        calibration: ctx.cfg.calibration_options(),
    };
    let r = analytics::whatif_search(&b, &w.alphas, &settings)?;
    ctx.out.write_csv("whatif.csv", &r.to_csv())?;
    Ok(())
}

fn cmd_forecast(ctx: &Context) -> Result<()> {
    let (d, _) = ctx.dynamics()?;
    let f = &ctx.cfg.forecast;
    let n = &ctx.cfg.numerics;
    let model = d.model().clone();
    let reference_dyn = StressedDynamics::unstressed(&model, &ctx.cfg.dynamics_options());
    let settings = ForecastSettings { delta: f.delta, alpha: f.alpha, n_paths: n.n_paths, dt: n.dt, seed: n.seed };
    let g = grid(0.0, model.horizon - f.delta, f.grid_step);
    let conditioning = simulate::simulate_reference(&model, f.scenarios.max(1), n.seed ^ 0xf0ca)?;
    let mut rows = Vec::new();
    for (k, p) in conditioning.paths.iter().enumerate() {
        rows.push((format!("reference-{k}"), analytics::incremental_forecast(&reference_dyn, p, &g, &settings)?));
        rows.push((format!("stressed-{k}"), analytics::incremental_forecast(&d, p, &g, &settings)?));
    }
    ctx.out.write_csv("forecast.csv", &analytics::forecast_csv(&rows))?;
    ctx.out.write_csv("forecast_paths.csv", &conditioning.paths_csv(&grid(0.0, model.horizon, n.path_grid_step), f.scenarios))?;
    Ok(())
}

/// Parses the config, applies overrides, runs one command and echoes the
/// resolved config into the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let text = fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("{}: {e}", cli.config.display())))?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    if let Some(s) = cli.seed {
        cfg.numerics.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.numerics.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if cfg.numerics.workers > 0 {
        // Fails only if a global pool already exists; keep that pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.numerics.workers).build_global();
    }
    let base = cli.config.parent().map(FsPath::to_path_buf).unwrap_or_default();
    let out = Output::new(cfg.output.dir.clone())?;
    out.write_raw("resolved_config.toml", &cfg.to_toml_string()?)?;
    let ctx = Context { cfg, base, out };
    match cli.command {
        Command::Calibrate => cmd_calibrate(&ctx),
        Command::Surface => cmd_surface(&ctx),
        Command::Severity => cmd_severity(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Bivariate => cmd_bivariate(&ctx),
        Command::Whatif => cmd_whatif(&ctx),
        Command::Forecast => cmd_forecast(&ctx),
    }?;
    Ok(ctx.out.dir().to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kappa = 5.0
horizon = 1.0
severity = { kind = "gamma", shape = 2.0, rate = 1.0 }
"#;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.numerics.n_points, 1 << 14);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[numerics]\nn_pointz = 3\n");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("rate = 1.0 }", "rate = 1.0, scale = 2.0 }");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::Infeasible("x".into())),
            exit_code(&Error::Numerical("x".into())),
            exit_code(&Error::Io(std::io::Error::other("x"))),
        ];
        assert_eq!(codes, [2, 3, 4, 5]);
    }
}
