//! Reference model, severities, constraints and bivariate dependence.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};

/// Weighted discrete severity on non-negative support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    values: Vec<f64>,
    weights: Vec<f64>,
    cum: Vec<f64>,
}

impl Tabulated {
    /// Builds a tabulated severity. Weights are normalised; points are sorted.
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::InvalidModel(
                "tabulated severity needs equally many values and weights".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidModel(
                "tabulated severity values must be finite and non-negative".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidModel("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidModel("weights sum to zero".into()));
        }
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| p.1 / total).collect();
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cum.push(acc);
        }
        *cum.last_mut().unwrap() = 1.0;
        Ok(Self { values, weights, cum })
    }

    /// Equally weighted sample.
    pub fn from_sample(sample: Vec<f64>) -> Result<Self> {
        let n = sample.len();
        Self::new(sample, vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn cdf(&self, x: f64) -> f64 {
        let k = self.values.partition_point(|v| *v <= x);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        let k = self.cum.partition_point(|c| *c < p);
        self.values[k.min(self.values.len() - 1)]
    }
}

/// Jump size distribution G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeverityDistribution {
    Gamma { shape: f64, rate: f64 },
    Exponential { rate: f64 },
    Tabulated(Tabulated),
}

impl SeverityDistribution {
    pub fn gamma(shape: f64, rate: f64) -> Self {
        Self::Gamma { shape, rate }
    }

    pub fn exponential(rate: f64) -> Self {
        Self::Exponential { rate }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Self::Gamma { shape, rate } if ok(*shape) && ok(*rate) => Ok(()),
            Self::Gamma { shape, rate } => Err(Error::InvalidModel(format!(
                "gamma severity needs shape > 0 and rate > 0, got ({shape}, {rate})"
            ))),
            Self::Exponential { rate } if ok(*rate) => Ok(()),
            Self::Exponential { rate } => Err(Error::InvalidModel(format!(
                "exponential severity needs rate > 0, got {rate}"
            ))),
            Self::Tabulated(_) => Ok(()),
        }
    }

    /// (shape, rate) when the severity is in the gamma family.
    pub fn gamma_params(&self) -> Option<(f64, f64)> {
        match self {
            Self::Gamma { shape, rate } => Some((*shape, *rate)),
            Self::Exponential { rate } => Some((1.0, *rate)),
            Self::Tabulated(_) => None,
        }
    }

    /// P(xi <= x).
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            if let Self::Tabulated(t) = self {
                return t.cdf(x);
            }
            return 0.0;
        }
        match self {
            Self::Gamma { shape, rate } => gamma_lr(*shape, rate * x),
            Self::Exponential { rate } => -(-rate * x).exp_m1(),
            Self::Tabulated(t) => t.cdf(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            Self::Gamma { shape, rate } => {
                if x == 0.0 {
                    return if *shape < 1.0 {
                        f64::INFINITY
                    } else if *shape == 1.0 {
                        *rate
                    } else {
                        0.0
                    };
                }
                (shape * rate.ln() + (shape - 1.0) * x.ln()
                    - rate * x
                    - statrs::function::gamma::ln_gamma(*shape))
                .exp()
            }
            Self::Exponential { rate } => rate * (-rate * x).exp(),
            Self::Tabulated(_) => 0.0,
        }
    }

    /// Characteristic function E[exp(i zeta xi)].
    pub fn cf(&self, zeta: f64) -> Complex64 {
        match self {
            Self::Gamma { shape, rate } => {
                Complex64::new(1.0, -zeta / rate).powf(-shape)
            }
            Self::Exponential { rate } => Complex64::new(1.0, 0.0) / Complex64::new(1.0, -zeta / rate),
            Self::Tabulated(t) => t
                .values
                .iter()
                .zip(&t.weights)
                .map(|(v, w)| Complex64::from_polar(*w, zeta * v))
                .sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Gamma { shape, rate } => shape / rate,
            Self::Exponential { rate } => 1.0 / rate,
            Self::Tabulated(t) => t.values.iter().zip(&t.weights).map(|(v, w)| v * w).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Gamma { shape, rate } => shape / (rate * rate),
            Self::Exponential { rate } => 1.0 / (rate * rate),
            Self::Tabulated(t) => {
                let m = self.mean();
                t.values.iter().zip(&t.weights).map(|(v, w)| w * (v - m).powi(2)).sum()
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.variance() + self.mean().powi(2)
    }

    /// Lower quantile inf{x : cdf(x) >= p}.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match self {
            Self::Exponential { rate } => {
                if p >= 1.0 {
                    f64::INFINITY
                } else {
                    -(-p).ln_1p() / rate
                }
            }
            Self::Gamma { shape, rate } => gamma_quantile(*shape, *rate, p),
            Self::Tabulated(t) => t.quantile(p),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gamma { shape, rate } => GammaDist::new(*shape, 1.0 / rate)
                .expect("validated gamma")
                .sample(rng),
            Self::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
            Self::Tabulated(t) => {
                let u: f64 = rng.random();
                t.quantile(u)
            }
        }
    }
}

fn gamma_quantile(shape: f64, rate: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (0.0_f64, (shape + 10.0 * shape.sqrt() + 10.0) / rate);
    while gamma_lr(shape, rate * hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let dist = SeverityDistribution::Gamma { shape, rate };
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gamma_lr(shape, rate * x) - p;
        if f.abs() < 1e-14 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = dist.pdf(x);
        let newton = if d > 0.0 { x - f / d } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-14 * hi.max(1.0) {
            break;
        }
    }
    x
}

/// Reference compound Poisson process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundPoissonModel {
    pub kappa: f64,
    pub severity: SeverityDistribution,
    pub horizon: f64,
}

impl CompoundPoissonModel {
    pub fn new(kappa: f64, severity: SeverityDistribution, horizon: f64) -> Result<Self> {
        validate_model(Self { kappa, severity, horizon })
    }

    /// E[X_t].
    pub fn mean_at(&self, t: f64) -> f64 {
        self.kappa * t * self.severity.mean()
    }

    /// Var[X_t].
    pub fn variance_at(&self, t: f64) -> f64 {
        self.kappa * t * self.severity.second_moment()
    }
}

/// Checks the model invariants and returns the model unchanged.
pub fn validate_model(model: CompoundPoissonModel) -> Result<CompoundPoissonModel> {
    if !(model.kappa.is_finite() && model.kappa > 0.0) {
        return Err(Error::InvalidModel(format!("kappa must be positive, got {}", model.kappa)));
    }
    if !(model.horizon.is_finite() && model.horizon > 0.0) {
        return Err(Error::InvalidModel(format!(
            "horizon must be positive, got {}",
            model.horizon
        )));
    }
    model.severity.validate()?;
    Ok(model)
}

/// Severity characteristic function.
pub fn severity_cf(dist: &SeverityDistribution, zeta: f64) -> Complex64 {
    dist.cf(zeta)
}

/// Real function sampled on a uniform grid; linear in between, flat outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub x0: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(x0: f64, dx: f64, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !(dx > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConstraint(
                "generic constraint needs a non-empty finite grid with dx > 0".into(),
            ));
        }
        Ok(Self { x0, dx, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let u = (x - self.x0) / self.dx;
        if u <= 0.0 {
            return self.values[0];
        }
        if u >= (n - 1) as f64 {
            return self.values[n - 1];
        }
        let k = u.floor() as usize;
        let w = u - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

/// Constraint function f.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// f(x) = 1{x < q}
    IndicatorBelow { q: f64 },
    /// f(x) = (x - q)_+
    ExcessAbove { q: f64 },
    /// f(x) = x
    Mean,
    Generic(GridFunction),
}

impl ConstraintKind {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::IndicatorBelow { q } => {
                if x < *q {
                    1.0
                } else {
                    0.0
                }
            }
            Self::ExcessAbove { q } => (x - q).max(0.0),
            Self::Mean => x,
            Self::Generic(g) => g.eval(x),
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            Self::IndicatorBelow { q } | Self::ExcessAbove { q } => Some(*q),
            _ => None,
        }
    }

    pub(crate) fn with_threshold(&self, q_new: f64) -> Self {
        match self {
            Self::IndicatorBelow { .. } => Self::IndicatorBelow { q: q_new },
            Self::ExcessAbove { .. } => Self::ExcessAbove { q: q_new },
            other => other.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::IndicatorBelow { .. } => "indicator_below",
            Self::ExcessAbove { .. } => "excess_above",
            Self::Mean => "mean",
            Self::Generic(_) => "generic",
        }
    }
}

/// E^Q[f(X)] = target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub target: f64,
}

impl Constraint {
    pub fn new(kind: ConstraintKind, target: f64) -> Result<Self> {
        let c = Self { kind, target };
        c.validate()?;
        Ok(c)
    }

    /// Q(X < q) = alpha.
    pub fn var(q: f64, alpha: f64) -> Result<Self> {
        Self::new(ConstraintKind::IndicatorBelow { q }, alpha)
    }

    /// E^Q[(X - q)_+] = (s - q)(1 - alpha).
    pub fn cvar(q: f64, s: f64, alpha: f64) -> Result<Self> {
        Self::new(ConstraintKind::ExcessAbove { q }, (s - q) * (1.0 - alpha))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target.is_finite() {
            return Err(Error::InvalidConstraint("target must be finite".into()));
        }
        if let Some(q) = self.kind.threshold() {
            if !q.is_finite() {
                return Err(Error::InvalidConstraint("threshold q must be finite".into()));
            }
        }
        if let ConstraintKind::IndicatorBelow { q } = self.kind {
            if !(self.target > 0.0 && self.target < 1.0) {
                return Err(Error::Infeasible(format!(
                    "indicator target {} for q = {q} must lie in (0, 1)",
                    self.target
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.kind.eval(x)
    }
}

/// Constraints at the stress time, optionally with a second stage at T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressSpec {
    pub constraints: Vec<Constraint>,
    pub stress_time: f64,
    pub terminal: Option<Constraint>,
}

impl StressSpec {
    pub fn at(constraints: Vec<Constraint>, stress_time: f64) -> Self {
        Self { constraints, stress_time, terminal: None }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.stress_time > 0.0 && self.stress_time <= horizon) {
            return Err(Error::InvalidConstraint(format!(
                "stress time {} must lie in (0, {horizon}]",
                self.stress_time
            )));
        }
        for c in self.constraints.iter().chain(self.terminal.iter()) {
            c.validate()?;
        }
        if self.terminal.is_some() && self.stress_time >= horizon {
            return Err(Error::InvalidConstraint(
                "a terminal stage requires stress time strictly before the horizon".into(),
            ));
        }
        let indicators: Vec<f64> = self
            .constraints
            .iter()
            .filter_map(|c| match c.kind {
                ConstraintKind::IndicatorBelow { q } => Some(q),
                _ => None,
            })
            .collect();
        let excesses: Vec<f64> = self
            .constraints
            .iter()
            .filter_map(|c| match c.kind {
                ConstraintKind::ExcessAbove { q } => Some(q),
                _ => None,
            })
            .collect();
        if indicators.len() > 1 || excesses.len() > 1 {
            return Err(Error::InvalidConstraint(
                "at most one indicator and one excess constraint per stage".into(),
            ));
        }
        if let (Some(a), Some(b)) = (indicators.first(), excesses.first()) {
            if a != b {
                return Err(Error::InvalidConstraint(
                    "indicator and excess constraints must share the same q".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Dependence between the two jump components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Dependence {
    Independence,
    TCopula { rho: f64, df: f64 },
    Gumbel { theta: f64 },
    Frank { theta: f64 },
    /// Exactly one component jumps: the first with probability p (size from
    /// `marginals[0]`), otherwise the second (size from `marginals[1]`).
    IndependentMixture { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateModel {
    pub kappa: f64,
    pub marginals: [SeverityDistribution; 2],
    pub dependence: Dependence,
    pub horizon: f64,
}

impl BivariateModel {
    pub fn new(
        kappa: f64,
        marginals: [SeverityDistribution; 2],
        dependence: Dependence,
        horizon: f64,
    ) -> Result<Self> {
        let m = Self { kappa, marginals, dependence, horizon };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        validate_model(CompoundPoissonModel {
            kappa: self.kappa,
            severity: self.marginals[0].clone(),
            horizon: self.horizon,
        })?;
        self.marginals[1].validate()?;
        let bad = |s: String| Err(Error::InvalidModel(s));
        match self.dependence {
            Dependence::Independence => Ok(()),
            Dependence::TCopula { rho, df } => {
                if !(rho > -1.0 && rho < 1.0) || !(df > 0.0 && df.is_finite()) {
                    bad(format!("t-copula needs rho in (-1,1), df > 0; got ({rho}, {df})"))
                } else {
                    Ok(())
                }
            }
            Dependence::Gumbel { theta } => {
                if theta >= 1.0 && theta.is_finite() {
                    Ok(())
                } else {
                    bad(format!("Gumbel copula needs theta >= 1, got {theta}"))
                }
            }
            Dependence::Frank { theta } => {
                if theta != 0.0 && theta.is_finite() {
                    Ok(())
                } else {
                    bad(format!("Frank copula needs theta != 0, got {theta}"))
                }
            }
            Dependence::IndependentMixture { p } => {
                if p > 0.0 && p < 1.0 {
                    Ok(())
                } else {
                    bad(format!("mixture probability must be in (0,1), got {p}"))
                }
            }
        }
    }

    /// Univariate model of the first component. Under the mixture, zero jumps
    /// of the first coordinate are dropped and the intensity thinned to kappa*p.
    pub fn component_one(&self) -> CompoundPoissonModel {
        let kappa = match self.dependence {
            Dependence::IndependentMixture { p } => self.kappa * p,
            _ => self.kappa,
        };
        CompoundPoissonModel {
            kappa,
            severity: self.marginals[0].clone(),
            horizon: self.horizon,
        }
    }

    /// Draws one joint jump (y1, y2).
    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match self.dependence {
            Dependence::IndependentMixture { p } => {
                if rng.random::<f64>() < p {
                    [self.marginals[0].sample(rng), 0.0]
                } else {
                    [0.0, self.marginals[1].sample(rng)]
                }
            }
            Dependence::Independence => {
                [self.marginals[0].sample(rng), self.marginals[1].sample(rng)]
            }
            _ => {
                let [u1, u2] = sample_copula(&self.dependence, rng);
                [self.marginals[0].quantile(u1), self.marginals[1].quantile(u2)]
            }
        }
    }
}

/// Uniform pair from the copula. Independence for non-copula variants.
pub fn sample_copula<R: Rng + ?Sized>(dep: &Dependence, rng: &mut R) -> [f64; 2] {
    match *dep {
        Dependence::TCopula { rho, df } => {
            let z1: f64 = StandardNormal.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * e;
            let chi: f64 = ChiSquared::new(df).expect("df > 0").sample(rng);
            let w = (chi / df).sqrt();
            let t = StudentsT::new(0.0, 1.0, df).expect("df > 0");
            [t.cdf(z1 / w), t.cdf(z2 / w)]
        }
        Dependence::Gumbel { theta } => {
            let alpha = 1.0 / theta;
            let v = positive_stable(alpha, rng);
            let e1: f64 = Exp1.sample(rng);
            let e2: f64 = Exp1.sample(rng);
            [(-(e1 / v).powf(alpha)).exp(), (-(e2 / v).powf(alpha)).exp()]
        }
        Dependence::Frank { theta } => {
            let u1: f64 = rng.random();
            let w: f64 = rng.random();
            let a = (-theta * u1).exp();
            let u2 = -(1.0 + w * (-theta).exp_m1() / (w + (1.0 - w) * a)).ln() / theta;
            [u1, u2.clamp(0.0, 1.0)]
        }
        _ => [rng.random(), rng.random()],
    }
}

/// Positive stable variable with Laplace transform exp(-s^alpha), alpha in (0,1].
fn positive_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let u = std::f64::consts::PI * rng.random::<f64>();
    let w: f64 = Exp1.sample(rng);
    let a = (alpha * u).sin() / u.sin().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * u).sin() / w).powf((1.0 - alpha) / alpha);
    a * b
}
