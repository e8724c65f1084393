//! Market model data types, scenario configuration, and validation of the
//! standing assumptions.
//!
//! The controlled state follows
//!
//! ```text
//! dX_t = (A_t X_t + u_t' B_t) dt + (X_t C_t' + u_t' D_t) dW_t,   X_0 = x,
//! ```
//!
//! with scalar drift coefficient `A`, n-vectors `B`, `C`, control volatility
//! matrix `D`, and n-dimensional Brownian motion `W`. `B`, `C`, `D` are
//! deterministic (constant over time here); `A` comes in three tiers:
//! a deterministic function of time, an Ornstein-Uhlenbeck factor, or a
//! nonlinear link of that factor. Nondegeneracy `D D' >= delta I` is the
//! load-bearing assumption and is checked wherever `D` is evaluated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

pub const DEFAULT_DELTA: f64 = 1e-4;
pub const DEFAULT_COEFF_CAP: f64 = 10.0;
pub const DEFAULT_A_MAX: f64 = 50.0;
/// Guard on lambda * T so Poisson inversion stays well inside f64 range.
pub const MAX_JUMP_MEAN: f64 = 500.0;

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_coeff_cap() -> f64 {
    DEFAULT_COEFF_CAP
}
fn default_a_max() -> f64 {
    DEFAULT_A_MAX
}

/// Deterministic scalar function of time, serializable for scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFn {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        slope: f64,
    },
    Sinusoid {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl TimeFn {
    pub fn constant(value: f64) -> Self {
        TimeFn::Constant { value }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFn::Constant { value } => value,
            TimeFn::Linear { intercept, slope } => intercept + slope * t,
            TimeFn::Sinusoid {
                base,
                amplitude,
                frequency,
            } => base + amplitude * (frequency * t).sin(),
        }
    }
}

/// Coefficient tier: how the drift coefficient A is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Deterministic,
    MarkovFactor,
    PathDependent,
}

/// Ornstein-Uhlenbeck factor dynamics: df = kappa_f (m_f - f) dt + v_f' dW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorParams {
    pub kappa_f: f64,
    pub m_f: f64,
    pub v_f: Vec<f64>,
    pub f_0: f64,
}

/// How the drift coefficient is read off the factor in the path-dependent
/// tier. `Identity` reproduces the Markov-factor drift but forces the
/// regression backend (no affine shortcut).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftLink {
    Identity,
    Tanh { base: f64, amplitude: f64 },
}

impl DriftLink {
    #[inline]
    pub fn eval(&self, f: f64) -> f64 {
        match *self {
            DriftLink::Identity => f,
            DriftLink::Tanh { base, amplitude } => base + amplitude * f.tanh(),
        }
    }
}

/// The (A, B, C, D) coefficient block of the state dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModel {
    pub tier: Tier,
    /// Drift coefficient as a function of time (deterministic tier only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<TimeFn>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    /// Factor dynamics (markov_factor and path_dependent tiers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<FactorParams>,
    /// Drift link (path_dependent tier; defaults to identity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<DriftLink>,
    /// Nondegeneracy bound: D D' >= delta I.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Cap on |B|, |C|, |D| entries.
    #[serde(default = "default_coeff_cap")]
    pub coeff_cap: f64,
    /// Hard bound on |A| applied at simulation time, with hit counting.
    #[serde(default = "default_a_max")]
    pub a_max: f64,
}

impl CoefficientModel {
    pub fn deterministic(a: TimeFn, b: Vec<f64>, c: Vec<f64>, d: Vec<Vec<f64>>) -> Self {
        CoefficientModel {
            tier: Tier::Deterministic,
            a: Some(a),
            b,
            c,
            d,
            factor: None,
            link: None,
            delta: DEFAULT_DELTA,
            coeff_cap: DEFAULT_COEFF_CAP,
            a_max: DEFAULT_A_MAX,
        }
    }

    /// State dimension n.
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Drift coefficient at time t given the current factor value, with the
    /// |A| cap applied. Returns (value, capped).
    #[inline]
    pub fn drift_at(&self, t: f64, factor: f64) -> (f64, bool) {
        let raw = match self.tier {
            Tier::Deterministic => self.a.as_ref().map(|f| f.eval(t)).unwrap_or(0.0),
            Tier::MarkovFactor => factor,
            Tier::PathDependent => self
                .link
                .as_ref()
                .unwrap_or(&DriftLink::Identity)
                .eval(factor),
        };
        if raw.abs() > self.a_max {
            (raw.signum() * self.a_max, true)
        } else {
            (raw, false)
        }
    }

    /// Cache of the constant coefficient blocks and derived inverses.
    pub fn constants(&self) -> Result<ModelConstants> {
        let n = self.dim();
        if self.c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "B has dim {}, C has dim {}",
                n,
                self.c.len()
            )));
        }
        if self.d.len() != n || self.d.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "D must be {n}x{n} to match B"
            )));
        }
        if let Some(fp) = &self.factor {
            if fp.v_f.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "factor loading v_f has dim {}, expected {}",
                    fp.v_f.len(),
                    n
                )));
            }
        }
        let b = DVector::from_column_slice(&self.b);
        let c = DVector::from_column_slice(&self.c);
        let d = DMatrix::from_fn(n, n, |i, j| self.d[i][j]);
        let dd_t = &d * d.transpose();
        let min_eig = min_symmetric_eigenvalue(&dd_t);
        if min_eig < self.delta {
            return Err(Error::Degenerate(format!(
                "min eigenvalue of D D' is {min_eig:.3e}, below delta = {:.3e}",
                self.delta
            )));
        }
        let d_inv = d.clone().try_inverse().ok_or(Error::SingularD)?;
        let d_t_inv = d.transpose().try_inverse().ok_or(Error::SingularD)?;
        let d_inv_b = &d_inv * &b;
        let kappa_bar = d_inv_b.dot(&c);
        Ok(ModelConstants {
            n,
            b,
            c,
            d,
            d_inv,
            d_t_inv,
            d_inv_b,
            kappa_bar,
        })
    }
}

/// Constant coefficient blocks with cached inverses.
#[derive(Debug, Clone)]
pub struct ModelConstants {
    pub n: usize,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub d_inv: DMatrix<f64>,
    /// (D')^{-1}, used by every feedback-control formula.
    pub d_t_inv: DMatrix<f64>,
    /// beta := D^{-1} B.
    pub d_inv_b: DVector<f64>,
    /// kappa_bar := (D^{-1} B)' C, the drift correction in the h equation.
    pub kappa_bar: f64,
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Exact one-step transition of the OU factor driven by bundle increments:
///
/// ```text
/// f_{k+1} = mean + (f_k - mean) e^{-kappa dt} + s * v_f' dW_k,
/// s = sqrt( (1 - e^{-2 kappa dt}) / (2 kappa dt) ),
/// ```
///
/// which reproduces the exact Gaussian transition law of the factor. Under a
/// drift-shifted measure (W-bar = W + int beta ds Brownian), the long-run
/// mean shifts to m_f - v_f' beta / kappa_f and the increments are read as
/// the shifted Brownian's.
#[derive(Debug, Clone)]
pub struct FactorStepper {
    pub mean: f64,
    pub decay: f64,
    pub noise_scale: f64,
    pub v_f: Vec<f64>,
}

impl FactorStepper {
    pub fn new(fp: &FactorParams, dt: f64, drift_shift: Option<&[f64]>) -> Self {
        let shift: f64 = drift_shift
            .map(|b| fp.v_f.iter().zip(b).map(|(v, s)| v * s).sum())
            .unwrap_or(0.0);
        FactorStepper {
            mean: fp.m_f - shift / fp.kappa_f,
            decay: (-fp.kappa_f * dt).exp(),
            noise_scale: ((-(-2.0 * fp.kappa_f * dt).exp_m1()) / (2.0 * fp.kappa_f * dt)).sqrt(),
            v_f: fp.v_f.clone(),
        }
    }

    #[inline]
    pub fn step(&self, f: f64, dw: &[f64]) -> f64 {
        let noise: f64 = self.v_f.iter().zip(dw).map(|(v, w)| v * w).sum();
        self.step_with_noise(f, noise)
    }

    #[inline]
    pub fn step_with_noise(&self, f: f64, noise: f64) -> f64 {
        self.mean + (f - self.mean) * self.decay + self.noise_scale * noise
    }
}

/// Claim-size distribution for the compound Poisson surplus. Support must be
/// bounded: the optimal jump generator psi_hat = b y / (lambda m2) is only
/// admissible (bounded) under bounded claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClaimDistribution {
    Discrete {
        /// (claim size, probability) pairs.
        atoms: Vec<(f64, f64)>,
    },
    LognormalTrunc {
        mu: f64,
        sigma: f64,
        /// Truncation bound; `None` marks unbounded support, which validation
        /// rejects.
        y_max: Option<f64>,
    },
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

impl ClaimDistribution {
    /// First moment m1 = int y nu(dy).
    pub fn m1(&self) -> f64 {
        match self {
            ClaimDistribution::Discrete { atoms } => {
                let w: f64 = atoms.iter().map(|(_, p)| p).sum();
                atoms.iter().map(|(y, p)| y * p).sum::<f64>() / w
            }
            ClaimDistribution::LognormalTrunc { mu, sigma, y_max } => {
                let ym = y_max.unwrap_or(f64::INFINITY);
                if ym.is_infinite() {
                    return (mu + 0.5 * sigma * sigma).exp();
                }
                let d = (ym.ln() - mu) / sigma;
                (mu + 0.5 * sigma * sigma).exp() * norm_cdf(d - sigma) / norm_cdf(d)
            }
        }
    }

    /// Second moment m2 = int y^2 nu(dy).
    pub fn m2(&self) -> f64 {
        match self {
            ClaimDistribution::Discrete { atoms } => {
                let w: f64 = atoms.iter().map(|(_, p)| p).sum();
                atoms.iter().map(|(y, p)| y * y * p).sum::<f64>() / w
            }
            ClaimDistribution::LognormalTrunc { mu, sigma, y_max } => {
                let ym = y_max.unwrap_or(f64::INFINITY);
                if ym.is_infinite() {
                    return (2.0 * mu + 2.0 * sigma * sigma).exp();
                }
                let d = (ym.ln() - mu) / sigma;
                (2.0 * mu + 2.0 * sigma * sigma).exp() * norm_cdf(d - 2.0 * sigma) / norm_cdf(d)
            }
        }
    }

    /// Upper end of the support.
    pub fn y_max(&self) -> f64 {
        match self {
            ClaimDistribution::Discrete { atoms } => {
                atoms.iter().map(|(y, _)| *y).fold(0.0, f64::max)
            }
            ClaimDistribution::LognormalTrunc { y_max, .. } => y_max.unwrap_or(f64::INFINITY),
        }
    }

    /// Mass kept by the truncation (1 for discrete).
    pub fn acceptance_probability(&self) -> f64 {
        match self {
            ClaimDistribution::Discrete { .. } => 1.0,
            ClaimDistribution::LognormalTrunc { mu, sigma, y_max } => match y_max {
                None => 1.0,
                Some(ym) => norm_cdf((ym.ln() - mu) / sigma),
            },
        }
    }

    /// Draw one claim from a sequential lane cursor.
    pub fn sample(&self, cursor: &mut crate::rng::LaneCursor) -> f64 {
        match self {
            ClaimDistribution::Discrete { atoms } => {
                let w: f64 = atoms.iter().map(|(_, p)| p).sum();
                let u = cursor.uniform_oc() * w;
                let mut cdf = 0.0;
                for (y, p) in atoms {
                    cdf += p;
                    if u <= cdf {
                        return *y;
                    }
                }
                atoms.last().map(|(y, _)| *y).unwrap_or(0.0)
            }
            ClaimDistribution::LognormalTrunc { mu, sigma, y_max } => {
                let ym = y_max.unwrap_or(f64::INFINITY);
                for _ in 0..10_000 {
                    let y = (mu + sigma * cursor.normal()).exp();
                    if y <= ym {
                        return y;
                    }
                }
                ym // truncation mass is validated, this is unreachable in accepted scenarios
            }
        }
    }
}

/// Compound Poisson claim model of the reinsurance application:
/// surplus dV = (b q + a) dt - q * int y gamma_tilde(dt, dy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpModel {
    /// Jump intensity lambda (claims per year).
    pub intensity: f64,
    pub claims: ClaimDistribution,
    /// Premium loading b (wealth per year per unit retention).
    pub premium_loading: f64,
    /// Drift offset a; the reinsurance corollary normalizes a = 0.
    #[serde(default)]
    pub drift_offset: f64,
}

impl JumpModel {
    pub fn m1(&self) -> f64 {
        self.claims.m1()
    }
    pub fn m2(&self) -> f64 {
        self.claims.m2()
    }
}

/// Polynomial regression basis used by the regression-Monte-Carlo solver
/// backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { degree: 3 }
    }
}

/// A fully specified simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Initial wealth.
    pub x: f64,
    /// Risk parameter theta > 0.
    pub theta: f64,
    pub grid: TimeGrid,
    pub model: CoefficientModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump: Option<JumpModel>,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
}

impl ScenarioConfig {
    pub fn basis(&self) -> BasisSpec {
        self.basis.clone().unwrap_or_default()
    }

    /// Parse a scenario JSON document, reporting missing or mistyped fields by
    /// JSON pointer.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config("", format!("invalid JSON: {e}")))?;
        schema_check(&value)?;
        serde_json::from_value(value).map_err(|e| Error::config("", e.to_string()))
    }
}

/// Structural check of a scenario document with JSON-pointer diagnostics.
fn schema_check(v: &serde_json::Value) -> Result<()> {
    use serde_json::Value;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::config("", "scenario must be a JSON object"))?;
    let require = |name: &str, pred: fn(&Value) -> bool, kind: &str| -> Result<()> {
        match obj.get(name) {
            None => Err(Error::config(format!("/{name}"), "missing required field")),
            Some(val) if !pred(val) => Err(Error::config(
                format!("/{name}"),
                format!("expected {kind}"),
            )),
            _ => Ok(()),
        }
    };
    require("x", Value::is_number, "number")?;
    require("theta", Value::is_number, "number")?;
    require("grid", Value::is_object, "object")?;
    require("model", Value::is_object, "object")?;
    require("n_paths", Value::is_u64, "non-negative integer")?;
    require("seed", Value::is_u64, "non-negative integer")?;
    let grid = obj.get("grid").and_then(Value::as_object).unwrap();
    for (name, kind) in [("horizon", "number"), ("steps", "non-negative integer")] {
        match grid.get(name) {
            None => {
                return Err(Error::config(
                    format!("/grid/{name}"),
                    "missing required field",
                ))
            }
            Some(val) if name == "horizon" && !val.is_number() => {
                return Err(Error::config(
                    format!("/grid/{name}"),
                    format!("expected {kind}"),
                ))
            }
            Some(val) if name == "steps" && !val.is_u64() => {
                return Err(Error::config(
                    format!("/grid/{name}"),
                    format!("expected {kind}"),
                ))
            }
            _ => {}
        }
    }
    let model = obj.get("model").and_then(Value::as_object).unwrap();
    for name in ["tier", "b", "c", "d"] {
        if !model.contains_key(name) {
            return Err(Error::config(
                format!("/model/{name}"),
                "missing required field",
            ));
        }
    }
    Ok(())
}

/// One violated assumption found by `validate_scenario`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Stable machine-readable code, e.g. "nondegeneracy".
    pub code: String,
    pub message: String,
    /// Grid node or path sample where the violation was observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

/// Outcome of scenario validation. Violations are data, not faults; an empty
/// report means the scenario satisfies every checkable assumption.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, code: &str, message: String, location: Option<String>) {
        self.violations.push(Violation {
            code: code.to_string(),
            message,
            location,
        });
    }
}

/// Check every invariant of a scenario: grid shape, positivity of theta,
/// coefficient caps, the nondegeneracy bound D D' >= delta I at every grid
/// node, factor parameters, and jump-model admissibility.
pub fn validate_scenario(cfg: &ScenarioConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = cfg.grid.validate() {
        report.push("grid", e.to_string(), None);
    }
    if !(cfg.theta.is_finite() && cfg.theta > 0.0) {
        report.push(
            "theta_positive",
            format!("theta must be > 0, got {}", cfg.theta),
            None,
        );
    }
    if !cfg.x.is_finite() {
        report.push(
            "initial_wealth",
            format!("x must be finite, got {}", cfg.x),
            None,
        );
    }
    if cfg.n_paths == 0 {
        report.push("n_paths", "n_paths must be >= 1".to_string(), None);
    }

    let model = &cfg.model;
    let n = model.dim();
    if model.c.len() != n || model.d.len() != n || model.d.iter().any(|r| r.len() != n) {
        report.push(
            "dimensions",
            format!(
                "B ({}), C ({}), D ({}x?) must share dimension n",
                n,
                model.c.len(),
                model.d.len()
            ),
            None,
        );
        return report; // remaining checks need consistent shapes
    }

    // coefficient caps
    let cap = model.coeff_cap;
    let mut check_cap = |name: &str, vals: &mut dyn Iterator<Item = f64>| {
        let worst = vals.map(f64::abs).fold(0.0, f64::max);
        if worst > cap {
            report.push(
                "coefficient_cap",
                format!("|{name}| = {worst} exceeds cap {cap}"),
                None,
            );
        }
    };
    check_cap("B", &mut model.b.iter().cloned());
    check_cap("C", &mut model.c.iter().cloned());
    check_cap("D", &mut model.d.iter().flatten().cloned());

    // nondegeneracy at every grid node (D is constant in time, but this is the
    // contract the downstream solvers rely on, so evaluate it on the grid)
    let d = DMatrix::from_fn(n, n, |i, j| model.d[i][j]);
    let dd_t = &d * d.transpose();
    let min_eig = min_symmetric_eigenvalue(&dd_t);
    if min_eig < model.delta {
        for k in 0..cfg.grid.n_nodes() {
            report.push(
                "nondegeneracy",
                format!(
                    "min eig(D D') = {min_eig:.6e} < delta = {:.3e}",
                    model.delta
                ),
                Some(format!("t_{k}")),
            );
        }
    }

    match model.tier {
        Tier::Deterministic => match &model.a {
            None => {
                report.push(
                    "drift_missing",
                    "deterministic tier requires the field a".into(),
                    None,
                );
            }
            Some(a) => {
                for k in 0..cfg.grid.n_nodes() {
                    let t = cfg.grid.t(k);
                    let v = a.eval(t);
                    if !v.is_finite() {
                        report.push(
                            "drift_finite",
                            format!("A({t}) is not finite"),
                            Some(format!("t_{k}")),
                        );
                    }
                }
            }
        },
        Tier::MarkovFactor | Tier::PathDependent => {
            match &model.factor {
                None => report.push(
                    "factor_missing",
                    "stochastic tiers require factor dynamics".into(),
                    None,
                ),
                Some(fp) => {
                    if !(fp.kappa_f.is_finite() && fp.kappa_f > 0.0) {
                        report.push(
                            "factor_mean_reversion",
                            format!("kappa_f must be > 0, got {}", fp.kappa_f),
                            None,
                        );
                    }
                    if fp.v_f.len() != n {
                        report.push(
                            "dimensions",
                            format!("v_f has dim {}, expected {}", fp.v_f.len(), n),
                            None,
                        );
                    }
                    if fp.v_f.iter().any(|v| !v.is_finite() || v.abs() > cap) {
                        report.push(
                            "coefficient_cap",
                            "factor volatility v_f exceeds the coefficient cap".into(),
                            None,
                        );
                    }
                }
            }
            if model.tier == Tier::MarkovFactor && model.link.is_some() {
                report.push(
                    "link_unused",
                    "markov_factor tier reads A directly from the factor; drop the link".into(),
                    None,
                );
            }
        }
    }

    if let Some(jump) = &cfg.jump {
        if !(jump.intensity > 0.0 && jump.intensity.is_finite()) {
            report.push(
                "jump_intensity",
                format!("lambda must be > 0, got {}", jump.intensity),
                None,
            );
        }
        if !(jump.premium_loading >= 0.0 && jump.premium_loading.is_finite()) {
            report.push(
                "premium_loading",
                format!("b must be >= 0 and finite, got {}", jump.premium_loading),
                None,
            );
        }
        if jump.drift_offset != 0.0 {
            report.push(
                "drift_offset",
                "the reinsurance model is normalized to a = 0".into(),
                None,
            );
        }
        if jump.intensity * cfg.grid.horizon > MAX_JUMP_MEAN {
            report.push(
                "jump_mean_cap",
                format!(
                    "lambda * T = {} exceeds {MAX_JUMP_MEAN}",
                    jump.intensity * cfg.grid.horizon
                ),
                None,
            );
        }
        let ym = jump.claims.y_max();
        if !ym.is_finite() {
            report.push(
                "claim_support_unbounded",
                "claim support unbounded: psi_hat = b y / (lambda m2) must be bounded".into(),
                None,
            );
        }
        match &jump.claims {
            ClaimDistribution::Discrete { atoms } => {
                if atoms.is_empty() {
                    report.push(
                        "claims_empty",
                        "discrete claim distribution has no atoms".into(),
                        None,
                    );
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 {
                    report.push(
                        "claims_normalized",
                        format!("atom probabilities sum to {total}, expected 1"),
                        None,
                    );
                }
                for (i, (y, p)) in atoms.iter().enumerate() {
                    if *y < 0.0 || !y.is_finite() {
                        report.push(
                            "claims_support",
                            format!("atom {i} has negative size {y}"),
                            None,
                        );
                    }
                    if *p <= 0.0 {
                        report.push(
                            "claims_support",
                            format!("atom {i} has weight {p} <= 0"),
                            None,
                        );
                    }
                }
            }
            ClaimDistribution::LognormalTrunc { sigma, .. } => {
                if *sigma <= 0.0 {
                    report.push(
                        "claims_support",
                        format!("sigma must be > 0, got {sigma}"),
                        None,
                    );
                }
                let acc = jump.claims.acceptance_probability();
                if acc < 1e-3 && ym.is_finite() {
                    report.push(
                        "truncation_mass",
                        format!(
                            "truncation keeps only {acc:.2e} of the mass; sampling would stall"
                        ),
                        None,
                    );
                }
            }
        }
        let m2 = jump.m2();
        if !(m2 > 0.0 && m2.is_finite()) {
            report.push(
                "claims_m2",
                format!("m2 = {m2} must be positive and finite"),
                None,
            );
        }
    }

    if matches!(model.tier, Tier::MarkovFactor | Tier::PathDependent) {
        let degree = cfg.basis().degree;
        if degree == 0 || degree > 10 {
            report.push(
                "basis_degree",
                format!("regression basis degree {degree} outside 1..=10"),
                None,
            );
        }
    }

    report
}

/// Interest-rate specification of the portfolio application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateSpec {
    Deterministic {
        rate: TimeFn,
    },
    Vasicek {
        factor: FactorParams,
    },
    PathDependent {
        factor: FactorParams,
        link: DriftLink,
    },
}

/// Map a portfolio market (r, mu, sigma) onto the generic coefficient block:
/// (A, B, C, D) := (r, mu, 0, sigma). The wealth dynamics
/// dX = (r X + pi' mu) dt + pi' sigma dW are the C = 0 case of the generic
/// state equation.
pub fn portfolio_to_generic(
    r: &RateSpec,
    mu: &[f64],
    sigma: &[Vec<f64>],
    delta: f64,
) -> Result<CoefficientModel> {
    let n = mu.len();
    if sigma.len() != n || sigma.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "mu has dim {n} but sigma is not {n}x{n}"
        )));
    }
    let s = DMatrix::from_fn(n, n, |i, j| sigma[i][j]);
    let min_eig = min_symmetric_eigenvalue(&(&s * s.transpose()));
    if min_eig < delta {
        return Err(Error::Degenerate(format!(
            "sigma sigma' has min eigenvalue {min_eig:.3e} < delta = {delta:.3e}"
        )));
    }
    let (tier, a, factor, link) = match r {
        RateSpec::Deterministic { rate } => (Tier::Deterministic, Some(rate.clone()), None, None),
        RateSpec::Vasicek { factor } => (Tier::MarkovFactor, None, Some(factor.clone()), None),
        RateSpec::PathDependent { factor, link } => (
            Tier::PathDependent,
            None,
            Some(factor.clone()),
            Some(link.clone()),
        ),
    };
    Ok(CoefficientModel {
        tier,
        a,
        b: mu.to_vec(),
        c: vec![0.0; n],
        d: sigma.to_vec(),
        factor,
        link,
        delta,
        coeff_cap: DEFAULT_COEFF_CAP,
        a_max: DEFAULT_A_MAX,
    })
}

/// Recover (r, mu, sigma) from a portfolio-shaped generic model (C must be 0).
pub fn generic_to_portfolio(
    model: &CoefficientModel,
) -> Result<(RateSpec, Vec<f64>, Vec<Vec<f64>>)> {
    if model.c.iter().any(|&c| c != 0.0) {
        return Err(Error::DomainError(
            "model is not portfolio-shaped: C is nonzero".into(),
        ));
    }
    let r = match model.tier {
        Tier::Deterministic => RateSpec::Deterministic {
            rate: model
                .a
                .clone()
                .ok_or_else(|| Error::DomainError("deterministic model lacks A".into()))?,
        },
        Tier::MarkovFactor => RateSpec::Vasicek {
            factor: model
                .factor
                .clone()
                .ok_or_else(|| Error::DomainError("markov model lacks factor".into()))?,
        },
        Tier::PathDependent => RateSpec::PathDependent {
            factor: model
                .factor
                .clone()
                .ok_or_else(|| Error::DomainError("path-dependent model lacks factor".into()))?,
            link: model.link.clone().unwrap_or(DriftLink::Identity),
        },
    };
    Ok((r, model.b.clone(), model.d.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_scenario(d: f64, delta: f64) -> ScenarioConfig {
        ScenarioConfig {
            x: 1.0,
            theta: 1.0,
            grid: TimeGrid::new(1.0, 4).unwrap(),
            model: CoefficientModel {
                delta,
                ..CoefficientModel::deterministic(
                    TimeFn::constant(0.0),
                    vec![0.0],
                    vec![0.0],
                    vec![vec![d]],
                )
            },
            jump: None,
            n_paths: 8,
            seed: 1,
            basis: None,
        }
    }

    #[test]
    fn nondegenerate_scalar_model_passes() {
        // D = [[0.2]] gives D D' = 0.04 >= 0.01
        let report = validate_scenario(&scalar_scenario(0.2, 0.01));
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn degenerate_scalar_model_fails_nondegeneracy() {
        let report = validate_scenario(&scalar_scenario(0.0, 0.01));
        assert!(!report.is_valid());
        assert!(report.violations.iter().all(|v| v.code == "nondegeneracy"));
        assert!(report.violations[0].location.is_some());
    }

    #[test]
    fn markov_factor_scenario_validates_and_unbounded_claims_fail() {
        let mut cfg = scalar_scenario(0.2, 0.01);
        cfg.model.tier = Tier::MarkovFactor;
        cfg.model.a = None;
        cfg.model.factor = Some(FactorParams {
            kappa_f: 0.5,
            m_f: 0.03,
            v_f: vec![0.01],
            f_0: 0.03,
        });
        assert!(validate_scenario(&cfg).is_valid());

        cfg.jump = Some(JumpModel {
            intensity: 1.0,
            claims: ClaimDistribution::LognormalTrunc {
                mu: 0.0,
                sigma: 0.5,
                y_max: None,
            },
            premium_loading: 0.3,
            drift_offset: 0.0,
        });
        let report = validate_scenario(&cfg);
        let unbounded: Vec<_> = report
            .violations
            .iter()
            .filter(|v| v.code == "claim_support_unbounded")
            .collect();
        assert_eq!(unbounded.len(), 1);
    }

    #[test]
    fn portfolio_mapping_is_definitional() {
        let model = portfolio_to_generic(
            &RateSpec::Deterministic {
                rate: TimeFn::constant(0.03),
            },
            &[0.10],
            &[vec![0.20]],
            1e-4,
        )
        .unwrap();
        assert_eq!(model.a, Some(TimeFn::constant(0.03)));
        assert_eq!(model.b, vec![0.10]);
        assert_eq!(model.c, vec![0.0]);
        assert_eq!(model.d, vec![vec![0.20]]);
        let (r, mu, sigma) = generic_to_portfolio(&model).unwrap();
        assert_eq!(
            r,
            RateSpec::Deterministic {
                rate: TimeFn::constant(0.03)
            }
        );
        assert_eq!(mu, vec![0.10]);
        assert_eq!(sigma, vec![vec![0.20]]);
    }

    #[test]
    fn portfolio_mapping_zero_drift() {
        let model = portfolio_to_generic(
            &RateSpec::Deterministic {
                rate: TimeFn::constant(0.0),
            },
            &[0.0, 0.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            1e-4,
        )
        .unwrap();
        assert_eq!(model.b, vec![0.0, 0.0]);
        assert_eq!(model.a, Some(TimeFn::constant(0.0)));
    }

    #[test]
    fn portfolio_mapping_vasicek_rate_validates() {
        let model = portfolio_to_generic(
            &RateSpec::Vasicek {
                factor: FactorParams {
                    kappa_f: 0.8,
                    m_f: 0.04,
                    v_f: vec![0.015, 0.0],
                    f_0: 0.03,
                },
            },
            &[0.04, 0.03],
            &[vec![0.2, 0.0], vec![0.05, 0.25]],
            1e-4,
        )
        .unwrap();
        assert_eq!(model.tier, Tier::MarkovFactor);
        let cfg = ScenarioConfig {
            x: 1.0,
            theta: 1.0,
            grid: TimeGrid::new(1.0, 8).unwrap(),
            model,
            jump: None,
            n_paths: 16,
            seed: 3,
            basis: Some(BasisSpec { degree: 3 }),
        };
        let report = validate_scenario(&cfg);
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn portfolio_mapping_rejects_degenerate_sigma() {
        let err = portfolio_to_generic(
            &RateSpec::Deterministic {
                rate: TimeFn::constant(0.0),
            },
            &[0.1, 0.1],
            &[vec![0.2, 0.0], vec![0.2, 0.0]],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        let err = portfolio_to_generic(
            &RateSpec::Deterministic {
                rate: TimeFn::constant(0.0),
            },
            &[0.1],
            &[vec![0.2, 0.0]],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn missing_theta_reports_json_pointer() {
        let text = r#"{"x": 1.0, "grid": {"horizon": 1.0, "steps": 4},
            "model": {"tier": "deterministic", "a": {"kind": "constant", "value": 0.0},
                      "b": [0.0], "c": [0.0], "d": [[0.2]]},
            "n_paths": 8, "seed": 1}"#;
        match ScenarioConfig::from_json_str(text).unwrap_err() {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/theta"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = scalar_scenario(0.2, 1e-4);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ScenarioConfig::from_json_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn claim_distribution_spec_format() {
        let d: ClaimDistribution =
            serde_json::from_str(r#"{"kind":"discrete","atoms":[[1.0,0.5],[2.0,0.5]]}"#).unwrap();
        assert!((d.m1() - 1.5).abs() < 1e-15);
        assert!((d.m2() - 2.5).abs() < 1e-15);
        let l: ClaimDistribution =
            serde_json::from_str(r#"{"kind":"lognormal_trunc","mu":-0.5,"sigma":0.5,"y_max":3.0}"#)
                .unwrap();
        assert!(l.m1() > 0.0 && l.m2() > l.m1() * l.m1());
    }

    #[test]
    fn truncated_lognormal_moments_match_numerical_integral() {
        let (mu, sigma, ym) = (-0.5, 0.5, 3.0);
        let claims = ClaimDistribution::LognormalTrunc {
            mu,
            sigma,
            y_max: Some(ym),
        };
        // direct quadrature of the truncated density as the independent route
        let density = |y: f64| {
            let z = (y.ln() - mu) / sigma;
            (-0.5 * z * z).exp() / (y * sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mass = crate::quad::integrate(density, 1e-9, ym, 1e-11).unwrap();
        let m1 = crate::quad::integrate(|y| y * density(y), 1e-9, ym, 1e-11).unwrap() / mass;
        let m2 = crate::quad::integrate(|y| y * y * density(y), 1e-9, ym, 1e-11).unwrap() / mass;
        assert!((claims.m1() - m1).abs() < 1e-7, "{} vs {m1}", claims.m1());
        assert!((claims.m2() - m2).abs() < 1e-7, "{} vs {m2}", claims.m2());
    }

    proptest! {
        #[test]
        fn claim_moments_satisfy_cauchy_schwarz(
            atoms in proptest::collection::vec((0.01f64..10.0, 0.01f64..1.0), 1..6)
        ) {
            let claims = ClaimDistribution::Discrete { atoms };
            prop_assert!(claims.m1().powi(2) <= claims.m2() * (1.0 + 1e-12));
        }

        #[test]
        fn lognormal_moments_satisfy_cauchy_schwarz(
            mu in -1.0f64..1.0, sigma in 0.05f64..1.0, ym in 0.5f64..20.0
        ) {
            let claims = ClaimDistribution::LognormalTrunc { mu, sigma, y_max: Some(ym) };
            // validation rejects truncations keeping less than 1e-3 of the mass
            prop_assume!(claims.acceptance_probability() >= 1e-3);
            prop_assert!(claims.m1().powi(2) <= claims.m2() * (1.0 + 1e-12));
        }

        #[test]
        fn validation_matches_the_eigenvalue_criterion(
            d00 in -0.6f64..0.6, d01 in -0.3f64..0.3,
            d10 in -0.3f64..0.3, d11 in -0.6f64..0.6,
            delta in 1e-6f64..0.05,
        ) {
            let model = CoefficientModel {
                delta,
                ..CoefficientModel::deterministic(
                    TimeFn::constant(0.0),
                    vec![0.0, 0.0],
                    vec![0.0, 0.0],
                    vec![vec![d00, d01], vec![d10, d11]],
                )
            };
            let cfg = ScenarioConfig {
                x: 1.0,
                theta: 1.0,
                grid: TimeGrid::new(1.0, 4).unwrap(),
                model,
                jump: None,
                n_paths: 4,
                seed: 1,
                basis: None,
            };
            let d = nalgebra::DMatrix::from_row_slice(2, 2, &[d00, d01, d10, d11]);
            let min_eig = min_symmetric_eigenvalue(&(&d * d.transpose()));
            let report = validate_scenario(&cfg);
            let flagged = report.violations.iter().any(|v| v.code == "nondegeneracy");
            prop_assert_eq!(flagged, min_eig < delta);
        }

        #[test]
        fn portfolio_round_trip_is_exact(
            r in -0.05f64..0.1,
            mu1 in -0.5f64..0.5,
            mu2 in -0.5f64..0.5,
            s_diag in 0.1f64..0.9,
        ) {
            let sigma = vec![vec![s_diag, 0.0], vec![0.1, s_diag]];
            let spec = RateSpec::Deterministic { rate: TimeFn::constant(r) };
            let model = portfolio_to_generic(&spec, &[mu1, mu2], &sigma, 1e-6).unwrap();
            let (r2, mu2v, sigma2) = generic_to_portfolio(&model).unwrap();
            prop_assert_eq!(r2, spec);
            prop_assert_eq!(mu2v, vec![mu1, mu2]);
            prop_assert_eq!(sigma2, sigma);
        }
    }
}
