//! Solvers for the two backward SDEs behind the robust control problem.
//!
//! The pair (h, L) solves the backward stochastic Riccati equation
//!
//! ```text
//! dh = [ (-A + (D^{-1}B)'C) h + (D^{-1}B)'L + L'L/h ] dt + L' dW,   h_T = 1,
//! ```
//!
//! and the pair (Y, Z) the linear equation
//!
//! ```text
//! dY = [ -|phi|^2 Y + 2 phi' Z ] dt + Z' dW,   Y_T = 1,  phi := D^{-1}B + h^{-1}L.
//! ```
//!
//! Neither is iterated numerically. Both are computed through their
//! representations under a measure change:
//!
//! * `h_t = 1 / E-bar_t[ exp( int_t^T (-A + kappa_bar) ds ) ]` with
//!   `kappa_bar = (D^{-1}B)'C`, where the bar-measure shifts the Brownian
//!   drift by `-D^{-1}B`;
//! * `Y_t = E_t[ exp( -2 int_t^T phi' dW - int_t^T |phi|^2 ds ) ]`.
//!
//! The conditional expectations are evaluated by (a) quadrature when the
//! integrand is deterministic in time, (b) closed-form affine exponentials
//! when the drift coefficient is an Ornstein-Uhlenbeck factor, (c) per-node
//! least-squares regression on the factor value otherwise. The reinsurance
//! variant adds a constant `b^2 / (lambda m2)` to the Y exponent; h is
//! unchanged because the coefficients stay adapted to the Brownian filtration.

use rayon::prelude::*;

use crate::affine::OuLaplace;
use crate::bundle::PathBundle;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{
    BasisSpec, CoefficientModel, FactorStepper, JumpModel, ModelConstants, ScenarioConfig, Tier,
};
use crate::quad::suffix_integrals;
use crate::regression::{Fit, FitAccumulator, Moments, Polynomial, DEFAULT_CONDITION_CAP};
use crate::rng::{self, Stream};

pub const QUADRATURE_TOL: f64 = 1e-10;
pub const DEFAULT_H_FLOOR: f64 = 1e-6;
/// Relative step (in scaled units) of the central difference recovering L
/// from the fitted h surface.
const FD_REL_STEP: f64 = 1e-3;
const NESTED_OUTER: usize = 64;
const NESTED_INNER: usize = 256;

/// Representation of (h, L) on the grid.
#[derive(Debug, Clone)]
pub enum HPart {
    /// Deterministic tier: h depends on time only and L = 0.
    Deterministic { h: Vec<f64> },
    /// Affine backend: h(k, f) = exp(c0_k + c1_k f), L = c1_k h v_f.
    Affine {
        c0: Vec<f64>,
        c1: Vec<f64>,
        v_f: Vec<f64>,
    },
    /// Regression backend: h(k, f) = 1 / m_k(f); L from a central difference
    /// of the h surface times the factor loading.
    Regression { fits: Vec<Fit>, v_f: Vec<f64> },
}

/// Representation of (Y, Z) on the grid.
#[derive(Debug, Clone)]
pub enum YPart {
    /// Deterministic phi: Y depends on time only and Z = 0.
    Deterministic { y: Vec<f64> },
    /// Regression backend: Y(k, f) = p_k(f); Z per component with a 3-node
    /// running-mean smoothing applied at evaluation time.
    Regression {
        fits: Vec<Fit>,
        z_fits: Vec<Vec<Polynomial>>,
    },
}

/// Solver diagnostics carried by the solution.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub min_h: f64,
    pub min_y: f64,
    /// Worst R^2 across grid nodes, regression backends only.
    pub h_r2_min: Option<f64>,
    pub y_r2_min: Option<f64>,
    /// Standard error of h and Y at (t_0, f_0), regression backends only.
    pub h_se0: Option<f64>,
    pub y_se0: Option<f64>,
    /// Worst slack of the Y >= 1 - 3 se gate (negative = violated).
    pub y_floor_slack: Option<f64>,
    /// Inner samples spent on the nested Monte Carlo cross-check.
    pub nested_inner_samples: usize,
    /// Worst relative gap between the fitted surface and the nested estimate.
    pub nested_max_rel_gap: Option<f64>,
    /// Sample moments of the stochastic exponential of -h^{-1}L (explosion
    /// monitor for the measure-change machinery; reported only).
    pub exp_moment_p2: Option<f64>,
    pub exp_moment_p4: Option<f64>,
    pub cap_hits: u64,
}

/// Solution pair of h-part diagnostics.
#[derive(Debug, Clone)]
pub struct HSolve {
    pub part: HPart,
    pub min_h: f64,
    pub r2_min: Option<f64>,
    pub se0: Option<f64>,
    pub nested_inner_samples: usize,
    pub nested_max_rel_gap: Option<f64>,
    pub exp_moment_p2: Option<f64>,
    pub exp_moment_p4: Option<f64>,
    pub cap_hits: u64,
}

#[derive(Debug, Clone)]
pub struct YSolve {
    pub part: YPart,
    pub min_y: f64,
    pub r2_min: Option<f64>,
    pub se0: Option<f64>,
    pub y_floor_slack: Option<f64>,
    /// Constant added to |phi|^2 in the exponent (reinsurance term).
    pub jump_rate: f64,
}

/// Grid-valued solution of both BSDEs, evaluable pointwise at (node, factor).
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub tier: Tier,
    pub dim: usize,
    pub h_part: HPart,
    pub y_part: YPart,
    /// beta = D^{-1} B, cached for phi evaluations.
    pub d_inv_b: Vec<f64>,
    /// Initial factor value (f_0) or NaN in the deterministic tier.
    pub f0: f64,
    pub h_floor: f64,
    pub y_jump_rate: f64,
    pub diag: SolveDiagnostics,
}

impl BsdeSolution {
    #[inline]
    pub fn h_at(&self, k: usize, f: f64) -> f64 {
        match &self.h_part {
            HPart::Deterministic { h } => h[k],
            HPart::Affine { c0, c1, .. } => (c0[k] + c1[k] * f).exp(),
            HPart::Regression { fits, .. } => recip(fits[k].poly.eval(f)),
        }
    }

    #[inline]
    pub fn y_at(&self, k: usize, f: f64) -> f64 {
        match &self.y_part {
            YPart::Deterministic { y } => y[k],
            YPart::Regression { fits, .. } => fits[k].poly.eval(f),
        }
    }

    /// L(k, f) written into `out`.
    pub fn l_into(&self, k: usize, f: f64, out: &mut [f64]) {
        match &self.h_part {
            HPart::Deterministic { .. } => out.fill(0.0),
            HPart::Affine { c0, c1, v_f } => {
                let h = (c0[k] + c1[k] * f).exp();
                for (o, v) in out.iter_mut().zip(v_f) {
                    *o = c1[k] * h * v;
                }
            }
            HPart::Regression { fits, v_f } => {
                let dh = self.h_fd_slope(fits, k, f);
                for (o, v) in out.iter_mut().zip(v_f) {
                    *o = dh * v;
                }
            }
        }
    }

    /// h^{-1} L (k, f) written into `out`.
    pub fn hinv_l_into(&self, k: usize, f: f64, out: &mut [f64]) {
        match &self.h_part {
            HPart::Deterministic { .. } => out.fill(0.0),
            HPart::Affine { c1, v_f, .. } => {
                for (o, v) in out.iter_mut().zip(v_f) {
                    *o = c1[k] * v;
                }
            }
            HPart::Regression { fits, v_f } => {
                let h = recip(fits[k].poly.eval(f));
                let dh = self.h_fd_slope(fits, k, f);
                for (o, v) in out.iter_mut().zip(v_f) {
                    *o = dh / h * v;
                }
            }
        }
    }

    /// phi(k, f) = D^{-1}B + h^{-1}L written into `out`.
    #[inline]
    pub fn phi_into(&self, k: usize, f: f64, out: &mut [f64]) {
        self.hinv_l_into(k, f, out);
        for (o, b) in out.iter_mut().zip(&self.d_inv_b) {
            *o += b;
        }
    }

    /// Z(k, f) written into `out`.
    pub fn z_into(&self, k: usize, f: f64, out: &mut [f64]) {
        match &self.y_part {
            YPart::Deterministic { .. } => out.fill(0.0),
            YPart::Regression { z_fits, .. } => {
                if k >= z_fits.len() {
                    out.fill(0.0);
                    return;
                }
                // 3-node running mean across grid nodes
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(z_fits.len() - 1);
                let m = (hi - lo + 1) as f64;
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for fits in z_fits.iter().take(hi + 1).skip(lo) {
                        acc += fits[j].eval(f);
                    }
                    *o = acc / m;
                }
            }
        }
    }

    fn h_fd_slope(&self, fits: &[Fit], k: usize, f: f64) -> f64 {
        let eps = FD_REL_STEP * fits[k].poly.scale;
        let up = recip(fits[k].poly.eval(f + eps));
        let dn = recip(fits[k].poly.eval(f - eps));
        (up - dn) / (2.0 * eps)
    }

    pub fn h0(&self) -> f64 {
        self.h_at(0, self.f0)
    }

    pub fn y0(&self) -> f64 {
        self.y_at(0, self.f0)
    }

    /// phi as time-grid vectors when it is deterministic (deterministic tier
    /// and the affine backend), `None` in regression tiers.
    pub fn deterministic_phi(&self) -> Option<Vec<Vec<f64>>> {
        match &self.h_part {
            HPart::Deterministic { h } => Some(vec![self.d_inv_b.clone(); h.len()]),
            HPart::Affine { c1, v_f, .. } => Some(
                c1.iter()
                    .map(|&c| {
                        self.d_inv_b
                            .iter()
                            .zip(v_f)
                            .map(|(b, v)| b + c * v)
                            .collect()
                    })
                    .collect(),
            ),
            HPart::Regression { .. } => None,
        }
    }

    /// Solve both BSDEs for a scenario. Regression tiers need the bundle.
    pub fn solve(cfg: &ScenarioConfig, bundle: Option<&PathBundle>) -> Result<BsdeSolution> {
        let consts = cfg.model.constants()?;
        let h = match cfg.model.tier {
            Tier::Deterministic => solve_h_deterministic(&cfg.model, &cfg.grid)?,
            Tier::MarkovFactor => {
                let b = bundle.ok_or_else(|| {
                    Error::DomainError("markov tier solve needs a path bundle".into())
                })?;
                solve_h_markov(
                    &cfg.model,
                    &cfg.grid,
                    b,
                    MarkovBackend::Affine,
                    &cfg.basis(),
                )?
            }
            Tier::PathDependent => {
                let b = bundle.ok_or_else(|| {
                    Error::DomainError("path-dependent tier solve needs a path bundle".into())
                })?;
                solve_h_regression(&cfg.model, &cfg.grid, b, &cfg.basis())?
            }
        };
        let y = match &cfg.jump {
            None => solve_y(&cfg.model, &cfg.grid, &h, bundle, &cfg.basis())?,
            Some(j) => solve_y_reinsurance(&cfg.model, j, &cfg.grid, &h, bundle, &cfg.basis())?,
        };
        assemble(cfg, &consts, h, y)
    }
}

#[inline]
fn recip(m: f64) -> f64 {
    1.0 / m.max(1e-12)
}

/// Bundle an h-solve and a y-solve into one solution, enforcing the h floor.
pub fn assemble(
    cfg: &ScenarioConfig,
    consts: &ModelConstants,
    h: HSolve,
    y: YSolve,
) -> Result<BsdeSolution> {
    if h.min_h < DEFAULT_H_FLOOR {
        return Err(Error::FloorViolation {
            min_h: h.min_h,
            floor: DEFAULT_H_FLOOR,
        });
    }
    let diag = SolveDiagnostics {
        min_h: h.min_h,
        min_y: y.min_y,
        h_r2_min: h.r2_min,
        y_r2_min: y.r2_min,
        h_se0: h.se0,
        y_se0: y.se0,
        y_floor_slack: y.y_floor_slack,
        nested_inner_samples: h.nested_inner_samples,
        nested_max_rel_gap: h.nested_max_rel_gap,
        exp_moment_p2: h.exp_moment_p2,
        exp_moment_p4: h.exp_moment_p4,
        cap_hits: h.cap_hits,
    };
    Ok(BsdeSolution {
        grid: cfg.grid,
        tier: cfg.model.tier,
        dim: cfg.model.dim(),
        h_part: h.part,
        y_part: y.part,
        d_inv_b: consts.d_inv_b.iter().cloned().collect(),
        f0: cfg.model.factor.as_ref().map(|f| f.f_0).unwrap_or(f64::NAN),
        h_floor: DEFAULT_H_FLOOR,
        y_jump_rate: y.jump_rate,
        diag,
    })
}

/// Deterministic tier: with L = 0 the Riccati equation collapses to the ODE
/// dh = (-A + kappa_bar) h dt, h_T = 1, so
/// h_k = exp( int_{t_k}^T (A(s) - kappa_bar) ds ) by quadrature.
pub fn solve_h_deterministic(model: &CoefficientModel, grid: &TimeGrid) -> Result<HSolve> {
    if model.tier != Tier::Deterministic {
        return Err(Error::DomainError(
            "solve_h_deterministic requires the deterministic tier".into(),
        ));
    }
    let consts = model.constants()?;
    let a = model
        .a
        .clone()
        .ok_or_else(|| Error::DomainError("deterministic tier lacks the drift A".into()))?;
    let kappa_bar = consts.kappa_bar;
    let integrals = suffix_integrals(|s| a.eval(s) - kappa_bar, grid, QUADRATURE_TOL)?;
    let h: Vec<f64> = integrals.iter().map(|i| i.exp()).collect();
    let min_h = h.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(HSolve {
        part: HPart::Deterministic { h },
        min_h,
        r2_min: None,
        se0: None,
        nested_inner_samples: 0,
        nested_max_rel_gap: None,
        exp_moment_p2: None,
        exp_moment_p4: None,
        cap_hits: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkovBackend {
    /// Closed-form affine exponential (OU factor, constant B, C, D).
    Affine,
    /// Least-squares regression of the terminal exponent functional.
    Regression,
}

/// Markov-factor tier. The affine backend writes
/// h(t, f) = exp( -kappa_bar (T-t) - a(T-t) - b(T-t) f ) from the OU Laplace
/// functional under the bar measure (factor long-run mean shifted by
/// -v_f' D^{-1}B / kappa_f); the regression backend estimates the same
/// conditional expectation by least squares and must agree with it.
pub fn solve_h_markov(
    model: &CoefficientModel,
    grid: &TimeGrid,
    bundle: &PathBundle,
    backend: MarkovBackend,
    basis: &BasisSpec,
) -> Result<HSolve> {
    if model.tier != Tier::MarkovFactor {
        return Err(Error::DomainError(
            "solve_h_markov requires the markov_factor tier".into(),
        ));
    }
    match backend {
        MarkovBackend::Regression => solve_h_regression(model, grid, bundle, basis),
        MarkovBackend::Affine => {
            let consts = model.constants()?;
            let fp = model
                .factor
                .as_ref()
                .ok_or_else(|| Error::DomainError("markov tier lacks factor".into()))?;
            let beta_dot_v: f64 = fp
                .v_f
                .iter()
                .zip(consts.d_inv_b.iter())
                .map(|(v, b)| v * b)
                .sum();
            let shifted_mean = fp.m_f - beta_dot_v / fp.kappa_f;
            let vol2: f64 = fp.v_f.iter().map(|v| v * v).sum();
            let laplace = OuLaplace::new(fp.kappa_f, shifted_mean, vol2)?;
            let nodes = grid.n_nodes();
            let mut c0 = Vec::with_capacity(nodes);
            let mut c1 = Vec::with_capacity(nodes);
            for k in 0..nodes {
                let tau = grid.horizon - grid.t(k);
                c0.push(-consts.kappa_bar * tau - laplace.a(tau));
                c1.push(-laplace.b(tau));
            }
            let part = HPart::Affine {
                c0,
                c1,
                v_f: fp.v_f.clone(),
            };
            // min h over the simulated factor ensemble under the real measure
            let stepper = FactorStepper::new(fp, grid.dt(), None);
            let sample = bundle.n_paths.min(10_000);
            let mut min_h = f64::INFINITY;
            let mut dw = vec![0.0; bundle.dim];
            for p in 0..sample {
                let mut f = fp.f_0;
                for k in 0..grid.n_nodes() {
                    let h = (match &part {
                        HPart::Affine { c0, c1, .. } => c0[k] + c1[k] * f,
                        _ => unreachable!(),
                    })
                    .exp();
                    min_h = min_h.min(h);
                    if k < grid.steps {
                        bundle.delta_w(k, p, &mut dw);
                        f = stepper.step(f, &dw);
                    }
                }
            }
            Ok(HSolve {
                part,
                min_h,
                r2_min: None,
                se0: None,
                nested_inner_samples: 0,
                nested_max_rel_gap: None,
                exp_moment_p2: None,
                exp_moment_p4: None,
                cap_hits: 0,
            })
        }
    }
}

struct NodeAccumulators {
    moments: Vec<Moments>,
}

/// Regression backend shared by the markov_factor cross-check and the
/// path-dependent tier. Estimates m_k(f) = E-bar[ G_k | f_k = f ] with
/// G_k = exp( int_{t_k}^T (-A + kappa_bar) ds ), then h = 1/m.
pub fn solve_h_regression(
    model: &CoefficientModel,
    grid: &TimeGrid,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<HSolve> {
    let consts = model.constants()?;
    let fp = model
        .factor
        .as_ref()
        .ok_or_else(|| Error::DomainError("regression solve needs factor dynamics".into()))?;
    let stepper = FactorStepper::new(fp, grid.dt(), Some(consts.d_inv_b.as_slice()));
    let nodes = grid.n_nodes();
    let steps = grid.steps;
    let dt = grid.dt();
    let kappa_bar = consts.kappa_bar;
    let n_paths = bundle.n_paths;
    let dim = bundle.dim;

    // pass 1: factor location/spread per node under the bar measure
    let chunk = bundle.chunk_size;
    let n_chunks = n_paths.div_ceil(chunk);
    let partials: Vec<NodeAccumulators> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = NodeAccumulators {
                moments: vec![Moments::default(); nodes],
            };
            let mut dw = vec![0.0; dim];
            for p in (c * chunk)..((c + 1) * chunk).min(n_paths) {
                let mut f = fp.f_0;
                for k in 0..nodes {
                    acc.moments[k].add(f);
                    if k < steps {
                        bundle.delta_w(k, p, &mut dw);
                        f = stepper.step(f, &dw);
                    }
                }
            }
            acc
        })
        .collect();
    let mut moments = vec![Moments::default(); nodes];
    for part in &partials {
        for (m, p) in moments.iter_mut().zip(&part.moments) {
            m.merge(p);
        }
    }

    // pass 2: accumulate the per-node regressions of the tail functional
    let make_accs = || -> Vec<FitAccumulator> {
        (0..nodes)
            .map(|k| FitAccumulator::new(moments[k].mean(), moments[k].std(), basis.degree))
            .collect()
    };
    let results: Vec<(Vec<FitAccumulator>, u64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut accs = make_accs();
            let mut dw = vec![0.0; dim];
            let mut fs = vec![0.0; nodes];
            let mut prefix = vec![0.0; nodes];
            let mut cap_hits = 0u64;
            for p in (c * chunk)..((c + 1) * chunk).min(n_paths) {
                let mut f = fp.f_0;
                let mut integral = 0.0;
                let (mut g_prev, capped) = model.drift_at(0.0, f);
                cap_hits += capped as u64;
                g_prev = -g_prev + kappa_bar;
                fs[0] = f;
                prefix[0] = 0.0;
                for k in 0..steps {
                    bundle.delta_w(k, p, &mut dw);
                    f = stepper.step(f, &dw);
                    let (a_next, capped) = model.drift_at(grid.t(k + 1), f);
                    cap_hits += capped as u64;
                    let g_next = -a_next + kappa_bar;
                    integral += 0.5 * (g_prev + g_next) * dt;
                    g_prev = g_next;
                    fs[k + 1] = f;
                    prefix[k + 1] = integral;
                }
                let total = prefix[steps];
                for k in 0..nodes {
                    accs[k].add(fs[k], (total - prefix[k]).exp());
                }
            }
            (accs, cap_hits)
        })
        .collect();
    let mut accs = make_accs();
    let mut cap_hits = 0u64;
    for (part, hits) in &results {
        cap_hits += hits;
        for (a, p) in accs.iter_mut().zip(part) {
            a.merge(p);
        }
    }
    let mut fits: Vec<Fit> = Vec::with_capacity(nodes);
    for (k, acc) in accs.into_iter().enumerate() {
        if k == steps {
            // terminal functional is identically 1
            fits.push(constant_fit(1.0, moments[k].count()));
        } else {
            fits.push(acc.finish(DEFAULT_CONDITION_CAP)?);
        }
    }

    // diagnostics: min h over the evaluated ensemble, se at (0, f0),
    // nested cross-check at mid grid, exponential-moment monitor
    let (min_h, r2_min) = {
        let mut min_h = f64::INFINITY;
        let mut r2 = f64::INFINITY;
        let mut dw = vec![0.0; dim];
        for (k, fit) in fits.iter().enumerate() {
            if k < steps {
                r2 = r2.min(fit.r2);
            }
            let spread = 4.0 * moments[k].std();
            for s in [-1.0, 0.0, 1.0] {
                min_h = min_h.min(recip(fit.poly.eval(moments[k].mean() + s * spread)));
            }
        }
        // also sweep a subsample of realized factor values
        let sample = n_paths.min(5_000);
        for p in 0..sample {
            let mut f = fp.f_0;
            for k in 0..nodes {
                min_h = min_h.min(recip(fits[k].poly.eval(f)));
                if k < steps {
                    bundle.delta_w(k, p, &mut dw);
                    f = stepper.step(f, &dw);
                }
            }
        }
        (min_h, if r2.is_finite() { Some(r2) } else { None })
    };
    let se0 = {
        let m0 = fits[0].poly.eval(fp.f_0);
        Some(fits[0].se_at(fp.f_0) / (m0 * m0))
    };

    let (nested_samples, nested_gap) =
        nested_cross_check(model, grid, bundle, &stepper, &fits, kappa_bar)?;
    let (p2, p4) = exp_moment_monitor(grid, bundle, &fits, fp);

    Ok(HSolve {
        part: HPart::Regression {
            fits,
            v_f: fp.v_f.clone(),
        },
        min_h,
        r2_min,
        se0,
        nested_inner_samples: nested_samples,
        nested_max_rel_gap: nested_gap,
        exp_moment_p2: Some(p2),
        exp_moment_p4: Some(p4),
        cap_hits,
    })
}

fn constant_fit(value: f64, n: usize) -> Fit {
    let mut acc = FitAccumulator::new(0.0, 0.0, 0);
    for _ in 0..n.max(2) {
        acc.add(0.0, value);
    }
    acc.finish(DEFAULT_CONDITION_CAP)
        .expect("constant fit cannot fail")
}

/// Re-estimate the conditional expectation at the mid node by brute-force
/// inner simulation from a few outer states, and compare with the fitted
/// surface. Reported as a diagnostic, not a gate.
fn nested_cross_check(
    model: &CoefficientModel,
    grid: &TimeGrid,
    bundle: &PathBundle,
    stepper: &FactorStepper,
    fits: &[Fit],
    kappa_bar: f64,
) -> Result<(usize, Option<f64>)> {
    let k_mid = grid.steps / 2;
    if k_mid == 0 || bundle.n_paths < NESTED_OUTER {
        return Ok((0, None));
    }
    let dt = grid.dt();
    let dim = bundle.dim;
    let mut dw = vec![0.0; dim];
    let mut max_gap: f64 = 0.0;
    for p in 0..NESTED_OUTER {
        // outer state at the mid node
        let mut f = model.factor.as_ref().unwrap().f_0;
        for k in 0..k_mid {
            bundle.delta_w(k, p, &mut dw);
            f = stepper.step(f, &dw);
        }
        // inner estimate of E-bar[ exp( int_{t_mid}^T (-A + kappa_bar) ) | f ]
        let mut sum = 0.0;
        for inner in 0..NESTED_INNER {
            let lane = (p * NESTED_INNER + inner) as u64;
            let mut fi = f;
            let mut integral = 0.0;
            let mut g_prev = -model.drift_at(grid.t(k_mid), fi).0 + kappa_bar;
            for k in k_mid..grid.steps {
                let mut noise = 0.0;
                for j in 0..dim {
                    let idx = (k * dim + j) as u64;
                    noise += stepper.v_f[j]
                        * rng::standard_normal(bundle.seed, Stream::Nested, lane, idx);
                }
                fi = stepper.step_with_noise(fi, noise * dt.sqrt());
                let g_next = -model.drift_at(grid.t(k + 1), fi).0 + kappa_bar;
                integral += 0.5 * (g_prev + g_next) * dt;
                g_prev = g_next;
            }
            sum += integral.exp();
        }
        let inner_mean = sum / NESTED_INNER as f64;
        let fitted = fits[k_mid].poly.eval(f);
        max_gap = max_gap.max(((fitted - inner_mean) / inner_mean).abs());
    }
    Ok((NESTED_OUTER * NESTED_INNER, Some(max_gap)))
}

/// Sample moments of E( int -h^{-1}L' dW )_T under the real measure: the
/// theory bounds every p-moment, so exploding values flag a scenario outside
/// the method's effective domain.
fn exp_moment_monitor(
    grid: &TimeGrid,
    bundle: &PathBundle,
    fits: &[Fit],
    fp: &crate::model::FactorParams,
) -> (f64, f64) {
    let stepper = FactorStepper::new(fp, grid.dt(), None);
    let dt = grid.dt();
    let dim = bundle.dim;
    let sample = bundle.n_paths.min(10_000);
    let mut dw = vec![0.0; dim];
    let mut hinv_l = vec![0.0; dim];
    let (mut s2, mut s4) = (0.0, 0.0);
    let eps_of = |k: usize| FD_REL_STEP * fits[k].poly.scale;
    for p in 0..sample {
        let mut f = fp.f_0;
        let mut log_e = 0.0;
        for k in 0..grid.steps {
            bundle.delta_w(k, p, &mut dw);
            let h = recip(fits[k].poly.eval(f));
            let eps = eps_of(k);
            let dh = (recip(fits[k].poly.eval(f + eps)) - recip(fits[k].poly.eval(f - eps)))
                / (2.0 * eps);
            let mut dot = 0.0;
            let mut norm2 = 0.0;
            for j in 0..dim {
                hinv_l[j] = dh / h * fp.v_f[j];
                dot += hinv_l[j] * dw[j];
                norm2 += hinv_l[j] * hinv_l[j];
            }
            log_e += -dot - 0.5 * norm2 * dt;
            f = stepper.step(f, &dw);
        }
        let e = log_e.exp();
        s2 += e * e;
        s4 += e * e * e * e;
    }
    (s2 / sample as f64, s4 / sample as f64)
}

/// Y solve. With deterministic phi (deterministic tier, affine backend) the
/// representation collapses to Y_k = exp( int_{t_k}^T |phi(s)|^2 ds ) with
/// Z = 0; otherwise the conditional expectation
/// Y_k = E[ exp( -2 int phi' dW - int |phi|^2 ds ) | f_k ]
/// is fitted per node, and Z is recovered by regressing one-step martingale
/// increments against the Brownian increments.
pub fn solve_y(
    model: &CoefficientModel,
    grid: &TimeGrid,
    h: &HSolve,
    bundle: Option<&PathBundle>,
    basis: &BasisSpec,
) -> Result<YSolve> {
    solve_y_with_rate(model, grid, h, bundle, basis, 0.0)
}

/// Reinsurance variant: the driver gains -b^2 Y / (lambda m2), so the
/// exponent gains the constant rate b^2 / (lambda m2). h is unchanged from
/// the no-jump case (coefficients are adapted to the Brownian filtration).
pub fn solve_y_reinsurance(
    model: &CoefficientModel,
    jump: &JumpModel,
    grid: &TimeGrid,
    h: &HSolve,
    bundle: Option<&PathBundle>,
    basis: &BasisSpec,
) -> Result<YSolve> {
    let m2 = jump.m2();
    if !(m2 > 0.0) {
        return Err(Error::DomainError("jump model has m2 <= 0".into()));
    }
    let rate = jump.premium_loading * jump.premium_loading / (jump.intensity * m2);
    solve_y_with_rate(model, grid, h, bundle, basis, rate)
}

fn solve_y_with_rate(
    model: &CoefficientModel,
    grid: &TimeGrid,
    h: &HSolve,
    bundle: Option<&PathBundle>,
    basis: &BasisSpec,
    jump_rate: f64,
) -> Result<YSolve> {
    let consts = model.constants()?;
    match &h.part {
        HPart::Deterministic { .. } => {
            // phi = D^{-1}B constant in time
            let phi2: f64 = consts.d_inv_b.iter().map(|b| b * b).sum();
            let integrals = suffix_integrals(|_| phi2 + jump_rate, grid, QUADRATURE_TOL)?;
            let y: Vec<f64> = integrals.iter().map(|i| i.exp()).collect();
            let min_y = y.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(YSolve {
                part: YPart::Deterministic { y },
                min_y,
                r2_min: None,
                se0: None,
                y_floor_slack: None,
                jump_rate,
            })
        }
        HPart::Affine { v_f, .. } => {
            // phi(t) = D^{-1}B + c1(T - t) v_f is deterministic in time
            let fp = model
                .factor
                .as_ref()
                .ok_or_else(|| Error::DomainError("affine h without factor".into()))?;
            let beta_dot_v: f64 = v_f
                .iter()
                .zip(consts.d_inv_b.iter())
                .map(|(v, b)| v * b)
                .sum();
            let shifted_mean = fp.m_f - beta_dot_v / fp.kappa_f;
            let vol2: f64 = v_f.iter().map(|v| v * v).sum();
            let laplace = OuLaplace::new(fp.kappa_f, shifted_mean, vol2)?;
            let beta = consts.d_inv_b.clone();
            let integrand = |s: f64| {
                let c1 = -laplace.b(grid.horizon - s);
                let mut phi2 = 0.0;
                for (b, v) in beta.iter().zip(v_f) {
                    let p = b + c1 * v;
                    phi2 += p * p;
                }
                phi2 + jump_rate
            };
            let integrals = suffix_integrals(integrand, grid, QUADRATURE_TOL)?;
            let y: Vec<f64> = integrals.iter().map(|i| i.exp()).collect();
            let min_y = y.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(YSolve {
                part: YPart::Deterministic { y },
                min_y,
                r2_min: None,
                se0: None,
                y_floor_slack: None,
                jump_rate,
            })
        }
        HPart::Regression { fits, v_f } => {
            let bundle = bundle.ok_or_else(|| {
                Error::DomainError("regression Y solve needs a path bundle".into())
            })?;
            solve_y_regression(model, grid, fits, v_f, bundle, basis, jump_rate, &consts)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_y_regression(
    model: &CoefficientModel,
    grid: &TimeGrid,
    h_fits: &[Fit],
    v_f: &[f64],
    bundle: &PathBundle,
    basis: &BasisSpec,
    jump_rate: f64,
    consts: &ModelConstants,
) -> Result<YSolve> {
    let fp = model
        .factor
        .as_ref()
        .ok_or_else(|| Error::DomainError("regression Y solve needs factor dynamics".into()))?;
    // factor runs under the real measure here
    let stepper = FactorStepper::new(fp, grid.dt(), None);
    let nodes = grid.n_nodes();
    let steps = grid.steps;
    let dt = grid.dt();
    let dim = bundle.dim;
    let n_paths = bundle.n_paths;
    let chunk = bundle.chunk_size;
    let n_chunks = n_paths.div_ceil(chunk);

    let phi_at = |k: usize, f: f64, out: &mut [f64]| {
        let h = recip(h_fits[k].poly.eval(f));
        let eps = FD_REL_STEP * h_fits[k].poly.scale;
        let dh = (recip(h_fits[k].poly.eval(f + eps)) - recip(h_fits[k].poly.eval(f - eps)))
            / (2.0 * eps);
        for j in 0..out.len() {
            out[j] = consts.d_inv_b[j] + dh / h * v_f[j];
        }
    };

    // pass 1: factor moments per node under the real measure
    let partials: Vec<Vec<Moments>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = vec![Moments::default(); nodes];
            let mut dw = vec![0.0; dim];
            for p in (c * chunk)..((c + 1) * chunk).min(n_paths) {
                let mut f = fp.f_0;
                for k in 0..nodes {
                    m[k].add(f);
                    if k < steps {
                        bundle.delta_w(k, p, &mut dw);
                        f = stepper.step(f, &dw);
                    }
                }
            }
            m
        })
        .collect();
    let mut moments = vec![Moments::default(); nodes];
    for part in &partials {
        for (m, p) in moments.iter_mut().zip(part) {
            m.merge(p);
        }
    }

    // pass 2: regress the exponential tail functional per node
    let make_accs = || -> Vec<FitAccumulator> {
        (0..nodes)
            .map(|k| FitAccumulator::new(moments[k].mean(), moments[k].std(), basis.degree))
            .collect()
    };
    let partials: Vec<Vec<FitAccumulator>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut accs = make_accs();
            let mut dw = vec![0.0; dim];
            let mut phi = vec![0.0; dim];
            let mut fs = vec![0.0; nodes];
            let mut m_prefix = vec![0.0; nodes];
            let mut q_prefix = vec![0.0; nodes];
            for p in (c * chunk)..((c + 1) * chunk).min(n_paths) {
                let mut f = fp.f_0;
                fs[0] = f;
                m_prefix[0] = 0.0;
                q_prefix[0] = 0.0;
                for k in 0..steps {
                    bundle.delta_w(k, p, &mut dw);
                    phi_at(k, f, &mut phi);
                    let mut dot = 0.0;
                    let mut norm2 = 0.0;
                    for j in 0..dim {
                        dot += phi[j] * dw[j];
                        norm2 += phi[j] * phi[j];
                    }
                    m_prefix[k + 1] = m_prefix[k] + dot;
                    q_prefix[k + 1] = q_prefix[k] + norm2 * dt;
                    f = stepper.step(f, &dw);
                    fs[k + 1] = f;
                }
                let (m_total, q_total) = (m_prefix[steps], q_prefix[steps]);
                for k in 0..nodes {
                    let tail = -2.0 * (m_total - m_prefix[k]) - (q_total - q_prefix[k])
                        + jump_rate * (grid.horizon - grid.t(k));
                    accs[k].add(fs[k], tail.exp());
                }
            }
            accs
        })
        .collect();
    let mut accs = make_accs();
    for part in &partials {
        for (a, p) in accs.iter_mut().zip(part) {
            a.merge(p);
        }
    }
    let mut fits: Vec<Fit> = Vec::with_capacity(nodes);
    for (k, acc) in accs.into_iter().enumerate() {
        if k == steps {
            fits.push(constant_fit(1.0, moments[k].count()));
        } else {
            fits.push(acc.finish(DEFAULT_CONDITION_CAP)?);
        }
    }

    // pass 3: Z by regressing one-step martingale increments against dW
    let make_z_accs = || -> Vec<Vec<FitAccumulator>> {
        (0..steps)
            .map(|k| {
                (0..dim)
                    .map(|_| FitAccumulator::new(moments[k].mean(), moments[k].std(), basis.degree))
                    .collect()
            })
            .collect()
    };
    let partials: Vec<Vec<Vec<FitAccumulator>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut accs = make_z_accs();
            let mut dw = vec![0.0; dim];
            for p in (c * chunk)..((c + 1) * chunk).min(n_paths) {
                let mut f = fp.f_0;
                let mut y_prev = fits[0].poly.eval(f);
                for k in 0..steps {
                    bundle.delta_w(k, p, &mut dw);
                    let f_next = stepper.step(f, &dw);
                    let y_next = fits[k + 1].poly.eval(f_next);
                    let dy = y_next - y_prev;
                    for j in 0..dim {
                        accs[k][j].add(f, dy * dw[j] / dt);
                    }
                    f = f_next;
                    y_prev = y_next;
                }
            }
            accs
        })
        .collect();
    let mut z_accs = make_z_accs();
    for part in &partials {
        for (row, prow) in z_accs.iter_mut().zip(part) {
            for (a, p) in row.iter_mut().zip(prow) {
                a.merge(p);
            }
        }
    }
    let mut z_fits: Vec<Vec<Polynomial>> = Vec::with_capacity(steps);
    for row in z_accs {
        let mut out = Vec::with_capacity(dim);
        for acc in row {
            out.push(acc.finish(DEFAULT_CONDITION_CAP)?.poly);
        }
        z_fits.push(out);
    }

    // diagnostics
    let mut min_y = f64::INFINITY;
    let mut r2 = f64::INFINITY;
    let mut slack = f64::INFINITY;
    for (k, fit) in fits.iter().enumerate() {
        if k < steps {
            r2 = r2.min(fit.r2);
        }
        let at = moments[k].mean();
        let y = fit.poly.eval(at);
        min_y = min_y.min(y);
        slack = slack.min(y - (1.0 - 3.0 * fit.se_at(at)));
    }
    let se0 = Some(fits[0].se_at(fp.f_0));
    Ok(YSolve {
        part: YPart::Regression { fits, z_fits },
        min_y,
        r2_min: if r2.is_finite() { Some(r2) } else { None },
        se0,
        y_floor_slack: Some(slack),
        jump_rate,
    })
}

/// The process phi = D^{-1}B + h^{-1}L packaged as a standalone value.
pub struct PhiProcess<'a> {
    sol: &'a BsdeSolution,
}

impl<'a> PhiProcess<'a> {
    pub fn eval_into(&self, k: usize, f: f64, out: &mut [f64]) {
        self.sol.phi_into(k, f, out)
    }

    /// Time-grid values when phi is deterministic.
    pub fn deterministic(&self) -> Option<Vec<Vec<f64>>> {
        self.sol.deterministic_phi()
    }
}

pub fn phi(sol: &BsdeSolution) -> PhiProcess<'_> {
    PhiProcess { sol }
}

/// alpha^u = h D' u + X L + h X C, the dW-integrand of h X^u.
pub fn alpha_into(
    sol: &BsdeSolution,
    consts: &ModelConstants,
    k: usize,
    f: f64,
    u: &[f64],
    x: f64,
    out: &mut [f64],
) {
    let h = sol.h_at(k, f);
    let n = consts.n;
    let mut l = vec![0.0; n];
    sol.l_into(k, f, &mut l);
    for j in 0..n {
        let mut dtu = 0.0;
        for i in 0..n {
            dtu += consts.d[(i, j)] * u[i]; // (D'u)_j = sum_i D_ij u_i
        }
        out[j] = h * dtu + x * l[j] + h * x * consts.c[j];
    }
}

/// Pooled one-step discrete residuals of both BSDEs along simulated factor
/// paths: res_h = h_{k+1} - h_k - driver_h dt - L' dW (and the Y analogue).
/// The pooled mean carries an irreducible second-order Taylor remainder of
/// size O(dt^2) on top of the statistical noise, so the pass condition is
/// |mean| <= 4 se + dt^2 (the dt^2 envelope holds for desk-scale
/// coefficients; it is identically the quadrature-error allowance of the
/// deterministic tier).
#[derive(Debug, Clone, Default)]
pub struct ResidualStats {
    pub h_mean: f64,
    pub h_se: f64,
    pub h_max_abs: f64,
    pub y_mean: f64,
    pub y_se: f64,
    pub y_max_abs: f64,
    pub count: usize,
    /// Discretization-bias allowance dt^2 added to the 4 se gates.
    pub bias_allowance: f64,
}

impl ResidualStats {
    pub fn h_pass(&self) -> bool {
        self.h_mean.abs() <= 4.0 * self.h_se + self.bias_allowance
    }

    pub fn y_pass(&self) -> bool {
        self.y_mean.abs() <= 4.0 * self.y_se + self.bias_allowance
    }
}

pub fn residual_check(
    sol: &BsdeSolution,
    model: &CoefficientModel,
    bundle: &PathBundle,
    max_paths: usize,
) -> Result<ResidualStats> {
    let consts = model.constants()?;
    let grid = sol.grid;
    let dt = grid.dt();
    let dim = sol.dim;
    let sample = bundle.n_paths.min(max_paths);
    let stepper = model
        .factor
        .as_ref()
        .map(|fp| FactorStepper::new(fp, dt, None));
    let mut dw = vec![0.0; dim];
    let mut l = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut phi_v = vec![0.0; dim];
    let (mut sh, mut sh2, mut maxh) = (0.0f64, 0.0f64, 0.0f64);
    let (mut sy, mut sy2, mut maxy) = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0usize;
    for p in 0..sample {
        let mut f = if sol.f0.is_nan() { 0.0 } else { sol.f0 };
        for k in 0..grid.steps {
            bundle.delta_w(k, p, &mut dw);
            let t = grid.t(k);
            let (a, _) = model.drift_at(t, f);
            let h = sol.h_at(k, f);
            let y = sol.y_at(k, f);
            sol.l_into(k, f, &mut l);
            sol.z_into(k, f, &mut z);
            sol.phi_into(k, f, &mut phi_v);
            let f_next = match &stepper {
                Some(s) => s.step(f, &dw),
                None => f,
            };
            let h_next = sol.h_at(k + 1, f_next);
            let y_next = sol.y_at(k + 1, f_next);
            let l_dot_b: f64 = l
                .iter()
                .zip(consts.d_inv_b.iter())
                .map(|(a, b)| a * b)
                .sum();
            let l2: f64 = l.iter().map(|v| v * v).sum();
            let driver_h = (-a + consts.kappa_bar) * h + l_dot_b + l2 / h;
            let phi2: f64 = phi_v.iter().map(|v| v * v).sum();
            let phi_dot_z: f64 = phi_v.iter().zip(&z).map(|(a, b)| a * b).sum();
            let driver_y = (-phi2 - sol.y_jump_rate) * y + 2.0 * phi_dot_z;
            let l_dw: f64 = l.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let z_dw: f64 = z.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let res_h = h_next - h - driver_h * dt - l_dw;
            let res_y = y_next - y - driver_y * dt - z_dw;
            sh += res_h;
            sh2 += res_h * res_h;
            maxh = maxh.max(res_h.abs());
            sy += res_y;
            sy2 += res_y * res_y;
            maxy = maxy.max(res_y.abs());
            count += 1;
            f = f_next;
        }
    }
    let n = count as f64;
    let h_mean = sh / n;
    let y_mean = sy / n;
    Ok(ResidualStats {
        h_mean,
        h_se: ((sh2 / n - h_mean * h_mean).max(0.0) / n).sqrt(),
        h_max_abs: maxh,
        y_mean,
        y_se: ((sy2 / n - y_mean * y_mean).max(0.0) / n).sqrt(),
        y_max_abs: maxy,
        count,
        bias_allowance: dt * dt,
    })
}
