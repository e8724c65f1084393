//! Controlled-state simulation, stochastic exponentials, and measure-change
//! estimation.
//!
//! The engine steps everything a verification run needs in ONE pass per path:
//! the factor, the wealth recursion under each control probe, the density
//! recursion under each generator probe, and the running conservation
//! deviation. Nothing of size (steps x paths) is ever materialized; per-path
//! work is independent, so path-parallel execution with a fixed chunk layout
//! reproduces bit-identical results for any worker count.
//!
//! Discretization: Euler-Maruyama for the wealth,
//!
//! ```text
//! X_{k+1} = X_k + (A_k X_k + u_k'B + b q_k) dt + (X_k C' + u_k'D) dW_k
//!           - q_k (sum of claims in step - lambda m1 dt),
//! ```
//!
//! and exact log-exponential stepping for the density,
//!
//! ```text
//! Lambda_{k+1} = Lambda_k exp(eta_k'dW_k - 1/2 |eta_k|^2 dt)
//!                * prod_{jumps} (1 + psi(y)) * exp(-lambda dt int psi dnu),
//! ```
//!
//! which keeps Lambda strictly positive by construction -- the density drives
//! every measure change downstream, so positivity is structural, not a
//! numerical accident.

use rayon::prelude::*;

use crate::bsde::BsdeSolution;
use crate::bundle::PathBundle;
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, FactorStepper, JumpModel, ModelConstants};
use crate::rng::{self, Stream};

/// Paths with |X| beyond this are flagged, excluded, and counted.
pub const OVERFLOW_CAP: f64 = 1e12;
/// The run fails when more than this fraction of paths is flagged.
pub const MAX_EXCLUDED_FRACTION: f64 = 1e-3;
/// Lower admissibility margin for jump generators: psi >= -1 + eps.
pub const PSI_EPS: f64 = 1e-9;
/// Stack-buffer bound on the state dimension.
pub const MAX_DIM: usize = 16;

/// Control rule for the wealth recursion. `Optimal` is the saddle-point
/// feedback
///
/// ```text
/// u_hat = (h D')^{-1} ( Lambda/theta [phi Y - Z] - X L - h X C ),
/// ```
///
/// evaluated along the jointly stepped (X, Lambda^{eta_hat}) pair;
/// `MvFeedback` is the mean-variance feedback at Lagrange level gamma:
///
/// ```text
/// u^gamma = (h D')^{-1} ( -(phi - Z/Y)(h X - gamma) - X L - h X C ).
/// ```
#[derive(Debug, Clone)]
pub enum ControlRule {
    Zero,
    Constant(Vec<f64>),
    Optimal,
    /// Optimal feedback plus a constant vector.
    OptimalPlus(Vec<f64>),
    Sinusoid {
        amplitude: Vec<f64>,
        frequency: f64,
    },
    /// Piecewise constant in time over equal pieces.
    Piecewise {
        values: Vec<Vec<f64>>,
    },
    MvFeedback {
        gamma: f64,
    },
}

impl ControlRule {
    /// Bounded random piecewise-constant rule, deterministic in its seed.
    pub fn seeded_piecewise(seed: u64, pieces: usize, bound: f64, dim: usize) -> ControlRule {
        let values = (0..pieces)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        bound
                            * (2.0 * rng::uniform_co(seed, Stream::Probe, i as u64, j as u64) - 1.0)
                    })
                    .collect()
            })
            .collect();
        ControlRule::Piecewise { values }
    }

    fn needs_solution(&self) -> bool {
        matches!(
            self,
            ControlRule::Optimal | ControlRule::OptimalPlus(_) | ControlRule::MvFeedback { .. }
        )
    }
}

/// Retention rule (reinsurance). `Optimal` is
/// q_hat = b Lambda Y / (h theta lambda m2); `MvFeedback` is
/// q^gamma = -(h X - gamma) b / (h lambda m2). Negative requested retention
/// is an admissibility violation and fails the run.
#[derive(Debug, Clone)]
pub enum RetentionRule {
    Zero,
    Optimal,
    Constant(f64),
    MvFeedback { gamma: f64 },
}

/// Perturbation generator rule for the density. `Optimal` is eta_hat = -phi.
#[derive(Debug, Clone)]
pub enum GeneratorRule {
    Zero,
    Optimal,
    /// eta_hat + eps * e_component.
    Shifted {
        eps: f64,
        component: usize,
    },
    Constant(Vec<f64>),
    Piecewise {
        values: Vec<Vec<f64>>,
    },
}

impl GeneratorRule {
    pub fn seeded_piecewise(seed: u64, pieces: usize, bound: f64, dim: usize) -> GeneratorRule {
        let values = (0..pieces)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        bound
                            * (2.0
                                * rng::uniform_co(seed, Stream::Probe, (1000 + i) as u64, j as u64)
                                - 1.0)
                    })
                    .collect()
            })
            .collect();
        GeneratorRule::Piecewise { values }
    }

    fn needs_solution(&self) -> bool {
        matches!(self, GeneratorRule::Optimal | GeneratorRule::Shifted { .. })
    }
}

/// Jump-measure generator rule. `ScaledOptimal { scale }` is
/// psi(y) = scale * b y / (lambda m2); psi_hat is scale = 1.
#[derive(Debug, Clone)]
pub enum PsiRule {
    Zero,
    ScaledOptimal { scale: f64 },
    Constant { value: f64 },
}

impl PsiRule {
    /// Validate psi >= -1 + eps over the claim support.
    pub fn validate(&self, jump: Option<&JumpModel>) -> Result<()> {
        match self {
            PsiRule::Zero => Ok(()),
            PsiRule::Constant { value } => {
                if *value < -1.0 + PSI_EPS {
                    Err(Error::PsiBelowMinusOne { psi: *value })
                } else {
                    Ok(())
                }
            }
            PsiRule::ScaledOptimal { scale } => {
                let jump =
                    jump.ok_or_else(|| Error::DomainError("psi rule needs a jump model".into()))?;
                let worst = scale * jump.premium_loading * jump.claims.y_max()
                    / (jump.intensity * jump.m2());
                if worst < -1.0 + PSI_EPS {
                    Err(Error::PsiBelowMinusOne { psi: worst })
                } else {
                    Ok(())
                }
            }
        }
    }

    #[inline]
    fn eval(&self, y: f64, psi_hat_slope: f64) -> f64 {
        match self {
            PsiRule::Zero => 0.0,
            PsiRule::ScaledOptimal { scale } => scale * psi_hat_slope * y,
            PsiRule::Constant { value } => *value,
        }
    }

    /// int psi d nu.
    #[inline]
    fn nu_integral(&self, psi_hat_slope: f64, m1: f64) -> f64 {
        match self {
            PsiRule::Zero => 0.0,
            PsiRule::ScaledOptimal { scale } => scale * psi_hat_slope * m1,
            PsiRule::Constant { value } => *value,
        }
    }
}

/// One wealth probe: a control rule plus a retention rule when jumps are on.
#[derive(Debug, Clone)]
pub struct UProbe {
    pub name: String,
    pub rule: ControlRule,
    pub retention: RetentionRule,
}

impl UProbe {
    pub fn new(name: impl Into<String>, rule: ControlRule) -> Self {
        UProbe {
            name: name.into(),
            rule,
            retention: RetentionRule::Zero,
        }
    }

    pub fn with_retention(mut self, retention: RetentionRule) -> Self {
        self.retention = retention;
        self
    }
}

/// One density probe: a Brownian generator plus a jump generator.
#[derive(Debug, Clone)]
pub struct EtaProbe {
    pub name: String,
    pub rule: GeneratorRule,
    pub psi: PsiRule,
}

impl EtaProbe {
    pub fn new(name: impl Into<String>, rule: GeneratorRule) -> Self {
        EtaProbe {
            name: name.into(),
            rule,
            psi: PsiRule::Zero,
        }
    }

    pub fn with_psi(mut self, psi: PsiRule) -> Self {
        self.psi = psi;
        self
    }
}

/// A full ensemble request: which probes to run on which bundle.
pub struct RunRequest<'a> {
    pub model: &'a CoefficientModel,
    pub jump: Option<&'a JumpModel>,
    pub bundle: &'a PathBundle,
    pub solution: Option<&'a BsdeSolution>,
    pub theta: f64,
    pub x0: f64,
    pub u_probes: Vec<UProbe>,
    pub eta_probes: Vec<EtaProbe>,
    /// Track max_k |theta h X + Lambda-hat Y - (theta h_0 x + Y_0)| / c0 for
    /// this u-probe index.
    pub track_conservation_for: Option<usize>,
    /// Cross-check: also step u-probe `.1` under the Brownian drift shifted
    /// by eta-probe `.0`, estimating E^{P^eta} directly instead of by
    /// reweighting (Brownian shift only; jump tilting is out of scope).
    pub resimulate_under_shift: Option<(usize, usize)>,
    /// Retain full trajectories of the first few paths (CSV dumps; probe 0).
    pub retain_paths: usize,
    /// Monitor the conservation deviation only at nodes divisible by this
    /// stride (refinement studies compare levels on a common node skeleton).
    pub conservation_stride: usize,
}

impl<'a> RunRequest<'a> {
    pub fn new(
        model: &'a CoefficientModel,
        jump: Option<&'a JumpModel>,
        bundle: &'a PathBundle,
        solution: Option<&'a BsdeSolution>,
        theta: f64,
        x0: f64,
    ) -> Self {
        RunRequest {
            model,
            jump,
            bundle,
            solution,
            theta,
            x0,
            u_probes: Vec::new(),
            eta_probes: Vec::new(),
            track_conservation_for: None,
            resimulate_under_shift: None,
            retain_paths: 0,
            conservation_stride: 1,
        }
    }
}

/// Retained per-path trajectories (first `retain_paths` paths, first u-probe).
#[derive(Debug, Clone, Default)]
pub struct RetainedPaths {
    /// x[path][node]
    pub x: Vec<Vec<f64>>,
    /// lambda-hat[path][node]
    pub lambda: Vec<Vec<f64>>,
    /// u[path][step][component]
    pub u: Vec<Vec<Vec<f64>>>,
}

/// Ensemble output: terminal values per probe per path plus flags.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub x_terminal: Vec<Vec<f64>>,
    pub lambda_terminal: Vec<Vec<f64>>,
    /// Terminal density of the optimal generator pair (eta_hat, psi_hat).
    pub lambda_hat_terminal: Vec<f64>,
    /// Per-path max_k |theta h X + Lambda Y - c0| / c0 for the tracked probe.
    pub conservation_max: Option<Vec<f64>>,
    pub excluded: Vec<bool>,
    pub n_excluded: usize,
    pub cap_hits: u64,
    /// Smallest retention level evaluated by any non-zero retention rule
    /// (infinity when no such rule ran).
    pub min_retention: f64,
    pub shift_x_terminal: Option<Vec<f64>>,
    pub retained: RetainedPaths,
}

struct ChunkOut {
    x_terminal: Vec<Vec<f64>>,
    lambda_terminal: Vec<Vec<f64>>,
    lambda_hat_terminal: Vec<f64>,
    conservation_max: Vec<f64>,
    excluded: Vec<bool>,
    cap_hits: u64,
    negative_retention: Option<(usize, f64)>,
    min_retention: f64,
    shift_x_terminal: Vec<f64>,
    retained: RetainedPaths,
}

#[derive(Clone, Copy)]
struct JumpInfo {
    intensity: f64,
    m1: f64,
    m2: f64,
    /// psi_hat(y) = slope * y with slope = b / (lambda m2).
    slope: f64,
    premium: f64,
    offset: f64,
}

/// Run the ensemble. This is the workhorse behind `simulate_state`,
/// `stochastic_exponential`, the saddle verifier, and the empirical
/// mean-variance evaluation.
pub fn run_ensemble(req: &RunRequest) -> Result<RunOutput> {
    let consts = req.model.constants()?;
    let n = consts.n;
    if n > MAX_DIM {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {n} exceeds the supported bound {MAX_DIM}"
        )));
    }
    if req.bundle.dim != n {
        return Err(Error::DimensionMismatch(format!(
            "bundle dim {} vs model dim {n}",
            req.bundle.dim
        )));
    }
    let needs_solution = req.u_probes.iter().any(|p| p.rule.needs_solution())
        || req.eta_probes.iter().any(|p| p.rule.needs_solution())
        || req.track_conservation_for.is_some()
        || req.u_probes.iter().any(|p| {
            matches!(
                p.retention,
                RetentionRule::Optimal | RetentionRule::MvFeedback { .. }
            )
        });
    if needs_solution && req.solution.is_none() {
        return Err(Error::DomainError(
            "optimal/feedback probes need a BSDE solution".into(),
        ));
    }
    for probe in &req.eta_probes {
        probe.psi.validate(req.jump)?;
    }
    if let Some(idx) = req.track_conservation_for {
        if idx >= req.u_probes.len() {
            return Err(Error::DomainError(
                "conservation probe index out of range".into(),
            ));
        }
    }

    let stepper = req
        .model
        .factor
        .as_ref()
        .map(|fp| FactorStepper::new(fp, req.bundle.grid.dt(), None));
    let f0 = req
        .model
        .factor
        .as_ref()
        .map(|fp| fp.f_0)
        .unwrap_or(f64::NAN);

    let jump_info = req.jump.map(|j| {
        let m1 = j.m1();
        let m2 = j.m2();
        JumpInfo {
            intensity: j.intensity,
            m1,
            m2,
            slope: j.premium_loading / (j.intensity * m2),
            premium: j.premium_loading,
            offset: j.drift_offset,
        }
    });

    let grid = req.bundle.grid;
    let dt = grid.dt();
    let n_paths = req.bundle.n_paths;
    let chunk = req.bundle.chunk_size.max(1);
    let n_chunks = n_paths.div_ceil(chunk);
    let nu = req.u_probes.len();
    let neta = req.eta_probes.len();

    // per-probe jump compensators, constant in time: -dt lambda int psi d nu
    let (comp_log_hat, comp_logs): (f64, Vec<f64>) = match jump_info {
        Some(j) => (
            -dt * j.intensity * j.slope * j.m1,
            req.eta_probes
                .iter()
                .map(|p| -dt * j.intensity * p.psi.nu_integral(j.slope, j.m1))
                .collect(),
        ),
        None => (0.0, vec![0.0; neta]),
    };

    let cons_target = req.solution.map(|s| req.theta * s.h0() * req.x0 + s.y0());

    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(n_paths);
            let m = hi - lo;
            let mut out = ChunkOut {
                x_terminal: vec![vec![0.0; m]; nu],
                lambda_terminal: vec![vec![0.0; m]; neta],
                lambda_hat_terminal: vec![1.0; m],
                conservation_max: vec![0.0; m],
                excluded: vec![false; m],
                cap_hits: 0,
                negative_retention: None,
                min_retention: f64::INFINITY,
                shift_x_terminal: vec![0.0; m],
                retained: RetainedPaths::default(),
            };
            let mut dw = [0.0f64; MAX_DIM];
            let mut phi = [0.0f64; MAX_DIM];
            let mut l = [0.0f64; MAX_DIM];
            let mut z = [0.0f64; MAX_DIM];
            let mut u = [0.0f64; MAX_DIM];
            let mut eta = [0.0f64; MAX_DIM];
            let mut xs = vec![0.0f64; nu];
            let mut lams = vec![0.0f64; neta];
            let mut jump_prods = vec![1.0f64; neta];
            for p in lo..hi {
                let idx = p - lo;
                let retain = p < req.retain_paths;
                let mut f = f0;
                xs.iter_mut().for_each(|x| *x = req.x0);
                lams.iter_mut().for_each(|l| *l = 1.0);
                let mut lam_hat = 1.0f64;
                let mut x_shift = req.x0;
                let mut cons_max = 0.0f64;
                let mut dead = false;
                let marks = req.bundle.jumps_for(p);
                let mut mark_cursor = 0usize;
                let (mut ret_x, mut ret_lam, mut ret_u) = (Vec::new(), Vec::new(), Vec::new());
                if retain {
                    ret_x.push(req.x0);
                    ret_lam.push(1.0);
                }
                for k in 0..grid.steps {
                    let t = grid.t(k);
                    req.bundle.delta_w(k, p, &mut dw[..n]);
                    let (a_k, capped) = req.model.drift_at(t, f);
                    out.cap_hits += capped as u64;

                    let (h, y) = match req.solution {
                        Some(s) => {
                            s.phi_into(k, f, &mut phi[..n]);
                            s.l_into(k, f, &mut l[..n]);
                            s.z_into(k, f, &mut z[..n]);
                            (s.h_at(k, f), s.y_at(k, f))
                        }
                        None => (1.0, 1.0),
                    };

                    if let (Some(target), Some(track)) = (cons_target, req.track_conservation_for) {
                        if k % req.conservation_stride.max(1) == 0 {
                            let dev = (req.theta * h * xs[track] + lam_hat * y - target).abs()
                                / target.abs();
                            cons_max = cons_max.max(dev);
                        }
                    }

                    // claims arriving in (t_k, t_{k+1}]
                    let step_end = if k + 1 == grid.steps {
                        grid.horizon
                    } else {
                        t + dt
                    };
                    let first_mark = mark_cursor;
                    let mut claim_sum = 0.0;
                    while mark_cursor < marks.len() && marks[mark_cursor].time <= step_end {
                        claim_sum += marks[mark_cursor].size;
                        mark_cursor += 1;
                    }

                    // wealth recursions
                    for probe in 0..nu {
                        let x = xs[probe];
                        eval_control(
                            &req.u_probes[probe].rule,
                            &consts,
                            req.theta,
                            k,
                            grid.steps,
                            t,
                            grid.horizon,
                            x,
                            lam_hat,
                            h,
                            y,
                            &phi[..n],
                            &l[..n],
                            &z[..n],
                            &mut u[..n],
                        );
                        let q = match (&req.u_probes[probe].retention, jump_info) {
                            (RetentionRule::Zero, _) | (_, None) => 0.0,
                            (RetentionRule::Constant(q), _) => *q,
                            (RetentionRule::Optimal, Some(j)) => {
                                j.premium * lam_hat * y / (h * req.theta * j.intensity * j.m2)
                            }
                            (RetentionRule::MvFeedback { gamma }, Some(j)) => {
                                -(h * x - gamma) * j.premium / (h * j.intensity * j.m2)
                            }
                        };
                        if !matches!(req.u_probes[probe].retention, RetentionRule::Zero)
                            && jump_info.is_some()
                        {
                            out.min_retention = out.min_retention.min(q);
                            if q < 0.0 && out.negative_retention.is_none() {
                                out.negative_retention = Some((k, q));
                            }
                        }
                        let mut drift = a_k * x;
                        for j in 0..n {
                            drift += u[j] * consts.b[j];
                        }
                        let mut jump_adj = 0.0;
                        if let Some(j) = jump_info {
                            drift += j.premium * q + j.offset;
                            jump_adj = q * (claim_sum - j.intensity * j.m1 * dt);
                        }
                        let mut diffusion = 0.0;
                        for jj in 0..n {
                            let mut udt_j = 0.0;
                            for i in 0..n {
                                udt_j += u[i] * consts.d[(i, jj)];
                            }
                            diffusion += (x * consts.c[jj] + udt_j) * dw[jj];
                        }
                        xs[probe] = x + drift * dt + diffusion - jump_adj;
                        if !xs[probe].is_finite() || xs[probe].abs() > OVERFLOW_CAP {
                            dead = true;
                        }
                        if retain && probe == 0 {
                            ret_u.push(u[..n].to_vec());
                        }
                    }

                    // optional direct simulation under the shifted drift
                    if let Some((eta_idx, u_idx)) = req.resimulate_under_shift {
                        eval_generator(
                            &req.eta_probes[eta_idx].rule,
                            &phi[..n],
                            k,
                            grid.steps,
                            &mut eta[..n],
                        );
                        let x = x_shift;
                        eval_control(
                            &req.u_probes[u_idx].rule,
                            &consts,
                            req.theta,
                            k,
                            grid.steps,
                            t,
                            grid.horizon,
                            x,
                            lam_hat,
                            h,
                            y,
                            &phi[..n],
                            &l[..n],
                            &z[..n],
                            &mut u[..n],
                        );
                        let mut drift = a_k * x;
                        for j in 0..n {
                            drift += u[j] * consts.b[j];
                        }
                        let mut diffusion = 0.0;
                        for jj in 0..n {
                            let mut udt_j = 0.0;
                            for i in 0..n {
                                udt_j += u[i] * consts.d[(i, jj)];
                            }
                            diffusion += (x * consts.c[jj] + udt_j) * (dw[jj] + eta[jj] * dt);
                        }
                        x_shift = x + drift * dt + diffusion;
                    }

                    // density recursions
                    let mut prod_hat = 1.0f64;
                    if let Some(j) = jump_info {
                        jump_prods.iter_mut().for_each(|v| *v = 1.0);
                        for mark in &marks[first_mark..mark_cursor] {
                            prod_hat *= 1.0 + j.slope * mark.size;
                            for (probe, jp) in jump_prods.iter_mut().enumerate() {
                                *jp *= 1.0 + req.eta_probes[probe].psi.eval(mark.size, j.slope);
                            }
                        }
                    }
                    {
                        eval_generator(&GeneratorRule::Optimal, &phi[..n], 0, 1, &mut eta[..n]);
                        let g = log_gaussian_factor(&eta[..n], &dw[..n], dt);
                        lam_hat *= (g + comp_log_hat).exp() * prod_hat;
                    }
                    for probe in 0..neta {
                        eval_generator(
                            &req.eta_probes[probe].rule,
                            &phi[..n],
                            k,
                            grid.steps,
                            &mut eta[..n],
                        );
                        let g = log_gaussian_factor(&eta[..n], &dw[..n], dt);
                        lams[probe] *= (g + comp_logs[probe]).exp() * jump_prods[probe];
                    }

                    if let Some(s) = &stepper {
                        f = s.step(f, &dw[..n]);
                    }
                    if retain {
                        ret_x.push(xs[0]);
                        ret_lam.push(lam_hat);
                    }
                    if dead {
                        break;
                    }
                }
                if let (Some(target), Some(track)) = (cons_target, req.track_conservation_for) {
                    if !dead {
                        // terminal node: h_N = Y_N = 1
                        let dev = (req.theta * xs[track] + lam_hat - target).abs() / target.abs();
                        cons_max = cons_max.max(dev);
                    }
                }
                out.excluded[idx] = dead;
                for probe in 0..nu {
                    out.x_terminal[probe][idx] = xs[probe];
                }
                for probe in 0..neta {
                    out.lambda_terminal[probe][idx] = lams[probe];
                }
                out.lambda_hat_terminal[idx] = lam_hat;
                out.conservation_max[idx] = cons_max;
                out.shift_x_terminal[idx] = x_shift;
                if retain {
                    out.retained.x.push(ret_x);
                    out.retained.lambda.push(ret_lam);
                    out.retained.u.push(ret_u);
                }
            }
            out
        })
        .collect();

    // deterministic sequential stitch in chunk order
    let mut output = RunOutput {
        x_terminal: vec![Vec::with_capacity(n_paths); nu],
        lambda_terminal: vec![Vec::with_capacity(n_paths); neta],
        lambda_hat_terminal: Vec::with_capacity(n_paths),
        conservation_max: req
            .track_conservation_for
            .map(|_| Vec::with_capacity(n_paths)),
        excluded: Vec::with_capacity(n_paths),
        n_excluded: 0,
        cap_hits: 0,
        min_retention: f64::INFINITY,
        shift_x_terminal: req
            .resimulate_under_shift
            .map(|_| Vec::with_capacity(n_paths)),
        retained: RetainedPaths::default(),
    };
    let mut negative_retention: Option<(usize, f64)> = None;
    for c in chunks {
        for (probe, vals) in c.x_terminal.into_iter().enumerate() {
            output.x_terminal[probe].extend(vals);
        }
        for (probe, vals) in c.lambda_terminal.into_iter().enumerate() {
            output.lambda_terminal[probe].extend(vals);
        }
        output.lambda_hat_terminal.extend(c.lambda_hat_terminal);
        if let Some(cm) = output.conservation_max.as_mut() {
            cm.extend(c.conservation_max);
        }
        output.excluded.extend(c.excluded);
        output.cap_hits += c.cap_hits;
        output.min_retention = output.min_retention.min(c.min_retention);
        if let Some(sx) = output.shift_x_terminal.as_mut() {
            sx.extend(c.shift_x_terminal);
        }
        if negative_retention.is_none() {
            negative_retention = c.negative_retention;
        }
        output.retained.x.extend(c.retained.x);
        output.retained.lambda.extend(c.retained.lambda);
        output.retained.u.extend(c.retained.u);
    }
    if let Some((k, q)) = negative_retention {
        return Err(Error::NegativeRetention { k, q });
    }
    output.n_excluded = output.excluded.iter().filter(|&&e| e).count();
    if output.n_excluded as f64 > MAX_EXCLUDED_FRACTION * n_paths as f64 {
        return Err(Error::NonFiniteState(format!(
            "{} of {} paths overflowed",
            output.n_excluded, n_paths
        )));
    }
    Ok(output)
}

#[inline]
fn log_gaussian_factor(eta: &[f64], dw: &[f64], dt: f64) -> f64 {
    let mut dot = 0.0;
    let mut norm2 = 0.0;
    for j in 0..eta.len() {
        dot += eta[j] * dw[j];
        norm2 += eta[j] * eta[j];
    }
    dot - 0.5 * norm2 * dt
}

#[inline]
fn eval_generator(rule: &GeneratorRule, phi: &[f64], k: usize, steps: usize, eta: &mut [f64]) {
    match rule {
        GeneratorRule::Zero => eta.fill(0.0),
        GeneratorRule::Optimal => {
            for (e, p) in eta.iter_mut().zip(phi) {
                *e = -p;
            }
        }
        GeneratorRule::Shifted { eps, component } => {
            for (j, (e, p)) in eta.iter_mut().zip(phi).enumerate() {
                *e = -p + if j == *component { *eps } else { 0.0 };
            }
        }
        GeneratorRule::Constant(v) => eta.copy_from_slice(v),
        GeneratorRule::Piecewise { values } => {
            let piece = (k * values.len()) / steps;
            eta.copy_from_slice(&values[piece.min(values.len() - 1)]);
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn eval_control(
    rule: &ControlRule,
    consts: &ModelConstants,
    theta: f64,
    k: usize,
    steps: usize,
    t: f64,
    horizon: f64,
    x: f64,
    lam_hat: f64,
    h: f64,
    y: f64,
    phi: &[f64],
    l: &[f64],
    z: &[f64],
    u: &mut [f64],
) {
    let n = u.len();
    match rule {
        ControlRule::Zero => u.fill(0.0),
        ControlRule::Constant(v) => u.copy_from_slice(v),
        ControlRule::Sinusoid {
            amplitude,
            frequency,
        } => {
            let s = (frequency * t / horizon * 2.0 * std::f64::consts::PI).sin();
            for (uu, a) in u.iter_mut().zip(amplitude) {
                *uu = a * s;
            }
        }
        ControlRule::Piecewise { values } => {
            let piece = (k * values.len()) / steps;
            u.copy_from_slice(&values[piece.min(values.len() - 1)]);
        }
        ControlRule::Optimal | ControlRule::OptimalPlus(_) => {
            let mut v = [0.0f64; MAX_DIM];
            for j in 0..n {
                v[j] = lam_hat / theta * (phi[j] * y - z[j]) - x * l[j] - h * x * consts.c[j];
            }
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += consts.d_t_inv[(j, i)] * v[i];
                }
                u[j] = acc / h;
            }
            if let ControlRule::OptimalPlus(c) = rule {
                for (uu, cc) in u.iter_mut().zip(c) {
                    *uu += cc;
                }
            }
        }
        ControlRule::MvFeedback { gamma } => {
            let mut v = [0.0f64; MAX_DIM];
            for j in 0..n {
                v[j] = -(phi[j] - z[j] / y) * (h * x - gamma) - x * l[j] - h * x * consts.c[j];
            }
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += consts.d_t_inv[(j, i)] * v[i];
                }
                u[j] = acc / h;
            }
        }
    }
}

/// Simulated state trajectories for one control rule (materialized, so meant
/// for moderate sizes; the verification pipelines use `run_ensemble`).
#[derive(Debug, Clone)]
pub struct StatePath {
    /// x[node][path]
    pub x: Vec<Vec<f64>>,
    pub flags: Vec<bool>,
    pub cap_hits: u64,
}

/// Euler-Maruyama simulation of the controlled state under one rule.
#[allow(clippy::too_many_arguments)]
pub fn simulate_state(
    model: &CoefficientModel,
    jump: Option<&JumpModel>,
    rule: &ControlRule,
    retention: RetentionRule,
    bundle: &PathBundle,
    solution: Option<&BsdeSolution>,
    theta: f64,
    x0: f64,
) -> Result<StatePath> {
    let mut req = RunRequest::new(model, jump, bundle, solution, theta, x0);
    req.u_probes = vec![UProbe::new("state", rule.clone()).with_retention(retention)];
    req.retain_paths = bundle.n_paths;
    let out = run_ensemble(&req)?;
    let nodes = bundle.grid.n_nodes();
    let mut x = vec![vec![0.0; bundle.n_paths]; nodes];
    for (p, path) in out.retained.x.iter().enumerate() {
        for (k, v) in path.iter().enumerate() {
            x[k][p] = *v;
        }
    }
    Ok(StatePath {
        x,
        flags: out.excluded,
        cap_hits: out.cap_hits,
    })
}

/// Density trajectories for one generator rule.
#[derive(Debug, Clone)]
pub struct DensityPath {
    /// lambda[node][path]
    pub lambda: Vec<Vec<f64>>,
    /// Empirical z-score of the martingale gate E[Lambda_T] = 1 (reported).
    pub martingale_z: f64,
}

/// Doleans-Dade exponential along the bundle for one generator rule, by exact
/// log-exponential stepping (positivity preserved by construction).
pub fn stochastic_exponential(
    model: &CoefficientModel,
    jump: Option<&JumpModel>,
    rule: &GeneratorRule,
    psi: PsiRule,
    bundle: &PathBundle,
    solution: Option<&BsdeSolution>,
) -> Result<DensityPath> {
    psi.validate(jump)?;
    let consts = model.constants()?;
    let n = consts.n;
    let stepper = model
        .factor
        .as_ref()
        .map(|fp| FactorStepper::new(fp, bundle.grid.dt(), None));
    let f0 = model.factor.as_ref().map(|fp| fp.f_0).unwrap_or(f64::NAN);
    let jump_info = jump.map(|j| {
        (
            j.intensity,
            j.m1(),
            j.premium_loading / (j.intensity * j.m2()),
        )
    });
    let grid = bundle.grid;
    let dt = grid.dt();
    let mut lambda = vec![vec![0.0; bundle.n_paths]; grid.n_nodes()];
    let mut dw = vec![0.0; n];
    let mut phi = vec![0.0; n];
    let mut eta = vec![0.0; n];
    for p in 0..bundle.n_paths {
        let mut f = f0;
        let mut lam = 1.0f64;
        lambda[0][p] = 1.0;
        let marks = bundle.jumps_for(p);
        let mut cursor = 0usize;
        for k in 0..grid.steps {
            bundle.delta_w(k, p, &mut dw);
            match solution {
                Some(s) => s.phi_into(k, f, &mut phi),
                None => phi.fill(0.0),
            }
            eval_generator(rule, &phi, k, grid.steps, &mut eta);
            let mut log_factor = log_gaussian_factor(&eta, &dw, dt);
            let mut prod = 1.0;
            if let Some((lam_i, m1, slope)) = jump_info {
                let step_end = if k + 1 == grid.steps {
                    grid.horizon
                } else {
                    grid.t(k) + dt
                };
                while cursor < marks.len() && marks[cursor].time <= step_end {
                    prod *= 1.0 + psi.eval(marks[cursor].size, slope);
                    cursor += 1;
                }
                log_factor += -dt * lam_i * psi.nu_integral(slope, m1);
            }
            lam *= log_factor.exp() * prod;
            if let Some(s) = &stepper {
                f = s.step(f, &dw);
            }
            lambda[k + 1][p] = lam;
        }
    }
    let terminal = &lambda[grid.steps];
    let (mean, se) = mean_se(terminal);
    let martingale_z = if se > 0.0 { (mean - 1.0) / se } else { 0.0 };
    Ok(DensityPath {
        lambda,
        martingale_z,
    })
}

/// Expectation under P^eta by reweighting: E[Lambda_T * payoff] with its
/// sample standard error.
pub fn girsanov_reweight(payoff: &[f64], lambda_t: &[f64]) -> Result<(f64, f64)> {
    if payoff.len() != lambda_t.len() {
        return Err(Error::LengthMismatch(format!(
            "payoff has {} samples, density has {}",
            payoff.len(),
            lambda_t.len()
        )));
    }
    if payoff.is_empty() {
        return Err(Error::LengthMismatch("empty sample".into()));
    }
    Ok(weighted_mean_se(payoff, lambda_t))
}

/// Sample mean and standard error of w * v.
pub fn weighted_mean_se(v: &[f64], w: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for (a, b) in v.iter().zip(w) {
        let x = a * b;
        sum += x;
        sum2 += x * x;
    }
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error of a plain sample.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for &x in v {
        sum += x;
        sum2 += x * x;
    }
    let n = v.len() as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::generate_paths;
    use crate::grid::TimeGrid;
    use crate::model::{ClaimDistribution, ScenarioConfig, TimeFn};

    fn cfg_with(
        a: f64,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<Vec<f64>>,
        steps: usize,
        n_paths: usize,
        seed: u64,
    ) -> ScenarioConfig {
        ScenarioConfig {
            x: 1.0,
            theta: 1.0,
            grid: TimeGrid::new(1.0, steps).unwrap(),
            model: CoefficientModel::deterministic(TimeFn::constant(a), b, c, d),
            jump: None,
            n_paths,
            seed,
            basis: None,
        }
    }

    #[test]
    fn zero_dynamics_keep_wealth_constant() {
        let cfg = cfg_with(0.0, vec![0.0], vec![0.0], vec![vec![1.0]], 8, 16, 5);
        let bundle = generate_paths(&cfg).unwrap();
        let sp = simulate_state(
            &cfg.model,
            None,
            &ControlRule::Zero,
            RetentionRule::Zero,
            &bundle,
            None,
            cfg.theta,
            cfg.x,
        )
        .unwrap();
        for k in 0..=8 {
            for p in 0..16 {
                assert_eq!(sp.x[k][p], 1.0);
            }
        }
    }

    #[test]
    fn deterministic_drift_follows_the_euler_recursion_exactly() {
        // A = r, u = 0, C = 0: X_T = x (1 + r dt)^N exactly
        let cfg = cfg_with(0.05, vec![0.0], vec![0.0], vec![vec![0.3]], 16, 4, 2);
        let bundle = generate_paths(&cfg).unwrap();
        let sp = simulate_state(
            &cfg.model,
            None,
            &ControlRule::Zero,
            RetentionRule::Zero,
            &bundle,
            None,
            cfg.theta,
            cfg.x,
        )
        .unwrap();
        let expected = (1.0f64 + 0.05 / 16.0).powi(16);
        for p in 0..4 {
            assert!((sp.x[16][p] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn euler_weak_error_decays_at_first_order() {
        // u = 0, C = 0 makes E[X_T] exactly (1 + A dt)^N: the weak error
        // against x e^{AT} is measurable without Monte Carlo noise
        let a = 0.4f64;
        let exact = a.exp();
        let mut errs = Vec::new();
        for steps in [32usize, 64, 128] {
            let cfg = cfg_with(a, vec![0.0], vec![0.0], vec![vec![0.3]], steps, 2, 3);
            let bundle = generate_paths(&cfg).unwrap();
            let sp = simulate_state(
                &cfg.model,
                None,
                &ControlRule::Zero,
                RetentionRule::Zero,
                &bundle,
                None,
                1.0,
                1.0,
            )
            .unwrap();
            errs.push((sp.x[steps][0] - exact).abs());
        }
        let order01 = (errs[0] / errs[1]).log2();
        let order12 = (errs[1] / errs[2]).log2();
        assert!(order01 >= 0.9 && order12 >= 0.9, "{order01} {order12}");
    }

    #[test]
    fn jump_recursion_matches_straight_line_recomputation() {
        // u = 0, q = 1: X_{k+1} = X_k + (r X_k + b) dt - (claims - lambda m1 dt)
        let mut cfg = cfg_with(0.03, vec![0.0], vec![0.0], vec![vec![0.3]], 4, 3, 77);
        cfg.jump = Some(JumpModel {
            intensity: 1.0,
            claims: ClaimDistribution::Discrete {
                atoms: vec![(1.0, 1.0)],
            },
            premium_loading: 0.3,
            drift_offset: 0.0,
        });
        let bundle = generate_paths(&cfg).unwrap();
        let sp = simulate_state(
            &cfg.model,
            cfg.jump.as_ref(),
            &ControlRule::Zero,
            RetentionRule::Constant(1.0),
            &bundle,
            None,
            cfg.theta,
            cfg.x,
        )
        .unwrap();
        let dt = 0.25;
        for p in 0..3 {
            let marks = bundle.jumps_for(p);
            let mut x: f64 = 1.0;
            for k in 0..4 {
                let t0 = k as f64 * dt;
                let t1 = if k == 3 { 1.0 } else { t0 + dt };
                let claims: f64 = marks
                    .iter()
                    .filter(|m| m.time > t0 && m.time <= t1)
                    .map(|m| m.size)
                    .sum();
                x = x + (0.03 * x + 0.3) * dt - (claims - dt);
                assert!(
                    (sp.x[k + 1][p] - x).abs() < 1e-12,
                    "path {p} node {k}: {} vs {x}",
                    sp.x[k + 1][p]
                );
            }
        }
    }

    #[test]
    fn exponential_of_zero_generator_is_identically_one() {
        let cfg = cfg_with(0.0, vec![0.0], vec![0.0], vec![vec![1.0]], 8, 32, 3);
        let bundle = generate_paths(&cfg).unwrap();
        let dp = stochastic_exponential(
            &cfg.model,
            None,
            &GeneratorRule::Zero,
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        for k in 0..=8 {
            for p in 0..32 {
                assert_eq!(dp.lambda[k][p], 1.0);
            }
        }
    }

    #[test]
    fn constant_generator_martingale_and_second_moment() {
        // E[Lambda_T] = 1 and E[Lambda_T^2] = e^{c^2 T}
        let c = 0.6;
        let cfg = cfg_with(0.0, vec![0.0], vec![0.0], vec![vec![1.0]], 64, 40_000, 11);
        let bundle = generate_paths(&cfg).unwrap();
        let dp = stochastic_exponential(
            &cfg.model,
            None,
            &GeneratorRule::Constant(vec![c]),
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        assert!(
            dp.martingale_z.abs() < 4.0,
            "martingale z {}",
            dp.martingale_z
        );
        let term = &dp.lambda[64];
        let sq: Vec<f64> = term.iter().map(|l| l * l).collect();
        let (m2, se2) = mean_se(&sq);
        let expected = (c * c * 1.0f64).exp();
        assert!(
            (m2 - expected).abs() < 4.0 * se2,
            "E[L^2] {m2} vs {expected} (se {se2})"
        );
        assert!(dp.lambda.iter().flatten().all(|&l| l > 0.0));
    }

    #[test]
    fn psi_boundary_is_enforced() {
        let jump = JumpModel {
            intensity: 1.0,
            claims: ClaimDistribution::Discrete {
                atoms: vec![(1.0, 1.0)],
            },
            premium_loading: 0.3,
            drift_offset: 0.0,
        };
        assert!(PsiRule::Constant { value: -1.0 + 1e-6 }
            .validate(Some(&jump))
            .is_ok());
        assert!(matches!(
            PsiRule::Constant { value: -1.0 }.validate(Some(&jump)),
            Err(Error::PsiBelowMinusOne { .. })
        ));
    }

    #[test]
    fn jump_factors_collapse_when_psi_is_zero() {
        // with psi = 0 and jumps active, Lambda is the Brownian exponential only
        let mut cfg = cfg_with(0.0, vec![0.0], vec![0.0], vec![vec![1.0]], 16, 128, 21);
        cfg.jump = Some(JumpModel {
            intensity: 2.0,
            claims: ClaimDistribution::Discrete {
                atoms: vec![(1.0, 1.0)],
            },
            premium_loading: 0.3,
            drift_offset: 0.0,
        });
        let bundle = generate_paths(&cfg).unwrap();
        let with_jumps = stochastic_exponential(
            &cfg.model,
            cfg.jump.as_ref(),
            &GeneratorRule::Constant(vec![0.4]),
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        let without = stochastic_exponential(
            &cfg.model,
            None,
            &GeneratorRule::Constant(vec![0.4]),
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        for k in 0..=16 {
            for p in 0..128 {
                assert_eq!(
                    with_jumps.lambda[k][p].to_bits(),
                    without.lambda[k][p].to_bits()
                );
            }
        }
    }

    #[test]
    fn reweighting_recovers_the_girsanov_shift() {
        // payoff = W_T, eta = c: E^{P^eta}[W_T] = c T
        let c = 0.8;
        let cfg = cfg_with(0.0, vec![0.0], vec![0.0], vec![vec![1.0]], 32, 40_000, 13);
        let bundle = generate_paths(&cfg).unwrap();
        let dp = stochastic_exponential(
            &cfg.model,
            None,
            &GeneratorRule::Constant(vec![c]),
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        let mut w_t = vec![0.0; cfg.n_paths];
        let mut dw = vec![0.0];
        for (p, wt) in w_t.iter_mut().enumerate() {
            for k in 0..32 {
                bundle.delta_w(k, p, &mut dw);
                *wt += dw[0];
            }
        }
        let (est, se) = girsanov_reweight(&w_t, &dp.lambda[32]).unwrap();
        assert!((est - c).abs() < 4.0 * se, "{est} vs {c} (se {se})");
        // payoff 1 integrates to E[Lambda_T] = 1
        let ones = vec![1.0; cfg.n_paths];
        let (m, se1) = girsanov_reweight(&ones, &dp.lambda[32]).unwrap();
        assert!((m - 1.0).abs() < 4.0 * se1);
        // eta = 0 reweighting is the plain mean, exactly
        let plain = stochastic_exponential(
            &cfg.model,
            None,
            &GeneratorRule::Zero,
            PsiRule::Zero,
            &bundle,
            None,
        )
        .unwrap();
        let (pm, _) = girsanov_reweight(&w_t, &plain.lambda[32]).unwrap();
        let direct: f64 = {
            let mut s = 0.0;
            for &v in &w_t {
                s += v;
            }
            s / w_t.len() as f64
        };
        assert_eq!(pm.to_bits(), direct.to_bits());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            girsanov_reweight(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn determinism_under_different_chunk_sizes() {
        let cfg = cfg_with(0.03, vec![0.1], vec![0.05], vec![vec![0.2]], 32, 512, 17);
        let mut b1 = generate_paths(&cfg).unwrap();
        let mut b2 = generate_paths(&cfg).unwrap();
        b1.chunk_size = 64;
        b2.chunk_size = 7;
        let run = |b: &PathBundle| {
            let mut req = RunRequest::new(&cfg.model, None, b, None, cfg.theta, cfg.x);
            req.u_probes = vec![
                UProbe::new("zero", ControlRule::Zero),
                UProbe::new("const", ControlRule::Constant(vec![0.4])),
            ];
            req.eta_probes = vec![EtaProbe::new("const", GeneratorRule::Constant(vec![0.2]))];
            run_ensemble(&req).unwrap()
        };
        let (o1, o2) = (run(&b1), run(&b2));
        for (a, b) in o1.x_terminal[1].iter().zip(&o2.x_terminal[1]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in o1.lambda_terminal[0].iter().zip(&o2.lambda_terminal[0]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
