//! The two packaged applications: portfolio selection with a (possibly
//! random, unbounded) interest rate, and investment-reinsurance with
//! compensated Poisson claims.
//!
//! Both map onto the generic coefficient block -- (A, B, C, D) = (r, mu, 0,
//! sigma) -- solve the two BSDEs, verify the saddle property, and run the
//! mean-variance duality chain. The reinsurance run additionally carries the
//! optimal jump generator psi_hat(y) = b y / (lambda m2) and retention
//! q_hat = b Lambda Y / (h theta lambda m2), checks their admissibility
//! bounds pathwise, and confirms h is untouched by the jump block
//! (coefficients stay adapted to the Brownian filtration).

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_h_deterministic, solve_h_markov, BsdeSolution, HPart, MarkovBackend};
use crate::bundle::{generate_paths_with, PathBundle, DEFAULT_MAX_GRID_ENTRIES};
use crate::control::{
    conservation_study, robust_value, verify_saddle, ConservationStudy, ProbeSet, SaddleReport,
};
use crate::duality::{duality_report, DualityReport};
use crate::engine::{girsanov_reweight, ControlRule, RunRequest, UProbe};
use crate::error::{Error, Result};
use crate::model::{validate_scenario, ModelConstants, RateSpec, ScenarioConfig, Tier};
use crate::report::RunMeta;

/// A portfolio market (r, mu, sigma); wraps the generic block with C = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioScenario {
    pub r: RateSpec,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl PortfolioScenario {
    /// Assemble a full scenario configuration around this market.
    pub fn into_scenario(
        self,
        x: f64,
        theta: f64,
        grid: crate::grid::TimeGrid,
        n_paths: usize,
        seed: u64,
    ) -> Result<ScenarioConfig> {
        let model = crate::model::portfolio_to_generic(
            &self.r,
            &self.mu,
            &self.sigma,
            crate::model::DEFAULT_DELTA,
        )?;
        Ok(ScenarioConfig {
            x,
            theta,
            grid,
            model,
            jump: None,
            n_paths,
            seed,
            basis: None,
        })
    }
}

/// A portfolio market plus the compound Poisson claim block; the strategy
/// pair is (pi, q) with retention q >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinsuranceScenario {
    pub portfolio: PortfolioScenario,
    pub jump: crate::model::JumpModel,
}

impl ReinsuranceScenario {
    pub fn into_scenario(
        self,
        x: f64,
        theta: f64,
        grid: crate::grid::TimeGrid,
        n_paths: usize,
        seed: u64,
    ) -> Result<ScenarioConfig> {
        let mut cfg = self
            .portfolio
            .into_scenario(x, theta, grid, n_paths, seed)?;
        cfg.jump = Some(self.jump);
        Ok(cfg)
    }
}

/// Run-level toggles shared by both applications.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub antithetic: bool,
    /// Re-simulate one probe under the shifted drift and compare with the
    /// reweighted estimate (Brownian shift only).
    pub cross_check_measure: bool,
    /// Refinement levels for the conservation study (empty = skip).
    pub conservation_levels: Vec<usize>,
    pub conservation_paths: usize,
    /// Retain trajectories of this many paths for dumps.
    pub retain_paths: usize,
    pub max_grid_entries: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            antithetic: false,
            cross_check_measure: false,
            conservation_levels: Vec::new(),
            conservation_paths: 4_000,
            retain_paths: 0,
            max_grid_entries: DEFAULT_MAX_GRID_ENTRIES,
        }
    }
}

/// Direct-simulation cross-check of one reweighted estimate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasureCrossCheck {
    pub probe: String,
    pub reweighted: f64,
    pub reweighted_se: f64,
    pub direct: f64,
    pub direct_se: f64,
    pub pass: bool,
}

/// Admissibility and structure checks specific to the reinsurance run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReinsuranceChecks {
    /// Smallest retention level evaluated along the optimal pair.
    pub q_min: f64,
    pub q_positive: bool,
    /// psi_hat at the top of the claim support (its maximum).
    pub psi_max: f64,
    /// Admissibility bound b y_max / (lambda m2).
    pub psi_bound: f64,
    pub psi_in_range: bool,
    /// max |h^{with jumps} - h^{without}| over the grid (0 by adaptedness).
    pub h_invariance_max_diff: f64,
}

/// Everything a packaged application run produces.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CombinedReport {
    pub kind: String,
    pub h0: f64,
    pub y0: f64,
    /// Common optimal value h_0 x + (Y_0 - 1) / (2 theta).
    pub value: f64,
    pub saddle: SaddleReport,
    /// Absent when the market is degenerate (Y_0 = 1: no excess return and
    /// no claim premium), where the dual chain is rightly unbounded but the
    /// robust value still exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality: Option<DualityReport>,
    /// max |corollary formula - generic formula| over sample points.
    pub specialization_max_diff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reinsurance: Option<ReinsuranceChecks>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_check: Option<MeasureCrossCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conservation: Option<ConservationStudy>,
    pub excluded_paths: usize,
    pub cap_hits: u64,
    pub meta: RunMeta,
    pub pass: bool,
}

fn ensure_valid(cfg: &ScenarioConfig) -> Result<()> {
    let report = validate_scenario(cfg);
    if !report.is_valid() {
        let codes: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.code, v.message))
            .collect();
        return Err(Error::Config {
            pointer: String::new(),
            message: format!("scenario violates assumptions: {}", codes.join("; ")),
        });
    }
    Ok(())
}

fn ensure_portfolio_shape(cfg: &ScenarioConfig) -> Result<()> {
    if cfg.model.c.iter().any(|&c| c != 0.0) {
        return Err(Error::DomainError(
            "application models must have C = 0 (portfolio shape)".into(),
        ));
    }
    Ok(())
}

/// Corollary portfolio strategy
/// pi_hat = (h sigma')^{-1} ( Lambda/theta [(sigma^{-1}mu + h^{-1}L) Y - Z] - X L ),
/// written from the application-side quantities; must coincide with the
/// generic optimal control under the (A,B,C,D) = (r,mu,0,sigma) mapping.
#[allow(clippy::too_many_arguments)]
fn corollary_pi_into(
    sol: &BsdeSolution,
    consts: &ModelConstants,
    theta: f64,
    k: usize,
    f: f64,
    x: f64,
    lambda: f64,
    out: &mut [f64],
) {
    let n = consts.n;
    let h = sol.h_at(k, f);
    let y = sol.y_at(k, f);
    let mut hinv_l = vec![0.0; n];
    let mut l = vec![0.0; n];
    let mut z = vec![0.0; n];
    sol.hinv_l_into(k, f, &mut hinv_l);
    sol.l_into(k, f, &mut l);
    sol.z_into(k, f, &mut z);
    // sigma^{-1} mu = D^{-1} B under the mapping
    let mut v = vec![0.0; n];
    for j in 0..n {
        let sig_inv_mu = consts.d_inv_b[j];
        v[j] = lambda / theta * ((sig_inv_mu + hinv_l[j]) * y - z[j]) - x * l[j];
    }
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += consts.d_t_inv[(j, i)] * v[i];
        }
        out[j] = acc / h;
    }
}

/// Max gap between the corollary strategy and the generic optimal control
/// over a grid of sample states.
fn specialization_gap(
    cfg: &ScenarioConfig,
    sol: &BsdeSolution,
    consts: &ModelConstants,
) -> Result<f64> {
    let n = consts.n;
    let spread = cfg
        .model
        .factor
        .as_ref()
        .map(|fp| {
            let v: f64 = fp.v_f.iter().map(|v| v * v).sum::<f64>().sqrt();
            (fp.f_0, 2.0 * v / (2.0 * fp.kappa_f).sqrt().max(1e-9))
        })
        .unwrap_or((f64::NAN, 0.0));
    let mut max_gap = 0.0f64;
    let mut generic = vec![0.0; n];
    let mut corollary = vec![0.0; n];
    let nodes = [
        0,
        cfg.grid.steps / 3,
        2 * cfg.grid.steps / 3,
        cfg.grid.steps,
    ];
    for &k in &nodes {
        for df in [-1.0, 0.0, 1.0] {
            let f = spread.0 + df * spread.1;
            for x in [0.5, 1.0, 2.0] {
                for lam in [0.5, 1.0, 2.0] {
                    crate::control::optimal_u_into(
                        sol,
                        consts,
                        cfg.theta,
                        k,
                        f,
                        x,
                        lam,
                        &mut generic,
                    )?;
                    corollary_pi_into(sol, consts, cfg.theta, k, f, x, lam, &mut corollary);
                    for j in 0..n {
                        max_gap = max_gap.max((generic[j] - corollary[j]).abs());
                    }
                }
            }
        }
    }
    Ok(max_gap)
}

fn cross_check_measure(
    cfg: &ScenarioConfig,
    sol: &BsdeSolution,
    bundle: &PathBundle,
) -> Result<MeasureCrossCheck> {
    // constant control under the optimal generator, estimated two ways:
    // reweighting by Lambda_T vs direct simulation under the shifted drift
    let mut req = RunRequest::new(
        &cfg.model,
        cfg.jump.as_ref(),
        bundle,
        Some(sol),
        cfg.theta,
        cfg.x,
    );
    req.u_probes = vec![UProbe::new(
        "const",
        ControlRule::Constant(vec![0.5; sol.dim]),
    )];
    req.eta_probes = vec![crate::engine::EtaProbe::new(
        "eta_hat",
        crate::engine::GeneratorRule::Optimal,
    )];
    req.resimulate_under_shift = Some((0, 0));
    let out = crate::engine::run_ensemble(&req)?;
    let (rew, rew_se) = girsanov_reweight(&out.x_terminal[0], &out.lambda_terminal[0])?;
    let (direct, direct_se) = crate::engine::mean_se(out.shift_x_terminal.as_ref().unwrap());
    let tol = 4.0 * (rew_se * rew_se + direct_se * direct_se).sqrt();
    Ok(MeasureCrossCheck {
        probe: "const_control_under_eta_hat".into(),
        reweighted: rew,
        reweighted_se: rew_se,
        direct,
        direct_se,
        pass: (rew - direct).abs() <= tol,
    })
}

fn combined_run(cfg: &ScenarioConfig, opts: &RunOptions, kind: &str) -> Result<CombinedReport> {
    ensure_valid(cfg)?;
    ensure_portfolio_shape(cfg)?;
    let consts = cfg.model.constants()?;
    let bundle = generate_paths_with(cfg, opts.antithetic, opts.max_grid_entries)?;
    let sol = BsdeSolution::solve(cfg, Some(&bundle))?;
    let (h0, y0) = (sol.h0(), sol.y0());
    let value = robust_value(h0, y0, cfg.x, cfg.theta)?;

    let probes = ProbeSet::defaults(cfg.model.dim(), cfg.seed, cfg.jump.is_some());
    let (saddle, run_out) = verify_saddle(cfg, &sol, &bundle, &probes, opts.retain_paths)?;
    let duality = match duality_report(cfg, &sol, &bundle) {
        Ok(d) => Some(d),
        Err(Error::DegenerateMarket { .. }) => None,
        Err(e) => return Err(e),
    };
    let specialization_max_diff = specialization_gap(cfg, &sol, &consts)?;

    let reinsurance = match &cfg.jump {
        None => None,
        Some(jump) => {
            let m2 = jump.m2();
            let psi_bound = jump.premium_loading * jump.claims.y_max() / (jump.intensity * m2);
            let psi_max = psi_bound; // psi_hat(y) = b y / (lambda m2) peaks at y_max
            let h_invariance_max_diff = h_invariance_gap(cfg, &bundle)?;
            Some(ReinsuranceChecks {
                q_min: run_out.min_retention,
                q_positive: run_out.min_retention > 0.0,
                psi_max,
                psi_bound,
                psi_in_range: (0.0..=psi_bound).contains(&psi_max),
                h_invariance_max_diff,
            })
        }
    };

    let cross_check = if opts.cross_check_measure {
        Some(cross_check_measure(cfg, &sol, &bundle)?)
    } else {
        None
    };
    let conservation = if opts.conservation_levels.len() >= 2 {
        Some(conservation_study(
            cfg,
            &opts.conservation_levels,
            opts.conservation_paths,
        )?)
    } else {
        None
    };

    let mut pass = saddle.pass;
    if let Some(d) = &duality {
        pass &= d.pass;
        pass &= (value - d.mmv_value).abs() <= 1e-12 * (1.0 + value.abs());
    }
    pass &= specialization_max_diff <= 1e-10;
    if let Some(r) = &reinsurance {
        if cfg.jump.as_ref().unwrap().premium_loading > 0.0 {
            pass &= r.q_positive;
        }
        pass &= r.psi_in_range && r.h_invariance_max_diff == 0.0;
    }
    if let Some(c) = &cross_check {
        pass &= c.pass;
    }
    if let Some(c) = &conservation {
        pass &= c.order_at_least(0.5);
    }

    Ok(CombinedReport {
        kind: kind.into(),
        h0,
        y0,
        value,
        saddle,
        duality,
        specialization_max_diff,
        reinsurance,
        cross_check,
        conservation,
        excluded_paths: run_out.n_excluded,
        cap_hits: run_out.cap_hits,
        meta: RunMeta::for_config(cfg),
        pass,
    })
}

/// max |h_with_jump - h_without| on the grid: the h equation never sees the
/// jump block (its coefficients are Brownian-adapted), and the Brownian and
/// jump randomness live on separate streams, so this is exactly zero.
fn h_invariance_gap(cfg: &ScenarioConfig, bundle: &PathBundle) -> Result<f64> {
    let mut no_jump_cfg = cfg.clone();
    no_jump_cfg.jump = None;
    let no_jump_bundle = crate::bundle::generate_paths_with(
        &no_jump_cfg,
        bundle.antithetic,
        DEFAULT_MAX_GRID_ENTRIES,
    )?;
    let solve_h = |c: &ScenarioConfig, b: &PathBundle| -> Result<Vec<f64>> {
        let h = match c.model.tier {
            Tier::Deterministic => solve_h_deterministic(&c.model, &c.grid)?,
            Tier::MarkovFactor => {
                solve_h_markov(&c.model, &c.grid, b, MarkovBackend::Affine, &c.basis())?
            }
            Tier::PathDependent => {
                crate::bsde::solve_h_regression(&c.model, &c.grid, b, &c.basis())?
            }
        };
        let f = c.model.factor.as_ref().map(|fp| fp.f_0).unwrap_or(f64::NAN);
        Ok((0..c.grid.n_nodes())
            .map(|k| match &h.part {
                HPart::Deterministic { h } => h[k],
                HPart::Affine { c0, c1, .. } => (c0[k] + c1[k] * f).exp(),
                HPart::Regression { fits, .. } => 1.0 / fits[k].poly.eval(f),
            })
            .collect())
    };
    let with = solve_h(cfg, bundle)?;
    let without = solve_h(&no_jump_cfg, &no_jump_bundle)?;
    Ok(with
        .iter()
        .zip(&without)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Portfolio selection: map to the generic problem, solve, verify the
/// corollary formulas coincide with the generic ones, and report the common
/// optimal value h_0 x + (Y_0 - 1) / (2 theta).
pub fn run_portfolio(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<CombinedReport> {
    if cfg.jump.is_some() {
        return Err(Error::DomainError(
            "portfolio run does not take a jump model; use the reinsurance run".into(),
        ));
    }
    combined_run(cfg, opts, "portfolio")
}

/// Investment-reinsurance: solves h (unchanged by jumps) and the
/// jump-augmented Y, builds (eta_hat, psi_hat, pi_hat, q_hat), verifies
/// q_hat > 0 and 0 <= psi_hat <= b y_max / (lambda m2) pathwise, and runs
/// the saddle and duality gates with joint probes.
pub fn run_reinsurance(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<CombinedReport> {
    let jump = cfg
        .jump
        .as_ref()
        .ok_or_else(|| Error::DomainError("reinsurance run needs a jump model".into()))?;
    if jump.drift_offset != 0.0 {
        return Err(Error::DomainError(
            "the reinsurance model is normalized to drift offset a = 0".into(),
        ));
    }
    combined_run(cfg, opts, "reinsurance")
}

/// Pointwise mean-variance feedback pair for the reinsurance problem:
/// pi per the C = 0 feedback and retention
/// q^gamma = -(h X - gamma) b / (h lambda m2). Returns q.
#[allow(clippy::too_many_arguments)]
pub fn mv_feedback_reinsurance_into(
    sol: &BsdeSolution,
    consts: &ModelConstants,
    jump: &crate::model::JumpModel,
    gamma: f64,
    k: usize,
    f: f64,
    x: f64,
    pi: &mut [f64],
) -> Result<f64> {
    crate::duality::mv_feedback_into(sol, consts, gamma, k, f, x, pi)?;
    let h = sol.h_at(k, f);
    let q = -(h * x - gamma) * jump.premium_loading / (h * jump.intensity * jump.m2());
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duality::{gamma_hat, k_hat};
    use crate::grid::TimeGrid;
    use crate::model::{ClaimDistribution, CoefficientModel, JumpModel, TimeFn};

    fn reins_cfg(b: f64, mu: f64, n_paths: usize, steps: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            x: 1.0,
            theta: 1.0,
            grid: TimeGrid::new(1.0, steps).unwrap(),
            model: CoefficientModel::deterministic(
                TimeFn::constant(0.03),
                vec![mu],
                vec![0.0],
                vec![vec![0.2]],
            ),
            jump: Some(JumpModel {
                intensity: 1.0,
                claims: ClaimDistribution::Discrete {
                    atoms: vec![(1.0, 1.0)],
                },
                premium_loading: b,
                drift_offset: 0.0,
            }),
            n_paths,
            seed,
            basis: None,
        }
    }

    #[test]
    fn portfolio_run_passes_on_the_constant_market() {
        let mut cfg = reins_cfg(0.0, 0.1, 20_000, 64, 12);
        cfg.jump = None;
        let report = run_portfolio(&cfg, &RunOptions::default()).unwrap();
        assert!(report.pass, "{:#?}", report.saddle);
        let expect = 0.03f64.exp() + (0.25f64.exp() - 1.0) / 2.0;
        assert!((report.value - expect).abs() < 1e-12);
        assert!(report.specialization_max_diff < 1e-12);
    }

    #[test]
    fn portfolio_rejects_jump_configs_and_validation_errors() {
        let cfg = reins_cfg(0.3, 0.1, 100, 8, 1);
        assert!(run_portfolio(&cfg, &RunOptions::default()).is_err());
        let mut bad = cfg.clone();
        bad.jump = None;
        bad.theta = -1.0;
        assert!(matches!(
            run_portfolio(&bad, &RunOptions::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn pure_reinsurance_value_matches_the_closed_form() {
        // mu = 0, deterministic r: phi = 0, so h_0 = e^{0.03} and
        // Y_0 = e^{b^2 T / (lambda m2)} = e^{0.09}
        let cfg = reins_cfg(0.3, 0.0, 20_000, 64, 5);
        let report = run_reinsurance(&cfg, &RunOptions::default()).unwrap();
        let expect = 0.03f64.exp() + (0.09f64.exp() - 1.0) / 2.0;
        assert!(
            (report.value - expect).abs() < 1e-9,
            "{} vs {expect}",
            report.value
        );
        let checks = report.reinsurance.as_ref().unwrap();
        assert!(checks.q_positive, "q_min = {}", checks.q_min);
        assert!(checks.psi_in_range);
        assert_eq!(checks.h_invariance_max_diff, 0.0);
        assert!(report.pass, "saddle: {:#?}", report.saddle);
    }

    #[test]
    fn reinsurance_with_zero_loading_reproduces_the_portfolio_bitwise() {
        let cfg_jump = reins_cfg(0.0, 0.1, 5_000, 32, 77);
        let mut cfg_plain = cfg_jump.clone();
        cfg_plain.jump = None;
        let with = run_reinsurance(&cfg_jump, &RunOptions::default()).unwrap();
        let without = run_portfolio(&cfg_plain, &RunOptions::default()).unwrap();
        assert_eq!(with.h0.to_bits(), without.h0.to_bits());
        assert_eq!(with.y0.to_bits(), without.y0.to_bits());
        assert_eq!(with.value.to_bits(), without.value.to_bits());
        // every probe the two runs share must agree to the bit
        for p in &without.saddle.probes {
            let q = with
                .saddle
                .probes
                .iter()
                .find(|q| q.name == p.name && q.kind == p.kind)
                .unwrap_or_else(|| panic!("probe {} missing", p.name));
            assert_eq!(
                q.estimate.to_bits(),
                p.estimate.to_bits(),
                "probe {} diverged",
                p.name
            );
            assert_eq!(q.se.to_bits(), p.se.to_bits());
        }
        let (wd, nd) = (
            with.duality.as_ref().unwrap(),
            without.duality.as_ref().unwrap(),
        );
        assert_eq!(wd.empirical.mean.to_bits(), nd.empirical.mean.to_bits());
        assert_eq!(wd.empirical.var.to_bits(), nd.empirical.var.to_bits());
    }

    #[test]
    fn reinsurance_feedback_reproduces_q_hat_at_the_optimal_gamma() {
        let cfg = reins_cfg(0.3, 0.0, 256, 32, 3);
        let bundle = crate::bundle::generate_paths(&cfg).unwrap();
        let sol = BsdeSolution::solve(&cfg, Some(&bundle)).unwrap();
        let consts = cfg.model.constants().unwrap();
        let jump = cfg.jump.as_ref().unwrap();
        let tol = crate::duality::degeneracy_tol(&sol);
        let kh = k_hat(sol.h0(), sol.y0(), cfg.x, cfg.theta, tol).unwrap();
        let gh = gamma_hat(kh, sol.h0(), sol.y0(), cfg.x, tol).unwrap();
        let mut pi = vec![0.0];
        for k in [0usize, 10, 31] {
            for lam in [0.5, 1.0, 1.7] {
                // wealth on the closed-form manifold at this density level
                let target = cfg.theta * sol.h0() * cfg.x + sol.y0();
                let x =
                    (target - lam * sol.y_at(k, f64::NAN)) / (cfg.theta * sol.h_at(k, f64::NAN));
                let q =
                    mv_feedback_reinsurance_into(&sol, &consts, jump, gh, k, f64::NAN, x, &mut pi)
                        .unwrap();
                let q_hat = jump.premium_loading * lam * sol.y_at(k, f64::NAN)
                    / (sol.h_at(k, f64::NAN) * cfg.theta * jump.intensity * jump.m2());
                assert!(
                    (q - q_hat).abs() < 1e-12 * (1.0 + q_hat),
                    "k={k} lam={lam}: {q} vs {q_hat}"
                );
                // mu = 0 and L = 0 make the investment leg vanish
                assert!(pi[0].abs() < 1e-12);
            }
        }
        // on-target wealth stops reinsurance
        let q = mv_feedback_reinsurance_into(
            &sol,
            &consts,
            jump,
            gh,
            0,
            f64::NAN,
            gh / sol.h_at(0, f64::NAN),
            &mut pi,
        )
        .unwrap();
        assert!(q.abs() < 1e-12);
    }

    #[test]
    fn zero_excess_return_portfolio_reports_value_without_dual() {
        // mu = 0 and deterministic r: L = 0, pi_hat = 0, Y_0 = 1; the value
        // is pure discounting x e^{int r} and the dual chain is degenerate
        let mut cfg = reins_cfg(0.0, 0.0, 2_000, 32, 8);
        cfg.jump = None;
        let report = run_portfolio(&cfg, &RunOptions::default()).unwrap();
        assert!((report.value - 0.03f64.exp()).abs() < 1e-12);
        assert!(report.duality.is_none());
        assert!(report.saddle.pass);
        // and Y_0 = 1 means every dual operation raises on this market
        assert!(matches!(
            crate::duality::k_hat(report.h0, report.y0, 1.0, 1.0, 1e-10),
            Err(Error::DegenerateMarket { .. })
        ));
    }

    #[test]
    fn cross_check_measure_agrees_with_reweighting() {
        let mut cfg = reins_cfg(0.0, 0.1, 20_000, 64, 21);
        cfg.jump = None;
        let opts = RunOptions {
            cross_check_measure: true,
            ..RunOptions::default()
        };
        let report = run_portfolio(&cfg, &opts).unwrap();
        let cc = report.cross_check.unwrap();
        assert!(cc.pass, "{cc:?}");
    }
}
