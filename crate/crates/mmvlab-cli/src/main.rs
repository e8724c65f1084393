//! Batch front door: parses scenario configs, orchestrates the
//! solve/verify pipelines, and emits machine-readable reports.
//!
//! Exit codes: 0 all gates pass, 2 configuration error, 3 numerical gate
//! failure, 4 resource limit.
//!
//! Reports are deterministic: identical manifests produce byte-identical
//! `report.json`. Volatile data (wall-clock duration) goes to `run.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmvlab::applications::{run_portfolio, run_reinsurance, RunOptions};
use mmvlab::bsde::BsdeSolution;
use mmvlab::bundle::generate_paths_with;
use mmvlab::control::{factor_paths, verify_saddle, ProbeSet};
use mmvlab::duality::duality_report;
use mmvlab::engine::{run_ensemble, ControlRule, RetentionRule, RunRequest, UProbe};
use mmvlab::error::Error;
use mmvlab::model::{validate_scenario, ScenarioConfig};
use mmvlab::report::{write_bsde_dump, write_json, write_path_dump, RunMeta, RunSidecar};
use mmvlab::selftest;

#[derive(Parser)]
#[command(
    name = "mmvlab",
    version,
    about = "Monte Carlo laboratory for monotone mean-variance control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario JSON file, or the name of a bundled preset
    /// (portfolio_const, portfolio_vasicek, reinsurance_discrete,
    /// reinsurance_lognormal).
    #[arg(long)]
    scenario: String,
    /// Override the scenario's path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the scenario's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and dumps.
    #[arg(long, default_value = "mmvlab-out")]
    out: PathBuf,
    /// Use antithetic Brownian increments.
    #[arg(long)]
    antithetic: bool,
    /// Dump trajectories of up to this many paths as CSV.
    #[arg(long, value_name = "CAP")]
    dump_paths: Option<usize>,
    /// Dump the solved (h, L, Y, Z) grid as CSV.
    #[arg(long)]
    dump_bsde: bool,
    /// Re-simulate one probe under the shifted drift as a measure-change
    /// cross-check.
    #[arg(long)]
    cross_check_measure: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the two backward equations and report h_0, Y_0 and the value.
    Solve(CommonArgs),
    /// Monte Carlo verification of the saddle-point property.
    VerifySaddle(CommonArgs),
    /// Closed-form duality chain plus the empirical mean-variance run.
    Duality(CommonArgs),
    /// Full portfolio-selection pipeline.
    Portfolio(CommonArgs),
    /// Full investment-reinsurance pipeline.
    Reinsurance(CommonArgs),
    /// Run the complete acceptance battery.
    Selftest {
        /// Output directory for the battery report.
        #[arg(long, default_value = "mmvlab-out")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct SolveReport {
    meta: RunMeta,
    tier: String,
    h0: f64,
    y0: f64,
    value: f64,
    min_h: f64,
    min_y: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    h_r2_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_r2_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    h_se0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_se0: Option<f64>,
    nested_inner_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    nested_max_rel_gap: Option<f64>,
    cap_hits: u64,
}

#[derive(Serialize)]
struct SaddleFile {
    meta: RunMeta,
    saddle: mmvlab::control::SaddleReport,
}

#[derive(Serialize)]
struct DualityFile {
    meta: RunMeta,
    duality: mmvlab::duality::DualityReport,
}

#[derive(Serialize)]
struct SelftestFile {
    version: String,
    criteria: Vec<selftest::CriterionResult>,
    pass: bool,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::ResourceLimit(_) => 4,
        _ => 3,
    }
}

fn load_scenario(args: &CommonArgs) -> Result<ScenarioConfig, Error> {
    let text = match selftest::preset_json(&args.scenario) {
        Some(embedded) if !Path::new(&args.scenario).exists() => embedded.to_string(),
        _ => std::fs::read_to_string(&args.scenario).map_err(|e| Error::Config {
            pointer: String::new(),
            message: format!("cannot read scenario {}: {e}", args.scenario),
        })?,
    };
    let mut cfg = ScenarioConfig::from_json_str(&text)?;
    if let Some(p) = args.paths {
        cfg.n_paths = p;
    }
    if let Some(s) = args.steps {
        cfg.grid.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = validate_scenario(&cfg);
    if !report.is_valid() {
        let lines: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{} ({})", v.message, v.code))
            .collect();
        return Err(Error::Config {
            pointer: String::new(),
            message: lines.join("; "),
        });
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config {
        pointer: String::new(),
        message: format!("cannot create output directory {}: {e}", dir.display()),
    })
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("MMVLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config {
            pointer: String::new(),
            message: format!("MMVLAB_THREADS must be an integer, got {v}"),
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config {
                pointer: String::new(),
                message: format!("thread pool: {e}"),
            })?;
    }
    Ok(())
}

fn dump_artifacts(
    args: &CommonArgs,
    cfg: &ScenarioConfig,
    sol: Option<&BsdeSolution>,
    retained: Option<&mmvlab::engine::RetainedPaths>,
) -> Result<(), Error> {
    if args.dump_bsde {
        if let Some(sol) = sol {
            let factors_owned;
            let factors = match cfg.model.tier {
                mmvlab::model::Tier::Deterministic => None,
                _ => {
                    // a small ensemble is enough for the per-path dump
                    let mut small = cfg.clone();
                    small.n_paths = cfg.n_paths.min(64);
                    let small_bundle = generate_paths_with(&small, args.antithetic, u64::MAX)?;
                    factors_owned = factor_paths(&small, &small_bundle);
                    factors_owned.as_deref()
                }
            };
            write_bsde_dump(&args.out.join("bsde.csv"), cfg, sol, factors, 64)?;
        }
    }
    if let (Some(_cap), Some(retained)) = (args.dump_paths, retained) {
        write_path_dump(&args.out.join("paths.csv"), cfg, retained)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    init_threads()?;
    match cli.command {
        Command::Solve(args) => {
            let started = Instant::now();
            let cfg = load_scenario(&args)?;
            ensure_out(&args.out)?;
            let bundle = generate_paths_with(&cfg, args.antithetic, u64::MAX)?;
            let sol = BsdeSolution::solve(&cfg, Some(&bundle))?;
            let value = mmvlab::control::robust_value(sol.h0(), sol.y0(), cfg.x, cfg.theta)?;
            let report = SolveReport {
                meta: RunMeta::for_config(&cfg),
                tier: format!("{:?}", sol.tier),
                h0: sol.h0(),
                y0: sol.y0(),
                value,
                min_h: sol.diag.min_h,
                min_y: sol.diag.min_y,
                h_r2_min: sol.diag.h_r2_min,
                y_r2_min: sol.diag.y_r2_min,
                h_se0: sol.diag.h_se0,
                y_se0: sol.diag.y_se0,
                nested_inner_samples: sol.diag.nested_inner_samples,
                nested_max_rel_gap: sol.diag.nested_max_rel_gap,
                cap_hits: sol.diag.cap_hits,
            };
            write_json(&args.out.join("report.json"), &report)?;
            dump_artifacts(&args, &cfg, Some(&sol), None)?;
            write_json(
                &args.out.join("run.json"),
                &RunSidecar {
                    duration_ms: started.elapsed().as_millis(),
                },
            )?;
            println!(
                "h0 = {:.12}, y0 = {:.12}, value = {:.12}",
                report.h0, report.y0, report.value
            );
            Ok(true)
        }
        Command::VerifySaddle(args) => {
            let started = Instant::now();
            let cfg = load_scenario(&args)?;
            ensure_out(&args.out)?;
            let bundle = generate_paths_with(&cfg, args.antithetic, u64::MAX)?;
            let sol = BsdeSolution::solve(&cfg, Some(&bundle))?;
            let probes = ProbeSet::defaults(cfg.model.dim(), cfg.seed, cfg.jump.is_some());
            let retain = args.dump_paths.unwrap_or(0).min(1024);
            let (saddle, out) = verify_saddle(&cfg, &sol, &bundle, &probes, retain)?;
            for p in &saddle.probes {
                println!(
                    "{:>4} {:<24} estimate {:+.6} se {:.2e} {}",
                    p.kind,
                    p.name,
                    p.estimate,
                    p.se,
                    if p.pass { "pass" } else { "FAIL" }
                );
            }
            println!(
                "  eq {:<24} estimate {:+.6} se {:.2e} {}",
                saddle.equality_case.name,
                saddle.equality_case.estimate,
                saddle.equality_case.se,
                if saddle.equality_case.pass {
                    "pass"
                } else {
                    "FAIL"
                }
            );
            let pass = saddle.pass;
            write_json(
                &args.out.join("report.json"),
                &SaddleFile {
                    meta: RunMeta::for_config(&cfg),
                    saddle,
                },
            )?;
            dump_artifacts(&args, &cfg, Some(&sol), Some(&out.retained))?;
            write_json(
                &args.out.join("run.json"),
                &RunSidecar {
                    duration_ms: started.elapsed().as_millis(),
                },
            )?;
            Ok(pass)
        }
        Command::Duality(args) => {
            let started = Instant::now();
            let cfg = load_scenario(&args)?;
            ensure_out(&args.out)?;
            let bundle = generate_paths_with(&cfg, args.antithetic, u64::MAX)?;
            let sol = BsdeSolution::solve(&cfg, Some(&bundle))?;
            let duality = duality_report(&cfg, &sol, &bundle)?;
            println!(
                "k_hat = {:.6}, mv = {:.9}, mmv = {:.9}, empirical value = {:.6} (se {:.2e}): {}",
                duality.k_hat,
                duality.mv_value,
                duality.mmv_value,
                duality.empirical.value,
                duality.empirical.se_value,
                if duality.pass { "pass" } else { "FAIL" }
            );
            let pass = duality.pass;
            write_json(
                &args.out.join("report.json"),
                &DualityFile {
                    meta: RunMeta::for_config(&cfg),
                    duality,
                },
            )?;
            dump_artifacts(&args, &cfg, Some(&sol), None)?;
            write_json(
                &args.out.join("run.json"),
                &RunSidecar {
                    duration_ms: started.elapsed().as_millis(),
                },
            )?;
            Ok(pass)
        }
        Command::Portfolio(args) => run_application(args, false),
        Command::Reinsurance(args) => run_application(args, true),
        Command::Selftest { out } => {
            ensure_out(&out)?;
            let criteria = selftest::run_all();
            for c in &criteria {
                println!("{}", c.line());
            }
            let pass = criteria.iter().all(|c| c.pass);
            write_json(
                &out.join("selftest.json"),
                &SelftestFile {
                    version: mmvlab::report::version_string(),
                    criteria,
                    pass,
                },
            )?;
            Ok(pass)
        }
    }
}

fn run_application(args: CommonArgs, reinsurance: bool) -> Result<bool, Error> {
    let started = Instant::now();
    let cfg = load_scenario(&args)?;
    ensure_out(&args.out)?;
    let opts = RunOptions {
        antithetic: args.antithetic,
        cross_check_measure: args.cross_check_measure,
        retain_paths: args.dump_paths.unwrap_or(0).min(1024),
        ..RunOptions::default()
    };
    let report = if reinsurance {
        run_reinsurance(&cfg, &opts)?
    } else {
        run_portfolio(&cfg, &opts)?
    };
    println!(
        "{}: h0 = {:.9}, y0 = {:.9}, value = {:.9}: {}",
        report.kind,
        report.h0,
        report.y0,
        report.value,
        if report.pass { "pass" } else { "FAIL" }
    );
    let pass = report.pass;
    write_json(&args.out.join("report.json"), &report)?;
    if args.dump_paths.is_some() || args.dump_bsde {
        // re-run a light ensemble for the dumps
        let bundle = generate_paths_with(&cfg, args.antithetic, u64::MAX)?;
        let sol = BsdeSolution::solve(&cfg, Some(&bundle))?;
        if let Some(cap) = args.dump_paths {
            let mut req = RunRequest::new(
                &cfg.model,
                cfg.jump.as_ref(),
                &bundle,
                Some(&sol),
                cfg.theta,
                cfg.x,
            );
            let retention = if cfg.jump.is_some() {
                RetentionRule::Optimal
            } else {
                RetentionRule::Zero
            };
            req.u_probes =
                vec![UProbe::new("u_hat", ControlRule::Optimal).with_retention(retention)];
            req.retain_paths = cap.min(1024);
            let out = run_ensemble(&req)?;
            write_path_dump(&args.out.join("paths.csv"), &cfg, &out.retained)?;
        }
        dump_artifacts(&args, &cfg, Some(&sol), None)?;
    }
    write_json(
        &args.out.join("run.json"),
        &RunSidecar {
            duration_ms: started.elapsed().as_millis(),
        },
    )?;
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
