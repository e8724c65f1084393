//! Report metadata and machine-readable artifact writers.
//!
//! JSON reports are deterministic functions of the run configuration: wall
//! clock and other volatile data go to a separate sidecar so identical
//! manifests produce byte-identical report files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsde::BsdeSolution;
use crate::engine::RetainedPaths;
use crate::error::{Error, Result};
use crate::model::ScenarioConfig;

/// Provenance carried by every report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    pub version: String,
}

impl RunMeta {
    pub fn for_config(cfg: &ScenarioConfig) -> RunMeta {
        RunMeta {
            seed: cfg.seed,
            n_paths: cfg.n_paths,
            steps: cfg.grid.steps,
            version: version_string(),
        }
    }
}

/// Build-provenance string: crate version, optionally extended by the
/// MMVLAB_BUILD_REF set at compile time (e.g. a git describe).
pub fn version_string() -> String {
    match option_env!("MMVLAB_BUILD_REF") {
        Some(r) => format!("mmvlab {} ({r})", env!("CARGO_PKG_VERSION")),
        None => format!("mmvlab {}", env!("CARGO_PKG_VERSION")),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Config {
        pointer: String::new(),
        message: format!("io error: {e}"),
    }
}

/// Write a serializable report as pretty JSON (deterministic byte stream).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config {
        pointer: String::new(),
        message: format!("serialization error: {e}"),
    })?;
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(text.as_bytes()).map_err(io_err)?;
    file.write_all(b"\n").map_err(io_err)?;
    Ok(())
}

/// Volatile run data kept out of the deterministic report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSidecar {
    pub duration_ms: u128,
}

/// Columnar path dump: header `path,k,t,X,Lambda,u_1..u_n`.
pub fn write_path_dump(path: &Path, cfg: &ScenarioConfig, retained: &RetainedPaths) -> Result<()> {
    let n = cfg.model.dim();
    let mut out = String::new();
    out.push_str("path,k,t,X,Lambda");
    for j in 1..=n {
        out.push_str(&format!(",u_{j}"));
    }
    out.push('\n');
    for (p, xs) in retained.x.iter().enumerate() {
        for (k, &x) in xs.iter().enumerate() {
            out.push_str(&format!(
                "{p},{k},{},{x},{}",
                cfg.grid.t(k),
                retained.lambda[p][k]
            ));
            for j in 0..n {
                // controls are per step; the terminal node repeats the last one
                let step = k.min(retained.u[p].len().saturating_sub(1));
                let u = retained.u[p].get(step).map(|u| u[j]).unwrap_or(0.0);
                out.push_str(&format!(",{u}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Solution dump for time-deterministic tiers: `k,t,h,L_1..L_n,Y,Z_1..Z_n`.
/// Stochastic tiers are dumped per path (first `path_cap` paths) with the
/// factor value column added.
pub fn write_bsde_dump(
    path: &Path,
    cfg: &ScenarioConfig,
    sol: &BsdeSolution,
    factors: Option<&[Vec<f64>]>,
    path_cap: usize,
) -> Result<()> {
    let n = sol.dim;
    let mut out = String::new();
    let mut l = vec![0.0; n];
    let mut z = vec![0.0; n];
    match factors {
        None => {
            out.push_str("k,t,h");
            for j in 1..=n {
                out.push_str(&format!(",L_{j}"));
            }
            out.push_str(",Y");
            for j in 1..=n {
                out.push_str(&format!(",Z_{j}"));
            }
            out.push('\n');
            for k in 0..sol.grid.n_nodes() {
                sol.l_into(k, f64::NAN, &mut l);
                sol.z_into(k, f64::NAN, &mut z);
                out.push_str(&format!("{k},{},{}", sol.grid.t(k), sol.h_at(k, f64::NAN)));
                for v in &l {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{}", sol.y_at(k, f64::NAN)));
                for v in &z {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        Some(fs) => {
            out.push_str("path,k,t,f,h");
            for j in 1..=n {
                out.push_str(&format!(",L_{j}"));
            }
            out.push_str(",Y");
            for j in 1..=n {
                out.push_str(&format!(",Z_{j}"));
            }
            out.push('\n');
            let paths = fs[0].len().min(path_cap);
            for p in 0..paths {
                for k in 0..sol.grid.n_nodes() {
                    let f = fs[k][p];
                    sol.l_into(k, f, &mut l);
                    sol.z_into(k, f, &mut z);
                    out.push_str(&format!("{p},{k},{},{f},{}", sol.grid.t(k), sol.h_at(k, f)));
                    for v in &l {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push_str(&format!(",{}", sol.y_at(k, f)));
                    for v in &z {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push('\n');
                }
            }
        }
    }
    let _ = cfg;
    std::fs::write(path, out).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_string_names_the_crate() {
        assert!(version_string().starts_with("mmvlab "));
    }

    #[test]
    fn json_writer_is_deterministic() {
        let dir = std::env::temp_dir().join("mmvlab_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let a = dir.join("a.json");
        let b = dir.join("b.json");
        let meta = RunMeta {
            seed: 7,
            n_paths: 10,
            steps: 4,
            version: "mmvlab test".into(),
        };
        write_json(&a, &meta).unwrap();
        write_json(&b, &meta).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
