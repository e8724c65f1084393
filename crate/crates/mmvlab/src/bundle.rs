//! Seeded Brownian / Poisson-mark ensembles.
//!
//! A `PathBundle` never materializes the (steps x paths) increment array:
//! `delta_w` regenerates any increment from `(seed, path, step)` through the
//! counter RNG, so regeneration is bit-identical no matter how paths are
//! partitioned across workers. Jump marks are few and are stored per path.
//!
//! Coarsening keeps the fine-grid keying and sums blocks of fine increments,
//! which couples refinement levels to the same underlying Brownian path --
//! exactly what the strong-convergence studies need.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{JumpModel, ScenarioConfig};
use crate::rng::{self, Stream};

/// Cap on n_paths * steps * dim for one bundle.
pub const DEFAULT_MAX_GRID_ENTRIES: u64 = 300_000_000;

/// One claim arrival: (time, claim size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpMark {
    pub time: f64,
    pub size: f64,
}

/// Ensemble sanity statistics, reported but never enforced.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BundleStats {
    /// Paths the statistics were computed on (a prefix sample).
    pub sample_paths: usize,
    /// max_k,j |mean of dW_j at step k| / sqrt(dt / sample).
    pub max_step_mean_z: f64,
    /// max_k,ij |cov - dt I| in standard errors.
    pub max_step_cov_z: f64,
    /// Empirical mean jump count per path, if jumps are active.
    pub mean_jump_count: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Each coarse increment sums this many fine increments.
    agg: usize,
    fine_steps: usize,
    jumps: Option<Arc<Vec<Vec<JumpMark>>>>,
    pub stats: BundleStats,
    /// Worker partition hint; outputs must not depend on it.
    pub chunk_size: usize,
}

impl PathBundle {
    pub fn new(
        grid: TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: u64,
        antithetic: bool,
        jump: Option<&JumpModel>,
    ) -> Result<Self> {
        Self::with_budget(
            grid,
            n_paths,
            dim,
            seed,
            antithetic,
            jump,
            DEFAULT_MAX_GRID_ENTRIES,
        )
    }

    pub fn with_budget(
        grid: TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: u64,
        antithetic: bool,
        jump: Option<&JumpModel>,
        max_entries: u64,
    ) -> Result<Self> {
        grid.validate()?;
        if n_paths == 0 || dim == 0 {
            return Err(Error::DomainError(
                "bundle needs n_paths >= 1 and dim >= 1".into(),
            ));
        }
        let entries = n_paths as u64 * grid.steps as u64 * dim as u64;
        if entries > max_entries {
            return Err(Error::ResourceLimit(format!(
                "n_paths * steps * dim = {entries} exceeds the budget of {max_entries} grid entries"
            )));
        }
        let jumps = jump.map(|j| Arc::new(sample_jump_marks(j, &grid, n_paths, seed)));
        let mut bundle = PathBundle {
            grid,
            n_paths,
            dim,
            seed,
            antithetic,
            agg: 1,
            fine_steps: grid.steps,
            jumps,
            stats: BundleStats::default(),
            chunk_size: 1024,
        };
        bundle.stats = bundle.compute_stats(20_000);
        Ok(bundle)
    }

    /// Brownian increment over [t_k, t_{k+1}) for one path, written into `out`
    /// (length `dim`, units sqrt(time)).
    #[inline]
    pub fn delta_w(&self, k: usize, path: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        debug_assert!(k < self.grid.steps && path < self.n_paths);
        let (lane, sign) = if self.antithetic {
            ((path / 2) as u64, if path % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path as u64, 1.0)
        };
        let fine_dt = self.grid.horizon / self.fine_steps as f64;
        let sqrt_dt = fine_dt.sqrt();
        out.fill(0.0);
        for a in 0..self.agg {
            let fine_k = k * self.agg + a;
            for (j, slot) in out.iter_mut().enumerate() {
                let idx = (fine_k * self.dim + j) as u64;
                *slot += sqrt_dt * rng::standard_normal(self.seed, Stream::Brownian, lane, idx);
            }
        }
        if sign < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
    }

    /// Jump marks of one path, sorted by time. Empty when no jump model.
    pub fn jumps_for(&self, path: usize) -> &[JumpMark] {
        match &self.jumps {
            Some(j) => &j[path],
            None => &[],
        }
    }

    pub fn has_jumps(&self) -> bool {
        self.jumps.is_some()
    }

    /// A view of the same randomness on a grid `factor` times coarser.
    pub fn coarsened(&self, factor: usize) -> Result<PathBundle> {
        let grid = self.grid.coarsened(factor)?;
        let mut out = self.clone();
        out.grid = grid;
        out.agg = self.agg * factor;
        out.stats = BundleStats::default();
        Ok(out)
    }

    fn compute_stats(&self, max_sample: usize) -> BundleStats {
        let sample = self.n_paths.min(max_sample);
        let steps = self.grid.steps;
        let n = self.dim;
        let dt = self.grid.dt();
        let mut sums = vec![0.0f64; steps * n];
        let mut cross = vec![0.0f64; steps * n * n];
        let mut dw = vec![0.0f64; n];
        for p in 0..sample {
            for k in 0..steps {
                self.delta_w(k, p, &mut dw);
                for i in 0..n {
                    sums[k * n + i] += dw[i];
                    for j in i..n {
                        cross[(k * n + i) * n + j] += dw[i] * dw[j];
                    }
                }
            }
        }
        let m = sample as f64;
        let mean_se = (dt / m).sqrt();
        let mut max_mean_z = 0.0f64;
        let mut max_cov_z = 0.0f64;
        for k in 0..steps {
            for i in 0..n {
                max_mean_z = max_mean_z.max((sums[k * n + i] / m).abs() / mean_se);
                for j in i..n {
                    let raw = cross[(k * n + i) * n + j] / m;
                    let target = if i == j { dt } else { 0.0 };
                    let se = if i == j {
                        dt * (2.0 / m).sqrt()
                    } else {
                        dt / m.sqrt()
                    };
                    max_cov_z = max_cov_z.max((raw - target).abs() / se);
                }
            }
        }
        let mean_jump_count = self
            .jumps
            .as_ref()
            .map(|j| j.iter().map(|marks| marks.len() as f64).sum::<f64>() / self.n_paths as f64);
        BundleStats {
            sample_paths: sample,
            max_step_mean_z: max_mean_z,
            max_step_cov_z: max_cov_z,
            mean_jump_count,
        }
    }
}

fn sample_jump_marks(
    jump: &JumpModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Vec<Vec<JumpMark>> {
    let mean = jump.intensity * grid.horizon;
    (0..n_paths)
        .map(|p| {
            let path = p as u64;
            let count = rng::poisson(mean, rng::uniform_oc(seed, Stream::JumpCount, path, 0));
            let mut size_cursor = rng::LaneCursor::new(seed, Stream::JumpSize, path);
            let mut marks: Vec<JumpMark> = (0..count)
                .map(|i| JumpMark {
                    // uniform on (0, T]: strictly inside the horizon
                    time: grid.horizon * rng::uniform_oc(seed, Stream::JumpTime, path, i),
                    size: jump.claims.sample(&mut size_cursor),
                })
                .collect();
            marks.sort_by(|a, b| a.time.total_cmp(&b.time));
            marks
        })
        .collect()
}

/// Build the ensemble described by a scenario.
pub fn generate_paths(cfg: &ScenarioConfig) -> Result<PathBundle> {
    generate_paths_with(cfg, false, DEFAULT_MAX_GRID_ENTRIES)
}

pub fn generate_paths_with(
    cfg: &ScenarioConfig,
    antithetic: bool,
    max_entries: u64,
) -> Result<PathBundle> {
    PathBundle::with_budget(
        cfg.grid,
        cfg.n_paths,
        cfg.model.dim(),
        cfg.seed,
        antithetic,
        cfg.jump.as_ref(),
        max_entries,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClaimDistribution, CoefficientModel, TimeFn};

    fn base_cfg(seed: u64, steps: usize, n_paths: usize) -> ScenarioConfig {
        ScenarioConfig {
            x: 1.0,
            theta: 1.0,
            grid: TimeGrid::new(1.0, steps).unwrap(),
            model: CoefficientModel::deterministic(
                TimeFn::constant(0.0),
                vec![0.0],
                vec![0.0],
                vec![vec![0.2]],
            ),
            jump: None,
            n_paths,
            seed,
            basis: None,
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = base_cfg(42, 4, 2);
        let a = generate_paths(&cfg).unwrap();
        let b = generate_paths(&cfg).unwrap();
        let mut wa = vec![0.0];
        let mut wb = vec![0.0];
        for k in 0..4 {
            for p in 0..2 {
                a.delta_w(k, p, &mut wa);
                b.delta_w(k, p, &mut wb);
                assert_eq!(wa[0].to_bits(), wb[0].to_bits());
            }
        }
    }

    #[test]
    fn no_jump_model_means_no_marks() {
        let bundle = generate_paths(&base_cfg(1, 4, 3)).unwrap();
        assert!(!bundle.has_jumps());
        assert!(bundle.jumps_for(0).is_empty());
    }

    #[test]
    fn sanity_gates_hold_on_a_fresh_ensemble() {
        let bundle = generate_paths(&base_cfg(7, 16, 20_000)).unwrap();
        assert!(
            bundle.stats.max_step_mean_z < 5.0,
            "mean z {}",
            bundle.stats.max_step_mean_z
        );
        assert!(
            bundle.stats.max_step_cov_z < 5.0,
            "cov z {}",
            bundle.stats.max_step_cov_z
        );
    }

    #[test]
    fn poisson_jump_counts_match_intensity() {
        let mut cfg = base_cfg(11, 8, 100_000);
        cfg.jump = Some(JumpModel {
            intensity: 2.0,
            claims: ClaimDistribution::Discrete {
                atoms: vec![(1.0, 1.0)],
            },
            premium_loading: 0.3,
            drift_offset: 0.0,
        });
        let bundle = generate_paths(&cfg).unwrap();
        let mean = bundle.stats.mean_jump_count.unwrap();
        let lam_t = 2.0;
        let tol = 3.0 * (lam_t / cfg.n_paths as f64).sqrt();
        assert!((mean - lam_t).abs() < tol, "{mean} vs {lam_t} +- {tol}");
        // marks strictly inside (0, T], sorted
        for p in 0..50 {
            let marks = bundle.jumps_for(p);
            for w in marks.windows(2) {
                assert!(w[0].time <= w[1].time);
            }
            for m in marks {
                assert!(m.time > 0.0 && m.time <= 1.0);
                assert!(m.size > 0.0);
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = base_cfg(1, 1000, 1_000_000);
        let err = generate_paths_with(&cfg, false, 1_000_000).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit(_)));
    }

    #[test]
    fn coarsened_increments_sum_fine_ones() {
        let cfg = base_cfg(5, 1000, 3);
        let fine = generate_paths(&cfg).unwrap();
        let coarse = fine.coarsened(8).unwrap();
        assert_eq!(coarse.grid.steps, 125);
        let mut acc = [0.0];
        let mut w = vec![0.0];
        let mut cw = vec![0.0];
        for p in 0..3 {
            for kc in 0..coarse.grid.steps {
                acc[0] = 0.0;
                for a in 0..8 {
                    fine.delta_w(kc * 8 + a, p, &mut w);
                    acc[0] += w[0];
                }
                coarse.delta_w(kc, p, &mut cw);
                assert!((acc[0] - cw[0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn antithetic_pairs_mirror_increments() {
        let mut cfg = base_cfg(3, 4, 4);
        cfg.n_paths = 4;
        let bundle = generate_paths_with(&cfg, true, DEFAULT_MAX_GRID_ENTRIES).unwrap();
        let mut w0 = vec![0.0];
        let mut w1 = vec![0.0];
        for k in 0..4 {
            bundle.delta_w(k, 0, &mut w0);
            bundle.delta_w(k, 1, &mut w1);
            assert_eq!(w0[0], -w1[0]);
        }
    }
}
