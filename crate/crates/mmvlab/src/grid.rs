use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid on [0, T] with nodes t_k = k * dt, k = 0..=steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Horizon T in years.
    pub horizon: f64,
    /// Number of steps N; the grid has N + 1 nodes.
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let grid = TimeGrid { horizon, steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::DomainError(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if self.steps < 2 {
            return Err(Error::DomainError(format!(
                "grid needs at least 2 steps, got {}",
                self.steps
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Number of nodes (steps + 1).
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        TimeGrid::new(self.horizon, self.steps * factor.max(1))
    }

    /// Same horizon with `factor` times fewer steps. `steps` must be divisible.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::DomainError(format!(
                "cannot coarsen {} steps by factor {}",
                self.steps, factor
            )));
        }
        TimeGrid::new(self.horizon, self.steps / factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_increasing_and_end_at_horizon() {
        let g = TimeGrid::new(2.5, 10).unwrap();
        for k in 0..g.steps {
            assert!(g.t(k) < g.t(k + 1));
        }
        assert_eq!(g.t(g.steps), 2.5);
        assert!((g.dt() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn coarsen_refine_round_trip() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let c = g.coarsened(8).unwrap();
        assert_eq!(c.steps, 125);
        assert_eq!(c.refined(8).unwrap(), g);
        assert!(g.coarsened(3).is_err());
    }
}
