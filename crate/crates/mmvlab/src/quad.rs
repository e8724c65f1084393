//! Composite Simpson quadrature with doubling refinement.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const MAX_REFINEMENTS: usize = 22;

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    debug_assert!(panels >= 2 && panels.is_multiple_of(2));
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Integrate `f` over [a, b], doubling the panel count until the relative
/// change drops below `rel_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut panels = 8usize;
    let mut prev = simpson(&f, a, b, panels);
    for _ in 0..MAX_REFINEMENTS {
        panels *= 2;
        let cur = simpson(&f, a, b, panels);
        if (cur - prev).abs() <= rel_tol * (1.0 + cur.abs()) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::QuadratureNonConvergence {
        refinements: MAX_REFINEMENTS,
    })
}

/// Suffix integrals on a grid: out[k] = integral of f over [t_k, T].
///
/// Each node is integrated independently to the full tolerance, so the values
/// do not accumulate per-cell error across a long grid.
pub fn suffix_integrals<F: Fn(f64) -> f64>(
    f: F,
    grid: &TimeGrid,
    rel_tol: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        out.push(integrate(&f, grid.t(k), grid.horizon, rel_tol)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_constants_and_polynomials() {
        let v = integrate(|_| 3.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 6.0).abs() < 1e-12);
        let v = integrate(|t| t * t * t, 0.0, 1.0, 1e-12).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_integrand_converges() {
        let v = integrate(|t| (10.0 * t).sin(), 0.0, 1.0, 1e-11).unwrap();
        let exact = (1.0 - (10.0f64).cos()) / 10.0;
        assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
    }

    #[test]
    fn suffix_integrals_match_direct() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let out = suffix_integrals(|t| t.exp(), &grid, 1e-11).unwrap();
        for k in 0..grid.n_nodes() {
            let exact = grid.horizon.exp() - grid.t(k).exp();
            assert!((out[k] - exact).abs() < 1e-9);
        }
        assert_eq!(*out.last().unwrap(), 0.0);
    }
}
