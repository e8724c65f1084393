//! Least-squares polynomial regression for conditional expectations.
//!
//! The design matrix is built on the z-scored regressor ((f - center)/scale)
//! to keep the normal equations well conditioned; fits accumulate in a single
//! streaming pass (X'X, X'y, sum y, sum y^2), so the caller never has to hold
//! the cross-section in memory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONDITION_CAP: f64 = 1e12;
/// Regressor spread below which the fit degrades to the sample mean.
const DEGENERATE_STD: f64 = 1e-12;

/// Polynomial in the scaled variable z = (f - center)/scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub center: f64,
    pub scale: f64,
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn constant(value: f64) -> Self {
        Polynomial {
            center: 0.0,
            scale: 1.0,
            coeffs: vec![value],
        }
    }

    #[inline]
    pub fn eval(&self, f: f64) -> f64 {
        let z = (f - self.center) / self.scale;
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * z + c;
        }
        acc
    }

    pub fn scaled_by(&self, factor: f64) -> Polynomial {
        Polynomial {
            center: self.center,
            scale: self.scale,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Streaming accumulator for one regression: y on powers of the scaled f.
#[derive(Debug, Clone)]
pub struct FitAccumulator {
    center: f64,
    scale: f64,
    degree: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    sum_y: f64,
    sum_y2: f64,
    n: usize,
}

impl FitAccumulator {
    /// `center`/`spread` are the cross-sectional mean and standard deviation
    /// of the regressor (from a prior pass). A degenerate spread drops the
    /// basis to the constant term.
    pub fn new(center: f64, spread: f64, degree: usize) -> Self {
        let degenerate = !(spread.is_finite()) || spread < DEGENERATE_STD * (1.0 + center.abs());
        let degree = if degenerate { 0 } else { degree };
        let m = degree + 1;
        FitAccumulator {
            center,
            scale: if degenerate { 1.0 } else { spread },
            degree,
            xtx: DMatrix::zeros(m, m),
            xty: DVector::zeros(m),
            sum_y: 0.0,
            sum_y2: 0.0,
            n: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, f: f64, y: f64) {
        let m = self.degree + 1;
        let z = (f - self.center) / self.scale;
        let mut powers = [0.0f64; 16];
        debug_assert!(m <= 16);
        let mut zp = 1.0;
        for p in powers.iter_mut().take(m) {
            *p = zp;
            zp *= z;
        }
        for i in 0..m {
            for j in i..m {
                self.xtx[(i, j)] += powers[i] * powers[j];
            }
            self.xty[i] += powers[i] * y;
        }
        self.sum_y += y;
        self.sum_y2 += y * y;
        self.n += 1;
    }

    /// Merge a partial accumulator from another worker (associative).
    pub fn merge(&mut self, other: &FitAccumulator) {
        debug_assert_eq!(self.degree, other.degree);
        self.xtx += &other.xtx;
        self.xty += &other.xty;
        self.sum_y += other.sum_y;
        self.sum_y2 += other.sum_y2;
        self.n += other.n;
    }

    /// Solve the normal equations and package the fit with its error model.
    pub fn finish(mut self, condition_cap: f64) -> Result<Fit> {
        let m = self.degree + 1;
        if self.n <= m {
            return Err(Error::DomainError(format!(
                "regression needs more samples ({}) than basis functions ({m})",
                self.n
            )));
        }
        for i in 0..m {
            for j in 0..i {
                self.xtx[(i, j)] = self.xtx[(j, i)];
            }
        }
        let svd = self.xtx.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        };
        if cond > condition_cap {
            return Err(Error::RegressionIllConditioned {
                cond,
                cap: condition_cap,
            });
        }
        let coeffs = svd
            .solve(&self.xty, 0.0)
            .map_err(|_| Error::RegressionIllConditioned {
                cond,
                cap: condition_cap,
            })?;
        let xtx_inv = self
            .xtx
            .clone()
            .try_inverse()
            .ok_or(Error::RegressionIllConditioned {
                cond,
                cap: condition_cap,
            })?;
        // residual sum of squares from the accumulated moments
        let rss = (self.sum_y2 - 2.0 * coeffs.dot(&self.xty) + (&self.xtx * &coeffs).dot(&coeffs))
            .max(0.0);
        let tss = (self.sum_y2 - self.sum_y * self.sum_y / self.n as f64).max(0.0);
        let dof = (self.n - m) as f64;
        let resid_var = rss / dof;
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
        Ok(Fit {
            poly: Polynomial {
                center: self.center,
                scale: self.scale,
                coeffs: coeffs.iter().cloned().collect(),
            },
            xtx_inv,
            resid_var,
            r2,
            n: self.n,
        })
    }
}

/// A finished fit: the polynomial plus what is needed for pointwise standard
/// errors, se(f)^2 = psi(f)' (X'X)^{-1} psi(f) * resid_var.
#[derive(Debug, Clone)]
pub struct Fit {
    pub poly: Polynomial,
    xtx_inv: DMatrix<f64>,
    pub resid_var: f64,
    pub r2: f64,
    pub n: usize,
}

impl Fit {
    pub fn se_at(&self, f: f64) -> f64 {
        let m = self.poly.coeffs.len();
        let z = (f - self.poly.center) / self.poly.scale;
        let mut psi = DVector::zeros(m);
        let mut zp = 1.0;
        for i in 0..m {
            psi[i] = zp;
            zp *= z;
        }
        ((&self.xtx_inv * &psi).dot(&psi) * self.resid_var)
            .max(0.0)
            .sqrt()
    }
}

/// Running mean and standard deviation (Welford), used for the regressor
/// scaling pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    pub fn add(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = (self.n + other.n) as f64;
        let d = other.mean - self.mean;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n;
        self.mean += d * other.n as f64 / n;
        self.n += other.n;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n > 1 {
            (self.m2 / (self.n as f64 - 1.0)).sqrt()
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }
}
