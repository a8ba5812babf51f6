//! Matérn correlation and the full bivariate Matérn cross-covariance model.

use serde::{Deserialize, Serialize};

use super::special::{bessel_k, gamma};
use crate::error::{Error, Result};

/// Matérn correlation `2^{1−ν}/Γ(ν) (a d)^ν K_ν(a d)`, equal to 1 at `d = 0`.
///
/// Half-integer orders 1/2, 3/2 and 5/2 use their closed exponential forms.
pub fn matern_kernel(d: f64, nu: f64, a: f64) -> Result<f64> {
    if d.is_nan() || nu.is_nan() || a.is_nan() {
        return Err(Error::invalid("matern_kernel received NaN"));
    }
    if d < 0.0 || nu <= 0.0 || a <= 0.0 {
        return Err(Error::invalid(format!("matern_kernel needs d >= 0, nu > 0, a > 0 (d={d}, nu={nu}, a={a})")));
    }
    Ok(matern_unchecked(d, nu, a))
}

pub(crate) fn matern_unchecked(d: f64, nu: f64, a: f64) -> f64 {
    let x = a * d;
    if x == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        (-x).exp()
    } else if nu == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if nu == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else if x > 700.0 {
        0.0
    } else {
        let v = 2f64.powf(1.0 - nu) / gamma(nu) * x.powf(nu) * bessel_k(nu, x);
        v.min(1.0)
    }
}

/// Parameters of one Matérn process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    /// Smoothness ν > 0.
    pub nu: f64,
    /// Inverse range a > 0, in 1/domain units.
    pub a: f64,
    /// Marginal variance σ² ≥ 0.
    pub sigma2: f64,
}

impl MaternParams {
    pub fn new(nu: f64, a: f64, sigma2: f64) -> Result<Self> {
        let p = MaternParams { nu, a, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid(format!("smoothness must be positive, got {}", self.nu)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::invalid(format!("inverse range must be positive, got {}", self.a)));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("variance must be nonnegative, got {}", self.sigma2)));
        }
        Ok(())
    }

    pub fn covariance(&self, d: f64) -> f64 {
        self.sigma2 * matern_unchecked(d, self.nu, self.a)
    }
}

/// Full bivariate Matérn: marginal parameters plus cross smoothness, cross
/// inverse range and collocated correlation ρ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateMaternParams {
    pub p1: MaternParams,
    pub p2: MaternParams,
    pub nu12: f64,
    pub a12: f64,
    pub rho: f64,
}

impl BivariateMaternParams {
    /// Cross parameters default to `a12 = 1.2·max(a1, a2)` and
    /// `ν12 = (ν1 + ν2)/2`.
    pub fn with_default_cross(p1: MaternParams, p2: MaternParams, rho: f64) -> Result<Self> {
        let params = BivariateMaternParams { p1, p2, nu12: 0.5 * (p1.nu + p2.nu), a12: 1.2 * p1.a.max(p2.a), rho };
        params.validate()?;
        Ok(params)
    }

    /// The one-dimensional simulation set: a = (10, 15), ν = (0.4, 0.5),
    /// default cross terms, unit variances and ρ = 0.5.
    pub fn simulation_defaults() -> Self {
        Self::simulation_with_rho(0.5)
    }

    pub fn simulation_with_rho(rho: f64) -> Self {
        let p1 = MaternParams { nu: 0.4, a: 10.0, sigma2: 1.0 };
        let p2 = MaternParams { nu: 0.5, a: 15.0, sigma2: 1.0 };
        BivariateMaternParams { p1, p2, nu12: 0.45, a12: 18.0, rho }
    }

    /// Checks parameter ranges and positive semidefiniteness on a 1-D
    /// probe lattice spanning a few correlation ranges.
    pub fn validate(&self) -> Result<()> {
        self.p1.validate()?;
        self.p2.validate()?;
        if !(self.nu12 > 0.0 && self.a12 > 0.0 && self.nu12.is_finite() && self.a12.is_finite()) {
            return Err(Error::invalid("cross smoothness and inverse range must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("cross-correlation must lie in [-1, 1], got {}", self.rho)));
        }
        let span = 4.0 / self.p1.a.min(self.p2.a).min(self.a12);
        let probe = crate::geometry::build_grid(&crate::geometry::BBox::new(vec![0.0], vec![span])?, &[40])?;
        super::build_joint_cov(&probe, self).map(|_| ())
    }

    pub fn cross_covariance(&self, d: f64) -> f64 {
        self.rho * (self.p1.sigma2 * self.p2.sigma2).sqrt() * matern_unchecked(d, self.nu12, self.a12)
    }
}
