//! Cutoff profiles for the backprojection slope variable.

use crate::error::{MixedRayError, Result};
use serde::{Deserialize, Serialize};

/// Even, non-negative cutoff: a compactly supported bump or a Gaussian with
/// the variance rule nu = alpha / F (or an explicit nu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CutoffProfile {
    /// chi(s) = exp(-s^2 / (width^2 - s^2)) on |s| < width, 0 outside;
    /// chi(0) = 1.
    Bump { width: f64 },
    /// chi(s) = exp(-s^2 / (2 nu)), truncated at 6 sigma for quadrature.
    Gaussian { nu: f64 },
}

impl Default for CutoffProfile {
    fn default() -> Self {
        CutoffProfile::Bump { width: 1.0 }
    }
}

impl CutoffProfile {
    /// Gaussian with the variance rule nu = alpha / F.
    pub fn gaussian_from_alpha(alpha: f64, f_weight: f64) -> Result<Self> {
        if alpha <= 0.0 || f_weight <= 0.0 {
            return Err(MixedRayError::domain(
                "gaussian cutoff rule nu = alpha/F needs alpha > 0 and F > 0",
            ));
        }
        Ok(CutoffProfile::Gaussian { nu: alpha / f_weight })
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            CutoffProfile::Bump { width } => {
                let u = s / width;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (-u * u / (1.0 - u * u)).exp()
                }
            }
            CutoffProfile::Gaussian { nu } => (-s * s / (2.0 * nu)).exp(),
        }
    }

    /// Radius of the quadrature support: exact for the bump, 6 sigma for the
    /// Gaussian tail.
    pub fn support_radius(&self) -> f64 {
        match self {
            CutoffProfile::Bump { width } => *width,
            CutoffProfile::Gaussian { nu } => 6.0 * nu.sqrt(),
        }
    }

    /// L1 norm by fine Simpson quadrature (test oracle helper).
    pub fn l1_norm(&self) -> f64 {
        let r = self.support_radius();
        let m = 20_000;
        let h = 2.0 * r / m as f64;
        let mut s = 0.0;
        for k in 0..=m {
            let x = -r + k as f64 * h;
            let c = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += c * self.eval(x);
        }
        s * h / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CutoffProfile::Bump { width } if *width <= 0.0 => {
                Err(MixedRayError::domain("bump width must be positive"))
            }
            CutoffProfile::Gaussian { nu } if *nu <= 0.0 => {
                Err(MixedRayError::domain("gaussian variance must be positive"))
            }
            _ => Ok(()),
        }
    }
}
