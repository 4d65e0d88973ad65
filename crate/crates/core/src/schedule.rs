//! Zero-drift bridge noise schedule with linear `g²(t)`.
//!
//! With `f(t) = 0` the scaling coefficients are identically one, so the
//! schedule is fully described by `g²(t) = β₀ + t(β₁ − β₀)` on `t ∈ [0, 1]`
//! and its integral `σ_t²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct Schedule {
    beta0: f64,
    beta1: f64,
}

#[derive(Deserialize)]
struct RawSchedule {
    beta0: f64,
    beta1: f64,
}

impl TryFrom<RawSchedule> for Schedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        Schedule::new(raw.beta0, raw.beta1)
    }
}

impl Schedule {
    /// Fast-refinement schedule used for short horizons (H ≤ 10).
    pub const SHORT_HORIZON: Schedule = Schedule {
        beta0: 0.01,
        beta1: 50.0,
    };

    /// Fine-refinement schedule used for long horizons (H ≥ 21).
    pub const LONG_HORIZON: Schedule = Schedule {
        beta0: 0.0001,
        beta1: 0.02,
    };

    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(beta0.is_finite() && beta1.is_finite()) {
            return Err(Error::Schedule(format!(
                "non-finite beta ({beta0}, {beta1})"
            )));
        }
        if !(beta0 > 0.0) {
            return Err(Error::Schedule(format!("beta0 must be > 0, got {beta0}")));
        }
        if !(beta1 > beta0) {
            return Err(Error::Schedule(format!(
                "beta1 must exceed beta0, got beta0={beta0} beta1={beta1}"
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    /// Default schedule for a forecast horizon.
    pub fn for_horizon(horizon: usize) -> Self {
        if horizon <= 10 {
            Self::SHORT_HORIZON
        } else {
            Self::LONG_HORIZON
        }
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Schedule(format!("time {t} outside [0, 1]")))
        }
    }

    /// Squared diffusion coefficient `g²(t)`.
    pub fn g2(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.g2_unchecked(t))
    }

    /// `σ_t² = ∫₀ᵗ g²(τ) dτ = β₀t + ½(β₁ − β₀)t²`.
    pub fn sigma2(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.sigma2_unchecked(t))
    }

    /// `σ̄_t² = σ_1² − σ_t²`, evaluated as `∫ₜ¹ g²` in factored form so that it
    /// stays accurate near `t = 1` and is exactly zero there.
    pub fn sigma_bar2(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.sigma_bar2_unchecked(t))
    }

    /// `σ_1²`.
    pub fn sigma2_total(&self) -> f64 {
        self.beta0 + 0.5 * (self.beta1 - self.beta0)
    }

    pub(crate) fn g2_unchecked(&self, t: f64) -> f64 {
        self.beta0 + t * (self.beta1 - self.beta0)
    }

    pub(crate) fn sigma2_unchecked(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    pub(crate) fn sigma_bar2_unchecked(&self, t: f64) -> f64 {
        // (1 − t)(β₀ + ½(β₁ − β₀)(1 + t)); at t = 0 this is the same expression
        // as sigma2_total, so σ̄_0² == σ_1² bit for bit.
        (1.0 - t) * (self.beta0 + 0.5 * (self.beta1 - self.beta0) * (1.0 + t))
    }
}
