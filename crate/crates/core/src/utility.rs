//! Concave increasing utilities with derivatives and inverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error("exponential risk aversion must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("hyperbolic exponent must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("domain shift must be finite, got {0}")]
    Shift(f64),
    #[error("wealth {value} (shifted {shifted}) is outside the {kind} utility domain")]
    Domain {
        kind: &'static str,
        value: f64,
        shifted: f64,
    },
    #[error("utility level {0} is outside the range of the {1} utility")]
    Range(f64, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityKind {
    Linear,
    Exponential { alpha: f64 },
    Logarithmic,
    Hyperbolic { gamma: f64 },
}

/// `U(v + shift)` for one of the supported kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Utility {
    kind: UtilityKind,
    shift: f64,
}

impl Utility {
    pub fn new(kind: UtilityKind, shift: f64) -> Result<Self, UtilityError> {
        match kind {
            UtilityKind::Exponential { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(UtilityError::Alpha(alpha))
            }
            UtilityKind::Hyperbolic { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                return Err(UtilityError::Gamma(gamma))
            }
            _ => {}
        }
        if !shift.is_finite() {
            return Err(UtilityError::Shift(shift));
        }
        Ok(Self { kind, shift })
    }

    pub fn linear() -> Self {
        Self {
            kind: UtilityKind::Linear,
            shift: 0.0,
        }
    }

    pub fn exponential(alpha: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityKind::Exponential { alpha }, 0.0)
    }

    pub fn logarithmic(shift: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityKind::Logarithmic, shift)
    }

    pub fn hyperbolic(gamma: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityKind::Hyperbolic { gamma }, 0.0)
    }

    pub fn kind(&self) -> UtilityKind {
        self.kind
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            UtilityKind::Linear => "linear",
            UtilityKind::Exponential { .. } => "exponential",
            UtilityKind::Logarithmic => "logarithmic",
            UtilityKind::Hyperbolic { .. } => "hyperbolic",
        }
    }

    pub fn is_strictly_concave(&self) -> bool {
        !matches!(self.kind, UtilityKind::Linear)
    }

    /// Whether `v` lies in the domain where value and derivatives are finite.
    pub fn in_domain(&self, v: f64) -> bool {
        let s = v + self.shift;
        match self.kind {
            UtilityKind::Linear | UtilityKind::Exponential { .. } => s.is_finite(),
            UtilityKind::Logarithmic | UtilityKind::Hyperbolic { .. } => s > 0.0 && s.is_finite(),
        }
    }

    /// Whether `v` lies in the closed domain where the value is defined.
    pub fn in_closed_domain(&self, v: f64) -> bool {
        let s = v + self.shift;
        match self.kind {
            UtilityKind::Hyperbolic { .. } => s >= 0.0 && s.is_finite(),
            _ => self.in_domain(v),
        }
    }

    pub fn check(&self, v: f64) -> Result<(), UtilityError> {
        if self.in_domain(v) {
            Ok(())
        } else {
            Err(UtilityError::Domain {
                kind: self.name(),
                value: v,
                shifted: v + self.shift,
            })
        }
    }

    pub fn value(&self, v: f64) -> f64 {
        let s = v + self.shift;
        match self.kind {
            UtilityKind::Linear => s,
            UtilityKind::Exponential { alpha } => -(-alpha * s).exp_m1(),
            UtilityKind::Logarithmic => s.ln(),
            UtilityKind::Hyperbolic { gamma } => s.powf(gamma) / gamma,
        }
    }

    pub fn d1(&self, v: f64) -> f64 {
        let s = v + self.shift;
        match self.kind {
            UtilityKind::Linear => 1.0,
            UtilityKind::Exponential { alpha } => alpha * (-alpha * s).exp(),
            UtilityKind::Logarithmic => 1.0 / s,
            UtilityKind::Hyperbolic { gamma } => s.powf(gamma - 1.0),
        }
    }

    pub fn d2(&self, v: f64) -> f64 {
        let s = v + self.shift;
        match self.kind {
            UtilityKind::Linear => 0.0,
            UtilityKind::Exponential { alpha } => -alpha * alpha * (-alpha * s).exp(),
            UtilityKind::Logarithmic => -1.0 / (s * s),
            UtilityKind::Hyperbolic { gamma } => (gamma - 1.0) * s.powf(gamma - 2.0),
        }
    }

    pub fn inverse(&self, y: f64) -> Result<f64, UtilityError> {
        let s = match self.kind {
            UtilityKind::Linear => y,
            UtilityKind::Exponential { alpha } => {
                if !(y < 1.0) {
                    return Err(UtilityError::Range(y, self.name()));
                }
                -(-y).ln_1p() / alpha
            }
            UtilityKind::Logarithmic => y.exp(),
            UtilityKind::Hyperbolic { gamma } => {
                if !(y >= 0.0) {
                    return Err(UtilityError::Range(y, self.name()));
                }
                (gamma * y).powf(1.0 / gamma)
            }
        };
        Ok(s - self.shift)
    }

    /// Certainty equivalent `U^-1(sum p U(v))` of a finite distribution.
    pub fn certainty_equivalent(&self, probs: &[f64], values: &[f64]) -> Result<f64, UtilityError> {
        for &v in values {
            if !self.in_closed_domain(v) {
                return Err(UtilityError::Domain {
                    kind: self.name(),
                    value: v,
                    shifted: v + self.shift,
                });
            }
        }
        if let UtilityKind::Exponential { alpha } = self.kind {
            // 1 - U underflows for large arguments; work with e^{-a s} directly
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min) + self.shift;
            let sum: f64 = probs
                .iter()
                .zip(values)
                .map(|(p, &v)| p * (-alpha * (v + self.shift - lo)).exp())
                .sum();
            return Ok(lo - sum.ln() / alpha - self.shift);
        }
        let eu: f64 = probs.iter().zip(values).map(|(p, &v)| p * self.value(v)).sum();
        self.inverse(eu)
    }
}
