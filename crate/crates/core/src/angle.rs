use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Slack for angles produced by degree conversion (180° → π may be off by an ulp).
const EDGE_SLACK: f64 = 1e-12;

/// A relative analyzer angle in `[0, π]`, stored in radians.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);
    pub const RIGHT: Angle = Angle(PI / 2.0);
    pub const STRAIGHT: Angle = Angle(PI);

    /// Validates `radians ∈ [0, π]`; out-of-domain values are rejected, not wrapped.
    pub fn from_radians(radians: f64) -> Result<Self> {
        if !radians.is_finite() || !(-EDGE_SLACK..=PI + EDGE_SLACK).contains(&radians) {
            return Err(Error::AngleOutOfDomain {
                value: radians,
                lo: 0.0,
                hi: PI,
            });
        }
        Ok(Angle(radians.clamp(0.0, PI)))
    }

    /// Degrees in `[0, 180]`.
    pub fn from_degrees(degrees: f64) -> Result<Self> {
        if !degrees.is_finite() || !(-EDGE_SLACK..=180.0 + EDGE_SLACK).contains(&degrees) {
            return Err(Error::AngleOutOfDomain {
                value: degrees,
                lo: 0.0,
                hi: 180.0,
            });
        }
        if degrees >= 180.0 {
            return Ok(Angle::STRAIGHT);
        }
        if degrees == 90.0 {
            return Ok(Angle::RIGHT);
        }
        Angle::from_radians(degrees.max(0.0).to_radians())
    }

    /// Accepts a rotation-stage reading in `[0, 360]` degrees and folds values above
    /// 180° back by symmetry. The flag reports whether folding happened.
    pub fn fold_stage_degrees(degrees: f64) -> Result<(Self, bool)> {
        if !degrees.is_finite() || !(-EDGE_SLACK..=360.0 + EDGE_SLACK).contains(&degrees) {
            return Err(Error::AngleOutOfDomain {
                value: degrees,
                lo: 0.0,
                hi: 360.0,
            });
        }
        if degrees > 180.0 {
            Ok((Angle::from_degrees((360.0 - degrees).max(0.0))?, true))
        } else {
            Ok((Angle::from_degrees(degrees)?, false))
        }
    }

    /// Relative angle between two axis orientations (radians, any real), folded to `[0, π]`.
    pub fn between(a: f64, b: f64) -> Self {
        let d = (a - b).abs().rem_euclid(2.0 * PI);
        Angle(if d > PI { 2.0 * PI - d } else { d })
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        if self == Angle::STRAIGHT {
            180.0
        } else if self == Angle::RIGHT {
            90.0
        } else {
            self.0.to_degrees()
        }
    }

    /// `cos θ`, exactly zero at `θ = π/2`.
    pub fn cos(self) -> f64 {
        if self == Angle::RIGHT {
            0.0
        } else {
            self.0.cos()
        }
    }
}

impl TryFrom<f64> for Angle {
    type Error = Error;
    fn try_from(radians: f64) -> Result<Self> {
        Angle::from_radians(radians)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}°", self.degrees())
    }
}
