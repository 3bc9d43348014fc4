//! Window-averaged dip kernels `K(lo, hi)`.
//!
//! The coincidence ratio for a delay window is `1 − α·K`. Two response
//! shapes are provided:
//!
//! * [`DipKernel::Causal`] smooths the Gaussian correlation with a single
//!   one-sided exponential response, which is the textbook detection model.
//! * [`DipKernel::DetectorPair`] describes what the simulated chain actually
//!   does: each detector adds its own exponential delay, so the measured delay
//!   is smeared by the difference of two exponentials (a Laplace law), and both
//!   time stamps are floored to the clock tick, which turns each delay window
//!   into a trapezoid of width one tick.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::quantum::{causal_dip_fraction_with, RESPONSE_TRUNCATION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DipKernel {
    Causal,
    /// `clock_tick = 0` disables the quantization smear.
    DetectorPair { clock_tick: f64 },
}

impl DipKernel {
    pub fn window_fraction(&self, lo: f64, hi: f64, t_w: f64, tau_c: f64) -> Result<f64> {
        self.window_fraction_with(lo, hi, t_w, tau_c, Tolerance::default())
    }

    pub(crate) fn window_fraction_with(
        &self,
        lo: f64,
        hi: f64,
        t_w: f64,
        tau_c: f64,
        tol: Tolerance,
    ) -> Result<f64> {
        match *self {
            DipKernel::Causal => causal_dip_fraction_with(lo, hi, t_w, tau_c, tol),
            DipKernel::DetectorPair { clock_tick } => {
                detector_pair_fraction(lo, hi, t_w, tau_c, clock_tick, tol)
            }
        }
    }
}

fn detector_pair_fraction(
    lo: f64,
    hi: f64,
    t_w: f64,
    tau_c: f64,
    tick: f64,
    tol: Tolerance,
) -> Result<f64> {
    if !(t_w > 0.0 && tau_c > 0.0 && hi > lo && tick >= 0.0) {
        return Err(Error::invalid(
            "dip fraction",
            format!("needs t_w > 0, tau_c > 0, tick >= 0, hi > lo (got t_w={t_w}, tau_c={tau_c}, tick={tick}, [{lo}, {hi}])"),
        ));
    }
    let c = SQRT_2 * tau_c;
    let reach = RESPONSE_TRUNCATION * t_w + 8.0 * c + tick;
    if lo > reach || hi < -reach {
        return Ok(0.0);
    }
    let a = tau_c * (PI / 2.0).sqrt();

    // mass of [G(δ) + G(−δ)] over the (smeared) window for a response delay s
    let window_mass = |s: f64| -> f64 {
        if tick == 0.0 {
            let terms = [(1.0, hi - s), (-1.0, lo - s), (1.0, -lo - s), (-1.0, -hi - s)];
            a * signed_sum(&terms, |x| erfc_primitive(x, c))
        } else {
            let terms = [
                (1.0, hi - s),
                (-1.0, hi - tick - s),
                (-1.0, lo - s),
                (1.0, lo - tick - s),
                (1.0, -lo + tick - s),
                (-1.0, -lo - s),
                (-1.0, -hi + tick - s),
                (1.0, -hi - s),
            ];
            a * signed_sum(&terms, |x| ierfc_primitive(x, c)) / tick
        }
    };
    let scale = 0.5 / (hi - lo);
    let integrand = |x: f64| (-x).exp() * scale * window_mass(x * t_w);
    let mut breaks = vec![1.0, 5.0];
    for edge in [hi, hi - tick, lo, lo - tick, -lo + tick, -lo, -hi + tick, -hi] {
        for off in [-5.0 * tau_c, 0.0, 5.0 * tau_c] {
            breaks.push((edge + off) / t_w);
        }
    }
    quadrature::integrate(integrand, 0.0, RESPONSE_TRUNCATION, &breaks, tol)
}

// The primitives below are split into a part decaying in |x| and a part that
// stays small for positive x, so far-away windows keep their precision.

/// `erfc(−x/c)` as (decaying part, integer step).
fn erfc_primitive(x: f64, c: f64) -> (f64, f64) {
    if x > 0.0 {
        (-libm::erfc(x / c), 2.0)
    } else {
        (libm::erfc(-x / c), 0.0)
    }
}

/// `x·erfc(−x/c) + (c/√π)·exp(−x²/c²) − 2x = c·ierfc(|x|/c) − 2·min(x, 0)`.
///
/// The dropped `2x` cancels in every sum used here.
fn ierfc_primitive(x: f64, c: f64) -> (f64, f64) {
    let v = x.abs() / c;
    let ierfc = (-v * v).exp() / PI.sqrt() - v * libm::erfc(v);
    (c * ierfc, -2.0 * x.min(0.0))
}

/// `Σ cᵢ f(xᵢ)`, callers pass coefficient sets with `Σ cᵢ = 0` and
/// `Σ cᵢ xᵢ = 0`.
fn signed_sum(terms: &[(f64, f64)], f: impl Fn(f64) -> (f64, f64)) -> f64 {
    let mut decay = 0.0;
    let mut grow = 0.0;
    for &(coef, x) in terms {
        let (d, g) = f(x);
        decay += coef * d;
        grow += coef * g;
    }
    decay + grow
}
