//! Closed-form quantum predictions for singlet-pair polarization analysis,
//! the coincidence-delay model, and Bell/CH inequality functionals.
//!
//! Every function here is pure. Times are in seconds, angles are [`Angle`]s
//! in `[0, π]`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::angle::Angle;
use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};

/// Transmittances of the two oriented analyzers.
///
/// `down` is the transmittance for spin antiparallel to the analyzer field
/// (the high-transmission state of these polarizers), `up` for parallel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransmittances", into = "RawTransmittances")]
pub struct Transmittances {
    eps1_down: f64,
    eps1_up: f64,
    eps2_down: f64,
    eps2_up: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransmittances {
    eps1_down: f64,
    eps1_up: f64,
    eps2_down: f64,
    eps2_up: f64,
}

impl TryFrom<RawTransmittances> for Transmittances {
    type Error = Error;
    fn try_from(r: RawTransmittances) -> Result<Self> {
        Transmittances::new(r.eps1_down, r.eps1_up, r.eps2_down, r.eps2_up)
    }
}

impl From<Transmittances> for RawTransmittances {
    fn from(t: Transmittances) -> Self {
        RawTransmittances {
            eps1_down: t.eps1_down,
            eps1_up: t.eps1_up,
            eps2_down: t.eps2_down,
            eps2_up: t.eps2_up,
        }
    }
}

/// Measured transmittance of the Fe₃Al analyzers for the high-transmission spin state.
pub const MEASURED_EPS_DOWN: f64 = 0.221;
/// Measured transmittance for the suppressed spin state.
pub const MEASURED_EPS_UP: f64 = 0.084;

impl Transmittances {
    pub fn new(eps1_down: f64, eps1_up: f64, eps2_down: f64, eps2_up: f64) -> Result<Self> {
        for (name, v) in [
            ("eps1_down", eps1_down),
            ("eps1_up", eps1_up),
            ("eps2_down", eps2_down),
            ("eps2_up", eps2_up),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} is not in [0, 1]")));
            }
        }
        if eps1_down + eps1_up <= 0.0 {
            return Err(Error::invalid(
                "eps1_down + eps1_up",
                "analyzer 1 has zero total transmittance",
            ));
        }
        if eps2_down + eps2_up <= 0.0 {
            return Err(Error::invalid(
                "eps2_down + eps2_up",
                "analyzer 2 has zero total transmittance",
            ));
        }
        Ok(Self {
            eps1_down,
            eps1_up,
            eps2_down,
            eps2_up,
        })
    }

    /// Two identical analyzers.
    pub fn identical(down: f64, up: f64) -> Result<Self> {
        Self::new(down, up, down, up)
    }

    /// The analyzers of the reference apparatus (ε↓ = 0.221, ε↑ = 0.084 on both paths).
    pub fn measured() -> Self {
        Self::identical(MEASURED_EPS_DOWN, MEASURED_EPS_UP).expect("valid constants")
    }

    /// Ideal analyzers passing only the ↓ state.
    pub fn perfect() -> Self {
        Self::identical(1.0, 0.0).expect("valid constants")
    }

    /// No analyzers at all: both spin states pass.
    pub fn transparent() -> Self {
        Self::identical(1.0, 1.0).expect("valid constants")
    }

    pub fn eps1_down(&self) -> f64 {
        self.eps1_down
    }
    pub fn eps1_up(&self) -> f64 {
        self.eps1_up
    }
    pub fn eps2_down(&self) -> f64 {
        self.eps2_down
    }
    pub fn eps2_up(&self) -> f64 {
        self.eps2_up
    }

    /// Transmittance of analyzer `path` (1 or 2) for the given outcome.
    pub fn of(&self, path: u8, spin_down: bool) -> f64 {
        match (path, spin_down) {
            (1, true) => self.eps1_down,
            (1, false) => self.eps1_up,
            (_, true) => self.eps2_down,
            (_, false) => self.eps2_up,
        }
    }

    pub fn total1(&self) -> f64 {
        self.eps1_down + self.eps1_up
    }

    pub fn total2(&self) -> f64 {
        self.eps2_down + self.eps2_up
    }
}

/// Transmittances together with the relative angle of the analyzer axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizerPair {
    pub transmittances: Transmittances,
    pub theta: Angle,
}

impl PolarizerPair {
    pub fn new(transmittances: Transmittances, theta: Angle) -> Self {
        Self {
            transmittances,
            theta,
        }
    }

    pub fn p12_paper(&self) -> f64 {
        p12_paper(self.theta, &self.transmittances)
    }

    pub fn p12_projector(&self) -> f64 {
        p12_projector(self.theta, &self.transmittances)
    }
}

/// Gaussian pair-correlation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    alpha: f64,
    tau_c: f64,
}

impl CorrelationParams {
    pub fn new(alpha: f64, tau_c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", format!("{alpha} is not in [0, 1]")));
        }
        if !(tau_c > 0.0 && tau_c.is_finite()) {
            return Err(Error::invalid("tau_c", format!("{tau_c} must be positive")));
        }
        Ok(Self { alpha, tau_c })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau_c(&self) -> f64 {
        self.tau_c
    }
}

/// Detector response time, optionally built from capture and light-decay times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseParams {
    t_w: f64,
}

impl ResponseParams {
    pub fn new(t_w: f64) -> Result<Self> {
        if !(t_w > 0.0 && t_w.is_finite()) {
            return Err(Error::invalid("t_w", format!("{t_w} must be positive")));
        }
        Ok(Self { t_w })
    }

    pub fn from_capture_and_decay(t_c: f64, t_d: f64) -> Result<Self> {
        Self::new(effective_t_w(t_c, t_d)?)
    }

    pub fn t_w(&self) -> f64 {
        self.t_w
    }
}

/// Coincidence time-window Δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    delta_window: f64,
}

impl WindowParams {
    pub fn new(delta_window: f64) -> Result<Self> {
        if !(delta_window > 0.0 && delta_window.is_finite()) {
            return Err(Error::invalid(
                "delta_window",
                format!("{delta_window} must be positive"),
            ));
        }
        Ok(Self { delta_window })
    }

    pub fn delta_window(&self) -> f64 {
        self.delta_window
    }
}

/// Joint outcome probabilities for a singlet pair measured along two axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOutcomes {
    pub p_dd: f64,
    pub p_du: f64,
    pub p_ud: f64,
    pub p_uu: f64,
}

impl JointOutcomes {
    pub fn sum(&self) -> f64 {
        self.p_dd + self.p_du + self.p_ud + self.p_uu
    }

    /// Correlation E = P(equal) − P(opposite).
    pub fn correlation(&self) -> f64 {
        self.p_dd + self.p_uu - self.p_du - self.p_ud
    }
}

/// Outcome probabilities of the singlet state projected on axes at relative angle θ.
pub fn singlet_joint_outcome_probs(theta: Angle) -> JointOutcomes {
    let half = 0.5 * theta.radians();
    let same = 0.5 * half.sin().powi(2);
    // cos² written as 1/2 - same keeps the sum exactly 1
    let opposite = 0.5 - same;
    JointOutcomes {
        p_dd: same,
        p_du: opposite,
        p_ud: opposite,
        p_uu: same,
    }
}

/// Ideal instrument, singlet-only source: `[1 − cos θ]/4`.
pub fn p12_ideal(theta: Angle) -> f64 {
    (1.0 - theta.cos()) / 4.0
}

/// Perfect analyzers, relative to all four spin-pair states: `[1 − cos θ]/16`.
pub fn p12_all_pairs_perfect(theta: Angle) -> f64 {
    (1.0 - theta.cos()) / 16.0
}

/// Short-delay and plateau coincidence numbers for arbitrary analyzers, up to
/// the common factor `c₁c₂`. Non-identical polarizers keep both cross terms.
pub fn coincidence_numerators(theta: Angle, eps: &Transmittances) -> (f64, f64) {
    let tt = eps.total1() * eps.total2();
    let cross = if theta <= Angle::RIGHT {
        eps.eps1_down * eps.eps2_up + eps.eps1_up * eps.eps2_down
    } else {
        eps.eps1_up * eps.eps2_up + eps.eps1_down * eps.eps2_down
    };
    let c0 = 0.25 * (tt - cross * theta.cos()) / 4.0;
    let cinf = tt / 4.0;
    (c0, cinf)
}

/// Piecewise prediction for identical analyzers.
///
/// Below 90° the cosine coefficient is `2ε₁↓ε₂↑/(ε₁ᵗε₂ᵗ)`, above it
/// `(ε₁↑ε₂↑ + ε₁↓ε₂↓)/(ε₁ᵗε₂ᵗ)`; both branches give exactly 1/4 at 90°.
pub fn p12_paper(theta: Angle, eps: &Transmittances) -> f64 {
    let tt = eps.total1() * eps.total2();
    let coeff = if theta <= Angle::RIGHT {
        2.0 * eps.eps1_down * eps.eps2_up / tt
    } else {
        (eps.eps1_up * eps.eps2_up + eps.eps1_down * eps.eps2_down) / tt
    };
    0.25 * (1.0 - coeff * theta.cos())
}

/// Projector-weighted prediction: joint transmission of a singlet pair,
/// normalized by the uncorrelated joint transmission `ε₁ᵗε₂ᵗ/4`, times the
/// singlet share 1/4.
pub fn p12_projector(theta: Angle, eps: &Transmittances) -> f64 {
    let tt = eps.total1() * eps.total2();
    let d1 = eps.eps1_down - eps.eps1_up;
    let d2 = eps.eps2_down - eps.eps2_up;
    0.25 * (1.0 - theta.cos() * d1 * d2 / tt)
}

/// Probability that both members of a singlet pair on opposite analyzers are transmitted.
pub fn singlet_joint_transmission(theta: Angle, eps: &Transmittances) -> f64 {
    let p = singlet_joint_outcome_probs(theta);
    eps.eps1_down * eps.eps2_down * p.p_dd
        + eps.eps1_down * eps.eps2_up * p.p_du
        + eps.eps1_up * eps.eps2_down * p.p_ud
        + eps.eps1_up * eps.eps2_up * p.p_uu
}

/// `c(δ) = 1 − α·exp(−δ²/(2τ_c²))`.
pub fn correlation_c(delta: f64, params: &CorrelationParams) -> f64 {
    let x = delta / params.tau_c;
    1.0 - params.alpha * (-0.5 * x * x).exp()
}

/// Parallel combination of capture and light-decay times.
pub fn effective_t_w(t_c: f64, t_d: f64) -> Result<f64> {
    if !(t_c > 0.0) {
        return Err(Error::invalid("t_c", format!("{t_c} must be positive")));
    }
    if !(t_d > 0.0) {
        return Err(Error::invalid("t_d", format!("{t_d} must be positive")));
    }
    Ok(1.0 / (1.0 / t_c + 1.0 / t_d))
}

/// Convolution support in units of `t_w`.
pub const RESPONSE_TRUNCATION: f64 = 40.0;

pub(crate) fn fit_tolerance() -> Tolerance {
    Tolerance {
        relative: 1e-10,
        absolute: 1e-13,
        max_intervals: 4000,
    }
}

/// Window-averaged Gaussian dip after the causal detector response:
/// `(1/Δ)∫_lo^hi [w ∗ g](t) dt` with `g(t) = exp(−t²/2τ²)` and
/// `w(s) = exp(−s/t_w)/t_w` on `s ≥ 0`.
///
/// Accepts any (possibly negative) `lo < hi`; parameters are only required to
/// be positive, so fitting code can explore freely.
pub fn causal_dip_fraction(lo: f64, hi: f64, t_w: f64, tau_c: f64) -> Result<f64> {
    causal_dip_fraction_with(lo, hi, t_w, tau_c, Tolerance::default())
}

pub(crate) fn causal_dip_fraction_with(
    lo: f64,
    hi: f64,
    t_w: f64,
    tau_c: f64,
    tol: Tolerance,
) -> Result<f64> {
    if !(t_w > 0.0 && tau_c > 0.0 && hi > lo) {
        return Err(Error::invalid(
            "dip fraction",
            format!("needs t_w > 0, tau_c > 0, hi > lo (got t_w={t_w}, tau_c={tau_c}, [{lo}, {hi}])"),
        ));
    }
    let width = hi - lo;
    let c = SQRT_2 * tau_c;
    // beyond 8c the erf difference is below 1e-29 everywhere on the support
    if lo - RESPONSE_TRUNCATION * t_w > 8.0 * c || hi < -8.0 * c {
        return Ok(0.0);
    }
    let scale = tau_c * (PI / 2.0).sqrt() / width;
    // x = s / t_w; the window integral of the Gaussian is closed form in erf
    let integrand = |x: f64| {
        let s = x * t_w;
        (-x).exp() * scale * (libm::erf((hi - s) / c) - libm::erf((lo - s) / c))
    };
    let breaks = [
        (lo - 5.0 * tau_c) / t_w,
        lo / t_w,
        hi / t_w,
        (hi + 5.0 * tau_c) / t_w,
        1.0,
        5.0,
    ];
    quadrature::integrate(integrand, 0.0, RESPONSE_TRUNCATION, &breaks, tol)
}

/// Model ratio `C(θ,δ)/C(θ,∞)` for the window `[δ, δ+Δ]`.
///
/// `1 − α·(1/Δ)∫_δ^{δ+Δ} [w ∗ g](t) dt`, which tends to 1 for large δ and
/// stays within `[1 − α, 1]`.
pub fn coincidence_model(
    delta: f64,
    win: &WindowParams,
    corr: &CorrelationParams,
    resp: &ResponseParams,
) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::invalid("delta", format!("{delta} must be non-negative")));
    }
    if corr.alpha == 0.0 {
        return Ok(1.0);
    }
    let dip = causal_dip_fraction(delta, delta + win.delta_window, resp.t_w, corr.tau_c)?;
    Ok(1.0 - corr.alpha * dip)
}

/// Analyzer orientations `(a, a′)` on side 1 and `(b, b′)` on side 2, in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellGeometry {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl BellGeometry {
    /// The one-parameter family `a = 0, b = φ, a′ = 2φ, b′ = 3φ`.
    pub fn from_phi(phi: f64) -> Self {
        Self {
            a: 0.0,
            a_prime: 2.0 * phi,
            b: phi,
            b_prime: 3.0 * phi,
        }
    }

    pub fn from_degrees(a: f64, a_prime: f64, b: f64, b_prime: f64) -> Self {
        Self {
            a: a.to_radians(),
            a_prime: a_prime.to_radians(),
            b: b.to_radians(),
            b_prime: b_prime.to_radians(),
        }
    }

    /// The relative angles `(a−b, a−b′, a′−b, a′−b′)`, folded to `[0, π]`.
    pub fn relative_angles(&self) -> [Angle; 4] {
        [
            Angle::between(self.a, self.b),
            Angle::between(self.a, self.b_prime),
            Angle::between(self.a_prime, self.b),
            Angle::between(self.a_prime, self.b_prime),
        ]
    }
}

/// Local-realist bounds of the Clauser–Horne combination.
pub const CH_LOWER: f64 = -1.0;
pub const CH_UPPER: f64 = 0.0;
/// Classical bound of the CHSH combination.
pub const CHSH_CLASSICAL: f64 = 2.0;

/// `S = p₁₂(a,b) − p₁₂(a,b′) + p₁₂(a′,b) + p₁₂(a′,b′) − p₁ − p₂`, with
/// `p12` a function of the relative angle only and rotation-invariant singles.
pub fn ch_functional<F: Fn(Angle) -> f64>(p12: F, p1: f64, p2: f64, g: &BellGeometry) -> f64 {
    let [ab, abp, apb, apbp] = g.relative_angles();
    p12(ab) - p12(abp) + p12(apb) + p12(apbp) - p1 - p2
}

/// Signed distance outside `[−1, 0]`; `None` when the bound holds.
pub fn ch_violation(s: f64) -> Option<f64> {
    if s < CH_LOWER {
        Some(s - CH_LOWER)
    } else if s > CH_UPPER {
        Some(s - CH_UPPER)
    } else {
        None
    }
}

/// Extremes of `S(φ)` over a grid of φ values (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChScan {
    pub min_phi: f64,
    pub min_s: f64,
    pub max_phi: f64,
    pub max_s: f64,
}

impl ChScan {
    /// The grid point furthest outside the bounds (or closest to them).
    pub fn most_violating(&self) -> (f64, f64) {
        let below = CH_LOWER - self.min_s;
        let above = self.max_s - CH_UPPER;
        if below >= above {
            (self.min_phi, self.min_s)
        } else {
            (self.max_phi, self.max_s)
        }
    }
}

pub fn ch_scan<F: Fn(Angle) -> f64>(p12: F, p1: f64, p2: f64, phis: &[f64]) -> Option<ChScan> {
    let mut it = phis.iter().map(|&phi| (phi, ch_functional(&p12, p1, p2, &BellGeometry::from_phi(phi))));
    let (phi0, s0) = it.next()?;
    let mut scan = ChScan {
        min_phi: phi0,
        min_s: s0,
        max_phi: phi0,
        max_s: s0,
    };
    for (phi, s) in it {
        if s < scan.min_s {
            scan.min_s = s;
            scan.min_phi = phi;
        }
        if s > scan.max_s {
            scan.max_s = s;
            scan.max_phi = phi;
        }
    }
    Some(scan)
}

/// `|E(a−b) − E(a−b′) + E(a′−b) + E(a′−b′)|` with E a function of the relative angle.
pub fn chsh_functional<F: Fn(Angle) -> f64>(e: F, g: &BellGeometry) -> f64 {
    let [ab, abp, apb, apbp] = g.relative_angles();
    (e(ab) - e(abp) + e(apb) + e(apbp)).abs()
}

/// Correlation implied by a symmetric joint-detection curve: `E = 4·p₁₂ − 1`.
pub fn correlation_from_p12(p12: f64) -> f64 {
    4.0 * p12 - 1.0
}
