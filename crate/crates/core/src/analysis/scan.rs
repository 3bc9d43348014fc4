//! Angle-scan report: residuals against both prediction conventions, global
//! χ², and a CH evaluation at one geometry.

use serde::{Deserialize, Serialize};

use crate::angle::Angle;
use crate::error::{Error, Result};
use crate::quantum::{ch_functional, ch_violation, p12_paper, p12_projector, BellGeometry, Transmittances};

/// One measured angle in per-pair probability units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePoint {
    pub theta: Angle,
    pub p12: f64,
    pub sigma: f64,
}

/// Monotone piecewise-cubic (Fritsch–Carlson) interpolant of `p12` against
/// `x = cos θ`. Only interpolates; values outside the data range are `None`.
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    m: Vec<f64>,
}

impl Pchip {
    /// `points` are `(x, y, σ)`; duplicate `x` are averaged with inverse-variance weights.
    pub fn new(points: &[(f64, f64, f64)]) -> Result<Self> {
        let mut pts: Vec<(f64, f64, f64)> = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut x: Vec<f64> = Vec::new();
        let mut y: Vec<f64> = Vec::new();
        let mut s: Vec<f64> = Vec::new();
        for (xi, yi, si) in pts {
            if let Some(&last) = x.last() {
                if (xi - last).abs() < 1e-12 {
                    let n = y.len() - 1;
                    let (w1, w2) = (1.0 / (s[n] * s[n]).max(1e-300), 1.0 / (si * si).max(1e-300));
                    y[n] = (y[n] * w1 + yi * w2) / (w1 + w2);
                    s[n] = (1.0 / (w1 + w2)).sqrt();
                    continue;
                }
            }
            x.push(xi);
            y.push(yi);
            s.push(si);
        }
        if x.len() < 2 {
            return Err(Error::AngleCoverage(format!(
                "{} distinct angles, at least 2 are needed",
                x.len()
            )));
        }
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
        let d: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut m = vec![0.0; n];
        if n == 2 {
            m[0] = d[0];
            m[1] = d[0];
        } else {
            for k in 1..n - 1 {
                if d[k - 1] * d[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
                }
            }
            m[0] = end_slope(h[0], h[1], d[0], d[1]);
            m[n - 1] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        }
        Ok(Self { x, y, s, m })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    fn locate(&self, x: f64) -> Option<usize> {
        let (lo, hi) = self.domain();
        if x < lo - 1e-12 || x > hi + 1e-12 {
            return None;
        }
        let k = self.x.partition_point(|&v| v <= x).saturating_sub(1);
        Some(k.min(self.x.len() - 2))
    }

    pub fn eval(&self, x: f64) -> Option<f64> {
        let k = self.locate(x)?;
        let h = self.x[k + 1] - self.x[k];
        let t = ((x - self.x[k]) / h).clamp(0.0, 1.0);
        let (t2, t3) = (t * t, t * t * t);
        Some(
            (2.0 * t3 - 3.0 * t2 + 1.0) * self.y[k]
                + (t3 - 2.0 * t2 + t) * h * self.m[k]
                + (-2.0 * t3 + 3.0 * t2) * self.y[k + 1]
                + (t3 - t2) * h * self.m[k + 1],
        )
    }

    /// Uncertainty at `x`, interpolated linearly between the neighbouring points.
    pub fn sigma(&self, x: f64) -> Option<f64> {
        let k = self.locate(x)?;
        let t = ((x - self.x[k]) / (self.x[k + 1] - self.x[k])).clamp(0.0, 1.0);
        Some(self.s[k] * (1.0 - t) + self.s[k + 1] * t)
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub theta_deg: f64,
    pub p12: f64,
    pub sigma: f64,
    pub paper: f64,
    pub projector: f64,
    /// `(measured − model)/σ`.
    pub pull_paper: f64,
    pub pull_projector: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChEvaluation {
    pub phi_deg: f64,
    pub s: f64,
    pub sigma: f64,
    pub p1: f64,
    pub p2: f64,
    /// Distance outside `[−1, 0]`, if any.
    pub violation: Option<f64>,
    /// Violation in units of σ (negative when inside the bounds).
    pub significance: f64,
    /// True when either CH angle was not measured directly.
    pub interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    pub chi2_paper: f64,
    pub chi2_projector: f64,
    pub dof: usize,
    pub ch: Option<ChEvaluation>,
}

/// Settings of the CH evaluation inside a scan report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChSettings {
    pub phi_deg: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Default for ChSettings {
    fn default() -> Self {
        Self { phi_deg: 45.0, p1: 0.5, p2: 0.5 }
    }
}

fn find_direct(points: &[AnglePoint], theta: Angle) -> Option<(f64, f64)> {
    let hits: Vec<&AnglePoint> = points
        .iter()
        .filter(|p| (p.theta.radians() - theta.radians()).abs() < 1e-9)
        .collect();
    if hits.is_empty() {
        return None;
    }
    let w: f64 = hits.iter().map(|p| 1.0 / (p.sigma * p.sigma).max(1e-300)).sum();
    let v = hits.iter().map(|p| p.p12 / (p.sigma * p.sigma).max(1e-300)).sum::<f64>() / w;
    Some((v, (1.0 / w).sqrt()))
}

/// Measured p12 curve: direct points where available, monotone
/// interpolation in cos θ in between, nothing outside the covered range.
#[derive(Debug, Clone)]
pub struct MeasuredCurve {
    points: Vec<AnglePoint>,
    interp: Pchip,
}

impl MeasuredCurve {
    pub fn new(points: &[AnglePoint]) -> Result<Self> {
        let interp = Pchip::new(&points.iter().map(|p| (p.theta.cos(), p.p12, p.sigma)).collect::<Vec<_>>())?;
        Ok(Self {
            points: points.to_vec(),
            interp,
        })
    }

    /// `(p12, σ, interpolated)` at θ.
    pub fn lookup(&self, theta: Angle) -> Option<(f64, f64, bool)> {
        if let Some((v, s)) = find_direct(&self.points, theta) {
            return Some((v, s, false));
        }
        let x = theta.cos();
        Some((self.interp.eval(x)?, self.interp.sigma(x)?, true))
    }
}

/// CH evaluation from scan points at the geometry `(0, φ, 2φ, 3φ)`.
pub fn evaluate_ch(points: &[AnglePoint], settings: &ChSettings) -> Result<ChEvaluation> {
    let curve = MeasuredCurve::new(points)?;
    let g = BellGeometry::from_phi(settings.phi_deg.to_radians());
    let rel = g.relative_angles();
    // relative angles are (a−b, a−b′, a′−b, a′−b′) = (φ, 3φ, φ, φ)
    let mut values = Vec::with_capacity(4);
    for th in rel {
        let v = curve.lookup(th).ok_or_else(|| {
            Error::AngleCoverage(format!(
                "no data covering relative angle {:.4}° for the CH geometry at φ = {}°",
                th.degrees(),
                settings.phi_deg
            ))
        })?;
        values.push((th, v));
    }
    let p12 = |th: Angle| {
        values
            .iter()
            .find(|(t, _)| (t.radians() - th.radians()).abs() < 1e-12)
            .map(|(_, v)| v.0)
            .unwrap_or(f64::NAN)
    };
    let s = ch_functional(p12, settings.p1, settings.p2, &g);
    // S = p(a,b) − p(a,b′) + p(a′,b) + p(a′,b′) − p1 − p2; a value used
    // for several terms is fully correlated with itself
    let coeffs = [1.0, -1.0, 1.0, 1.0];
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for (c, (th, (_, sig, _))) in coeffs.iter().zip(&values) {
        match groups.iter_mut().find(|g| (g.0 - th.radians()).abs() < 1e-12) {
            Some(g) => g.1 += c,
            None => groups.push((th.radians(), *c, *sig)),
        }
    }
    let sigma = groups.iter().map(|(_, c, sg)| (c * sg).powi(2)).sum::<f64>().sqrt();
    let violation = ch_violation(s);
    let dist = if s < -1.0 { -1.0 - s } else if s > 0.0 { s } else { -(s + 1.0).min(-s) };
    Ok(ChEvaluation {
        phi_deg: settings.phi_deg,
        s,
        sigma,
        p1: settings.p1,
        p2: settings.p2,
        violation,
        significance: if sigma > 0.0 { dist / sigma } else { f64::INFINITY.copysign(dist) },
        interpolated: values.iter().any(|(_, v)| v.2),
    })
}

/// Residuals and χ² of scan points against both predictions, plus CH.
///
/// The CH entry is `None` when the scan does not cover the needed angles.
pub fn angle_scan_summary(
    points: &[AnglePoint],
    eps: &Transmittances,
    ch: &ChSettings,
) -> Result<ScanReport> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.theta.radians()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() < 2 {
        return Err(Error::AngleCoverage(format!(
            "{} distinct angles, at least 2 are needed",
            distinct.len()
        )));
    }
    let mut rows = Vec::with_capacity(points.len());
    let (mut c_paper, mut c_proj) = (0.0, 0.0);
    for p in points {
        if !(p.sigma > 0.0) {
            return Err(Error::Data(format!("non-positive uncertainty at θ = {}", p.theta)));
        }
        let paper = p12_paper(p.theta, eps);
        let projector = p12_projector(p.theta, eps);
        let pull_paper = (p.p12 - paper) / p.sigma;
        let pull_projector = (p.p12 - projector) / p.sigma;
        c_paper += pull_paper * pull_paper;
        c_proj += pull_projector * pull_projector;
        rows.push(ScanRow {
            theta_deg: p.theta.degrees(),
            p12: p.p12,
            sigma: p.sigma,
            paper,
            projector,
            pull_paper,
            pull_projector,
        });
    }
    let ch = match evaluate_ch(points, ch) {
        Ok(c) => Some(c),
        Err(Error::AngleCoverage(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ScanReport {
        rows,
        chi2_paper: c_paper,
        chi2_projector: c_proj,
        dof: points.len(),
        ch,
    })
}
