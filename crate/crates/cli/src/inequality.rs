//! CH and CHSH evaluation of an analytic model or a measured scan.

use std::path::Path;

use serde::Serialize;

use nsb_core::analysis::{evaluate_ch, AnglePoint, ChSettings, MeasuredCurve};
use nsb_core::output::Table;
use nsb_core::quantum::{
    ch_functional, ch_violation, chsh_functional, correlation_from_p12, p12_all_pairs_perfect, p12_ideal,
    p12_paper, p12_projector, BellGeometry, Transmittances, CHSH_CLASSICAL, CH_LOWER, CH_UPPER,
};
use nsb_core::{Angle, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Ideal,
    AllPairsPerfect,
    Paper,
    Projector,
    /// `p12 = p1·p2` at every angle: a local model.
    Factorizable,
}

pub enum Source {
    Model(Model, Transmittances),
    Scan(Vec<AnglePoint>),
}

impl Source {
    /// `model:<name>` or a path to a scan CSV.
    pub fn parse(spec: &str, eps: Transmittances) -> Result<Self> {
        if let Some(name) = spec.strip_prefix("model:") {
            let m = match name {
                "ideal" => Model::Ideal,
                "all_pairs_perfect" => Model::AllPairsPerfect,
                "paper" => Model::Paper,
                "projector" => Model::Projector,
                "factorizable" => Model::Factorizable,
                other => {
                    return Err(Error::InvalidParameter {
                        name: "source",
                        reason: format!(
                            "unknown model `{other}` (ideal, all_pairs_perfect, paper, projector, factorizable)"
                        ),
                    })
                }
            };
            return Ok(Source::Model(m, eps));
        }
        Ok(Source::Scan(read_scan_points(Path::new(spec))?))
    }

    fn label(&self) -> String {
        match self {
            Source::Model(m, _) => format!("model:{}", serde_json::to_value(m).unwrap().as_str().unwrap()),
            Source::Scan(p) => format!("scan ({} points)", p.len()),
        }
    }
}

/// Points of the `ok` rows of a scan CSV.
pub fn read_scan_points(path: &Path) -> Result<Vec<AnglePoint>> {
    let t = Table::read(path)?;
    let theta = t.numbers("theta_deg")?;
    let p12 = t.numbers("p12")?;
    let sigma = t.numbers("sigma")?;
    let mut out = Vec::new();
    for i in 0..t.rows.len() {
        if let (Some(th), Some(p), Some(s)) = (theta[i], p12[i], sigma[i]) {
            if p.is_finite() && s.is_finite() && s > 0.0 {
                out.push(AnglePoint {
                    theta: Angle::from_degrees(th)?,
                    p12: p,
                    sigma: s,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no usable scan rows", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub phi_deg: f64,
    pub value: f64,
    /// Standard error, if the source carries uncertainties.
    pub sigma: Option<f64>,
    pub violated: bool,
    /// Signed distance beyond the nearest bound (negative when inside).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub source: String,
    pub p1: f64,
    pub p2: f64,
    pub ch_bounds: [f64; 2],
    pub chsh_bound: f64,
    pub ch: Verdict,
    pub chsh: Verdict,
    pub ch_extremal: Verdict,
    pub chsh_extremal: Verdict,
}

fn ch_verdict(phi_deg: f64, s: f64, sigma: Option<f64>) -> Verdict {
    let margin = match ch_violation(s) {
        Some(v) => v.abs(),
        None => -(s - CH_LOWER).min(CH_UPPER - s),
    };
    Verdict {
        phi_deg,
        value: s,
        sigma,
        violated: margin > 0.0,
        margin,
    }
}

fn chsh_verdict(phi_deg: f64, s: f64) -> Verdict {
    Verdict {
        phi_deg,
        value: s,
        sigma: None,
        violated: s > CHSH_CLASSICAL,
        margin: s - CHSH_CLASSICAL,
    }
}

struct Curve<'a> {
    source: &'a Source,
    measured: Option<MeasuredCurve>,
    p: f64,
}

impl Curve<'_> {
    fn p12(&self, theta: Angle) -> Option<f64> {
        match self.source {
            Source::Model(m, eps) => Some(match m {
                Model::Ideal => p12_ideal(theta),
                Model::AllPairsPerfect => p12_all_pairs_perfect(theta),
                Model::Paper => p12_paper(theta, eps),
                Model::Projector => p12_projector(theta, eps),
                Model::Factorizable => self.p,
            }),
            Source::Scan(_) => self.measured.as_ref()?.lookup(theta).map(|v| v.0),
        }
    }

    /// `(S_CH, S_CHSH)` at φ, or the relative angle the data does not cover.
    fn at(&self, phi_deg: f64, p1: f64, p2: f64) -> Result<(f64, f64)> {
        let g = BellGeometry::from_phi(phi_deg.to_radians());
        for th in g.relative_angles() {
            if self.p12(th).is_none() {
                return Err(Error::AngleCoverage(format!(
                    "relative angle {:.4}° needed at φ = {phi_deg}° is outside the measured range",
                    th.degrees()
                )));
            }
        }
        let f = |th: Angle| self.p12(th).unwrap_or(f64::NAN);
        let s = ch_functional(f, p1, p2, &g);
        let e = chsh_functional(|th| correlation_from_p12(f(th)), &g);
        Ok((s, e))
    }
}

pub fn evaluate(source: &Source, settings: &ChSettings, phi_grid_deg: &[f64]) -> Result<InequalityReport> {
    if phi_grid_deg.is_empty() {
        return Err(Error::InvalidParameter {
            name: "phi_grid",
            reason: "grid is empty".into(),
        });
    }
    let (p1, p2) = (settings.p1, settings.p2);
    let measured = match source {
        Source::Scan(points) => Some(MeasuredCurve::new(points)?),
        Source::Model(..) => None,
    };
    let curve = Curve {
        source,
        measured,
        p: p1 * p2,
    };
    let phi = settings.phi_deg;
    let (s, e) = curve.at(phi, p1, p2)?;
    let sigma = match source {
        Source::Scan(points) => Some(evaluate_ch(points, settings)?.sigma),
        Source::Model(..) => None,
    };
    let ch = ch_verdict(phi, s, sigma);
    let chsh = chsh_verdict(phi, e);
    let mut ch_ext = ch_verdict(phi_grid_deg[0], f64::NAN, None);
    let mut chsh_ext = chsh_verdict(phi_grid_deg[0], f64::NEG_INFINITY);
    let mut first = true;
    for &ph in phi_grid_deg {
        let (s, e) = curve.at(ph, p1, p2)?;
        let v = ch_verdict(ph, s, None);
        if first || v.margin > ch_ext.margin {
            ch_ext = v;
        }
        if first || e > chsh_ext.value {
            chsh_ext = chsh_verdict(ph, e);
        }
        first = false;
    }
    Ok(InequalityReport {
        source: source.label(),
        p1,
        p2,
        ch_bounds: [CH_LOWER, CH_UPPER],
        chsh_bound: CHSH_CLASSICAL,
        ch,
        chsh,
        ch_extremal: ch_ext,
        chsh_extremal: chsh_ext,
    })
}

fn word(v: bool) -> &'static str {
    if v {
        "VIOLATED"
    } else {
        "NOT VIOLATED"
    }
}

pub fn render(r: &InequalityReport) -> String {
    let sig = |v: &Verdict| v.sigma.map_or(String::new(), |s| format!(" ± {s:.4}"));
    let mut out = String::new();
    out += &format!("source: {}  (p1 = {}, p2 = {})\n", r.source, r.p1, r.p2);
    out += &format!(
        "S_CH   = {:.4}{} at phi = {}°, bounds [{}, {}]: {} (margin {:+.4})\n",
        r.ch.value,
        sig(&r.ch),
        r.ch.phi_deg,
        r.ch_bounds[0],
        r.ch_bounds[1],
        word(r.ch.violated),
        r.ch.margin
    );
    out += &format!(
        "S_CHSH = {:.4} at phi = {}°, bound {}: {} (margin {:+.4})\n",
        r.chsh.value,
        r.chsh.phi_deg,
        r.chsh_bound,
        word(r.chsh.violated),
        r.chsh.margin
    );
    let geom = |phi: f64| format!("a = 0°, b = {phi}°, a' = {}°, b' = {}°", 2.0 * phi, 3.0 * phi);
    out += &format!(
        "extremal CH over the phi grid: S_CH = {:.4} at {} ({})\n",
        r.ch_extremal.value,
        geom(r.ch_extremal.phi_deg),
        word(r.ch_extremal.violated)
    );
    out += &format!(
        "extremal CHSH over the phi grid: S_CHSH = {:.4} at {} ({})\n",
        r.chsh_extremal.value,
        geom(r.chsh_extremal.phi_deg),
        word(r.chsh_extremal.violated)
    );
    out
}
