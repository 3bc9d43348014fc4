//! Orchestration shared by the command-line tool and the test suites:
//! simulate and analyze one angle, or a whole angle scan on a worker pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    angle_scan_summary, estimate_p12, fit_coincidence_model, AnglePoint, CoincidenceHistogram, FitResult,
    P12Estimate, P12Reading, ScanReport,
};
use crate::angle::Angle;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::{simulate_run, HistogramSink, RunSummary};
use crate::quantum::{p12_ideal, p12_paper, p12_projector, CorrelationParams, ResponseParams};

/// Closed-form values at the applied angle, for side-by-side reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub p12_ideal: f64,
    pub p12_paper: f64,
    pub p12_projector: f64,
    /// Dip depth `1 − 4·f·P` expected from the projector value.
    pub alpha_projector: f64,
    /// Same from the Eq. 6 style value.
    pub alpha_paper: f64,
}

impl Predictions {
    pub fn at(cfg: &ExperimentConfig, theta: Angle) -> Result<Self> {
        let eps = cfg.transmittances()?;
        let f = cfg.source.singlet_fraction;
        let (paper, projector) = (p12_paper(theta, &eps), p12_projector(theta, &eps));
        Ok(Self {
            p12_ideal: p12_ideal(theta),
            p12_paper: paper,
            p12_projector: projector,
            alpha_projector: 1.0 - 4.0 * f * projector,
            alpha_paper: 1.0 - 4.0 * f * paper,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleAnalysis {
    pub theta_applied_deg: f64,
    pub estimate: P12Estimate,
    pub reading: P12Reading,
    pub predictions: Predictions,
    pub fit: Option<FitResult>,
    /// Why the fit is missing or did not converge.
    pub fit_error: Option<String>,
}

impl AngleAnalysis {
    pub fn point(&self) -> Result<AnglePoint> {
        Ok(AnglePoint {
            theta: Angle::from_degrees(self.theta_applied_deg)?,
            p12: self.reading.p12,
            sigma: self.reading.p12_sigma,
        })
    }
}

/// Ratio estimate, P12 reading and (optionally) the model fit of one histogram.
pub fn analyze_histogram(
    cfg: &ExperimentConfig,
    hist: &CoincidenceHistogram,
    theta: Angle,
    with_fit: bool,
) -> Result<AngleAnalysis> {
    let window = cfg.window()?.delta_window();
    let plateau = cfg.plateau()?;
    let tau_c = cfg.tau_c()?;
    let t_w = cfg.daq_config().t_w;
    let estimate = estimate_p12(hist, window, &plateau)?;
    let reading = estimate.reading(cfg.dip_kernel(), window, t_w, tau_c, cfg.source.singlet_fraction)?;
    let predictions = Predictions::at(cfg, theta)?;
    let (fit, fit_error) = if with_fit {
        let a0 = if reading.alpha.is_finite() { reading.alpha.clamp(0.05, 1.0) } else { 0.5 };
        let init_c = CorrelationParams::new(a0, tau_c)?;
        let init_r = ResponseParams::new(t_w)?;
        match fit_coincidence_model(hist, &plateau, &init_c, &init_r, &cfg.fit_options()) {
            Ok(f) => {
                let err = (!f.converged).then(|| f.diagnostics.message.clone());
                (Some(f), err)
            }
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    Ok(AngleAnalysis {
        theta_applied_deg: theta.degrees(),
        estimate,
        reading,
        predictions,
        fit,
        fit_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRun {
    pub summary: RunSummary,
    pub histogram: CoincidenceHistogram,
    pub analysis: AngleAnalysis,
}

/// Simulate one angle straight into a histogram and analyze it.
pub fn run_angle(cfg: &ExperimentConfig, theta_deg: f64, rep: u32, with_fit: bool) -> Result<AngleRun> {
    let (summary, histogram) = simulate_histogram(cfg, theta_deg, rep)?;
    let theta = Angle::from_degrees(summary.theta_applied_deg)?;
    let analysis = analyze_histogram(cfg, &histogram, theta, with_fit)?;
    Ok(AngleRun {
        summary,
        histogram,
        analysis,
    })
}

pub fn simulate_histogram(cfg: &ExperimentConfig, theta_deg: f64, rep: u32) -> Result<(RunSummary, CoincidenceHistogram)> {
    let mut sink = HistogramSink::new(cfg.bin_width(), cfg.max_delta(), cfg.daq_config().clock_tick)?;
    let summary = simulate_run(cfg, theta_deg, rep, &mut sink)?;
    let hist = sink.finish(summary.live_time);
    Ok((summary, hist))
}

/// One scan job; failed angles keep their error instead of aborting the scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub theta_deg: f64,
    pub run: Option<AngleRun>,
    pub error: Option<String>,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub entries: Vec<ScanEntry>,
    pub report: Option<ScanReport>,
    pub report_error: Option<String>,
}

impl ScanOutcome {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.error.is_some()).count()
    }

    /// Worst exit code among the jobs and the report (0 when all succeeded).
    pub fn exit_code(&self) -> i32 {
        let jobs = self.entries.iter().map(|e| e.exit_code).max().unwrap_or(0);
        if self.report.is_none() && jobs == 0 { 3 } else { jobs }
    }
}

/// Run every configured angle on a pool of `threads` workers (all cores when
/// `None`). Output order follows the configured angle list.
pub fn run_scan(cfg: &ExperimentConfig, threads: Option<usize>, with_fit: bool) -> Result<ScanOutcome> {
    cfg.validate()?;
    if cfg.angles_deg.is_empty() {
        return Err(Error::invalid("angles_deg", "scan needs at least one angle"));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    let entries: Vec<ScanEntry> = pool.install(|| {
        cfg.angles_deg
            .par_iter()
            .map(|&theta_deg| match run_angle(cfg, theta_deg, 0, with_fit) {
                Ok(run) => ScanEntry {
                    theta_deg,
                    run: Some(run),
                    error: None,
                    exit_code: 0,
                },
                Err(e) => ScanEntry {
                    theta_deg,
                    run: None,
                    error: Some(e.to_string()),
                    exit_code: e.exit_code(),
                },
            })
            .collect()
    });
    let points: Vec<AnglePoint> = entries
        .iter()
        .filter_map(|e| e.run.as_ref())
        .map(|r| r.analysis.point())
        .collect::<Result<_>>()?;
    let (report, report_error) = match angle_scan_summary(&points, &cfg.transmittances()?, &cfg.ch_settings()) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ScanOutcome {
        entries,
        report,
        report_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::with_seed(seed);
        c.source.rate_per_s = 50_000.0;
        c.source.duration_s = 20.0;
        c
    }

    #[test]
    fn single_angle_reading_is_near_prediction() {
        let r = run_angle(&quick(1), 90.0, 0, false).unwrap();
        let a = &r.analysis;
        assert!((a.reading.p12 - 0.25).abs() < 4.0 * a.reading.p12_sigma, "{:?}", a.reading);
        assert_eq!(r.histogram.live_time, r.summary.live_time);
        assert!(a.fit.is_none() && a.fit_error.is_none());
    }

    #[test]
    fn scan_keeps_failures_and_order() {
        let mut c = quick(2);
        c.source.duration_s = 2.0;
        c.angles_deg = vec![0.0, 90.0, 180.0];
        let s = run_scan(&c, Some(1), false).unwrap();
        assert_eq!(s.entries.iter().map(|e| e.theta_deg).collect::<Vec<_>>(), vec![0.0, 90.0, 180.0]);
        assert_eq!(s.failures(), 0);
        assert!(s.report.is_some());
        // a run too short to fill the plateau fails on its own
        c.source.duration_s = 1e-4;
        let s = run_scan(&c, Some(1), false).unwrap();
        assert_eq!(s.failures(), 3);
        assert!(s.entries.iter().all(|e| e.exit_code == 3));
        assert!(s.report.is_none());
        assert_eq!(s.exit_code(), 3);
    }

    #[test]
    fn predictions_match_closed_forms() {
        let c = ExperimentConfig::with_seed(0);
        let p = Predictions::at(&c, Angle::ZERO).unwrap();
        assert!((p.p12_paper - 0.15022).abs() < 1e-4);
        assert!((p.p12_projector - 0.19956).abs() < 1e-4);
        assert!((p.alpha_projector - (1.0 - p.p12_projector)).abs() < 1e-15);
    }
}
