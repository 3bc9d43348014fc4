//! Subcommand bodies. Each returns the process exit code on success paths
//! that still need a non-zero status (non-converged fits, failed angles).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use nsb_core::analysis::{coincidence_histogram_ticks, CoincidenceHistogram, FitResult};
use nsb_core::config::ExperimentConfig;
use nsb_core::eventfile::{read_event_file, EventWriter};
use nsb_core::experiment::{analyze_histogram, run_scan, AngleAnalysis, ScanOutcome};
use nsb_core::output::{fmt12, to_json_record, write_json, Provenance, Table};
use nsb_core::pipeline::{event_file_header, simulate_run, FileSink};
use nsb_core::quantum::{p12_all_pairs_perfect, p12_ideal, p12_paper, p12_projector, Transmittances};
use nsb_core::{Angle, Error, Result};

use crate::inequality;

// stdout may be a closed pipe (`nsb predict | head`); that is not an error
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

const NS: f64 = 1e-9;

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_path(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Header for runs without a config file: no seed is involved, the
/// transmittances are the only input.
fn defaults_provenance(eps: &Transmittances) -> Provenance {
    Provenance {
        config: json!({
            "polarizers": {
                "eps1_down": eps.eps1_down(),
                "eps1_up": eps.eps1_up(),
                "eps2_down": eps.eps2_down(),
                "eps2_up": eps.eps2_up(),
            }
        }),
        master_seed: 0,
    }
}

pub fn predict(cfg: Option<&ExperimentConfig>, grid: &[f64], out: Option<&Path>) -> Result<i32> {
    let (eps, prov) = match cfg {
        Some(c) => (c.transmittances()?, Provenance::new(c)?),
        None => (Transmittances::measured(), defaults_provenance(&Transmittances::measured())),
    };
    let mut t = Table::new(&["theta_deg", "p12_ideal", "p12_all_pairs_perfect", "p12_paper", "p12_projector"]);
    for &deg in grid {
        let (th, _) = Angle::fold_stage_degrees(deg)?;
        t.push_numbers(&[
            deg,
            p12_ideal(th),
            p12_all_pairs_perfect(th),
            p12_paper(th, &eps),
            p12_projector(th, &eps),
        ]);
    }
    match out {
        Some(p) => t.write(p, &prov)?,
        None => say_raw!("{}", t.to_string(&prov)?),
    }
    Ok(0)
}

pub fn simulate(cfg: &ExperimentConfig, theta_deg: f64, rep: u32, d1: &Path, d2: &Path) -> Result<i32> {
    let header = event_file_header(cfg, theta_deg, rep)?;
    let mut sink = FileSink {
        d1: EventWriter::create(d1, &header)?,
        d2: EventWriter::create(d2, &header)?,
    };
    let summary = simulate_run(cfg, theta_deg, rep, &mut sink)?;
    sink.d1.finish()?;
    sink.d2.finish()?;
    let l = &summary.ledger;
    eprintln!(
        "emitted {} | pairs {} (singlet {}, triplet {}) | filtered {} | transmitted {} (absorbed {}) | detected {} (D1 {}, D2 {}) | dead-time {} | efficiency {} | after end {}",
        l.emitted,
        l.pairs,
        l.singlet_pairs,
        l.triplet_pairs,
        l.filtered_out,
        l.transmitted,
        l.transmitted_lost,
        l.detected,
        l.detected_d1,
        l.detected_d2,
        l.dead_time_dropped,
        l.efficiency_dropped,
        l.after_end
    );
    say!("{}", to_json_record(&Provenance::new(cfg)?, &summary));
    Ok(0)
}

/// Fit values in display units (ns).
#[derive(Debug, Serialize)]
struct FitRecord<'a> {
    alpha: f64,
    alpha_sigma: f64,
    t_w_ns: f64,
    t_w_ns_sigma: f64,
    tau_c_ns: f64,
    tau_c_ns_sigma: f64,
    /// Order (alpha, t_w_ns, tau_c_ns).
    covariance: [[f64; 3]; 3],
    chi2: f64,
    dof: usize,
    converged: bool,
    unconstrained: &'a [String],
    diagnostics: &'a nsb_core::analysis::fit::FitDiagnostics,
}

fn fit_record(f: &FitResult) -> FitRecord<'_> {
    let scale = [1.0, 1.0 / NS, 1.0 / NS];
    let mut cov = f.covariance;
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c *= scale[i] * scale[j];
        }
    }
    FitRecord {
        alpha: f.alpha,
        alpha_sigma: f.alpha_sigma(),
        t_w_ns: f.t_w / NS,
        t_w_ns_sigma: f.t_w_sigma() / NS,
        tau_c_ns: f.tau_c / NS,
        tau_c_ns_sigma: f.tau_c_sigma() / NS,
        covariance: cov,
        chi2: f.chi2,
        dof: f.dof,
        converged: f.converged,
        unconstrained: &f.diagnostics.unconstrained,
        diagnostics: &f.diagnostics,
    }
}

fn histogram_table(h: &CoincidenceHistogram) -> Table {
    let mut t = Table::new(&["delta_ns_low", "counts"]);
    for (i, &c) in h.counts.iter().enumerate() {
        t.push(vec![fmt12(h.bin_low(i) / NS), c.to_string()]);
    }
    t
}

/// Expected counts in a bin-wide window starting at δ, every 1 ns.
fn model_curve(f: &FitResult, h: &CoincidenceHistogram) -> Result<Table> {
    let mut t = Table::new(&["delta_ns", "model_counts_per_bin"]);
    let steps = ((h.max_delta - h.bin_width) / NS).floor() as usize;
    for i in 0..=steps {
        let lo = i as f64 * NS;
        t.push_numbers(&[i as f64, f.model_counts(lo, lo + h.bin_width)?]);
    }
    Ok(t)
}

fn analysis_record(a: &AngleAnalysis, cfg: &ExperimentConfig, theta_deg: f64) -> Result<serde_json::Value> {
    let plateau = cfg.plateau()?;
    Ok(json!({
        "theta_deg": theta_deg,
        "theta_applied_deg": a.theta_applied_deg,
        "delta_window_ns": cfg.window()?.delta_window() / NS,
        "plateau_ns": [plateau.min / NS, plateau.max / NS],
        "estimate": a.estimate,
        "reading": a.reading,
        "predictions": a.predictions,
    }))
}

fn fit_exit_code(a: &AngleAnalysis) -> i32 {
    match (&a.fit, &a.fit_error) {
        (Some(f), _) if !f.converged => 4,
        (None, Some(e)) if e.contains("did not converge") => 4,
        (None, Some(_)) => 3,
        _ => 0,
    }
}

fn write_fit_outputs(dir: &Path, prov: &Provenance, a: &AngleAnalysis, h: &CoincidenceHistogram) -> Result<()> {
    match &a.fit {
        Some(f) => {
            write_json(&dir.join("fit.json"), prov, &fit_record(f))?;
            model_curve(f, h)?.write(&dir.join("model_curve.csv"), prov)?;
        }
        None => {
            if let Some(e) = &a.fit_error {
                write_json(&dir.join("fit.json"), prov, &json!({ "converged": false, "error": e }))?;
            }
        }
    }
    Ok(())
}

fn header_theta(meta: &str) -> Option<f64> {
    serde_json::from_str::<serde_json::Value>(meta).ok()?.get("theta_deg")?.as_f64()
}

pub fn analyze(
    cfg: &ExperimentConfig,
    d1: &Path,
    d2: &Path,
    out_dir: &Path,
    theta: Option<f64>,
    with_fit: bool,
) -> Result<i32> {
    let f1 = read_event_file(d1)?;
    let f2 = read_event_file(d2)?;
    let tick = f1.header.clock_tick();
    if f2.header.clock_tick_ns != f1.header.clock_tick_ns {
        return Err(Error::Data("the two event files use different clock ticks".into()));
    }
    if (tick - cfg.daq_config().clock_tick).abs() > 1e-3 * tick {
        return Err(Error::Data(format!(
            "event files use a {} ns clock, the config says {} ns",
            f1.header.clock_tick_ns, cfg.daq.clock_tick_ns
        )));
    }
    let starts = f1.timestamps(1)?;
    let stops = f2.timestamps(2)?;
    if starts.is_empty() || stops.is_empty() {
        return Err(Error::Data(format!(
            "empty stream: {} detector-1 and {} detector-2 events",
            starts.len(),
            stops.len()
        )));
    }
    let theta_deg = theta
        .or_else(|| header_theta(&f1.header.metadata))
        .ok_or_else(|| Error::InvalidParameter {
            name: "theta",
            reason: "the event file carries no angle, pass --theta".into(),
        })?;
    let (th, _) = Angle::fold_stage_degrees(theta_deg)?;
    let live = cfg.daq_config().live_time(cfg.source.duration_s);
    let hist = coincidence_histogram_ticks(&starts, &stops, tick, cfg.bin_width(), cfg.max_delta())?.with_live_time(live);
    let a = analyze_histogram(cfg, &hist, th, with_fit)?;

    fs::create_dir_all(out_dir)?;
    let prov = Provenance::new(cfg)?;
    histogram_table(&hist).write(&out_dir.join("histogram.csv"), &prov)?;
    write_json(&out_dir.join("p12.json"), &prov, &analysis_record(&a, cfg, theta_deg)?)?;
    write_fit_outputs(out_dir, &prov, &a, &hist)?;
    print_analysis(&a, theta_deg);
    Ok(fit_exit_code(&a))
}

fn print_analysis(a: &AngleAnalysis, theta_deg: f64) {
    let r = &a.reading;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "theta {theta_deg}°: window counts {}, ratio {:.4} ± {:.4}, alpha {:.4} ± {:.4}, P12 {:.4} ± {:.4} (projector {:.4}, paper {:.4})",
        a.estimate.n_window,
        r.ratio,
        r.ratio_sigma,
        r.alpha,
        r.alpha_sigma,
        r.p12,
        r.p12_sigma,
        a.predictions.p12_projector,
        a.predictions.p12_paper
    );
    if let Some(f) = &a.fit {
        let _ = writeln!(
            out,
            "fit: alpha {:.3} ± {:.3}, t_w {:.1} ± {:.1} ns, tau_c {:.1} ± {:.1} ns, chi2/dof {:.1}/{}{}{}",
            f.alpha,
            f.alpha_sigma(),
            f.t_w / NS,
            f.t_w_sigma() / NS,
            f.tau_c / NS,
            f.tau_c_sigma() / NS,
            f.chi2,
            f.dof,
            if f.converged { "" } else { ", NOT CONVERGED" },
            if f.diagnostics.unconstrained.is_empty() {
                String::new()
            } else {
                format!(", unconstrained: {}", f.diagnostics.unconstrained.join(", "))
            }
        );
    } else if let Some(e) = &a.fit_error {
        let _ = writeln!(out, "fit: {e}");
    }
}

fn angle_dir(out_dir: &Path, theta_deg: f64) -> PathBuf {
    out_dir.join(format!("theta_{}", fmt12(theta_deg)))
}

fn scan_table(s: &ScanOutcome) -> Table {
    let mut t = Table::new(&[
        "theta_deg",
        "stage_deg",
        "p12",
        "sigma",
        "p12_paper",
        "p12_projector",
        "p12_ideal",
        "pull_paper",
        "pull_projector",
        "n_window",
        "ratio",
        "ratio_sigma",
        "status",
    ]);
    for e in &s.entries {
        match (&e.run, &e.error) {
            (Some(run), _) => {
                let a = &run.analysis;
                let p = &a.predictions;
                let r = &a.reading;
                let mut row: Vec<String> = [
                    a.theta_applied_deg,
                    e.theta_deg,
                    r.p12,
                    r.p12_sigma,
                    p.p12_paper,
                    p.p12_projector,
                    p.p12_ideal,
                    (r.p12 - p.p12_paper) / r.p12_sigma,
                    (r.p12 - p.p12_projector) / r.p12_sigma,
                ]
                .iter()
                .map(|&x| fmt12(x))
                .collect();
                row.push(a.estimate.n_window.to_string());
                row.push(fmt12(r.ratio));
                row.push(fmt12(r.ratio_sigma));
                row.push("ok".into());
                t.push(row);
            }
            (None, err) => {
                let mut row = vec![String::from("nan"); 12];
                row[1] = fmt12(e.theta_deg);
                if let Ok((th, _)) = Angle::fold_stage_degrees(e.theta_deg) {
                    row[0] = fmt12(th.degrees());
                }
                row.push(format!("failed: {}", err.as_deref().unwrap_or("unknown error")));
                t.push(row);
            }
        }
    }
    t
}

pub fn scan(cfg: &ExperimentConfig, out_dir: &Path, threads: Option<usize>, with_fit: bool) -> Result<i32> {
    fs::create_dir_all(out_dir)?;
    let prov = Provenance::new(cfg)?;
    let outcome = run_scan(cfg, threads, with_fit)?;
    let mut worst_fit = 0;
    for e in &outcome.entries {
        let Some(run) = &e.run else { continue };
        let dir = angle_dir(out_dir, e.theta_deg);
        fs::create_dir_all(&dir)?;
        histogram_table(&run.histogram).write(&dir.join("histogram.csv"), &prov)?;
        write_json(&dir.join("p12.json"), &prov, &analysis_record(&run.analysis, cfg, e.theta_deg)?)?;
        write_json(&dir.join("ledger.json"), &prov, &run.summary)?;
        write_fit_outputs(&dir, &prov, &run.analysis, &run.histogram)?;
        worst_fit = worst_fit.max(fit_exit_code(&run.analysis));
    }
    scan_table(&outcome).write(&out_dir.join("scan.csv"), &prov)?;
    let failures: Vec<_> = outcome
        .entries
        .iter()
        .filter_map(|e| e.error.as_ref().map(|m| json!({"theta_deg": e.theta_deg, "error": m})))
        .collect();
    write_json(
        &out_dir.join("report.json"),
        &prov,
        &json!({
            "report": outcome.report,
            "report_error": outcome.report_error,
            "failures": failures,
            "p12_normalization": "per-pair probability, 1/4 when uncorrelated; singlet fraction divided out",
        }),
    )?;
    print_scan(&outcome);
    Ok(outcome.exit_code().max(worst_fit))
}

fn print_scan(s: &ScanOutcome) {
    say!("theta_deg  p12      sigma    paper    projector  pull_paper  pull_projector");
    for e in &s.entries {
        match &e.run {
            Some(run) => {
                let a = &run.analysis;
                let (r, p) = (&a.reading, &a.predictions);
                say!(
                    "{:>9.3}  {:.4}   {:.4}   {:.4}   {:.4}     {:>+9.2}   {:>+9.2}",
                    a.theta_applied_deg,
                    r.p12,
                    r.p12_sigma,
                    p.p12_paper,
                    p.p12_projector,
                    (r.p12 - p.p12_paper) / r.p12_sigma,
                    (r.p12 - p.p12_projector) / r.p12_sigma
                );
            }
            None => say!("{:>9.3}  FAILED: {}", e.theta_deg, e.error.as_deref().unwrap_or("")),
        }
    }
    match &s.report {
        Some(r) => {
            say!(
                "chi2 paper {:.2}, chi2 projector {:.2}, dof {}",
                r.chi2_paper, r.chi2_projector, r.dof
            );
            match &r.ch {
                Some(ch) => say!(
                    "CH at phi = {}°: S = {:.4} ± {:.4}{} -> {}",
                    ch.phi_deg,
                    ch.s,
                    ch.sigma,
                    if ch.interpolated { " (interpolated)" } else { "" },
                    if ch.violation.is_some() { "VIOLATED" } else { "NOT VIOLATED" }
                ),
                None => say!("CH: angle coverage insufficient"),
            }
        }
        None => say!("no report: {}", s.report_error.as_deref().unwrap_or("")),
    }
}

pub fn inequality(
    source: &str,
    cfg: Option<&ExperimentConfig>,
    phi_grid: &[f64],
    phi: Option<f64>,
    p1: Option<f64>,
    p2: Option<f64>,
    out: Option<&Path>,
) -> Result<i32> {
    let (eps, mut settings, prov) = match cfg {
        Some(c) => (c.transmittances()?, c.ch_settings(), Provenance::new(c)?),
        None => (
            Transmittances::measured(),
            Default::default(),
            defaults_provenance(&Transmittances::measured()),
        ),
    };
    if let Some(v) = phi {
        settings.phi_deg = v;
    }
    if let Some(v) = p1 {
        settings.p1 = v;
    }
    if let Some(v) = p2 {
        settings.p2 = v;
    }
    let src = inequality::Source::parse(source, eps)?;
    let report = inequality::evaluate(&src, &settings, phi_grid)?;
    say_raw!("{}", inequality::render(&report));
    if let Some(p) = out {
        write_json(p, &prov, &report)?;
    }
    Ok(0)
}
