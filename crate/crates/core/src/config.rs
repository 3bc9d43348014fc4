//! Experiment configuration file.
//!
//! A JSON document with unit-suffixed keys. Every section is optional and
//! falls back to the apparatus defaults, but `master_seed` must be given:
//! runs are never seeded from the clock. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ChSettings, DipKernel, FitOptions, PlateauRange};
use crate::angle::Angle;
use crate::beamline::{neutron_speed, BeamGeometry, WORKING_WAVELENGTH_M};
use crate::daq::DaqConfig;
use crate::error::{Error, Result};
use crate::quantum::{
    CorrelationParams, PolarizerPair, ResponseParams, Transmittances, WindowParams, MEASURED_EPS_DOWN,
    MEASURED_EPS_UP,
};
use crate::source::{tau_c_from_energy_spread, SourceConfig};

const NS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub rate_per_s: f64,
    pub duration_s: f64,
    /// Give either this or `delta_e_ev`.
    pub tau_c_ns: Option<f64>,
    pub delta_e_ev: Option<f64>,
    pub singlet_fraction: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            rate_per_s: 2000.0,
            duration_s: 3600.0,
            tau_c_ns: None,
            delta_e_ev: None,
            singlet_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamSection {
    pub path_split_prob: f64,
    pub v_ther_m_per_s: f64,
}

impl Default for BeamSection {
    fn default() -> Self {
        Self {
            path_split_prob: 0.5,
            v_ther_m_per_s: neutron_speed(WORKING_WAVELENGTH_M),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarizerSection {
    pub eps1_down: f64,
    pub eps1_up: f64,
    pub eps2_down: f64,
    pub eps2_up: f64,
}

impl Default for PolarizerSection {
    fn default() -> Self {
        Self {
            eps1_down: MEASURED_EPS_DOWN,
            eps1_up: MEASURED_EPS_UP,
            eps2_down: MEASURED_EPS_DOWN,
            eps2_up: MEASURED_EPS_UP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaqSection {
    pub t_w_ns: f64,
    pub clock_tick_ns: f64,
    pub cycle_length_s: f64,
    pub dead_time_per_cycle_ms: f64,
    pub detection_efficiency: f64,
}

impl Default for DaqSection {
    fn default() -> Self {
        Self {
            t_w_ns: 60.0,
            clock_tick_ns: 25.0,
            cycle_length_s: 10.0,
            dead_time_per_cycle_ms: 10.0,
            detection_efficiency: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// Single one-sided exponential response.
    Causal,
    /// Both detectors' responses plus clock quantization.
    DetectorPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub bin_width_ns: f64,
    pub max_delta_ns: f64,
    pub delta_window_ns: f64,
    /// Defaults to `10·(t_w + τ_c)`.
    pub plateau_min_ns: Option<f64>,
    /// Defaults to `max_delta_ns`.
    pub plateau_max_ns: Option<f64>,
    pub dip_kernel: KernelChoice,
    pub ch_phi_deg: f64,
    pub ch_p1: f64,
    pub ch_p2: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bin_width_ns: 25.0,
            max_delta_ns: 6000.0,
            delta_window_ns: 150.0,
            plateau_min_ns: None,
            plateau_max_ns: None,
            dip_kernel: KernelChoice::DetectorPair,
            ch_phi_deg: 45.0,
            ch_p1: 0.5,
            ch_p2: 0.5,
        }
    }
}

fn default_angles() -> Vec<f64> {
    vec![0.0, 45.0, 90.0, 135.0, 180.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub beam: BeamSection,
    #[serde(default)]
    pub polarizers: PolarizerSection,
    #[serde(default)]
    pub daq: DaqSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default = "default_angles")]
    pub angles_deg: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    /// Defaults with the given seed.
    pub fn with_seed(master_seed: u64) -> Self {
        Self {
            master_seed,
            source: SourceSection::default(),
            beam: BeamSection::default(),
            polarizers: PolarizerSection::default(),
            daq: DaqSection::default(),
            analysis: AnalysisSection::default(),
            angles_deg: default_angles(),
            output_dir: None,
        }
    }

    /// Parse and validate; syntax and schema errors carry line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let full = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            Error::Config {
                line: e.line(),
                column: e.column(),
                message: full.strip_suffix(&suffix).unwrap_or(&full).to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copy with optional values filled in, as embedded in output files.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.source.tau_c_ns = Some(self.tau_c()? / NS);
        let p = self.plateau()?;
        c.analysis.plateau_min_ns = Some(p.min / NS);
        c.analysis.plateau_max_ns = Some(p.max / NS);
        Ok(c)
    }

    pub fn tau_c(&self) -> Result<f64> {
        match (self.source.tau_c_ns, self.source.delta_e_ev) {
            (Some(_), Some(_)) => Err(Error::invalid(
                "source",
                "give either tau_c_ns or delta_e_ev, not both",
            )),
            (Some(t), None) => Ok(t * NS),
            (None, Some(de)) => tau_c_from_energy_spread(de),
            (None, None) => Ok(78.0 * NS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source_config(0.0, 0)?.validate()?;
        self.beam_geometry().validate()?;
        self.transmittances()?;
        self.daq_config().validate()?;
        self.window()?;
        CorrelationParams::new(1.0, self.tau_c()?)?;
        ResponseParams::new(self.daq.t_w_ns * NS)?;
        let a = &self.analysis;
        for (name, v) in [("bin_width_ns", a.bin_width_ns), ("max_delta_ns", a.max_delta_ns)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be > 0")));
            }
        }
        if a.delta_window_ns > a.max_delta_ns {
            return Err(Error::invalid("delta_window_ns", "window is longer than max_delta_ns"));
        }
        let ratio = a.delta_window_ns / a.bin_width_ns;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::invalid(
                "delta_window_ns",
                format!("{} is not a whole number of {} ns bins", a.delta_window_ns, a.bin_width_ns),
            ));
        }
        let p = self.plateau()?;
        if p.min < a.delta_window_ns * NS {
            return Err(Error::invalid("plateau_min_ns", "plateau overlaps the coincidence window"));
        }
        if p.max > a.max_delta_ns * NS * (1.0 + 1e-12) {
            return Err(Error::invalid("plateau_max_ns", "plateau extends past max_delta_ns"));
        }
        for (name, v) in [("ch_p1", a.ch_p1), ("ch_p2", a.ch_p2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} is not a probability")));
            }
        }
        for &d in &self.angles_deg {
            Angle::fold_stage_degrees(d)?;
        }
        Ok(())
    }

    pub fn source_config(&self, theta_deg: f64, rep: u32) -> Result<SourceConfig> {
        Ok(SourceConfig {
            rate: self.source.rate_per_s,
            duration: self.source.duration_s,
            tau_c: self.tau_c()?,
            singlet_fraction: self.source.singlet_fraction,
            seed: crate::source::source_seed(self.master_seed, theta_deg, rep),
        })
    }

    pub fn beam_geometry(&self) -> BeamGeometry {
        BeamGeometry {
            path_split_prob: self.beam.path_split_prob,
            v_ther: self.beam.v_ther_m_per_s,
        }
    }

    pub fn transmittances(&self) -> Result<Transmittances> {
        let p = &self.polarizers;
        Transmittances::new(p.eps1_down, p.eps1_up, p.eps2_down, p.eps2_up)
    }

    pub fn polarizer_pair(&self, theta: Angle) -> Result<PolarizerPair> {
        Ok(PolarizerPair::new(self.transmittances()?, theta))
    }

    pub fn daq_config(&self) -> DaqConfig {
        DaqConfig {
            t_w: self.daq.t_w_ns * NS,
            clock_tick: self.daq.clock_tick_ns * NS,
            cycle_length: self.daq.cycle_length_s,
            dead_time_per_cycle: self.daq.dead_time_per_cycle_ms * 1e-3,
            detection_efficiency: self.daq.detection_efficiency,
        }
    }

    pub fn window(&self) -> Result<WindowParams> {
        WindowParams::new(self.analysis.delta_window_ns * NS)
    }

    pub fn bin_width(&self) -> f64 {
        self.analysis.bin_width_ns * NS
    }

    pub fn max_delta(&self) -> f64 {
        self.analysis.max_delta_ns * NS
    }

    pub fn plateau(&self) -> Result<PlateauRange> {
        let default = PlateauRange::default_for(self.daq.t_w_ns * NS, self.tau_c()?, self.max_delta())?;
        let min = self.analysis.plateau_min_ns.map_or(default.min, |v| v * NS);
        let max = self.analysis.plateau_max_ns.map_or(default.max, |v| v * NS);
        PlateauRange::new(min, max)
    }

    pub fn dip_kernel(&self) -> DipKernel {
        match self.analysis.dip_kernel {
            KernelChoice::Causal => DipKernel::Causal,
            KernelChoice::DetectorPair => DipKernel::DetectorPair {
                clock_tick: self.daq.clock_tick_ns * NS,
            },
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            kernel: self.dip_kernel(),
            ..FitOptions::default()
        }
    }

    pub fn ch_settings(&self) -> ChSettings {
        ChSettings {
            phi_deg: self.analysis.ch_phi_deg,
            p1: self.analysis.ch_p1,
            p2: self.analysis.ch_p2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_json_str(r#"{"master_seed": 7}"#).unwrap();
        assert_eq!(c.source.rate_per_s, 2000.0);
        assert!((c.tau_c().unwrap() - 78e-9).abs() < 1e-20);
        let (d, e) = (c.daq_config(), DaqConfig::default());
        for (x, y) in [
            (d.t_w, e.t_w),
            (d.clock_tick, e.clock_tick),
            (d.cycle_length, e.cycle_length),
            (d.dead_time_per_cycle, e.dead_time_per_cycle),
            (d.detection_efficiency, e.detection_efficiency),
        ] {
            assert!((x - y).abs() <= 1e-15 * y.abs(), "{x} vs {y}");
        }
        let p = c.plateau().unwrap();
        assert!((p.min - 1380e-9).abs() < 1e-18);
        assert!((p.max - 6000e-9).abs() < 1e-18);
        assert_eq!(c.angles_deg.len(), 5);
    }

    #[test]
    fn seed_is_mandatory() {
        let e = ExperimentConfig::from_json_str("{}").unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_report_position() {
        let text = "{\n  \"master_seed\": 1,\n  \"source\": {\"rate\": 5}\n}";
        match ExperimentConfig::from_json_str(text) {
            Err(Error::Config { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("rate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let bad = r#"{"master_seed": 1, "analysis": {"delta_window_ns": 160}}"#;
        assert_eq!(ExperimentConfig::from_json_str(bad).unwrap_err().exit_code(), 2);
        let both = r#"{"master_seed": 1, "source": {"tau_c_ns": 78, "delta_e_ev": 1e-8}}"#;
        assert!(ExperimentConfig::from_json_str(both).is_err());
        let eps = r#"{"master_seed": 1, "polarizers": {"eps1_down": 1.5}}"#;
        assert!(ExperimentConfig::from_json_str(eps).is_err());
    }

    #[test]
    fn energy_spread_sets_tau() {
        let c = ExperimentConfig::from_json_str(r#"{"master_seed": 1, "source": {"delta_e_ev": 8.4386e-9}}"#)
            .unwrap();
        assert!((c.tau_c().unwrap() / 78e-9 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn resolved_round_trips() {
        let c = ExperimentConfig::with_seed(3).resolved().unwrap();
        let back = ExperimentConfig::from_json_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.source.tau_c_ns, Some(78.0));
    }
}
