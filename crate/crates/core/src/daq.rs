//! Clocked detection: scintillator response, clock quantization, acquisition
//! cycles with end-of-cycle readout dead time, and detector efficiency.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::beamline::TransmittedNeutron;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaqConfig {
    /// Mean scintillator response delay, seconds.
    pub t_w: f64,
    /// Clock period, seconds (40 MHz → 25 ns).
    pub clock_tick: f64,
    /// Acquisition cycle length, seconds.
    pub cycle_length: f64,
    /// Readout dead window at the end of each cycle, seconds. Zero is allowed.
    pub dead_time_per_cycle: f64,
    pub detection_efficiency: f64,
}

impl Default for DaqConfig {
    fn default() -> Self {
        Self {
            t_w: 60e-9,
            clock_tick: 25e-9,
            cycle_length: 10.0,
            dead_time_per_cycle: 10e-3,
            detection_efficiency: 1.0,
        }
    }
}

fn whole_ticks(name: &'static str, value: f64, tick: f64) -> Result<u64> {
    let n = (value / tick).round();
    if (n * tick - value).abs() > 1e-6 * tick {
        return Err(Error::invalid(
            name,
            format!("{value} s is not a whole number of {tick} s clock ticks"),
        ));
    }
    Ok(n as u64)
}

impl DaqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_w > 0.0 && self.t_w.is_finite()) {
            return Err(Error::invalid("t_w", format!("{} must be > 0", self.t_w)));
        }
        if !(self.clock_tick > 0.0 && self.clock_tick.is_finite()) {
            return Err(Error::invalid("clock_tick", format!("{} must be > 0", self.clock_tick)));
        }
        if !(self.cycle_length > 0.0 && self.cycle_length.is_finite()) {
            return Err(Error::invalid("cycle_length", format!("{} must be > 0", self.cycle_length)));
        }
        if !(self.dead_time_per_cycle >= 0.0 && self.dead_time_per_cycle < self.cycle_length) {
            return Err(Error::invalid(
                "dead_time_per_cycle",
                format!("{} must be in [0, cycle_length)", self.dead_time_per_cycle),
            ));
        }
        if !(self.detection_efficiency > 0.0 && self.detection_efficiency <= 1.0) {
            return Err(Error::invalid(
                "detection_efficiency",
                format!("{} is not in (0, 1]", self.detection_efficiency),
            ));
        }
        self.cycle_ticks()?;
        self.dead_ticks()?;
        Ok(())
    }

    pub fn cycle_ticks(&self) -> Result<u64> {
        let n = whole_ticks("cycle_length", self.cycle_length, self.clock_tick)?;
        if n == 0 {
            return Err(Error::invalid("cycle_length", "cycle must span at least one tick"));
        }
        Ok(n)
    }

    pub fn dead_ticks(&self) -> Result<u64> {
        whole_ticks("dead_time_per_cycle", self.dead_time_per_cycle, self.clock_tick)
    }

    /// Fraction of each cycle during which events are recorded.
    pub fn duty_cycle(&self) -> f64 {
        1.0 - self.dead_time_per_cycle / self.cycle_length
    }

    /// Live acquisition time contained in `[0, duration)`.
    pub fn live_time(&self, duration: f64) -> f64 {
        let full = (duration / self.cycle_length).floor();
        let rest = duration - full * self.cycle_length;
        let live_len = self.cycle_length - self.dead_time_per_cycle;
        full * live_len + rest.min(live_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub detector: u8,
    pub timestamp_ticks: u64,
    pub cycle_id: u32,
}

impl DetectionEvent {
    pub fn time(&self, clock_tick: f64) -> f64 {
        self.timestamp_ticks as f64 * clock_tick
    }
}

/// Floor of `time / tick`, corrected so that `n·tick ≤ time < (n+1)·tick`
/// holds in floating point. Idempotent on already-quantized times.
pub fn quantize(time: f64, tick: f64) -> u64 {
    let mut n = (time / tick).floor().max(0.0);
    if n * tick > time && n > 0.0 {
        n -= 1.0;
    } else if (n + 1.0) * tick <= time {
        n += 1.0;
    }
    n as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaqLedger {
    pub input: u64,
    pub detected: u64,
    pub efficiency_dropped: u64,
    pub dead_time_dropped: u64,
}

impl DaqLedger {
    pub fn add(&mut self, other: &DaqLedger) {
        self.input += other.input;
        self.detected += other.detected;
        self.efficiency_dropped += other.efficiency_dropped;
        self.dead_time_dropped += other.dead_time_dropped;
    }
}

/// Detection time (before quantization) for each neutron that survives the
/// efficiency draw, paired with its detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawHit {
    pub detector: u8,
    pub time: f64,
}

/// Apply efficiency and response delay; returns unquantized hits in input order.
pub fn raw_hits<R: Rng>(
    stream: &[TransmittedNeutron],
    cfg: &DaqConfig,
    rng: &mut R,
    ledger: &mut DaqLedger,
) -> Vec<RawHit> {
    let mut hits = Vec::with_capacity(stream.len());
    for n in stream {
        ledger.input += 1;
        if cfg.detection_efficiency < 1.0 && rng.gen::<f64>() >= cfg.detection_efficiency {
            ledger.efficiency_dropped += 1;
            continue;
        }
        let delay = rng.sample::<f64, _>(Exp1) * cfg.t_w;
        hits.push(RawHit {
            detector: n.path.index(),
            time: n.emission_time + delay,
        });
    }
    hits
}

/// Quantize hits and drop those inside a readout dead window; output is
/// sorted by timestamp (ties by detector).
pub fn clock_hits(hits: &[RawHit], cfg: &DaqConfig, ledger: &mut DaqLedger) -> Result<Vec<DetectionEvent>> {
    let cycle = cfg.cycle_ticks()?;
    let live = cycle - cfg.dead_ticks()?;
    let mut events = Vec::with_capacity(hits.len());
    for h in hits {
        let ticks = quantize(h.time, cfg.clock_tick);
        if ticks % cycle >= live {
            ledger.dead_time_dropped += 1;
            continue;
        }
        let cycle_id = u32::try_from(ticks / cycle)
            .map_err(|_| Error::invalid("duration", "more than 2^32 acquisition cycles"))?;
        events.push(DetectionEvent {
            detector: h.detector,
            timestamp_ticks: ticks,
            cycle_id,
        });
    }
    ledger.detected += events.len() as u64;
    events.sort_by_key(|e| (e.timestamp_ticks, e.detector));
    Ok(events)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detection {
    pub events: Vec<DetectionEvent>,
    pub ledger: DaqLedger,
}

pub fn detect<R: Rng>(stream: &[TransmittedNeutron], cfg: &DaqConfig, rng: &mut R) -> Result<Detection> {
    cfg.validate()?;
    crate::source::check_strictly_increasing(stream.iter().map(|n| n.emission_time))?;
    let mut ledger = DaqLedger::default();
    let hits = raw_hits(stream, cfg, rng, &mut ledger);
    let events = clock_hits(&hits, cfg, &mut ledger)?;
    Ok(Detection { events, ledger })
}

/// Stable partition by detector id.
pub fn split_by_detector(events: &[DetectionEvent]) -> (Vec<DetectionEvent>, Vec<DetectionEvent>) {
    events.iter().partition(|e| e.detector == 1)
}
