//! End-to-end event simulation: source, pairing, antibunching, routing,
//! analyzers, detection and clocking, run one acquisition cycle at a time so
//! memory stays bounded for arbitrarily long virtual runs.
//!
//! Each stage draws from its own random stream, derived from the master seed
//! and a tag naming the stage, the analyzer angle and the repetition.

use serde::{Deserialize, Serialize};

use crate::analysis::{CoincidenceAccumulator, CoincidenceHistogram};
use crate::angle::Angle;
use crate::beamline::{measure_spins, route_neutrons, transmit, Path};
use crate::config::ExperimentConfig;
use crate::daq::{clock_hits, quantize, raw_hits, DaqLedger, DetectionEvent};
use crate::error::{Error, Result};
use crate::eventfile::{EventFileHeader, EventWriter};
use crate::quantum::PolarizerPair;
use crate::seeding::{stage_tag, stream_rng};
use crate::source::{source_rng, EmissionStream, PairState, PairTagger, PoissonArrivals};

/// Neutron bookkeeping for one run. Every emitted neutron ends in exactly
/// one terminal bucket, see [`RunLedger::check`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLedger {
    pub emitted: u64,
    pub pairs: u64,
    pub singlet_pairs: u64,
    pub triplet_pairs: u64,
    /// Triplet members removed by antibunching.
    pub filtered_out: u64,
    pub routed_path1: u64,
    pub routed_path2: u64,
    /// Neutrons that passed their analyzer.
    pub transmitted: u64,
    /// Neutrons absorbed in an analyzer.
    pub transmitted_lost: u64,
    pub efficiency_dropped: u64,
    pub dead_time_dropped: u64,
    /// Transmitted neutrons whose detection would fall after the run ends.
    pub after_end: u64,
    pub detected: u64,
    pub detected_d1: u64,
    pub detected_d2: u64,
}

impl RunLedger {
    /// `emitted = filtered_out + transmitted_lost + detected +
    /// dead_time_dropped + efficiency_dropped + after_end`, exactly.
    pub fn check(&self) -> Result<()> {
        let terminal = self.filtered_out
            + self.transmitted_lost
            + self.detected
            + self.dead_time_dropped
            + self.efficiency_dropped
            + self.after_end;
        if terminal != self.emitted {
            return Err(Error::Stage {
                stage: "ledger",
                reason: format!("{} emitted but {terminal} accounted for", self.emitted),
            });
        }
        if self.transmitted != self.detected + self.dead_time_dropped + self.efficiency_dropped + self.after_end {
            return Err(Error::Stage {
                stage: "ledger",
                reason: "transmitted neutrons do not match detector outcomes".into(),
            });
        }
        if self.detected != self.detected_d1 + self.detected_d2 {
            return Err(Error::Stage {
                stage: "ledger",
                reason: "per-detector counts do not add up".into(),
            });
        }
        Ok(())
    }
}

/// Receives detection events in global time order (ties: detector 1 first).
pub trait EventSink {
    fn accept(&mut self, events: &[DetectionEvent]) -> Result<()>;
}

impl EventSink for Vec<DetectionEvent> {
    fn accept(&mut self, events: &[DetectionEvent]) -> Result<()> {
        self.extend_from_slice(events);
        Ok(())
    }
}

/// Builds the coincidence histogram on the fly.
pub struct HistogramSink {
    acc: CoincidenceAccumulator,
    clock_tick: f64,
    starts: Vec<u64>,
    stops: Vec<u64>,
}

impl HistogramSink {
    pub fn new(bin_width: f64, max_delta: f64, clock_tick: f64) -> Result<Self> {
        Ok(Self {
            acc: CoincidenceAccumulator::new(bin_width, max_delta)?,
            clock_tick,
            starts: Vec::new(),
            stops: Vec::new(),
        })
    }

    pub fn finish(self, live_time: f64) -> CoincidenceHistogram {
        self.acc.finish(live_time)
    }
}

impl EventSink for HistogramSink {
    fn accept(&mut self, events: &[DetectionEvent]) -> Result<()> {
        self.starts.clear();
        self.stops.clear();
        for e in events {
            match e.detector {
                1 => self.starts.push(e.timestamp_ticks),
                2 => self.stops.push(e.timestamp_ticks),
                d => return Err(Error::Data(format!("unknown detector id {d}"))),
            }
        }
        self.acc.push_ticks(&self.starts, &self.stops, self.clock_tick)
    }
}

/// Writes detector 1 and detector 2 events to separate event files.
pub struct FileSink<W: std::io::Write> {
    pub d1: EventWriter<W>,
    pub d2: EventWriter<W>,
}

impl<W: std::io::Write> EventSink for FileSink<W> {
    fn accept(&mut self, events: &[DetectionEvent]) -> Result<()> {
        for e in events {
            match e.detector {
                1 => self.d1.write(e)?,
                _ => self.d2.write(e)?,
            }
        }
        Ok(())
    }
}

/// Forwards to two sinks.
pub struct Tee<'a, A: EventSink, B: EventSink>(pub &'a mut A, pub &'a mut B);

impl<A: EventSink, B: EventSink> EventSink for Tee<'_, A, B> {
    fn accept(&mut self, events: &[DetectionEvent]) -> Result<()> {
        self.0.accept(events)?;
        self.1.accept(events)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Stage angle as requested (also used in stream tags).
    pub theta_deg: f64,
    /// Relative analyzer angle actually applied, in `[0°, 180°]`.
    pub theta_applied_deg: f64,
    pub folded: bool,
    pub rep: u32,
    pub duration: f64,
    pub live_time: f64,
    pub ledger: RunLedger,
}

/// Event-file header for a run of `cfg`, embedding the resolved config.
pub fn event_file_header(cfg: &ExperimentConfig, theta_deg: f64, rep: u32) -> Result<EventFileHeader> {
    let meta = serde_json::json!({
        "config": cfg.resolved()?,
        "master_seed": cfg.master_seed,
        "theta_deg": theta_deg,
        "rep": rep,
    });
    EventFileHeader::new(
        cfg.daq_config().clock_tick,
        cfg.daq_config().cycle_ticks()?,
        serde_json::to_string(&meta).expect("metadata serializes"),
    )
}

fn stage_error(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            reason: other.to_string(),
        },
    }
}

/// Simulate one angle / repetition and stream its events into `sink`.
pub fn simulate_run(
    cfg: &ExperimentConfig,
    theta_deg: f64,
    rep: u32,
    sink: &mut dyn EventSink,
) -> Result<RunSummary> {
    cfg.validate()?;
    let (theta, folded) = Angle::fold_stage_degrees(theta_deg)?;
    simulate_with_angle(cfg, theta_deg, theta, folded, rep, sink)
}

fn simulate_with_angle(
    cfg: &ExperimentConfig,
    theta_deg: f64,
    theta: Angle,
    folded: bool,
    rep: u32,
    sink: &mut dyn EventSink,
) -> Result<RunSummary> {
    let src = cfg.source_config(theta_deg, rep)?;
    let geom = cfg.beam_geometry();
    let daq = cfg.daq_config();
    let pol = PolarizerPair::new(cfg.transmittances()?, theta);
    let tag = |stage: &str| stage_tag(stage, theta_deg, rep);
    let master = cfg.master_seed;

    let mut arrivals = PoissonArrivals::new(source_rng(&src), src.rate, 0.0, src.duration).peekable();
    let mut tagger = PairTagger::new(stream_rng(master, &tag("pairing")), src.tau_c, src.singlet_fraction)
        .map_err(stage_error("source"))?;
    let mut route_rng = stream_rng(master, &tag("routing"));
    // spins and analyzer survival on separate streams so batch size never
    // changes which draw a neutron gets
    let mut spin_rng = stream_rng(master, &tag("spin"));
    let mut analyzer_rng = stream_rng(master, &tag("analyzer"));
    let mut daq_rng = stream_rng(master, &tag("daq"));

    let tick = daq.clock_tick;
    let mut ledger = RunLedger::default();
    let mut daq_ledger = DaqLedger::default();
    let mut carry: Vec<DetectionEvent> = Vec::new();
    let mut batch = Vec::new();

    let mut chunk_index = 0u64;
    let mut finished = false;
    while !finished {
        chunk_index += 1;
        let chunk_end = (chunk_index as f64 * daq.cycle_length).min(src.duration);
        batch.clear();
        while let Some(&t) = arrivals.peek() {
            if t >= chunk_end {
                break;
            }
            arrivals.next();
            ledger.emitted += 1;
            tagger.push(t, &mut batch).map_err(stage_error("source"))?;
        }
        finished = chunk_end >= src.duration || arrivals.peek().is_none();
        if finished {
            tagger.finish(&mut batch);
        }

        // both members of a pair always land in the same batch
        let singlets = batch.iter().filter(|n| n.pair_state == PairState::Singlet).count() as u64;
        let before = batch.len();
        // antibunching: triplet members never reach the analyzers
        batch.retain(|n| n.pair_state != PairState::Triplet);
        let removed = (before - batch.len()) as u64;
        ledger.singlet_pairs += singlets / 2;
        ledger.triplet_pairs += removed / 2;
        ledger.filtered_out += removed;

        let stream = EmissionStream { neutrons: std::mem::take(&mut batch) };
        let routed = route_neutrons(&stream, &geom, &mut route_rng).map_err(stage_error("beamline"))?;
        batch = stream.neutrons;
        for r in &routed {
            match r.path {
                Path::One => ledger.routed_path1 += 1,
                Path::Two => ledger.routed_path2 += 1,
            }
        }
        let spins = measure_spins(&routed, pol.theta, &mut spin_rng);
        let tx = transmit(&routed, &spins, &pol.transmittances, &mut analyzer_rng);
        ledger.transmitted += tx.survivors.len() as u64;
        ledger.transmitted_lost += tx.absorbed;

        let mut hits = raw_hits(&tx.survivors, &daq, &mut daq_rng, &mut daq_ledger);
        let n_hits = hits.len();
        hits.retain(|h| h.time < src.duration);
        ledger.after_end += (n_hits - hits.len()) as u64;
        let mut events = clock_hits(&hits, &daq, &mut daq_ledger).map_err(stage_error("daq"))?;

        // nothing emitted later can be detected before this tick
        let horizon = if finished {
            u64::MAX
        } else {
            let t = tagger.pending_time().map_or(chunk_end, |p| p.min(chunk_end));
            quantize(t, tick)
        };
        carry.append(&mut events);
        carry.sort_by_key(|e| (e.timestamp_ticks, e.detector));
        let split = carry.partition_point(|e| e.timestamp_ticks < horizon);
        let ready: Vec<DetectionEvent> = carry.drain(..split).collect();
        for e in &ready {
            if e.detector == 1 {
                ledger.detected_d1 += 1;
            } else {
                ledger.detected_d2 += 1;
            }
        }
        sink.accept(&ready).map_err(stage_error("sink"))?;
    }
    debug_assert!(carry.is_empty());
    ledger.pairs = tagger.pairs_formed();
    ledger.efficiency_dropped = daq_ledger.efficiency_dropped;
    ledger.dead_time_dropped = daq_ledger.dead_time_dropped;
    ledger.detected = daq_ledger.detected;
    ledger.check()?;
    Ok(RunSummary {
        theta_deg,
        theta_applied_deg: theta.degrees(),
        folded,
        rep,
        duration: src.duration,
        live_time: daq.live_time(src.duration),
        ledger,
    })
}
