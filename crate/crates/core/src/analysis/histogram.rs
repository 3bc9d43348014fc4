//! Start/stop coincidence histograms of `δ = t₂ − t₁`.
//!
//! Every detector-1 (start) event is paired with every detector-2 (stop)
//! event that follows it by less than `max_delta`, not only the first stop.
//! Times are handled internally as integer picoseconds so bin edges are exact.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PS_PER_S: f64 = 1e12;

fn to_ps(name: &'static str, seconds: f64) -> Result<u64> {
    if !(seconds >= 0.0 && seconds.is_finite()) {
        return Err(Error::invalid(name, format!("{seconds} must be a non-negative time")));
    }
    Ok((seconds * PS_PER_S).round() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    /// Seconds.
    pub bin_width: f64,
    /// Seconds; only delays strictly below this are counted.
    pub max_delta: f64,
    pub counts: Vec<u64>,
    pub n_starts: u64,
    pub n_stops: u64,
    /// Live acquisition time the events were collected in, seconds.
    pub live_time: f64,
}

impl CoincidenceHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Lower edge of bin `i`, seconds.
    pub fn bin_low(&self, i: usize) -> f64 {
        i as f64 * self.bin_width
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn with_live_time(mut self, live_time: f64) -> Self {
        self.live_time = live_time;
        self
    }

    /// Sum two histograms with identical binning.
    pub fn merge(&mut self, other: &CoincidenceHistogram) -> Result<()> {
        if self.counts.len() != other.counts.len() || self.bin_width != other.bin_width {
            return Err(Error::Histogram("cannot merge histograms with different binning".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_starts += other.n_starts;
        self.n_stops += other.n_stops;
        self.live_time += other.live_time;
        Ok(())
    }
}

/// Incremental two-pointer coincidence counter.
///
/// Events must arrive in global time order across calls. Within one batch,
/// starts sharing a timestamp with a stop are processed first, so `δ = 0`
/// coincidences are counted.
#[derive(Debug, Clone)]
pub struct CoincidenceAccumulator {
    bin_ps: u64,
    max_ps: u64,
    bin_width: f64,
    max_delta: f64,
    counts: Vec<u64>,
    open_starts: VecDeque<u64>,
    n_starts: u64,
    n_stops: u64,
    last_start: u64,
    last_stop: u64,
}

impl CoincidenceAccumulator {
    pub fn new(bin_width: f64, max_delta: f64) -> Result<Self> {
        let bin_ps = to_ps("bin_width", bin_width)?;
        let max_ps = to_ps("max_delta", max_delta)?;
        if bin_ps == 0 {
            return Err(Error::invalid("bin_width", "must be at least 1 ps"));
        }
        if max_ps == 0 {
            return Err(Error::invalid("max_delta", "must be at least 1 ps"));
        }
        let n_bins = max_ps.div_ceil(bin_ps) as usize;
        Ok(Self {
            bin_ps,
            max_ps,
            bin_width,
            max_delta,
            counts: vec![0; n_bins],
            open_starts: VecDeque::new(),
            n_starts: 0,
            n_stops: 0,
            last_start: 0,
            last_stop: 0,
        })
    }

    fn prune(&mut self, now: u64) {
        while let Some(&t1) = self.open_starts.front() {
            if t1 + self.max_ps <= now {
                self.open_starts.pop_front();
            } else {
                break;
            }
        }
    }

    fn start(&mut self, t: u64) {
        self.prune(t);
        self.open_starts.push_back(t);
        self.n_starts += 1;
    }

    fn stop(&mut self, t: u64) {
        self.prune(t);
        self.n_stops += 1;
        for &t1 in &self.open_starts {
            let d = t - t1;
            self.counts[(d / self.bin_ps) as usize] += 1;
        }
    }

    /// Process one batch of sorted start and stop times (picoseconds).
    pub fn push_ps(&mut self, starts: &[u64], stops: &[u64]) -> Result<()> {
        let ordered = |prev: u64, xs: &[u64]| {
            let mut p = prev;
            for (i, &x) in xs.iter().enumerate() {
                if x < p {
                    return Err(Error::UnorderedStream { index: i });
                }
                p = x;
            }
            Ok(())
        };
        // A start may not share a timestamp with a stop from an earlier batch,
        // since that stop was processed without it.
        let start_floor = if self.n_stops == 0 {
            self.last_start
        } else {
            self.last_start.max(self.last_stop + 1)
        };
        ordered(start_floor, starts)?;
        ordered(self.last_stop.max(self.last_start), stops)?;
        let (mut i, mut j) = (0, 0);
        while i < starts.len() || j < stops.len() {
            if j == stops.len() || (i < starts.len() && starts[i] <= stops[j]) {
                self.start(starts[i]);
                i += 1;
            } else {
                self.stop(stops[j]);
                j += 1;
            }
        }
        if let Some(&t) = starts.last() {
            self.last_start = t;
        }
        if let Some(&t) = stops.last() {
            self.last_stop = t;
        }
        Ok(())
    }

    /// Process sorted tick timestamps with the given clock period.
    pub fn push_ticks(&mut self, starts: &[u64], stops: &[u64], clock_tick: f64) -> Result<()> {
        let tick_ps = tick_in_ps(clock_tick)?;
        let s: Vec<u64> = starts.iter().map(|&t| t * tick_ps).collect();
        let p: Vec<u64> = stops.iter().map(|&t| t * tick_ps).collect();
        self.push_ps(&s, &p)
    }

    pub fn finish(self, live_time: f64) -> CoincidenceHistogram {
        CoincidenceHistogram {
            bin_width: self.bin_width,
            max_delta: self.max_delta,
            counts: self.counts,
            n_starts: self.n_starts,
            n_stops: self.n_stops,
            live_time,
        }
    }
}

pub(crate) fn tick_in_ps(clock_tick: f64) -> Result<u64> {
    let ps = clock_tick * PS_PER_S;
    if !(ps >= 1.0) || (ps - ps.round()).abs() > 1e-6 {
        return Err(Error::invalid(
            "clock_tick",
            format!("{clock_tick} s is not a whole number of picoseconds"),
        ));
    }
    Ok(ps.round() as u64)
}

/// Histogram of start/stop delays from two time-ordered streams (seconds).
pub fn coincidence_histogram(
    d1: &[f64],
    d2: &[f64],
    bin_width: f64,
    max_delta: f64,
) -> Result<CoincidenceHistogram> {
    let mut acc = CoincidenceAccumulator::new(bin_width, max_delta)?;
    let conv = |xs: &[f64]| -> Result<Vec<u64>> { xs.iter().map(|&t| to_ps("event time", t)).collect() };
    acc.push_ps(&conv(d1)?, &conv(d2)?)?;
    Ok(acc.finish(0.0))
}

/// Histogram from clock-tick timestamps.
pub fn coincidence_histogram_ticks(
    d1: &[u64],
    d2: &[u64],
    clock_tick: f64,
    bin_width: f64,
    max_delta: f64,
) -> Result<CoincidenceHistogram> {
    let mut acc = CoincidenceAccumulator::new(bin_width, max_delta)?;
    acc.push_ticks(d1, d2, clock_tick)?;
    Ok(acc.finish(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_lands_in_second_bin() {
        let h = coincidence_histogram(&[100e-9], &[250e-9], 150e-9, 600e-9).unwrap();
        assert_eq!(h.counts, vec![0, 1, 0, 0]);
    }

    #[test]
    fn stop_before_all_starts_is_not_counted() {
        let h = coincidence_histogram(&[500e-9, 700e-9], &[100e-9], 50e-9, 1e-6).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.n_starts, 2);
        assert_eq!(h.n_stops, 1);
    }

    #[test]
    fn zero_delay_is_counted() {
        let h = coincidence_histogram(&[1e-6], &[1e-6], 25e-9, 100e-9).unwrap();
        assert_eq!(h.counts[0], 1);
    }

    #[test]
    fn bin_count_is_ceiling() {
        let h = coincidence_histogram(&[], &[], 150e-9, 1000e-9).unwrap();
        assert_eq!(h.n_bins(), 7);
        let h = coincidence_histogram(&[], &[], 25e-9, 6000e-9).unwrap();
        assert_eq!(h.n_bins(), 240);
    }

    #[test]
    fn delays_at_max_are_excluded() {
        // max 100 ns, bin 30 ns: 4 bins, δ = 100 ns excluded, 99 ns included
        let h = coincidence_histogram(&[0.0, 1e-6], &[100e-9, 1.099e-6], 30e-9, 100e-9).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0, 1]);
    }

    #[test]
    fn all_pairs_semantics() {
        let h = coincidence_histogram(&[0.0, 10e-9], &[20e-9, 30e-9], 10e-9, 100e-9).unwrap();
        // δ ∈ {20, 30, 10, 20}
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[2], 2);
        assert_eq!(h.counts[3], 1);
    }

    #[test]
    fn unordered_input_rejected() {
        assert!(coincidence_histogram(&[2e-6, 1e-6], &[], 1e-8, 1e-7).is_err());
        assert!(coincidence_histogram(&[], &[2e-6, 1e-6], 1e-8, 1e-7).is_err());
    }

    #[test]
    fn batches_continue_across_boundaries() {
        let mut acc = CoincidenceAccumulator::new(10e-9, 100e-9).unwrap();
        acc.push_ps(&[1_000_000], &[]).unwrap();
        acc.push_ps(&[], &[1_050_000]).unwrap();
        let h = acc.finish(1.0);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.live_time, 1.0);
    }

    #[test]
    fn batches_reaching_back_in_time_are_rejected() {
        let mut acc = CoincidenceAccumulator::new(10e-9, 100e-9).unwrap();
        acc.push_ps(&[], &[1_000_000]).unwrap();
        assert!(acc.push_ps(&[500_000], &[]).is_err());
    }

    #[test]
    fn ticks_and_seconds_agree() {
        let a = coincidence_histogram_ticks(&[4, 10], &[10, 16], 25e-9, 25e-9, 500e-9).unwrap();
        let b = coincidence_histogram(&[100e-9, 250e-9], &[250e-9, 400e-9], 25e-9, 500e-9).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    fn brute(d1: &[u64], d2: &[u64], bin: u64, max: u64) -> Vec<u64> {
        let mut c = vec![0; max.div_ceil(bin) as usize];
        for &a in d1 {
            for &b in d2 {
                if b >= a && b - a < max {
                    c[((b - a) / bin) as usize] += 1;
                }
            }
        }
        c
    }

    proptest::proptest! {
        #[test]
        fn matches_double_loop(
            mut d1 in proptest::collection::vec(0u64..2000, 0..60),
            mut d2 in proptest::collection::vec(0u64..2000, 0..60),
            bin in 1u64..40,
            max in 1u64..300,
            split in 0u64..2000,
        ) {
            d1.sort_unstable();
            d2.sort_unstable();
            let tick = 1e-9;
            let h = coincidence_histogram_ticks(&d1, &d2, tick, bin as f64 * tick, max as f64 * tick).unwrap();
            proptest::prop_assert_eq!(&h.counts, &brute(&d1, &d2, bin, max));

            // same result when streamed in two batches split at a time boundary
            let mut acc = CoincidenceAccumulator::new(bin as f64 * tick, max as f64 * tick).unwrap();
            let (a1, b1): (Vec<u64>, Vec<u64>) = (d1.iter().copied().filter(|&t| t < split).collect(),
                d1.iter().copied().filter(|&t| t >= split).collect());
            let (a2, b2): (Vec<u64>, Vec<u64>) = (d2.iter().copied().filter(|&t| t < split).collect(),
                d2.iter().copied().filter(|&t| t >= split).collect());
            acc.push_ticks(&a1, &a2, tick).unwrap();
            acc.push_ticks(&b1, &b2, tick).unwrap();
            proptest::prop_assert_eq!(acc.finish(0.0).counts, h.counts);
        }
    }
}
