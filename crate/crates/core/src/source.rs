//! Poissonian neutron emission, coherent-pair tagging, and antibunching.
//!
//! The beam is a one-dimensional timeline. Consecutive arrivals closer than a
//! few coherence times may form an entangled pair; a pair is a spin singlet
//! with probability `singlet_fraction` (1/4 for an unpolarized beam) and a
//! triplet otherwise. Triplet pairs share a spatial mode, scatter out of the
//! collimated beam, and never reach the analyzers.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, StreamRng};

/// Reduced Planck constant in eV·s.
pub const HBAR_EV_S: f64 = 6.582_119_569e-16;

/// Coherence time `ħ/ΔE` of a beam with energy spread `delta_e` (eV).
pub fn tau_c_from_energy_spread(delta_e_ev: f64) -> Result<f64> {
    if !(delta_e_ev > 0.0 && delta_e_ev.is_finite()) {
        return Err(Error::invalid("delta_e", format!("{delta_e_ev} must be positive")));
    }
    Ok(HBAR_EV_S / delta_e_ev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Neutrons per second.
    pub rate: f64,
    /// Simulated beam time, seconds.
    pub duration: f64,
    /// Coherence time, seconds.
    pub tau_c: f64,
    pub singlet_fraction: f64,
    pub seed: u64,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid("rate", format!("{} must be >= 0", self.rate)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration", format!("{} must be > 0", self.duration)));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(Error::invalid("tau_c", format!("{} must be > 0", self.tau_c)));
        }
        if !(0.0..=1.0).contains(&self.singlet_fraction) {
            return Err(Error::invalid(
                "singlet_fraction",
                format!("{} is not in [0, 1]", self.singlet_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairState {
    Unpaired,
    Singlet,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmittedNeutron {
    pub emission_time: f64,
    pub pair_id: Option<u64>,
    pub pair_state: PairState,
}

impl EmittedNeutron {
    pub fn unpaired(emission_time: f64) -> Self {
        Self {
            emission_time,
            pair_id: None,
            pair_state: PairState::Unpaired,
        }
    }
}

/// Time-ordered emission records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmissionStream {
    pub neutrons: Vec<EmittedNeutron>,
}

impl EmissionStream {
    pub fn from_times(times: &[f64]) -> Self {
        Self {
            neutrons: times.iter().map(|&t| EmittedNeutron::unpaired(t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.neutrons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neutrons.is_empty()
    }

    pub fn check_ordered(&self) -> Result<()> {
        check_strictly_increasing(self.neutrons.iter().map(|n| n.emission_time))
    }
}

pub(crate) fn check_strictly_increasing(times: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (index, t) in times.enumerate() {
        if !(t > prev) {
            return Err(Error::UnorderedStream { index });
        }
        prev = t;
    }
    Ok(())
}

/// Arrival times of a homogeneous Poisson process on `[start, end)`.
pub struct PoissonArrivals<R: Rng> {
    rng: R,
    rate: f64,
    t: f64,
    end: f64,
}

impl<R: Rng> PoissonArrivals<R> {
    pub fn new(rng: R, rate: f64, start: f64, end: f64) -> Self {
        Self {
            rng,
            rate,
            t: start,
            end,
        }
    }
}

impl<R: Rng> Iterator for PoissonArrivals<R> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.rate <= 0.0 || self.t >= self.end {
            return None;
        }
        let gap: f64 = self.rng.sample::<f64, _>(Exp1) / self.rate;
        let mut next = self.t + gap;
        if next <= self.t {
            // gap below one ulp of the current time
            next = self.t.next_up();
        }
        self.t = next;
        (next < self.end).then_some(next)
    }
}

/// RNG for the arrival process of a [`SourceConfig`].
pub fn source_rng(cfg: &SourceConfig) -> StreamRng {
    use rand::SeedableRng;
    StreamRng::seed_from_u64(cfg.seed)
}

pub fn generate_emission_stream(cfg: &SourceConfig) -> Result<EmissionStream> {
    cfg.validate()?;
    let arrivals = PoissonArrivals::new(source_rng(cfg), cfg.rate, 0.0, cfg.duration);
    Ok(EmissionStream {
        neutrons: arrivals.map(EmittedNeutron::unpaired).collect(),
    })
}

// exp(-x) underflows to zero for x above ~745
const ENVELOPE_UNDERFLOW: f64 = 745.0;

/// Greedy left-to-right pairing of consecutive arrivals, usable incrementally.
///
/// A pending unpaired neutron and its successor at gap `g` become a pair with
/// probability `exp(−g²/(2τ_c²))`. No random number is consumed when that
/// probability underflows to zero.
#[derive(Debug)]
pub struct PairTagger<R: Rng> {
    rng: R,
    inv_two_tau_sq: f64,
    singlet_fraction: f64,
    pending: Option<EmittedNeutron>,
    next_pair_id: u64,
    last_time: f64,
    seen: usize,
}

impl<R: Rng> PairTagger<R> {
    pub fn new(rng: R, tau_c: f64, singlet_fraction: f64) -> Result<Self> {
        if !(tau_c > 0.0) {
            return Err(Error::invalid("tau_c", format!("{tau_c} must be > 0")));
        }
        if !(0.0..=1.0).contains(&singlet_fraction) {
            return Err(Error::invalid(
                "singlet_fraction",
                format!("{singlet_fraction} is not in [0, 1]"),
            ));
        }
        Ok(Self {
            rng,
            inv_two_tau_sq: 0.5 / (tau_c * tau_c),
            singlet_fraction,
            pending: None,
            next_pair_id: 0,
            last_time: f64::NEG_INFINITY,
            seen: 0,
        })
    }

    /// Feed the next arrival; completed neutrons are appended to `out`.
    pub fn push(&mut self, time: f64, out: &mut Vec<EmittedNeutron>) -> Result<()> {
        if !(time > self.last_time) {
            return Err(Error::UnorderedStream { index: self.seen });
        }
        self.last_time = time;
        self.seen += 1;
        let Some(prev) = self.pending.take() else {
            self.pending = Some(EmittedNeutron::unpaired(time));
            return Ok(());
        };
        let gap = time - prev.emission_time;
        let x = gap * gap * self.inv_two_tau_sq;
        if x < ENVELOPE_UNDERFLOW && self.rng.gen::<f64>() < (-x).exp() {
            let state = if self.rng.gen::<f64>() < self.singlet_fraction {
                PairState::Singlet
            } else {
                PairState::Triplet
            };
            let id = Some(self.next_pair_id);
            self.next_pair_id += 1;
            out.push(EmittedNeutron {
                emission_time: prev.emission_time,
                pair_id: id,
                pair_state: state,
            });
            out.push(EmittedNeutron {
                emission_time: time,
                pair_id: id,
                pair_state: state,
            });
        } else {
            out.push(prev);
            self.pending = Some(EmittedNeutron::unpaired(time));
        }
        Ok(())
    }

    /// Emit the trailing unpaired neutron, if any.
    pub fn finish(&mut self, out: &mut Vec<EmittedNeutron>) {
        if let Some(p) = self.pending.take() {
            out.push(p);
        }
    }

    pub fn pairs_formed(&self) -> u64 {
        self.next_pair_id
    }

    /// Emission time of the neutron held back while waiting for a partner.
    pub fn pending_time(&self) -> Option<f64> {
        self.pending.map(|p| p.emission_time)
    }
}

/// Tag entangled pairs in an untagged, time-ordered stream.
pub fn tag_pairs<R: Rng>(
    stream: &EmissionStream,
    tau_c: f64,
    singlet_fraction: f64,
    rng: R,
) -> Result<EmissionStream> {
    let mut tagger = PairTagger::new(rng, tau_c, singlet_fraction)?;
    let mut out = Vec::with_capacity(stream.len());
    for n in &stream.neutrons {
        tagger.push(n.emission_time, &mut out)?;
    }
    tagger.finish(&mut out);
    Ok(EmissionStream { neutrons: out })
}

/// Drop both members of every triplet pair.
pub fn antibunching_filter(stream: EmissionStream) -> EmissionStream {
    let mut neutrons = stream.neutrons;
    neutrons.retain(|n| n.pair_state != PairState::Triplet);
    EmissionStream { neutrons }
}

/// Tag of the arrival stream for one angle and repetition.
pub fn source_seed(master_seed: u64, theta_deg: f64, rep: u32) -> u64 {
    seeding::derive_seed_u64(master_seed, &seeding::stage_tag("source", theta_deg, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn cfg(rate: f64, duration: f64, seed: u64) -> SourceConfig {
        SourceConfig {
            rate,
            duration,
            tau_c: 78e-9,
            singlet_fraction: 0.25,
            seed,
        }
    }

    #[test]
    fn poisson_count_matches_mean() {
        // 20000 ± 5·√20000
        for seed in 0..20 {
            let s = generate_emission_stream(&cfg(2000.0, 10.0, seed)).unwrap();
            let n = s.len() as f64;
            assert!((n - 20_000.0).abs() < 5.0 * 20_000f64.sqrt(), "seed {seed}: {n}");
            s.check_ordered().unwrap();
            assert!(s.neutrons.iter().all(|x| x.emission_time < 10.0));
        }
    }

    #[test]
    fn zero_rate_is_empty_and_seed_is_deterministic() {
        assert!(generate_emission_stream(&cfg(0.0, 10.0, 1)).unwrap().is_empty());
        let a = generate_emission_stream(&cfg(2000.0, 1.0, 5)).unwrap();
        let b = generate_emission_stream(&cfg(2000.0, 1.0, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate_emission_stream(&cfg(2000.0, 1.0, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_emission_stream(&cfg(-1.0, 1.0, 0)).is_err());
        assert!(generate_emission_stream(&cfg(1.0, 0.0, 0)).is_err());
        let mut c = cfg(1.0, 1.0, 0);
        c.singlet_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn coincident_arrivals_always_pair_with_quarter_singlets() {
        let n_trials = 40_000;
        let mut r = rng(11);
        let mut singlets = 0u32;
        for i in 0..n_trials {
            let t = i as f64;
            let s = EmissionStream::from_times(&[t, t.next_up()]);
            let tagged = tag_pairs(&s, 78e-9, 0.25, &mut r).unwrap();
            assert!(tagged.neutrons.iter().all(|n| n.pair_id.is_some()));
            if tagged.neutrons[0].pair_state == PairState::Singlet {
                singlets += 1;
            }
        }
        let p = singlets as f64 / n_trials as f64;
        let sigma = (0.25 * 0.75 / n_trials as f64).sqrt();
        assert!((p - 0.25).abs() < 3.0 * sigma, "{p}");
    }

    #[test]
    fn distant_arrivals_never_pair() {
        let tau = 78e-9;
        let mut r = rng(3);
        for i in 0..1000 {
            let t = i as f64;
            let s = EmissionStream::from_times(&[t, t + 20.0 * tau]);
            let tagged = tag_pairs(&s, tau, 0.25, &mut r).unwrap();
            assert!(tagged.neutrons.iter().all(|n| n.pair_state == PairState::Unpaired));
        }
    }

    #[test]
    fn half_pairing_at_inverted_envelope_gap() {
        let tau = 78e-9;
        let gap = tau * (2.0 * std::f64::consts::LN_2).sqrt();
        let n = 40_000;
        let mut r = rng(17);
        let mut paired = 0u32;
        for i in 0..n {
            let t = i as f64;
            let s = EmissionStream::from_times(&[t, t + gap]);
            if tag_pairs(&s, tau, 0.25, &mut r).unwrap().neutrons[0].pair_id.is_some() {
                paired += 1;
            }
        }
        let p = paired as f64 / n as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn unordered_input_rejected() {
        let s = EmissionStream::from_times(&[1.0, 0.5]);
        assert!(matches!(
            tag_pairs(&s, 1e-7, 0.25, rng(0)),
            Err(Error::UnorderedStream { index: 1 })
        ));
    }

    #[test]
    fn pair_members_share_id_and_state() {
        let s = generate_emission_stream(&cfg(2e6, 0.05, 9)).unwrap();
        let tagged = tag_pairs(&s, 78e-9, 0.25, rng(10)).unwrap();
        assert_eq!(tagged.len(), s.len());
        tagged.check_ordered().unwrap();
        let mut by_id = std::collections::HashMap::new();
        for n in &tagged.neutrons {
            if let Some(id) = n.pair_id {
                by_id.entry(id).or_insert_with(Vec::new).push(n.pair_state);
            } else {
                assert_eq!(n.pair_state, PairState::Unpaired);
            }
        }
        assert!(by_id.len() > 1000);
        for states in by_id.values() {
            assert_eq!(states.len(), 2);
            assert_eq!(states[0], states[1]);
            assert_ne!(states[0], PairState::Unpaired);
        }
    }

    #[test]
    fn filter_semantics() {
        let pair = |state| {
            EmissionStream {
                neutrons: vec![
                    EmittedNeutron { emission_time: 0.0, pair_id: Some(0), pair_state: state },
                    EmittedNeutron { emission_time: 1e-9, pair_id: Some(0), pair_state: state },
                ],
            }
        };
        assert!(antibunching_filter(pair(PairState::Triplet)).is_empty());
        assert_eq!(antibunching_filter(pair(PairState::Singlet)).len(), 2);
        let plain = EmissionStream::from_times(&[0.0, 1.0, 2.0]);
        assert_eq!(antibunching_filter(plain.clone()), plain);
    }

    #[test]
    fn singlet_fraction_converges_over_many_pairs() {
        let s = generate_emission_stream(&cfg(5e6, 0.02, 21)).unwrap();
        let tagged = tag_pairs(&s, 78e-9, 0.25, rng(22)).unwrap();
        let (mut singlet, mut pairs) = (0u64, 0u64);
        for w in tagged.neutrons.windows(2) {
            if w[0].pair_id.is_some() && w[0].pair_id == w[1].pair_id {
                pairs += 1;
                if w[0].pair_state == PairState::Singlet {
                    singlet += 1;
                }
            }
        }
        assert!(pairs >= 10_000, "{pairs}");
        let p = singlet as f64 / pairs as f64;
        assert!((p - 0.25).abs() < 3.0 * (0.1875 / pairs as f64).sqrt());
        let filtered = antibunching_filter(tagged);
        assert!(filtered.neutrons.iter().all(|n| n.pair_state != PairState::Triplet));
        filtered.check_ordered().unwrap();
    }

    #[test]
    fn incremental_tagging_matches_batch() {
        let s = generate_emission_stream(&cfg(1e6, 0.01, 4)).unwrap();
        let batch = tag_pairs(&s, 78e-9, 0.25, rng(8)).unwrap();
        let mut tagger = PairTagger::new(rng(8), 78e-9, 0.25).unwrap();
        let mut out = Vec::new();
        for chunk in s.neutrons.chunks(997) {
            for n in chunk {
                tagger.push(n.emission_time, &mut out).unwrap();
            }
        }
        tagger.finish(&mut out);
        assert_eq!(out, batch.neutrons);
    }

    #[test]
    fn coherence_time_from_energy_spread() {
        let tau = tau_c_from_energy_spread(0.02e-6).unwrap();
        assert!(tau > 20e-9 && (tau - 32.91e-9).abs() < 0.01e-9);
        assert!(tau_c_from_energy_spread(0.0).is_err());
    }
}
