//! Routing to the two analyzer paths, spin measurement along the local
//! analyzer axes, and stochastic transmission.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::angle::Angle;
use crate::error::{Error, Result};
use crate::quantum::{singlet_joint_outcome_probs, JointOutcomes, PolarizerPair, Transmittances};
use crate::source::{EmissionStream, EmittedNeutron, PairState};

const PLANCK_J_S: f64 = 6.626_070_15e-34;
const NEUTRON_MASS_KG: f64 = 1.674_927_498_04e-27;
/// Working wavelength of the backscattering monochromator, metres.
pub const WORKING_WAVELENGTH_M: f64 = 6.67e-10;

/// de Broglie speed `h/(m_n λ)` of a neutron with wavelength `lambda` (metres).
pub fn neutron_speed(lambda: f64) -> f64 {
    PLANCK_J_S / (NEUTRON_MASS_KG * lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    /// Probability that a neutron takes path 1.
    pub path_split_prob: f64,
    /// Thermal speed (m/s); only converts delays into longitudinal separations.
    pub v_ther: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        Self {
            path_split_prob: 0.5,
            v_ther: neutron_speed(WORKING_WAVELENGTH_M),
        }
    }
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.path_split_prob) {
            return Err(Error::invalid(
                "path_split_prob",
                format!("{} is not in [0, 1]", self.path_split_prob),
            ));
        }
        if !(self.v_ther > 0.0 && self.v_ther.is_finite()) {
            return Err(Error::invalid("v_ther", format!("{} must be > 0", self.v_ther)));
        }
        Ok(())
    }

    /// Virtual longitudinal separation `v_ther·δ` in metres.
    pub fn separation(&self, delay: f64) -> f64 {
        self.v_ther * delay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Path {
    One,
    Two,
}

impl Path {
    pub fn index(self) -> u8 {
        match self {
            Path::One => 1,
            Path::Two => 2,
        }
    }
}

/// Spin outcome relative to the local analyzer axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutedNeutron {
    pub neutron: EmittedNeutron,
    pub path: Path,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmittedNeutron {
    pub emission_time: f64,
    pub path: Path,
    pub spin: Spin,
    pub pair_id: Option<u64>,
    pub pair_state: PairState,
}

pub fn route_neutrons<R: Rng>(
    stream: &EmissionStream,
    geometry: &BeamGeometry,
    rng: &mut R,
) -> Result<Vec<RoutedNeutron>> {
    geometry.validate()?;
    let p = geometry.path_split_prob;
    Ok(stream
        .neutrons
        .iter()
        .map(|&neutron| RoutedNeutron {
            neutron,
            path: if rng.gen::<f64>() < p { Path::One } else { Path::Two },
        })
        .collect())
}

fn sample_joint<R: Rng>(p: &JointOutcomes, rng: &mut R) -> (Spin, Spin) {
    let u: f64 = rng.gen();
    if u < p.p_dd {
        (Spin::Down, Spin::Down)
    } else if u < p.p_dd + p.p_du {
        (Spin::Down, Spin::Up)
    } else if u < p.p_dd + p.p_du + p.p_ud {
        (Spin::Up, Spin::Down)
    } else {
        (Spin::Up, Spin::Up)
    }
}

fn coin<R: Rng>(rng: &mut R) -> Spin {
    if rng.gen::<bool>() {
        Spin::Down
    } else {
        Spin::Up
    }
}

fn is_cross_path_singlet(a: &RoutedNeutron, b: &RoutedNeutron) -> bool {
    a.neutron.pair_state == PairState::Singlet
        && a.neutron.pair_id.is_some()
        && a.neutron.pair_id == b.neutron.pair_id
        && a.path != b.path
}

/// Spin outcomes for every routed neutron.
///
/// Singlet pairs split across the two paths get a joint outcome from the
/// singlet distribution at relative angle θ (first value along path 1);
/// everything else is an unpolarized fair coin. Pair members are adjacent in
/// a time-ordered stream, which is all this relies on.
pub fn measure_spins<R: Rng>(routed: &[RoutedNeutron], theta: Angle, rng: &mut R) -> Vec<Spin> {
    let joint = singlet_joint_outcome_probs(theta);
    let mut spins = Vec::with_capacity(routed.len());
    let mut i = 0;
    while i < routed.len() {
        if i + 1 < routed.len() && is_cross_path_singlet(&routed[i], &routed[i + 1]) {
            let (s1, s2) = sample_joint(&joint, rng);
            if routed[i].path == Path::One {
                spins.extend([s1, s2]);
            } else {
                spins.extend([s2, s1]);
            }
            i += 2;
        } else {
            spins.push(coin(rng));
            i += 1;
        }
    }
    spins
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transmission {
    pub survivors: Vec<TransmittedNeutron>,
    pub absorbed: u64,
}

/// Measure spins, then let each neutron survive its analyzer with the
/// transmittance for its outcome.
pub fn measure_and_transmit<R: Rng>(
    routed: &[RoutedNeutron],
    pol: &PolarizerPair,
    rng: &mut R,
) -> Transmission {
    let spins = measure_spins(routed, pol.theta, rng);
    transmit(routed, &spins, &pol.transmittances, rng)
}

pub fn transmit<R: Rng>(
    routed: &[RoutedNeutron],
    spins: &[Spin],
    eps: &Transmittances,
    rng: &mut R,
) -> Transmission {
    let mut out = Transmission {
        survivors: Vec::with_capacity(routed.len() / 2),
        absorbed: 0,
    };
    for (r, &spin) in routed.iter().zip(spins) {
        let t = eps.of(r.path.index(), spin == Spin::Down);
        if rng.gen::<f64>() < t {
            out.survivors.push(TransmittedNeutron {
                emission_time: r.neutron.emission_time,
                path: r.path,
                spin,
                pair_id: r.neutron.pair_id,
                pair_state: r.neutron.pair_state,
            });
        } else {
            out.absorbed += 1;
        }
    }
    out
}
