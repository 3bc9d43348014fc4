//! Event-level Monte Carlo and off-line analysis for a Bell-type polarization
//! experiment on thermal-neutron pairs in the spin singlet state.
//!
//! The simulation chain is `source` → `beamline` → `daq`; `analysis` turns
//! detector time stamps into coincidence histograms, ratio estimates, model
//! fits and inequality evaluations, checked against the closed forms in
//! `quantum`.

pub mod analysis;
pub mod angle;
pub mod beamline;
pub mod config;
pub mod daq;
pub mod error;
pub mod eventfile;
pub mod experiment;
pub mod output;
pub mod pipeline;
pub mod quadrature;
pub mod quantum;
pub mod seeding;
pub mod source;

pub use angle::Angle;
pub use error::{Error, Result};
