//! Ratio estimator `n_window / (plateau mean × bins in window)` and its
//! conversion into a per-pair coincidence probability.

use serde::{Deserialize, Serialize};

use super::histogram::CoincidenceHistogram;
use super::kernel::DipKernel;
use crate::error::{Error, Result};

/// Delay range `[min, max]` (seconds) whose full bins estimate the
/// uncorrelated level `C(θ, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauRange {
    pub min: f64,
    pub max: f64,
}

impl PlateauRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min >= 0.0 && max > min && max.is_finite()) {
            return Err(Error::invalid("plateau", format!("[{min}, {max}] is not a valid delay range")));
        }
        Ok(Self { min, max })
    }

    /// Default plateau: from ten correlation-plus-response times out to the
    /// end of the histogram.
    pub fn default_for(t_w: f64, tau_c: f64, max_delta: f64) -> Result<Self> {
        Self::new(10.0 * (t_w + tau_c), max_delta)
    }
}

/// Indices of the histogram bins lying entirely inside the plateau.
pub fn plateau_bins(hist: &CoincidenceHistogram, plateau: &PlateauRange) -> Vec<usize> {
    let b = hist.bin_width;
    let slack = 1e-9 * b;
    (0..hist.n_bins())
        .filter(|&i| {
            let lo = hist.bin_low(i);
            let hi = lo + b;
            lo >= plateau.min - slack && hi <= plateau.max + slack && hi <= hist.max_delta + slack
        })
        .collect()
}

/// Mean and bin count of the plateau.
pub fn plateau_mean(hist: &CoincidenceHistogram, plateau: &PlateauRange) -> Result<(f64, usize)> {
    let bins = plateau_bins(hist, plateau);
    if bins.is_empty() {
        return Err(Error::Histogram(format!(
            "plateau [{}, {}] s contains no full histogram bin",
            plateau.min, plateau.max
        )));
    }
    let sum: u64 = bins.iter().map(|&i| hist.counts[i]).sum();
    Ok((sum as f64 / bins.len() as f64, bins.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P12Estimate {
    /// `R = n_window / (μ · Δ/bin)`: the coincidence ratio in the window
    /// relative to the uncorrelated level.
    pub value: f64,
    pub sigma: f64,
    pub n_window: u64,
    pub plateau_mean: f64,
    pub plateau_bins: usize,
    pub window_bins: usize,
}

const MIN_PLATEAU_BINS: usize = 5;

/// Estimate the coincidence ratio in the delay window `[0, Δ)`.
///
/// `σ² = max(n_w, 1)/D² + R²/(K·μ)` with `D = μ·Δ/bin` and `K` the number of
/// plateau bins: Poisson error on the window count plus the error of the
/// plateau mean.
pub fn estimate_p12(
    hist: &CoincidenceHistogram,
    delta_window: f64,
    plateau: &PlateauRange,
) -> Result<P12Estimate> {
    let ratio = delta_window / hist.bin_width;
    let window_bins = ratio.round() as usize;
    if window_bins == 0 || (ratio - ratio.round()).abs() > 1e-6 {
        return Err(Error::Histogram(format!(
            "window {delta_window} s is not a whole number of {} s bins",
            hist.bin_width
        )));
    }
    if window_bins > hist.n_bins() {
        return Err(Error::Histogram("window extends past the histogram".into()));
    }
    if plateau.min < delta_window * (1.0 - 1e-9) {
        return Err(Error::Histogram(format!(
            "plateau starting at {} s overlaps the window [0, {delta_window}) s",
            plateau.min
        )));
    }
    let (mu, k) = plateau_mean(hist, plateau)?;
    if k < MIN_PLATEAU_BINS {
        return Err(Error::Histogram(format!(
            "plateau holds {k} full bins, at least {MIN_PLATEAU_BINS} are needed"
        )));
    }
    if mu == 0.0 {
        return Err(Error::Histogram("plateau is empty, the uncorrelated level is zero".into()));
    }
    let n_window: u64 = hist.counts[..window_bins].iter().sum();
    let d = mu * window_bins as f64;
    let value = n_window as f64 / d;
    let var = (n_window.max(1) as f64) / (d * d) + value * value / (k as f64 * mu);
    Ok(P12Estimate {
        value,
        sigma: var.sqrt(),
        n_window,
        plateau_mean: mu,
        plateau_bins: k,
        window_bins,
    })
}

/// The ratio estimate expressed as a dip depth and a per-pair probability.
///
/// With a singlet fraction `f` and a per-singlet coincidence probability `P`,
/// the correlated depth is `α = 1 − 4fP`, and the measured ratio is
/// `R = 1 − α·K`, `K` being the window fraction of the dip seen through the
/// detection chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P12Reading {
    pub ratio: f64,
    pub ratio_sigma: f64,
    pub window_fraction: f64,
    pub alpha: f64,
    pub alpha_sigma: f64,
    pub p12: f64,
    pub p12_sigma: f64,
    pub singlet_fraction: f64,
    pub kernel: DipKernel,
}

impl P12Estimate {
    pub fn reading(
        &self,
        kernel: DipKernel,
        delta_window: f64,
        t_w: f64,
        tau_c: f64,
        singlet_fraction: f64,
    ) -> Result<P12Reading> {
        if !(singlet_fraction > 0.0 && singlet_fraction <= 1.0) {
            return Err(Error::invalid(
                "singlet_fraction",
                format!("{singlet_fraction} must be in (0, 1] to convert to P12"),
            ));
        }
        let k = kernel.window_fraction(0.0, delta_window, t_w, tau_c)?;
        if !(k > 0.0) {
            return Err(Error::Histogram("dip kernel vanishes in the window".into()));
        }
        let alpha = (1.0 - self.value) / k;
        let alpha_sigma = self.sigma / k;
        let scale = 4.0 * singlet_fraction;
        Ok(P12Reading {
            ratio: self.value,
            ratio_sigma: self.sigma,
            window_fraction: k,
            alpha,
            alpha_sigma,
            p12: (1.0 - alpha) / scale,
            p12_sigma: alpha_sigma / scale,
            singlet_fraction,
            kernel,
        })
    }
}
