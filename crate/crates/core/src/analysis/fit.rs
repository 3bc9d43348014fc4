//! Weighted least-squares fit of `(α, t_w, τ_c)` to a coincidence histogram.
//!
//! Bin `j` is modelled as `μ·(1 − α·K_j(t_w, τ_c))` where `μ` is the plateau
//! mean (held fixed) and `K_j` the dip kernel averaged over the bin. Weights
//! are `1/max(count, 1)`, and empty bins stay in the sum.
//!
//! The minimizer is Levenberg–Marquardt with a central-difference Jacobian
//! for the two time constants (the model is linear in α). It runs from the
//! supplied start and from two perturbed ones and keeps the best.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::estimate::{plateau_mean, PlateauRange};
use super::histogram::CoincidenceHistogram;
use super::kernel::DipKernel;
use crate::error::{Error, Result};
use crate::quantum::{fit_tolerance, CorrelationParams, ResponseParams};

const NS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub kernel: DipKernel,
    pub max_iterations: usize,
    /// Relative step size below which a start is considered converged.
    pub parameter_tolerance: f64,
    /// Largest allowed `|gᵢ| / (‖Jᵢ‖·‖r‖)` at a converged optimum.
    pub gradient_tolerance: f64,
    pub min_populated_bins: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            kernel: DipKernel::Causal,
            max_iterations: 500,
            parameter_tolerance: 1e-6,
            gradient_tolerance: 1e-6,
            min_populated_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub init: [f64; 3],
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub initial_gradient_norm: f64,
    /// Largest normalized gradient component at the optimum.
    pub gradient_cosine: f64,
    /// Names of parameters the data do not pin down.
    pub unconstrained: Vec<String>,
    pub plateau_mean: f64,
    pub plateau_bins: usize,
    pub fit_bins: usize,
    pub starts: Vec<StartSummary>,
    pub message: String,
}

/// Fitted values are in SI units; `covariance` is ordered `(α, t_w, τ_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub t_w: f64,
    pub tau_c: f64,
    pub sigma: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub kernel: DipKernel,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn alpha_sigma(&self) -> f64 {
        self.sigma[0]
    }
    pub fn t_w_sigma(&self) -> f64 {
        self.sigma[1]
    }
    pub fn tau_c_sigma(&self) -> f64 {
        self.sigma[2]
    }

    /// Expected counts of a bin `[lo, hi)` (seconds) under the fitted model.
    pub fn model_counts(&self, lo: f64, hi: f64) -> Result<f64> {
        let k = kernel_in_ns(self.kernel).window_fraction(lo / NS, hi / NS, self.t_w / NS, self.tau_c / NS)?;
        Ok(self.diagnostics.plateau_mean * (1.0 - self.alpha * k))
    }
}

fn kernel_in_ns(k: DipKernel) -> DipKernel {
    match k {
        DipKernel::Causal => DipKernel::Causal,
        DipKernel::DetectorPair { clock_tick } => DipKernel::DetectorPair { clock_tick: clock_tick / NS },
    }
}

/// Bins with their data, in nanoseconds.
struct Problem {
    lo: Vec<f64>,
    hi: Vec<f64>,
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
    mu: f64,
    kernel: DipKernel,
}

struct Eval {
    chi2: f64,
    /// Weighted residuals `(y − m)·√w`.
    r: Vec<f64>,
    /// Kernel values at the current time constants.
    k: Vec<f64>,
}

impl Problem {
    fn kernels(&self, t_w: f64, tau: f64) -> Result<Vec<f64>> {
        let tol = fit_tolerance();
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| self.kernel.window_fraction_with(a, b, t_w, tau, tol))
            .collect()
    }

    fn eval(&self, p: &Vector3<f64>) -> Result<Eval> {
        let k = self.kernels(p[1], p[2])?;
        let r: Vec<f64> = (0..self.y.len())
            .map(|j| (self.y[j] - self.mu * (1.0 - p[0] * k[j])) * self.sqrt_w[j])
            .collect();
        let chi2 = r.iter().map(|x| x * x).sum();
        Ok(Eval { chi2, r, k })
    }

    /// Weighted model Jacobian `∂m/∂p·√w`, one row per bin.
    fn jacobian(&self, p: &Vector3<f64>, at: &Eval) -> Result<Vec<[f64; 3]>> {
        let mut jac: Vec<[f64; 3]> = (0..self.y.len())
            .map(|j| [-self.mu * at.k[j] * self.sqrt_w[j], 0.0, 0.0])
            .collect();
        for i in 1..3 {
            let h = 1e-4 * p[i];
            let mut up = *p;
            let mut dn = *p;
            up[i] += h;
            dn[i] -= h;
            let ku = self.kernels(up[1], up[2])?;
            let kd = self.kernels(dn[1], dn[2])?;
            for j in 0..self.y.len() {
                jac[j][i] = -self.mu * p[0] * (ku[j] - kd[j]) / (2.0 * h) * self.sqrt_w[j];
            }
        }
        Ok(jac)
    }
}

fn normal_equations(jac: &[[f64; 3]], r: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut a = Matrix3::zeros();
    let mut g = Vector3::zeros();
    for (row, &rj) in jac.iter().zip(r) {
        for i in 0..3 {
            g[i] += row[i] * rj;
            for l in 0..3 {
                a[(i, l)] += row[i] * row[l];
            }
        }
    }
    (a, g)
}

fn gradient_cosine(jac: &[[f64; 3]], r: &[f64], g: &Vector3<f64>) -> f64 {
    let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rn == 0.0 {
        return 0.0;
    }
    (0..3)
        .map(|i| {
            let jn = jac.iter().map(|row| row[i] * row[i]).sum::<f64>().sqrt();
            if jn == 0.0 {
                0.0
            } else {
                g[i].abs() / (jn * rn)
            }
        })
        .fold(0.0, f64::max)
}

struct StartOutcome {
    p: Vector3<f64>,
    chi2: f64,
    iterations: usize,
    step_converged: bool,
    initial_gradient_norm: f64,
}

fn typical_scale(i: usize) -> f64 {
    // α is dimensionless; times are in ns
    if i == 0 {
        1e-2
    } else {
        1e-3
    }
}

fn run_start(prob: &Problem, init: Vector3<f64>, opts: &FitOptions) -> Result<StartOutcome> {
    let mut p = init;
    let mut cur = prob.eval(&p)?;
    let mut lambda = 1e-3;
    let mut initial_gradient_norm = f64::NAN;
    let mut iterations = 0;
    let mut step_converged = false;
    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let jac = prob.jacobian(&p, &cur)?;
        let (a, g) = normal_equations(&jac, &cur.r);
        if initial_gradient_norm.is_nan() {
            initial_gradient_norm = g.norm();
        }
        if g.norm() == 0.0 {
            step_converged = true;
            break;
        }
        loop {
            let mut damped = a;
            for i in 0..3 {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12 * a.diagonal().max());
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let trial = p + step;
            let small = (0..3).all(|i| {
                step[i].abs() <= opts.parameter_tolerance * p[i].abs().max(typical_scale(i))
            });
            if trial[1] > 0.0 && trial[2] > 0.0 && trial.iter().all(|x| x.is_finite()) {
                let next = prob.eval(&trial)?;
                if next.chi2 <= cur.chi2 {
                    p = trial;
                    cur = next;
                    lambda = (lambda / 10.0).max(1e-12);
                    if small {
                        step_converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            if small {
                // no improving step exists at this resolution
                step_converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break 'outer;
            }
        }
    }
    Ok(StartOutcome {
        p,
        chi2: cur.chi2,
        iterations,
        step_converged,
        initial_gradient_norm,
    })
}

/// Covariance `(JᵀWJ)⁻¹` via an eigen-decomposition of the scaled normal
/// matrix; directions with negligible curvature are dropped (pseudo-inverse)
/// and the parameters they involve are reported as unconstrained.
fn covariance(a: &Matrix3<f64>) -> Result<(Matrix3<f64>, Vec<usize>)> {
    if a.iter().any(|x| !x.is_finite()) || a.diagonal().iter().all(|&d| d <= 0.0) {
        return Err(Error::SingularJacobian);
    }
    let d: Vector3<f64> = a.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 });
    let scaled = Matrix3::from_fn(|i, l| a[(i, l)] * d[i] * d[l]);
    let eig = SymmetricEigen::new(scaled);
    let top = eig.eigenvalues.max();
    let mut inv = Matrix3::zeros();
    let mut weak = Vec::new();
    for k in 0..3 {
        let lam = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if lam > 1e-12 * top {
            inv += v * v.transpose() / lam;
        } else {
            for i in 0..3 {
                if v[i].abs() > 0.1 && !weak.contains(&i) {
                    weak.push(i);
                }
            }
        }
    }
    for i in 0..3 {
        if d[i] == 0.0 && !weak.contains(&i) {
            weak.push(i);
        }
    }
    Ok((Matrix3::from_fn(|i, l| inv[(i, l)] * d[i] * d[l]), weak))
}

const NAMES: [&str; 3] = ["alpha", "t_w", "tau_c"];

/// Fit `(α, t_w, τ_c)` to `hist` using bins below `plateau.max`, with the
/// uncorrelated level taken from the plateau.
pub fn fit_coincidence_model(
    hist: &CoincidenceHistogram,
    plateau: &PlateauRange,
    init_corr: &CorrelationParams,
    init_resp: &ResponseParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (mu, plateau_bins) = plateau_mean(hist, plateau)?;
    if mu == 0.0 {
        return Err(Error::SingularJacobian);
    }
    let b = hist.bin_width / NS;
    let mut prob = Problem {
        lo: vec![],
        hi: vec![],
        y: vec![],
        sqrt_w: vec![],
        mu,
        kernel: kernel_in_ns(opts.kernel),
    };
    let end = plateau.max.min(hist.max_delta) / NS;
    for (j, &c) in hist.counts.iter().enumerate() {
        let lo = j as f64 * b;
        let hi = lo + b;
        if hi > end * (1.0 + 1e-12) {
            break;
        }
        prob.lo.push(lo);
        prob.hi.push(hi);
        prob.y.push(c as f64);
        prob.sqrt_w.push(1.0 / (c.max(1) as f64).sqrt());
    }
    let populated = prob.y.iter().filter(|&&y| y > 0.0).count();
    if populated < opts.min_populated_bins {
        return Err(Error::Fit(format!(
            "{populated} populated bins, at least {} are needed",
            opts.min_populated_bins
        )));
    }
    if prob.y.len() <= 3 {
        return Err(Error::Fit("fewer bins than parameters".into()));
    }

    let base = Vector3::new(init_corr.alpha(), init_resp.t_w() / NS, init_corr.tau_c() / NS);
    let inits = [
        base,
        Vector3::new(base[0], base[1] * 0.7, base[2] * 1.3),
        Vector3::new(base[0], base[1] * 1.3, base[2] * 0.7),
    ];
    let mut starts = Vec::new();
    let mut best: Option<(StartOutcome, bool)> = None;
    for init in inits {
        let out = run_start(&prob, init, opts)?;
        let at = prob.eval(&out.p)?;
        let jac = prob.jacobian(&out.p, &at)?;
        let (_, g) = normal_equations(&jac, &at.r);
        let ok = out.step_converged && gradient_cosine(&jac, &at.r, &g) <= opts.gradient_tolerance;
        starts.push(StartSummary {
            init: [init[0], init[1] * NS, init[2] * NS],
            chi2: out.chi2,
            iterations: out.iterations,
            converged: ok,
        });
        let better = match &best {
            None => true,
            Some((b, bok)) => (ok && !bok) || (ok == *bok && out.chi2 < b.chi2),
        };
        if better {
            best = Some((out, ok));
        }
    }
    let (out, step_ok) = best.expect("three starts");
    let at = prob.eval(&out.p)?;
    let jac = prob.jacobian(&out.p, &at)?;
    let (a, g) = normal_equations(&jac, &at.r);
    let cosine = gradient_cosine(&jac, &at.r, &g);
    let (cov_ns, weak) = covariance(&a)?;
    let unit = [1.0, NS, NS];
    let cov = Matrix3::from_fn(|i, l| cov_ns[(i, l)] * unit[i] * unit[l]);
    let sigma = [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()];
    let mut unconstrained: Vec<String> = weak.iter().map(|&i| NAMES[i].to_string()).collect();
    for i in 1..3 {
        let rel = cov_ns[(i, i)].sqrt() / out.p[i];
        if !(rel <= 1.0) && !unconstrained.iter().any(|n| n == NAMES[i]) {
            unconstrained.push(NAMES[i].to_string());
        }
    }
    let converged = step_ok && cosine <= opts.gradient_tolerance;
    let message = if converged {
        "converged".to_string()
    } else if !out.step_converged {
        format!("no convergence within {} iterations", opts.max_iterations)
    } else {
        format!("step size converged but gradient cosine {cosine:.3e} exceeds tolerance")
    };
    Ok(FitResult {
        alpha: out.p[0],
        t_w: out.p[1] * NS,
        tau_c: out.p[2] * NS,
        sigma,
        covariance: [
            [cov[(0, 0)], cov[(0, 1)], cov[(0, 2)]],
            [cov[(1, 0)], cov[(1, 1)], cov[(1, 2)]],
            [cov[(2, 0)], cov[(2, 1)], cov[(2, 2)]],
        ],
        chi2: at.chi2,
        dof: prob.y.len() - 3,
        converged,
        kernel: opts.kernel,
        diagnostics: FitDiagnostics {
            iterations: starts.iter().map(|s| s.iterations).sum(),
            gradient_norm: g.norm(),
            initial_gradient_norm: out.initial_gradient_norm,
            gradient_cosine: cosine,
            unconstrained,
            plateau_mean: mu,
            plateau_bins,
            fit_bins: prob.y.len(),
            starts,
            message,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Poisson};

    fn synthetic(mu: f64, alpha: f64, t_w: f64, tau: f64, kernel: DipKernel, noise: Option<u64>) -> CoincidenceHistogram {
        let bin = 25.0;
        let n = 240;
        let kern = kernel_in_ns(kernel);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise.unwrap_or(0));
        let counts = (0..n)
            .map(|j| {
                let lo = j as f64 * bin;
                let k = kern.window_fraction(lo, lo + bin, t_w, tau).unwrap();
                let m = mu * (1.0 - alpha * k);
                match noise {
                    None => m.round() as u64,
                    Some(_) => Poisson::new(m).unwrap().sample(&mut rng) as u64,
                }
            })
            .collect();
        CoincidenceHistogram {
            bin_width: bin * NS,
            max_delta: n as f64 * bin * NS,
            counts,
            n_starts: 0,
            n_stops: 0,
            live_time: 1.0,
        }
    }

    fn init(alpha: f64, t_w: f64, tau: f64) -> (CorrelationParams, ResponseParams) {
        (
            CorrelationParams::new(alpha, tau * NS).unwrap(),
            ResponseParams::new(t_w * NS).unwrap(),
        )
    }

    #[test]
    fn recovers_noiseless_parameters() {
        // counts large enough that rounding to integers is negligible
        let h = synthetic(1e8, 1.0, 60.0, 78.0, DipKernel::Causal, None);
        let plateau = PlateauRange::new(1380e-9, 6000e-9).unwrap();
        let (c, r) = init(0.8, 50.0, 90.0);
        let f = fit_coincidence_model(&h, &plateau, &c, &r, &FitOptions::default()).unwrap();
        assert!(f.converged, "{:?}", f.diagnostics);
        assert!((f.alpha - 1.0).abs() < 1e-4);
        assert!((f.t_w / 60e-9 - 1.0).abs() < 1e-4, "{}", f.t_w);
        assert!((f.tau_c / 78e-9 - 1.0).abs() < 1e-4, "{}", f.tau_c);
    }

    #[test]
    fn recovers_detector_pair_parameters() {
        let kern = DipKernel::DetectorPair { clock_tick: 25e-9 };
        let h = synthetic(1e8, 0.8, 60.0, 78.0, kern, None);
        let plateau = PlateauRange::new(1380e-9, 6000e-9).unwrap();
        let (c, r) = init(0.6, 70.0, 70.0);
        let opts = FitOptions { kernel: kern, ..FitOptions::default() };
        let f = fit_coincidence_model(&h, &plateau, &c, &r, &opts).unwrap();
        assert!(f.converged, "{:?}", f.diagnostics);
        assert!((f.alpha - 0.8).abs() < 1e-4);
        assert!((f.t_w / 60e-9 - 1.0).abs() < 1e-4);
        assert!((f.tau_c / 78e-9 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gradient_vanishes_and_curvature_matches() {
        let h = synthetic(400.0, 1.0, 60.0, 78.0, DipKernel::Causal, Some(7));
        let plateau = PlateauRange::new(1380e-9, 6000e-9).unwrap();
        let (c, r) = init(0.8, 50.0, 90.0);
        let f = fit_coincidence_model(&h, &plateau, &c, &r, &FitOptions::default()).unwrap();
        assert!(f.converged, "{:?}", f.diagnostics);
        let d = &f.diagnostics;
        assert!(
            d.gradient_norm < 1e-6 * d.initial_gradient_norm,
            "{} vs {}",
            d.gradient_norm,
            d.initial_gradient_norm
        );

        // χ² curvature by finite differences against 2·JᵀWJ = 2·C⁻¹
        let chi2_at = |p: [f64; 3]| -> f64 {
            let mut s = 0.0;
            for (j, &y) in h.counts.iter().enumerate() {
                let lo = j as f64 * 25.0;
                if lo + 25.0 > 6000.0 {
                    break;
                }
                let k = DipKernel::Causal.window_fraction(lo, lo + 25.0, p[1], p[2]).unwrap();
                let m = d.plateau_mean * (1.0 - p[0] * k);
                s += (y as f64 - m).powi(2) / (y.max(1) as f64);
            }
            s
        };
        let p0 = [f.alpha, f.t_w / NS, f.tau_c / NS];
        let cov = Matrix3::from_fn(|i, l| {
            let u = [1.0, NS, NS];
            f.covariance[i][l] / (u[i] * u[l])
        });
        let hess = cov.try_inverse().unwrap() * 2.0;
        for i in 0..3 {
            let sig = hess[(i, i)].recip().sqrt() * 2f64.sqrt();
            let mut up = p0;
            let mut dn = p0;
            up[i] += sig;
            dn[i] -= sig;
            let fd = (chi2_at(up) - 2.0 * chi2_at(p0) + chi2_at(dn)) / (sig * sig);
            assert!((fd / hess[(i, i)] - 1.0).abs() < 0.05, "param {i}: {fd} vs {}", hess[(i, i)]);
        }
    }

    #[test]
    fn flat_data_flags_time_constants() {
        let h = synthetic(400.0, 0.0, 60.0, 78.0, DipKernel::Causal, Some(3));
        let plateau = PlateauRange::new(1380e-9, 6000e-9).unwrap();
        let (c, r) = init(1.0, 60.0, 78.0);
        let f = fit_coincidence_model(&h, &plateau, &c, &r, &FitOptions::default()).unwrap();
        assert!(f.alpha.abs() < 3.0 * f.alpha_sigma(), "{} ± {}", f.alpha, f.alpha_sigma());
        let u = &f.diagnostics.unconstrained;
        assert!(u.iter().any(|n| n == "t_w") || u.iter().any(|n| n == "tau_c"), "{u:?}");
    }

    #[test]
    fn too_few_populated_bins() {
        let mut h = synthetic(400.0, 0.0, 60.0, 78.0, DipKernel::Causal, None);
        for c in h.counts.iter_mut().skip(5) {
            *c = 0;
        }
        h.counts[100] = 1;
        let plateau = PlateauRange::new(1380e-9, 6000e-9).unwrap();
        let (c, r) = init(1.0, 60.0, 78.0);
        assert!(fit_coincidence_model(&h, &plateau, &c, &r, &FitOptions::default()).is_err());
    }

    #[test]
    fn covariance_is_pseudo_inverse_on_singular_input() {
        let a = Matrix3::new(4.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0);
        let (c, weak) = covariance(&a).unwrap();
        assert!((c[(0, 0)] - 0.25).abs() < 1e-12);
        assert!(weak.contains(&1) && weak.contains(&2));
        let e = SymmetricEigen::new(c).eigenvalues;
        assert!(e.iter().all(|&x| x >= -1e-12));
        assert!(matches!(covariance(&Matrix3::zeros()), Err(Error::SingularJacobian)));
    }
}
