//! Simulation scenarios: multivariate Gaussian profile data with
//! Bessel- or Gaussian-correlation covariance structure, four mean-shift
//! families, and reproducible per-observation random streams.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{ComponentSamples, DiscreteSample};

/// Correlation family of the data-generating process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Rescaled Bessel-of-the-first-kind correlation.
    Bessel,
    /// Squared-exponential correlation.
    Gaussian,
}

/// Mean-shift family applied simultaneously to every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shift {
    None,
    /// Parabolic dip on the central window [0.25, 0.75].
    A,
    /// Linear decrease on the second half of the domain.
    B,
    /// Sinusoidal shift over the whole domain.
    C,
    /// Quadratic shift over the whole domain.
    D,
}

/// Complete description of one simulated data law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Dependence level: 1, 2, 3 for the D1, D2, D3 models.
    pub delta_c: f64,
    pub p: usize,
    pub n_points: usize,
    pub noise_sd: f64,
    pub shift: Shift,
    /// Shift severity `d`; zero reduces any shift to in-control data.
    pub severity: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// In-control law with the paper-scale defaults: five components on a
    /// hundred equally spaced points, measurement noise 0.1.
    pub fn in_control(scenario: Scenario, delta_c: f64, seed: u64) -> Self {
        Self {
            scenario,
            delta_c,
            p: 5,
            n_points: 100,
            noise_sd: 0.1,
            shift: Shift::None,
            severity: 0.0,
            seed,
        }
    }

    pub fn with_shift(mut self, shift: Shift, severity: f64) -> Self {
        self.shift = shift;
        self.severity = severity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_c > 0.0) || !self.delta_c.is_finite() {
            return Err(Error::InvalidScenario(format!(
                "delta_c must be positive, got {}",
                self.delta_c
            )));
        }
        if self.p == 0 {
            return Err(Error::InvalidScenario("p must be at least 1".into()));
        }
        if self.n_points < 2 {
            return Err(Error::InvalidScenario(format!(
                "n_points must be at least 2, got {}",
                self.n_points
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidScenario(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        if !(self.severity >= 0.0) || !self.severity.is_finite() {
            return Err(Error::InvalidScenario(format!(
                "severity must be nonnegative, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    /// The common measurement grid of this law.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.n_points)
            .map(|i| i as f64 / (self.n_points - 1) as f64)
            .collect()
    }
}

/// Bessel J0 power series with compensated summation, truncated when a term
/// drops below 1e-14 in magnitude (about forty terms at the largest argument
/// used here).
fn bessel_j0_series(x: f64) -> f64 {
    let q = -x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut comp = 0.0;
    for j in 1..=200 {
        term *= q / ((j * j) as f64);
        let t = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
        if term.abs() < 1e-14 {
            break;
        }
    }
    sum + comp
}

/// Correlation at lag `z` for the given scenario and dependence level.
pub fn correlation_rho(scenario: Scenario, z: f64, delta_c: f64) -> f64 {
    let az = z.abs();
    match scenario {
        Scenario::Bessel => {
            let prefactor = 1.0 / (-10.0 * ((1.0 - az) - 1.0) / (1.0 + (delta_c - 1.0) * 4.0) + 1.0);
            prefactor * bessel_j0_series(az * 50.0 / 3.0)
        }
        Scenario::Gaussian => (-(az * 40.0 / delta_c).powi(2)).exp(),
    }
}

/// Dense covariance matrix of the stacked process on the spec's grid, in
/// component-major order: entry `(k1*n + i, k2*n + j)` couples component
/// `k1` at `t_i` with component `k2` at `t_j`.
pub fn build_covariance(spec: &ScenarioSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let t = spec.grid();
    let n = spec.n_points;
    let p = spec.p;
    let dim = p * n;
    // Lags are differences of grid points, so the correlation is computed
    // once per lag index.
    let rho: Vec<f64> = (0..n)
        .map(|d| correlation_rho(spec.scenario, t[d] - t[0], spec.delta_c))
        .collect();
    let mut cov = DMatrix::zeros(dim, dim);
    for k1 in 0..p {
        for k2 in 0..p {
            let factor = 0.01 / ((8.0 / spec.delta_c) * (k1 as f64 - k2 as f64).abs() + 1.0);
            for i in 0..n {
                for j in 0..n {
                    cov[(k1 * n + i, k2 * n + j)] = factor * rho[i.abs_diff(j)];
                }
            }
        }
    }
    let cov_t = cov.transpose();
    Ok((cov + cov_t) * 0.5)
}

/// Cholesky factor of the covariance, adding geometric diagonal jitter when
/// the construction is numerically semidefinite.
fn factorize_with_jitter(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let dim = cov.nrows();
    let mean_diag = cov.diagonal().sum() / dim as f64;
    if let Some(chol) = cov.clone().cholesky() {
        return Ok((chol.unpack(), 0.0));
    }
    let max_jitter = 1e-6 * mean_diag;
    let mut jitter = 1e-12 * mean_diag;
    while jitter <= max_jitter {
        let mut jittered = cov.clone();
        for i in 0..dim {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = jittered.cholesky() {
            log::warn!("covariance required diagonal jitter {jitter:.3e}");
            return Ok((chol.unpack(), jitter));
        }
        jitter *= 2.0;
    }
    Err(Error::CovarianceNotPd { max_jitter })
}

/// The mean-shift value at time `t` for severity `d`.
pub fn shift_mean(shift: Shift, severity: f64, t: f64) -> f64 {
    let d = severity;
    match shift {
        Shift::None => 0.0,
        Shift::A => {
            if (0.25..=0.75).contains(&t) {
                d * 0.07 / (0.25 * 0.25) * (t - 0.5) * (t - 0.5) - d * 0.07
            } else {
                0.0
            }
        }
        Shift::B => {
            if (0.5..=1.0).contains(&t) {
                -d * 0.09 / 0.5 * (t - 0.5)
            } else {
                0.0
            }
        }
        Shift::C => d * 0.05 * (2.0 * std::f64::consts::PI * t).sin(),
        Shift::D => d * 0.12 * t * t - d * 0.06,
    }
}

/// A reusable sampler holding the factored covariance of one law. Building
/// it once amortizes the Cholesky across repeated draws.
pub struct Generator {
    spec: ScenarioSpec,
    grid: Vec<f64>,
    chol_l: DMatrix<f64>,
    shift_values: Vec<f64>,
    pub jitter: f64,
}

impl Generator {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        let cov = build_covariance(&spec)?;
        let (chol_l, jitter) = factorize_with_jitter(&cov)?;
        let grid = spec.grid();
        let shift_values = grid
            .iter()
            .map(|&t| shift_mean(spec.shift, spec.severity, t))
            .collect();
        Ok(Self {
            spec,
            grid,
            chol_l,
            shift_values,
            jitter,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    /// Draw `n` observations using the spec's seed and ids `prefix-1 ...`.
    /// Observation `i` consumes stream `i` of the seeded generator, so the
    /// output is reproducible regardless of parallel scheduling.
    pub fn generate_with(&self, n: usize, seed: u64, prefix: &str) -> Vec<DiscreteSample> {
        let p = self.spec.p;
        let n_pts = self.spec.n_points;
        let dim = p * n_pts;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let signal = &self.chol_l * z;
                let components = (0..p)
                    .map(|k| {
                        let values = (0..n_pts)
                            .map(|j| {
                                let noise: f64 = rng.sample(StandardNormal);
                                signal[k * n_pts + j] + self.shift_values[j] + self.spec.noise_sd * noise
                            })
                            .collect();
                        ComponentSamples {
                            times: self.grid.clone(),
                            values,
                        }
                    })
                    .collect();
                DiscreteSample {
                    obs_id: format!("{prefix}-{}", i + 1),
                    components,
                }
            })
            .collect()
    }
}

/// Draw `n` observations from the spec's law, deterministically in the
/// spec's seed.
pub fn generate(spec: &ScenarioSpec, n: usize) -> Result<Vec<DiscreteSample>> {
    if n == 0 {
        return Err(Error::InvalidScenario("cannot generate zero observations".into()));
    }
    let seed = spec.seed;
    let generator = Generator::new(spec.clone())?;
    Ok(generator.generate_with(n, seed, "sim"))
}
