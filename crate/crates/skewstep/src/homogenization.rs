//! Estimators for the homogenized SDE parameters.
//!
//! The homogenized limit of the skew-product system has drift
//! `F(X) = E[f(X, y)]` and diffusion given by a Green-Kubo formula,
//! `sigma^2 / 2 = integral of the autocorrelation of f0`. The invariant
//! measure of the fast dynamics is never constructed; every expectation is
//! a time/ensemble average over the *discrete* fast map (the same map the
//! production integrator uses, at unscaled step `kappa/K`), taken after a
//! burn-in transient.
//!
//! Three routes to the diffusion coefficient are provided:
//!
//! - integral of the estimated autocorrelation function with a
//!   plateau-detected cutoff ([`green_kubo_acf`]),
//! - the variance of an accumulated discrete Brownian path
//!   ([`green_kubo_brownian_path`]),
//! - the batched-sums limit `sigma_hat^2 = lim n^-1 E[(sum of n samples)^2]`
//!   for the slow-step-sampled series ([`green_kubo_discrete`]).
//!
//! The first two estimate the continuous-time `sigma^2`; the third
//! estimates the discrete-map coefficient `sigma_hat^2`, with
//! `sigma_hat^2 kappa -> sigma^2` as `kappa -> 0`. The parameter maps
//! [`cir_params_continuous`] and [`cir_params_euler_discrete`] turn these
//! into the two CIR models being compared, whose only difference is the
//! mean level `beta`; the shift is the Euler drift bias
//! `E = -kappa/2 h h' E[f0^2]` ([`euler_drift_bias`]).

use rayon::prelude::*;
use serde::Serialize;

use crate::cir::CirModel;
use crate::dynamics::{CirSlowParams, FastSystem};
use crate::ensemble::{sample_fast_ic_rng, ESCAPE_BOUND};
use crate::integrators::{FastMap, FastScratch, StepperKind};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Attractor relaxation time used for all expectations, in unscaled time.
pub const DEFAULT_BURN_IN: f64 = 25.0;

/// A time/ensemble average with its ensemble-spread standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErgodicAverageEstimate {
    pub value: f64,
    pub standard_error: f64,
    /// Observable samples contributing to the average.
    pub sample_count: usize,
    pub burn_in: f64,
}

/// An estimated autocorrelation function on a uniform lag grid.
#[derive(Debug, Clone)]
pub struct AutocorrelationEstimate {
    pub lag_times: Vec<f64>,
    pub values: Vec<f64>,
    pub observable_mean_removed: bool,
    /// Empirical mean of the input series (diagnostic; the observables of
    /// interest are centered under the invariant measure).
    pub series_mean: f64,
}

impl AutocorrelationEstimate {
    pub fn lag_spacing(&self) -> f64 {
        self.lag_times[1] - self.lag_times[0]
    }

    pub fn max_lag(&self) -> f64 {
        *self.lag_times.last().unwrap()
    }
}

/// How a diffusion coefficient was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GkMethod {
    AcfIntegral,
    BrownianPathVariance,
    DiscreteSum,
}

/// A Green-Kubo diffusion estimate. Negative point estimates are left
/// as-is (flagged by the caller), never clamped.
#[derive(Debug, Clone, Serialize)]
pub struct GreenKuboEstimate {
    pub sigma_squared: f64,
    pub standard_error: f64,
    pub method: GkMethod,
    /// ACF integration cutoff (time) or plateau block length (samples).
    pub cutoff: Option<f64>,
    /// For the batched-sums route: the (block length, estimate) table.
    pub diagnostics: Vec<(f64, f64)>,
}

/// Generate a time series of an observable of the discrete fast map:
/// relax over `transient`, then record `n_samples` values spaced
/// `sample_every` substeps apart.
pub fn fast_observable_series(
    fast: &FastSystem,
    kind: StepperKind,
    eta: f64,
    observable: impl Fn(&[f64]) -> f64,
    transient: f64,
    n_samples: usize,
    sample_every: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples == 0 || sample_every == 0 {
        return Err(Error::Config("need n_samples >= 1 and sample_every >= 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut y = sample_fast_ic_rng(fast, kind, transient, eta, &mut rng)?;
    let map = FastMap::new(fast, kind, eta);
    let mut scratch = FastScratch::new(fast.dim());

    let mut series = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        series.push(observable(&y));
        if i + 1 < n_samples {
            map.advance(&mut y, sample_every, &mut scratch);
            if !y.iter().all(|v| v.is_finite() && v.abs() <= ESCAPE_BOUND) {
                return Err(Error::Estimator(format!(
                    "fast trajectory diverged at sample {i} while generating a series"
                )));
            }
        }
    }
    Ok(series)
}

/// Ensemble/time average of an observable over the discrete fast map.
///
/// Each member draws an initial condition, relaxes it over `burn_in`, and
/// averages the observable along `t_total - burn_in` further time units
/// (one sample per substep). Members whose trajectory diverges are
/// excluded and counted; more than 1% exclusions rejects the estimate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ergodic_average(
    fast: &FastSystem,
    kind: StepperKind,
    eta: f64,
    observable: impl Fn(&[f64]) -> f64 + Sync,
    t_total: f64,
    n_ensemble: usize,
    burn_in: f64,
    seed: u64,
) -> Result<ErgodicAverageEstimate> {
    if !(t_total > burn_in && burn_in > 0.0) {
        return Err(Error::Config(format!(
            "need t_total > burn_in > 0, got t_total={t_total}, burn_in={burn_in}"
        )));
    }
    if n_ensemble == 0 {
        return Err(Error::Config("n_ensemble must be >= 1".into()));
    }
    let n_avg = ((t_total - burn_in) / eta).round() as usize;

    let member_means: Vec<Option<f64>> = (0..n_ensemble)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut y = match sample_fast_ic_rng(fast, kind, burn_in, eta, &mut rng) {
                Ok(y) => y,
                Err(_) => return None,
            };
            let map = FastMap::new(fast, kind, eta);
            let mut scratch = FastScratch::new(fast.dim());
            let mut acc = 0.0;
            for _ in 0..n_avg {
                acc += observable(&y);
                map.advance(&mut y, 1, &mut scratch);
                if !y[0].is_finite() {
                    return None;
                }
            }
            if y.iter().all(|v| v.is_finite() && v.abs() <= ESCAPE_BOUND) {
                Some(acc / n_avg as f64)
            } else {
                None
            }
        })
        .collect();

    let kept: Vec<f64> = member_means.iter().filter_map(|m| *m).collect();
    let excluded = n_ensemble - kept.len();
    if (excluded as f64) > 0.01 * n_ensemble as f64 {
        return Err(Error::Estimator(format!(
            "{excluded} of {n_ensemble} members diverged; estimate rejected"
        )));
    }

    let n = kept.len() as f64;
    let value = kept.iter().sum::<f64>() / n;
    let standard_error = if kept.len() > 1 {
        let var = kept.iter().map(|m| (m - value) * (m - value)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ErgodicAverageEstimate {
        value,
        standard_error,
        sample_count: kept.len() * n_avg,
        burn_in,
    })
}

/// Biased (1/N) autocorrelation estimator of a uniformly spaced series.
///
/// Mean removal is off by default because the observables of interest are
/// centered under the invariant measure; the empirical mean is reported
/// for diagnostics either way.
pub fn estimate_autocorrelation(
    series: &[f64],
    dt: f64,
    max_lag: f64,
    remove_mean: bool,
) -> Result<AutocorrelationEstimate> {
    if dt <= 0.0 || max_lag <= 0.0 {
        return Err(Error::Config(format!("need dt > 0 and max_lag > 0, got {dt}, {max_lag}")));
    }
    let n = series.len();
    if (n as f64) * dt < 10.0 * max_lag {
        return Err(Error::Estimator(format!(
            "series too short: length {n} x dt {dt} < 10 x max_lag {max_lag}"
        )));
    }
    let series_mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = if remove_mean {
        series.iter().map(|s| s - series_mean).collect()
    } else {
        series.to_vec()
    };

    let n_lags = ((max_lag / dt).floor() as usize + 1).min(n);
    let values: Vec<f64> = (0..n_lags)
        .into_par_iter()
        .map(|k| {
            let mut acc = 0.0;
            for i in 0..n - k {
                acc += centered[i] * centered[i + k];
            }
            acc / n as f64
        })
        .collect();
    let lag_times = (0..n_lags).map(|k| k as f64 * dt).collect();

    Ok(AutocorrelationEstimate {
        lag_times,
        values,
        observable_mean_removed: remove_mean,
        series_mean,
    })
}

/// Trapezoidal Green-Kubo integral: `sigma^2 = 2 * integral of C` up to
/// the cutoff. The standard error is zero here; ensemble spread comes from
/// integrating per-member ACFs (see [`estimate_sigma_squared_acf`]).
pub fn green_kubo_acf(
    acf: &AutocorrelationEstimate,
    integration_cutoff: f64,
) -> Result<GreenKuboEstimate> {
    if integration_cutoff > acf.max_lag() + 1e-12 {
        return Err(Error::Config(format!(
            "cutoff {integration_cutoff} exceeds max lag {}",
            acf.max_lag()
        )));
    }
    let dt = acf.lag_spacing();
    let n_cut = ((integration_cutoff / dt).floor() as usize).min(acf.values.len() - 1);
    let mut integral = 0.0;
    for k in 0..n_cut {
        integral += 0.5 * dt * (acf.values[k] + acf.values[k + 1]);
    }
    Ok(GreenKuboEstimate {
        sigma_squared: 2.0 * integral,
        standard_error: 0.0,
        method: GkMethod::AcfIntegral,
        cutoff: Some(n_cut as f64 * dt),
        diagnostics: Vec::new(),
    })
}

/// Characteristic oscillation period of an ACF: four times the first zero
/// crossing, or a tenth of the lag window for monotone correlations.
pub fn acf_characteristic_period(acf: &AutocorrelationEstimate) -> f64 {
    for (k, pair) in acf.values.windows(2).enumerate() {
        if pair[0].signum() != pair[1].signum() {
            return (4 * (k + 1)) as f64 * acf.lag_spacing();
        }
    }
    acf.max_lag() / 10.0
}

/// Cutoff for the running Green-Kubo integral: the first lag at which the
/// change of the running integral over one characteristic period drops
/// below 1% of its current value.
pub fn acf_plateau_cutoff(acf: &AutocorrelationEstimate) -> Option<f64> {
    let dt = acf.lag_spacing();
    let window = ((acf_characteristic_period(acf) / dt).round() as usize).max(1);
    let mut running = Vec::with_capacity(acf.values.len());
    let mut acc = 0.0;
    running.push(0.0);
    for pair in acf.values.windows(2) {
        acc += 0.5 * dt * (pair[0] + pair[1]);
        running.push(acc);
    }
    for j in (2 * window)..running.len() {
        let change = (running[j] - running[j - window]).abs();
        if running[j] != 0.0 && change < 0.01 * running[j].abs() {
            return Some(j as f64 * dt);
        }
    }
    None
}

/// Combined ACF-route diffusion estimate from an ensemble of series.
#[derive(Debug, Clone)]
pub struct AcfSigmaEstimate {
    pub estimate: GreenKuboEstimate,
    /// ACF averaged over the ensemble members.
    pub mean_acf: AutocorrelationEstimate,
}

/// Estimate `sigma^2` by integrating the autocorrelation function of the
/// observable over the discrete fast map.
///
/// Each of `n_members` members contributes an independent series of
/// `t_series` time units sampled every `sample_every` substeps. The
/// integration cutoff is plateau-detected on the member-averaged ACF and
/// then applied to every member's ACF, giving an ensemble spread for the
/// standard error.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sigma_squared_acf(
    fast: &FastSystem,
    kind: StepperKind,
    eta: f64,
    observable: impl Fn(&[f64]) -> f64 + Sync,
    n_members: usize,
    t_series: f64,
    burn_in: f64,
    sample_every: usize,
    max_lag: f64,
    seed: u64,
) -> Result<AcfSigmaEstimate> {
    if n_members < 2 {
        return Err(Error::Config("need at least 2 members for an ensemble spread".into()));
    }
    let dt_sample = eta * sample_every as f64;
    let n_samples = (t_series / dt_sample).round() as usize;

    let member_acfs: Vec<Result<AutocorrelationEstimate>> = (0..n_members)
        .into_par_iter()
        .map(|i| {
            let series = fast_observable_series(
                fast,
                kind,
                eta,
                &observable,
                burn_in,
                n_samples,
                sample_every,
                // stream_rng(seed, i) keys the member's series
                splitmix(seed, i as u64),
            )?;
            estimate_autocorrelation(&series, dt_sample, max_lag, false)
        })
        .collect();

    let mut acfs = Vec::with_capacity(n_members);
    for acf in member_acfs {
        acfs.push(acf?);
    }

    // member-averaged ACF and common cutoff
    let n_lags = acfs[0].values.len();
    let mut mean_values = vec![0.0; n_lags];
    let mut mean_of_means = 0.0;
    for acf in &acfs {
        for (m, v) in mean_values.iter_mut().zip(&acf.values) {
            *m += v / n_members as f64;
        }
        mean_of_means += acf.series_mean / n_members as f64;
    }
    let mean_acf = AutocorrelationEstimate {
        lag_times: acfs[0].lag_times.clone(),
        values: mean_values,
        observable_mean_removed: false,
        series_mean: mean_of_means,
    };
    let cutoff = acf_plateau_cutoff(&mean_acf).unwrap_or(mean_acf.max_lag());

    let per_member: Vec<f64> = acfs
        .iter()
        .map(|acf| green_kubo_acf(acf, cutoff).map(|e| e.sigma_squared))
        .collect::<Result<_>>()?;
    let n = per_member.len() as f64;
    let value = per_member.iter().sum::<f64>() / n;
    let var = per_member.iter().map(|v| (v - value) * (v - value)).sum::<f64>() / (n - 1.0);

    Ok(AcfSigmaEstimate {
        estimate: GreenKuboEstimate {
            sigma_squared: value,
            standard_error: (var / n).sqrt(),
            method: GkMethod::AcfIntegral,
            cutoff: Some(cutoff),
            diagnostics: Vec::new(),
        },
        mean_acf,
    })
}

/// Derive a fresh 64-bit stream key from `(seed, index)`.
fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Estimate `sigma^2` from the variance of the accumulated discrete noise
/// path `w_N = eps kappa sum of y_n` over `N = floor(1/eps^2)` slow steps,
/// as `Var[w_N] / (N dt)` with `dt = kappa eps^2`.
///
/// This is the noise increment the Euler map feeds the slow variable, so
/// the estimate inherits the production discretization exactly.
#[allow(clippy::too_many_arguments)]
pub fn green_kubo_brownian_path(
    fast: &FastSystem,
    kind: StepperKind,
    observable: impl Fn(&[f64]) -> f64 + Sync,
    epsilon: f64,
    kappa: f64,
    substeps: usize,
    n_ensemble: usize,
    transient: f64,
    seed: u64,
) -> Result<GreenKuboEstimate> {
    if epsilon <= 0.0 || epsilon > 0.05 {
        return Err(Error::Config(format!(
            "brownian-path estimator needs 0 < epsilon <= 0.05 so the path is long, got {epsilon}"
        )));
    }
    if n_ensemble < 8 {
        return Err(Error::Config("need at least 8 members to estimate a variance".into()));
    }
    let n_steps = (1.0 / (epsilon * epsilon)).floor() as usize;
    let eta = kappa / substeps as f64;
    let increment_scale = epsilon * kappa;

    let endpoints: Vec<Option<f64>> = (0..n_ensemble)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut y = match sample_fast_ic_rng(fast, kind, transient, eta, &mut rng) {
                Ok(y) => y,
                Err(_) => return None,
            };
            let map = FastMap::new(fast, kind, eta);
            let mut scratch = FastScratch::new(fast.dim());
            let mut w = 0.0;
            for _ in 0..n_steps {
                w += increment_scale * observable(&y);
                map.advance(&mut y, substeps, &mut scratch);
                if !y[0].is_finite() {
                    return None;
                }
            }
            Some(w)
        })
        .collect();

    let kept: Vec<f64> = endpoints.iter().filter_map(|w| *w).collect();
    let excluded = n_ensemble - kept.len();
    if (excluded as f64) > 0.01 * n_ensemble as f64 {
        return Err(Error::Estimator(format!(
            "{excluded} of {n_ensemble} members diverged; estimate rejected"
        )));
    }

    let dt_slow = kappa * epsilon * epsilon;
    let (sigma_squared, standard_error) = variance_based_sigma(&kept, n_steps, dt_slow);
    Ok(GreenKuboEstimate {
        sigma_squared,
        standard_error,
        method: GkMethod::BrownianPathVariance,
        cutoff: None,
        diagnostics: Vec::new(),
    })
}

/// `Var[w_N] / (N dt)` with a variance-of-variance standard error.
pub(crate) fn variance_based_sigma(endpoints: &[f64], n_steps: usize, dt_slow: f64) -> (f64, f64) {
    let n = endpoints.len() as f64;
    let mean = endpoints.iter().sum::<f64>() / n;
    let m2 = endpoints.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let m4 = endpoints.iter().map(|w| (w - mean).powi(4)).sum::<f64>() / n;
    let sample_var = m2 * n / (n - 1.0);
    // Var[s^2] = (m4 - (n-3)/(n-1) s^4) / n
    let var_of_var = ((m4 - (n - 3.0) / (n - 1.0) * sample_var * sample_var) / n).max(0.0);
    let denom = n_steps as f64 * dt_slow;
    (sample_var / denom, var_of_var.sqrt() / denom)
}

/// Batched-sums estimator of the discrete Green-Kubo coefficient
/// `sigma_hat^2 = lim_n n^-1 E[(sum_{j<n} f0(Phi^j y))^2]` for a series
/// sampled once per slow step.
///
/// Block sums over doubling block lengths are tracked until consecutive
/// doublings agree (within 10% or three combined standard errors); the
/// whole table is kept as diagnostics. A series whose block estimates keep
/// growing has non-summable correlations and is rejected.
pub fn green_kubo_discrete(series: &[f64]) -> Result<GreenKuboEstimate> {
    if series.len() < 40 {
        return Err(Error::Estimator(format!(
            "series of {} samples is shorter than 20 blocks at the smallest doubling",
            series.len()
        )));
    }

    let mut table = Vec::new(); // (n_b, estimate, stderr)
    let mut n_b = 1usize;
    while series.len() / n_b >= 20 {
        let m = series.len() / n_b;
        let block_vals: Vec<f64> = (0..m)
            .map(|b| {
                let s: f64 = series[b * n_b..(b + 1) * n_b].iter().sum();
                s * s / n_b as f64
            })
            .collect();
        let mean = block_vals.iter().sum::<f64>() / m as f64;
        let var = block_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
        table.push((n_b, mean, (var / m as f64).sqrt()));
        n_b *= 2;
    }

    let mut chosen = None;
    for pair in table.windows(2) {
        let (_, v1, se1) = pair[0];
        let (nb2, v2, se2) = pair[1];
        let change = (v2 - v1).abs();
        let combined = (se1 * se1 + se2 * se2).sqrt();
        if change <= (0.1 * v2.abs()).max(3.0 * combined) {
            chosen = Some((nb2, v2, se2));
            break;
        }
    }

    let diagnostics: Vec<(f64, f64)> = table.iter().map(|(nb, v, _)| (*nb as f64, *v)).collect();
    match chosen {
        Some((nb, value, se)) => Ok(GreenKuboEstimate {
            sigma_squared: value,
            standard_error: se,
            method: GkMethod::DiscreteSum,
            cutoff: Some(nb as f64),
            diagnostics,
        }),
        None => Err(Error::Estimator(format!(
            "no plateau in the batched sums; correlations may be non-summable. table: {diagnostics:?}"
        ))),
    }
}

/// The truncated double-sum form `C_0 + 2 sum_{k=1}^m C_k` of the discrete
/// Green-Kubo formula; equal to the batched-sums limit, retained for
/// cross-checks on surrogates.
pub fn green_kubo_discrete_sum(series: &[f64], max_terms: usize) -> Result<f64> {
    let n = series.len();
    if max_terms + 1 >= n {
        return Err(Error::Config(format!(
            "max_terms {max_terms} too large for a series of {n} samples"
        )));
    }
    let c = |k: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - k {
            acc += series[i] * series[i + k];
        }
        acc / n as f64
    };
    let mut total = c(0);
    for k in 1..=max_terms {
        total += 2.0 * c(k);
    }
    Ok(total)
}

/// The extra drift of the homogenized Euler map:
/// `E = -kappa/2 h(X) h'(X) E[f0^2]`.
pub fn euler_drift_bias(h_val: f64, h_prime_val: f64, ef0_sq: f64, kappa: f64) -> f64 {
    -0.5 * kappa * h_val * h_prime_val * ef0_sq
}

/// Which homogenized limit a parameter set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CirVariant {
    Continuous,
    EulerDiscrete,
}

/// Homogenized CIR parameters `(alpha, sigma^2, beta)`. For the
/// Euler-discrete variant `sigma_squared` stores `sigma_hat^2 kappa`, the
/// diffusion coefficient in rescaled SDE time units.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HomogenizedCirParams {
    pub alpha: f64,
    pub sigma_squared: f64,
    pub beta: f64,
    pub variant: CirVariant,
    /// Zero for the continuous variant.
    pub kappa: f64,
}

impl HomogenizedCirParams {
    /// Re-derive `beta` from the stored fields; the residual must vanish.
    pub fn beta_residual(&self, slow: CirSlowParams) -> f64 {
        let shift = self.sigma_squared * slow.a * slow.a / (8.0 * self.alpha * slow.b);
        let expected = match self.variant {
            CirVariant::Continuous => slow.c + shift,
            CirVariant::EulerDiscrete => {
                slow.c + shift - self.kappa * slow.a * slow.a / (4.0 * slow.b)
            }
        };
        self.beta - expected
    }

    /// The CIR model with these parameters started at `x0`.
    pub fn to_cir_model(&self, slow: CirSlowParams, x0: f64) -> CirModel {
        CirModel {
            a: slow.a,
            b: slow.b,
            alpha: self.alpha,
            beta: self.beta,
            sigma_squared: self.sigma_squared,
            x0,
        }
    }
}

/// Parameters of the homogenized CIR model of the continuous-time system:
/// `beta = c + sigma^2 a^2 / (8 alpha b)`.
pub fn cir_params_continuous(slow: CirSlowParams, alpha: f64, sigma_squared: f64) -> HomogenizedCirParams {
    let beta = slow.c + sigma_squared * slow.a * slow.a / (8.0 * alpha * slow.b);
    HomogenizedCirParams {
        alpha,
        sigma_squared,
        beta,
        variant: CirVariant::Continuous,
        kappa: 0.0,
    }
}

/// Parameters of the homogenized CIR model of the Euler map at step ratio
/// `kappa`: `beta = c + sigma_hat^2 kappa a^2 / (8 alpha b) - kappa a^2 / (4 b)`.
///
/// `sigma_hat_sq_kappa` is the product `sigma_hat^2 * kappa`, which plays
/// the role of `sigma^2` in rescaled SDE time and converges to it as
/// `kappa -> 0`.
pub fn cir_params_euler_discrete(
    slow: CirSlowParams,
    alpha: f64,
    sigma_hat_sq_kappa: f64,
    kappa: f64,
) -> HomogenizedCirParams {
    let beta = slow.c + sigma_hat_sq_kappa * slow.a * slow.a / (8.0 * alpha * slow.b)
        - kappa * slow.a * slow.a / (4.0 * slow.b);
    HomogenizedCirParams {
        alpha,
        sigma_squared: sigma_hat_sq_kappa,
        beta,
        variant: CirVariant::EulerDiscrete,
        kappa,
    }
}

/// Time average of an observable that is the total time derivative of a
/// state function along the fast flow (caller's responsibility). Such
/// averages vanish up to boundary terms; the standard error comes from
/// block means over the single trajectory.
pub fn total_derivative_average(
    fast: &FastSystem,
    kind: StepperKind,
    eta: f64,
    observable_time_derivative: impl Fn(&[f64]) -> f64,
    t_total: f64,
    burn_in: f64,
    seed: u64,
) -> Result<ErgodicAverageEstimate> {
    if !(t_total > burn_in && burn_in > 0.0) {
        return Err(Error::Config(format!(
            "need t_total > burn_in > 0, got t_total={t_total}, burn_in={burn_in}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut y = sample_fast_ic_rng(fast, kind, burn_in, eta, &mut rng)?;
    let map = FastMap::new(fast, kind, eta);
    let mut scratch = FastScratch::new(fast.dim());

    let n_avg = ((t_total - burn_in) / eta).round() as usize;
    let n_blocks = 64.min(n_avg);
    let block_len = n_avg / n_blocks;
    let mut block_means = Vec::with_capacity(n_blocks);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..n_blocks {
        let mut acc = 0.0;
        for _ in 0..block_len {
            acc += observable_time_derivative(&y);
            map.advance(&mut y, 1, &mut scratch);
        }
        if !y[0].is_finite() {
            return Err(Error::Estimator("trajectory diverged during averaging".into()));
        }
        block_means.push(acc / block_len as f64);
        total += acc;
        count += block_len;
    }
    let value = total / count as f64;
    let bm = block_means.iter().sum::<f64>() / n_blocks as f64;
    let var = block_means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>()
        / (n_blocks as f64 - 1.0);
    Ok(ErgodicAverageEstimate {
        value,
        standard_error: (var / n_blocks as f64).sqrt(),
        sample_count: count,
        burn_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn ergodic_average_of_constant_is_one() {
        let fast = FastSystem::new(2, |_, dy| dy.fill(0.0));
        let est = estimate_ergodic_average(
            &fast,
            StepperKind::Euler,
            0.01,
            |_| 1.0,
            2.0,
            4,
            1.0,
            3,
        )
        .unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.standard_error, 0.0);
    }

    #[test]
    fn ergodic_average_validates_window() {
        let fast = FastSystem::new(1, |_, dy| dy.fill(0.0));
        assert!(estimate_ergodic_average(&fast, StepperKind::Euler, 0.01, |_| 1.0, 1.0, 2, 2.0, 0)
            .is_err());
    }

    #[test]
    fn autocorrelation_constant_series() {
        let series = vec![3.0; 500];
        let acf = estimate_autocorrelation(&series, 1.0, 20.0, false).unwrap();
        for v in &acf.values {
            assert_relative_eq!(*v, 9.0, max_relative = 0.05);
        }
        assert_relative_eq!(acf.values[0], 9.0, epsilon = 1e-12);
        assert_eq!(acf.series_mean, 3.0);
    }

    #[test]
    fn autocorrelation_alternating_series() {
        let series: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let acf = estimate_autocorrelation(&series, 1.0, 5.0, false).unwrap();
        assert_relative_eq!(acf.values[0], 1.0, epsilon = 1e-12);
        // biased estimator: -(N-1)/N, i.e. -1 up to O(1/N)
        assert_relative_eq!(acf.values[1], -1.0, max_relative = 1e-3);
    }

    #[test]
    fn autocorrelation_rejects_short_series() {
        let series = vec![1.0; 50];
        assert!(estimate_autocorrelation(&series, 1.0, 20.0, false).is_err());
    }

    #[test]
    fn green_kubo_acf_exponential_oracle() {
        // C(t) = exp(-t): integral to a cutoff >> 1 gives sigma^2 = 2
        let dt = 0.01;
        let n = 4000;
        let acf = AutocorrelationEstimate {
            lag_times: (0..n).map(|k| k as f64 * dt).collect(),
            values: (0..n).map(|k| (-(k as f64) * dt).exp()).collect(),
            observable_mean_removed: false,
            series_mean: 0.0,
        };
        let gk = green_kubo_acf(&acf, 30.0).unwrap();
        assert_relative_eq!(gk.sigma_squared, 2.0, max_relative = 1e-4);

        // zero ACF integrates to zero
        let zero = AutocorrelationEstimate {
            lag_times: acf.lag_times.clone(),
            values: vec![0.0; n],
            observable_mean_removed: false,
            series_mean: 0.0,
        };
        assert_eq!(green_kubo_acf(&zero, 30.0).unwrap().sigma_squared, 0.0);

        // cutoff beyond the lag window is rejected
        assert!(green_kubo_acf(&acf, 100.0).is_err());

        // plateau detection lands late enough that the integral is converged
        let cutoff = acf_plateau_cutoff(&acf).expect("plateau expected");
        let at_plateau = green_kubo_acf(&acf, cutoff).unwrap();
        assert_relative_eq!(at_plateau.sigma_squared, 2.0, max_relative = 2e-2);
    }

    #[test]
    fn brownian_path_variance_iid_oracle() {
        // i.i.d. increments with variance v: w_N = eps kappa sum xi_j has
        // Var = eps^2 kappa^2 N v, so Var/(N dt) = kappa v exactly
        let (epsilon, kappa, v) = (0.05f64, 0.5f64, 2.5f64);
        let n_steps = (1.0 / (epsilon * epsilon)).floor() as usize;
        let n_members = 4000;
        let endpoints: Vec<f64> = (0..n_members)
            .map(|i| {
                let mut rng = stream_rng(901, i as u64);
                let mut w = 0.0;
                for _ in 0..n_steps {
                    let xi: f64 = rng.random_range(-1.0..1.0f64) * (3.0 * v).sqrt();
                    w += epsilon * kappa * xi;
                }
                w
            })
            .collect();
        let dt = kappa * epsilon * epsilon;
        let (sigma_sq, se) = variance_based_sigma(&endpoints, n_steps, dt);
        let expected = kappa * v;
        assert!(
            (sigma_sq - expected).abs() <= 4.0 * se,
            "estimate {sigma_sq} vs exact {expected} (se {se})"
        );
        assert!(se < 0.1 * expected);
    }

    #[test]
    fn brownian_path_zero_observable() {
        let fast = FastSystem::new(1, |_, dy| dy.fill(0.0));
        let gk = green_kubo_brownian_path(
            &fast,
            StepperKind::Euler,
            |_| 0.0,
            0.05,
            0.5,
            10,
            16,
            1.0,
            5,
        )
        .unwrap();
        assert_eq!(gk.sigma_squared, 0.0);
    }

    #[test]
    fn brownian_path_rejects_large_epsilon() {
        let fast = FastSystem::new(1, |_, dy| dy.fill(0.0));
        assert!(green_kubo_brownian_path(
            &fast,
            StepperKind::Euler,
            |_| 0.0,
            0.2,
            0.5,
            10,
            16,
            1.0,
            5
        )
        .is_err());
    }

    fn iid_series(n: usize, v: f64, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| rng.random_range(-1.0..1.0f64) * (3.0 * v).sqrt()).collect()
    }

    #[test]
    fn discrete_green_kubo_iid_surrogate() {
        let v = 1.8;
        let series = iid_series(200_000, v, 11);
        let gk = green_kubo_discrete(&series).unwrap();
        assert_relative_eq!(gk.sigma_squared, v, max_relative = 0.1);
        assert!(!gk.diagnostics.is_empty());

        // the direct double-sum form agrees: cross terms vanish
        let direct = green_kubo_discrete_sum(&series, 50).unwrap();
        assert_relative_eq!(direct, v, max_relative = 0.1);
    }

    #[test]
    fn discrete_green_kubo_ar1_oracle() {
        // AR(1): x_{t+1} = rho x_t + xi, Var[x] = v
        // => sigma_hat^2 = v (1 + rho) / (1 - rho)
        let (rho, v) = (0.6, 1.0f64);
        let mut rng = stream_rng(17, 0);
        let noise_sd = (v * (1.0 - rho * rho)).sqrt();
        let mut x = 0.0;
        let series: Vec<f64> = (0..400_000)
            .map(|_| {
                let xi: f64 = rng.random_range(-1.0..1.0f64) * (3.0f64).sqrt() * noise_sd;
                x = rho * x + xi;
                x
            })
            .collect();
        let expected = v * (1.0 + rho) / (1.0 - rho);
        let gk = green_kubo_discrete(&series).unwrap();
        assert_relative_eq!(gk.sigma_squared, expected, max_relative = 0.12);
        let direct = green_kubo_discrete_sum(&series, 60).unwrap();
        assert_relative_eq!(direct, expected, max_relative = 0.12);
    }

    #[test]
    fn discrete_green_kubo_flags_constant_series() {
        let series = vec![2.0; 100_000];
        match green_kubo_discrete(&series) {
            Err(Error::Estimator(msg)) => assert!(msg.contains("plateau"), "message: {msg}"),
            other => panic!("expected non-summable flag, got {other:?}"),
        }
    }

    #[test]
    fn discrete_green_kubo_rejects_short_series() {
        assert!(green_kubo_discrete(&[1.0; 30]).is_err());
    }

    #[test]
    fn drift_bias_hand_values() {
        assert_eq!(euler_drift_bias(1.0, 0.5, 56.8, 0.0), 0.0);
        assert_eq!(euler_drift_bias(1.0, 0.0, 56.8, 0.5), 0.0);
        // h h' = a^2/2 = 0.005 with E[f0^2] = 2 alpha = 56.8
        assert_relative_eq!(euler_drift_bias(0.1, 0.05, 56.8, 0.5), -0.071, epsilon = 1e-12);
    }

    #[test]
    fn cir_params_reference_arithmetic() {
        let slow = CirSlowParams::default();
        let cont = cir_params_continuous(slow, 28.4, 0.140);
        assert_relative_eq!(cont.beta, 0.75 + 0.140 * 0.01 / (8.0 * 28.4 * 0.005), epsilon = 1e-15);
        assert_relative_eq!(cont.beta, 0.75123, max_relative = 1e-4);
        assert_eq!(cont.variant, CirVariant::Continuous);
        assert!(cont.beta_residual(slow).abs() < 1e-15);

        // sigma^2 = 0 leaves beta at c; doubling b halves the shift
        assert_eq!(cir_params_continuous(slow, 28.4, 0.0).beta, slow.c);
        let doubled = CirSlowParams { b: 2.0 * slow.b, ..slow };
        let shift1 = cir_params_continuous(slow, 28.4, 0.140).beta - slow.c;
        let shift2 = cir_params_continuous(doubled, 28.4, 0.140).beta - slow.c;
        assert_relative_eq!(shift2, 0.5 * shift1, epsilon = 1e-12);

        let disc = cir_params_euler_discrete(slow, 28.4, 0.140, 0.5);
        assert_relative_eq!(disc.beta, cont.beta - 0.25, epsilon = 1e-12);
        assert_relative_eq!(disc.beta, 0.50123, max_relative = 1e-4);
        assert!(disc.beta_residual(slow).abs() < 1e-15);

        // kappa -> 0 with sigma_hat^2 kappa -> sigma^2 recovers the
        // continuous beta; a = 0 kills coupling and bias
        let small = cir_params_euler_discrete(slow, 28.4, 0.140, 1e-9);
        assert_relative_eq!(small.beta, cont.beta, epsilon = 1e-9);
        let no_coupling = CirSlowParams { a: 0.0, ..slow };
        assert_eq!(cir_params_euler_discrete(no_coupling, 28.4, 0.140, 0.5).beta, slow.c);
    }

    #[test]
    fn beta_gap_matches_drift_bias_identity() {
        // 2 alpha b (beta_disc - beta_cont) = E + (sigma_hat^2 kappa - sigma^2) a^2 / 4
        let slow = CirSlowParams::default();
        let (alpha, sigma_sq, sigma_hat_sq_kappa, kappa) = (28.4, 0.140, 0.150, 0.5);
        let cont = cir_params_continuous(slow, alpha, sigma_sq);
        let disc = cir_params_euler_discrete(slow, alpha, sigma_hat_sq_kappa, kappa);
        let lhs = 2.0 * alpha * slow.b * (disc.beta - cont.beta);
        let e = euler_drift_bias(1.0, 0.5, slow.a * slow.a * 2.0 * alpha, kappa);
        let rhs = e + (sigma_hat_sq_kappa - sigma_sq) * slow.a * slow.a / 4.0;
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn total_derivative_average_zero_observable() {
        let fast = FastSystem::new(1, |_, dy| dy.fill(0.0));
        let est = total_derivative_average(&fast, StepperKind::Euler, 0.01, |_| 0.0, 5.0, 1.0, 2)
            .unwrap();
        assert_eq!(est.value, 0.0);
    }
}
