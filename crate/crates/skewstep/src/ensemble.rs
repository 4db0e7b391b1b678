//! Trajectory ensembles, empirical densities, and density comparisons.
//!
//! An ensemble run draws every member's fast initial condition from the
//! attractor (random box draw relaxed over a transient), integrates the
//! multi-scale system to a fixed horizon with a per-member deterministic
//! random stream, and histograms the final slow values. Members are
//! independent, so the run parallelizes over the rayon pool while staying
//! bitwise reproducible at any worker count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FastSystem, MultiScaleSystem};
use crate::integrators::{integrate, FastMap, FastScratch, PositivityPolicy, StepPolicy, StepperKind};
use crate::quad;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Half-width of the uniform box the raw fast initial conditions are drawn
/// from. The box comfortably contains the attractors of interest and the
/// transient relaxation makes the exact choice immaterial.
pub const IC_BOX_HALF_WIDTH: f64 = 10.0;

/// A trajectory is considered escaped once any component exceeds this.
pub const ESCAPE_BOUND: f64 = 1e6;

const MAX_REDRAWS: usize = 10;

/// Configuration of one ensemble run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub epsilon: f64,
    pub kappa: f64,
    /// Fast substeps per slow step (K).
    pub substeps: usize,
    pub t_end: f64,
    pub stepper: StepperKind,
    pub x0: f64,
    /// Attractor relaxation time for each member's fast initial condition,
    /// in unscaled time units.
    pub transient: f64,
    pub seed: u64,
    pub positivity: PositivityPolicy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 10_000,
            epsilon: 0.05,
            kappa: 0.5,
            substeps: 50,
            t_end: 2.5,
            stepper: StepperKind::Euler,
            x0: 1.0,
            transient: 25.0,
            seed: 42,
            positivity: PositivityPolicy::ClampToZero,
        }
    }
}

impl EnsembleConfig {
    pub fn step_policy(&self) -> Result<StepPolicy> {
        Ok(StepPolicy::new(self.kappa, self.substeps, self.epsilon)?
            .with_positivity(self.positivity))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 {
            return Err(Error::Config("n_members must be >= 1".into()));
        }
        if self.t_end <= 0.0 || self.transient <= 0.0 {
            return Err(Error::Config(format!(
                "t_end and transient must be positive, got {}, {}",
                self.t_end, self.transient
            )));
        }
        self.step_policy().map(|_| ())
    }
}

/// Draw a fast initial condition approximately from the invariant measure:
/// a uniform box draw advanced over `transient` unscaled time units with
/// the discrete fast map. Trajectories that escape are redrawn (at most
/// ten times).
pub fn sample_fast_ic(
    fast: &FastSystem,
    kind: StepperKind,
    transient: f64,
    eta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    sample_fast_ic_rng(fast, kind, transient, eta, &mut stream_rng(seed, 0))
}

/// [`sample_fast_ic`] drawing from a caller-provided random stream.
pub fn sample_fast_ic_rng(
    fast: &FastSystem,
    kind: StepperKind,
    transient: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if transient <= 0.0 || eta <= 0.0 {
        return Err(Error::Config(format!(
            "transient and eta must be positive, got {transient}, {eta}"
        )));
    }
    let map = FastMap::new(fast, kind, eta);
    let mut scratch = FastScratch::new(fast.dim());
    let n_sub = (transient / eta).round().max(1.0) as usize;

    'redraw: for _ in 0..=MAX_REDRAWS {
        let mut y: Vec<f64> =
            (0..fast.dim()).map(|_| rng.random_range(-IC_BOX_HALF_WIDTH..IC_BOX_HALF_WIDTH)).collect();
        for _ in 0..n_sub {
            map.advance(&mut y, 1, &mut scratch);
            if !y.iter().all(|v| v.is_finite() && v.abs() <= ESCAPE_BOUND) {
                continue 'redraw;
            }
        }
        return Ok(y);
    }
    Err(Error::Estimator(format!(
        "initial condition escaped the attractor in {MAX_REDRAWS} consecutive redraws"
    )))
}

/// Outcome of an ensemble run: final slow values in member order plus
/// clamp and failure accounting.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub final_values: Vec<f64>,
    /// Total positivity clamps over all members and steps.
    pub clamp_count: u64,
    pub members_clamped: usize,
    /// Members that failed (index, reason); their final values are absent.
    pub failures: Vec<(usize, String)>,
    /// Fraction of slow steps that were clamped.
    pub clamp_fraction: f64,
    /// False if more than 0.5% of members failed.
    pub valid: bool,
    /// False if more than 0.1% of all steps were clamped.
    pub reliable: bool,
    pub realized_t_end: f64,
}

impl EnsembleResult {
    pub fn mean(&self) -> f64 {
        self.final_values.iter().sum::<f64>() / self.final_values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.final_values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / (self.final_values.len() as f64 - 1.0)
    }

    pub fn mean_stderr(&self) -> f64 {
        (self.variance() / self.final_values.len() as f64).sqrt()
    }
}

/// Run an ensemble of multi-scale trajectories and collect the slow value
/// at the final time, in member order.
///
/// Member `i` draws its fast initial condition from the stream keyed by
/// `(config.seed, i)`, relaxes it over the transient, then integrates to
/// `t_end`. Results are bitwise independent of the worker count.
pub fn run_ensemble(system: &MultiScaleSystem, config: &EnsembleConfig) -> Result<EnsembleResult> {
    config.validate()?;
    let policy = config.step_policy()?;
    let eta = policy.eta();
    let n_steps = (config.t_end / policy.dt_slow()).round() as usize;

    let members: Vec<std::result::Result<(f64, u64), String>> = (0..config.n_members)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, i as u64);
            let y0 = sample_fast_ic_rng(&system.fast, config.stepper, config.transient, eta, &mut rng)
                .map_err(|e| e.to_string())?;
            let record = integrate(
                system,
                config.stepper,
                policy,
                config.x0,
                &y0,
                config.t_end,
                n_steps.max(1),
                false,
            )
            .map_err(|e| e.to_string())?;
            Ok((record.final_x, record.clamp_count))
        })
        .collect();

    let mut final_values = Vec::with_capacity(config.n_members);
    let mut failures = Vec::new();
    let mut clamp_count = 0u64;
    let mut members_clamped = 0usize;
    for (i, m) in members.into_iter().enumerate() {
        match m {
            Ok((x, clamps)) => {
                final_values.push(x);
                clamp_count += clamps;
                if clamps > 0 {
                    members_clamped += 1;
                }
            }
            Err(reason) => failures.push((i, reason)),
        }
    }
    if final_values.is_empty() {
        return Err(Error::Estimator("every ensemble member failed".into()));
    }

    let total_steps = (config.n_members - failures.len()) as u64 * n_steps.max(1) as u64;
    let clamp_fraction = clamp_count as f64 / total_steps as f64;
    let valid = (failures.len() as f64) <= 0.005 * config.n_members as f64;
    let reliable = clamp_fraction <= 0.001;

    Ok(EnsembleResult {
        final_values,
        clamp_count,
        members_clamped,
        failures,
        clamp_fraction,
        valid,
        reliable,
        realized_t_end: n_steps.max(1) as f64 * policy.dt_slow(),
    })
}

/// A fixed-width histogram density with bins aligned at zero:
/// bin `k` covers `[k dx, (k+1) dx)`.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalPdf {
    pub bin_width: f64,
    /// `n_bins + 1` edges, each an exact multiple of the bin width.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `counts / (n * bin_width)`.
    pub density: Vec<f64>,
    pub n: usize,
    /// Raw sample mean (not the binned mean).
    pub mean: f64,
    /// Unbiased raw sample variance.
    pub variance: f64,
    pub mean_stderr: f64,
}

impl EmpiricalPdf {
    pub fn midpoints(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Empirical CDF evaluated at every bin edge.
    pub fn cdf_at_edges(&self) -> Vec<f64> {
        let mut acc = 0u64;
        let mut out = Vec::with_capacity(self.bin_edges.len());
        out.push(0.0);
        for &c in &self.counts {
            acc += c;
            out.push(acc as f64 / self.n as f64);
        }
        out
    }
}

/// Histogram `values` with bins of width `bin_width` aligned at zero.
/// `range`, when given, sets the minimum span; bins always extend to cover
/// every value. A value exactly on an edge belongs to the right bin.
pub fn histogram(values: &[f64], bin_width: f64, range: Option<(f64, f64)>) -> Result<EmpiricalPdf> {
    if values.is_empty() {
        return Err(Error::Config("cannot histogram an empty sample".into()));
    }
    if bin_width <= 0.0 {
        return Err(Error::Config(format!("bin_width must be positive, got {bin_width}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in histogram input".into()));
    }

    let bin_of = |x: f64| (x / bin_width).floor() as i64;
    let mut k_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut k_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some((lo, hi)) = range {
        k_min = k_min.min(lo);
        k_max = k_max.max(hi);
    }
    let k_lo = bin_of(k_min);
    let k_hi = bin_of(k_max); // inclusive highest occupied bin index
    let n_bins = (k_hi - k_lo + 1) as usize;

    let mut counts = vec![0u64; n_bins];
    for &v in values {
        counts[(bin_of(v) - k_lo) as usize] += 1;
    }

    let n = values.len();
    let norm = 1.0 / (n as f64 * bin_width);
    let density = counts.iter().map(|&c| c as f64 * norm).collect();
    let bin_edges = (k_lo..=k_hi + 1).map(|k| k as f64 * bin_width).collect();

    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };

    Ok(EmpiricalPdf {
        bin_width,
        bin_edges,
        counts,
        density,
        n,
        mean,
        variance,
        mean_stderr: (variance / n as f64).sqrt(),
    })
}

/// Quantitative distances between an empirical and an analytic density.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComparisonReport {
    /// `sum_k |density_k - pdf(mid_k)| dx`, in [0, 2].
    pub l1_distance: f64,
    /// Max CDF gap over the bin edges, analytic CDF by quadrature.
    pub ks_distance: f64,
    pub mean_diff: f64,
    pub mean_diff_relative: f64,
    pub variance_ratio: f64,
}

/// Compare an empirical density against an analytic pdf with known mean
/// and variance.
pub fn compare_pdf(
    emp: &EmpiricalPdf,
    pdf: impl Fn(f64) -> f64,
    analytic_mean: f64,
    analytic_variance: f64,
) -> ComparisonReport {
    let dx = emp.bin_width;
    let l1 = emp
        .midpoints()
        .iter()
        .zip(&emp.density)
        .map(|(m, d)| (d - pdf(*m)).abs() * dx)
        .sum();

    // analytic CDF accumulated along the edges; densities supported on
    // [0, inf) start accumulating at zero
    let origin = emp.bin_edges[0].min(0.0);
    let analytic_cdf = quad::cumulative(&|x| pdf(x), origin, &emp.bin_edges, 1e-10);
    let ks = emp
        .cdf_at_edges()
        .iter()
        .zip(&analytic_cdf)
        .map(|(e, a)| (e - a).abs())
        .fold(0.0, f64::max);

    let mean_diff = emp.mean - analytic_mean;
    ComparisonReport {
        l1_distance: l1,
        ks_distance: ks,
        mean_diff,
        mean_diff_relative: mean_diff / analytic_mean,
        variance_ratio: emp.variance / analytic_variance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CirSlowParams, RosslerParams, SlowCoupling};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn histogram_single_bin() {
        let pdf = histogram(&[0.0025; 7], 0.005, None).unwrap();
        assert_eq!(pdf.counts, vec![7]);
        assert_eq!(pdf.bin_edges, vec![0.0, 0.005]);
        assert_relative_eq!(pdf.density[0], 200.0);
    }

    #[test]
    fn histogram_edge_value_goes_right() {
        let pdf = histogram(&[0.005], 0.005, None).unwrap();
        assert_eq!(pdf.bin_edges[0], 0.005);
        assert_eq!(pdf.bin_edges[1], 0.01);
        assert_eq!(pdf.counts, vec![1]);
    }

    #[test]
    fn histogram_uniform_density_near_one() {
        let n = 100_000;
        let values: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let pdf = histogram(&values, 0.005, None).unwrap();
        for d in &pdf.density {
            assert_relative_eq!(*d, 1.0, max_relative = 5e-3);
        }
        assert_relative_eq!(pdf.mean, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn histogram_respects_requested_range() {
        let pdf = histogram(&[0.3], 0.1, Some((0.0, 1.0))).unwrap();
        assert_eq!(pdf.bin_edges.first().copied().unwrap(), 0.0);
        assert!(pdf.bin_edges.last().copied().unwrap() >= 1.0);
        assert_eq!(pdf.counts.iter().sum::<u64>(), 1);
    }

    proptest! {
        #[test]
        fn histogram_normalizes(values in prop::collection::vec(-50.0f64..50.0, 1..200),
                                width in 0.01f64..2.0) {
            let pdf = histogram(&values, width, None).unwrap();
            let total: f64 = pdf.density.iter().map(|d| d * pdf.bin_width).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((pdf.mean - mean).abs() <= 1e-12);
            prop_assert_eq!(pdf.counts.iter().sum::<u64>() as usize, values.len());
        }
    }

    #[test]
    fn compare_pdf_self_comparison_is_tight() {
        // dense uniform sample against the uniform density
        let n = 200_000;
        let values: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let emp = histogram(&values, 0.005, None).unwrap();
        let report = compare_pdf(&emp, |x| if (0.0..1.0).contains(&x) { 1.0 } else { 0.0 }, 0.5, 1.0 / 12.0);
        assert!(report.l1_distance < 5e-3, "l1 {}", report.l1_distance);
        assert!(report.ks_distance < 5e-3, "ks {}", report.ks_distance);
        assert!(report.mean_diff.abs() < 1e-6);
        assert_relative_eq!(report.variance_ratio, 1.0, max_relative = 1e-3);
    }

    fn frozen_system() -> MultiScaleSystem {
        let fast = FastSystem::new(3, |_, dy| dy.fill(0.0));
        let coupling = SlowCoupling {
            h: Box::new(|_| 0.0),
            h_prime: Box::new(|_| 0.0),
            f0: Box::new(|_| 0.0),
            f: Box::new(|_, _| 0.0),
        };
        MultiScaleSystem::new(fast, coupling, 1.0).unwrap()
    }

    #[test]
    fn frozen_dynamics_returns_x0_everywhere() {
        let sys = frozen_system();
        let config = EnsembleConfig {
            n_members: 16,
            epsilon: 1.0,
            kappa: 0.1,
            substeps: 2,
            t_end: 1.0,
            x0: 0.77,
            transient: 1.0,
            ..EnsembleConfig::default()
        };
        let result = run_ensemble(&sys, &config).unwrap();
        assert_eq!(result.final_values.len(), 16);
        assert!(result.final_values.iter().all(|&x| x == 0.77));
        assert_eq!(result.clamp_count, 0);
        assert!(result.valid && result.reliable);
    }

    #[test]
    fn single_member_matches_integrate() {
        let sys = MultiScaleSystem::cir_rossler(
            CirSlowParams::default(),
            RosslerParams::default(),
            0.2,
        )
        .unwrap();
        let config = EnsembleConfig {
            n_members: 1,
            epsilon: 0.2,
            kappa: 0.5,
            substeps: 10,
            t_end: 0.5,
            transient: 5.0,
            seed: 99,
            ..EnsembleConfig::default()
        };
        let result = run_ensemble(&sys, &config).unwrap();

        let policy = config.step_policy().unwrap();
        let mut rng = stream_rng(config.seed, 0);
        let y0 = sample_fast_ic_rng(&sys.fast, config.stepper, config.transient, policy.eta(), &mut rng)
            .unwrap();
        let rec = integrate(&sys, config.stepper, policy, config.x0, &y0, config.t_end, 100, false)
            .unwrap();
        assert_eq!(result.final_values[0].to_bits(), rec.final_x.to_bits());
    }

    #[test]
    fn sample_fast_ic_deterministic_and_on_attractor() {
        let fast = FastSystem::rossler(RosslerParams::default());
        let a = sample_fast_ic(&fast, StepperKind::Euler, 25.0, 0.01, 7).unwrap();
        let b = sample_fast_ic(&fast, StepperKind::Euler, 25.0, 0.01, 7).unwrap();
        assert_eq!(a, b);

        // endpoint should be a modest attractor point with modest velocity
        let mut dy = [0.0; 3];
        fast.eval(&a, &mut dy);
        assert!(dy.iter().all(|v| v.abs() < 1e3));
        assert!(a.iter().all(|v| v.abs() < 50.0));
    }

    #[test]
    fn ensemble_reproducible_across_worker_counts() {
        let sys = MultiScaleSystem::cir_rossler(
            CirSlowParams::default(),
            RosslerParams::default(),
            0.2,
        )
        .unwrap();
        let config = EnsembleConfig {
            n_members: 24,
            epsilon: 0.2,
            kappa: 0.5,
            substeps: 10,
            t_end: 0.5,
            transient: 5.0,
            seed: 4,
            ..EnsembleConfig::default()
        };

        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_ensemble(&sys, &config).unwrap().final_values)
        };
        let one = run_with(1);
        let four = run_with(4);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&one), bits(&four));
    }
}
