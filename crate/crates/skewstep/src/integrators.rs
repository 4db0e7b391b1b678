//! Fixed-step one-step methods and the multiple-time-stepping driver.
//!
//! Three explicit one-step rules are supported for a generic field
//! `dz/dt = v(z)`:
//!
//! - Euler:    `z + dt v(z)`
//! - Heun:     `z + dt/2 [v(z) + v(z + dt v(z))]`
//! - Taylor-2: `z + dt v(z) + dt^2/2 v'(z)v(z)`, with the Jacobian-vector
//!   product taken by a one-sided finite difference of size `tau`.
//!
//! A multi-scale step advances the fast subsystem by `K` substeps of size
//! `dt/K` (equivalently, unscaled effective step `kappa/K`) with the *same*
//! rule as the slow variable, then advances the slow variable once. The
//! slow step is scaled by `dt = kappa eps^2`; the fast map depends on
//! `kappa/K` only and is therefore bitwise independent of `eps`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{FastSystem, MultiScaleSystem};
use crate::{Error, Result};

/// The one-step rule used for both the slow variable and the fast substeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepperKind {
    Euler,
    Heun,
    Taylor2,
}

impl StepperKind {
    pub const ALL: [StepperKind; 3] = [StepperKind::Euler, StepperKind::Heun, StepperKind::Taylor2];

    pub fn name(self) -> &'static str {
        match self {
            StepperKind::Euler => "euler",
            StepperKind::Heun => "heun",
            StepperKind::Taylor2 => "taylor2",
        }
    }
}

impl std::fmt::Display for StepperKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StepperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(StepperKind::Euler),
            "heun" | "rk2" => Ok(StepperKind::Heun),
            "taylor2" | "taylor" => Ok(StepperKind::Taylor2),
            other => Err(Error::Config(format!("unknown stepper kind '{other}'"))),
        }
    }
}

/// What to do when a slow step leaves the admissible region `x >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositivityPolicy {
    /// Truncate to zero and count the intervention.
    #[serde(rename = "clamp")]
    ClampToZero,
    /// Abort the trajectory with a step error.
    Reject,
}

/// Step sizes of a multi-scale run: slow step `dt = kappa eps^2`, `K` fast
/// substeps of `dt/K` each, so the unscaled fast step is `kappa/K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub kappa: f64,
    /// Number of fast substeps per slow step (K).
    pub substeps: usize,
    pub epsilon: f64,
    /// Finite-difference parameter of the Taylor-2 Jacobian-vector product.
    pub tau: f64,
    pub positivity: PositivityPolicy,
}

impl StepPolicy {
    pub fn new(kappa: f64, substeps: usize, epsilon: f64) -> Result<Self> {
        if kappa <= 0.0 || epsilon <= 0.0 || substeps == 0 {
            return Err(Error::Config(format!(
                "step policy needs kappa > 0, K >= 1, epsilon > 0; got kappa={kappa}, K={substeps}, epsilon={epsilon}"
            )));
        }
        Ok(Self {
            kappa,
            substeps,
            epsilon,
            tau: f64::EPSILON.sqrt(),
            positivity: PositivityPolicy::ClampToZero,
        })
    }

    pub fn with_positivity(mut self, positivity: PositivityPolicy) -> Self {
        self.positivity = positivity;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        self.tau = tau;
        Ok(self)
    }

    /// Slow step `dt = kappa eps^2`.
    #[inline]
    pub fn dt_slow(&self) -> f64 {
        self.kappa * self.epsilon * self.epsilon
    }

    /// Fast substep `dt/K` in scaled time.
    #[inline]
    pub fn dt_fast(&self) -> f64 {
        self.dt_slow() / self.substeps as f64
    }

    /// Effective fast substep `kappa/K` in unscaled time. Independent of
    /// `eps` by construction.
    #[inline]
    pub fn eta(&self) -> f64 {
        self.kappa / self.substeps as f64
    }
}

/// One Euler step `z + dt v(z)` for a generic field.
pub fn euler_step(rhs: impl Fn(&[f64], &mut [f64]), z: &[f64], dt: f64) -> Vec<f64> {
    let mut v = vec![0.0; z.len()];
    rhs(z, &mut v);
    z.iter().zip(&v).map(|(zi, vi)| zi + dt * vi).collect()
}

/// One Heun step `z + dt/2 [v(z) + v(z + dt v(z))]`.
pub fn heun_step(rhs: impl Fn(&[f64], &mut [f64]), z: &[f64], dt: f64) -> Vec<f64> {
    let n = z.len();
    let mut v1 = vec![0.0; n];
    rhs(z, &mut v1);
    let pred: Vec<f64> = z.iter().zip(&v1).map(|(zi, vi)| zi + dt * vi).collect();
    let mut v2 = vec![0.0; n];
    rhs(&pred, &mut v2);
    (0..n).map(|i| z[i] + 0.5 * dt * (v1[i] + v2[i])).collect()
}

/// One second-order Taylor step `z + dt v + dt^2/2 v'v`, with
/// `v'v ~ (v(z + tau v) - v(z)) / tau`.
pub fn taylor2_step(
    rhs: impl Fn(&[f64], &mut [f64]),
    z: &[f64],
    dt: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = z.len();
    let mut v = vec![0.0; n];
    rhs(z, &mut v);
    let shifted: Vec<f64> = z.iter().zip(&v).map(|(zi, vi)| zi + tau * vi).collect();
    let mut vs = vec![0.0; n];
    rhs(&shifted, &mut vs);
    Ok((0..n)
        .map(|i| {
            let jvp = (vs[i] - v[i]) / tau;
            z[i] + dt * v[i] + 0.5 * dt * dt * jvp
        })
        .collect())
}

/// Reusable work buffers for fast substeps (one set per trajectory).
#[derive(Debug, Clone)]
pub struct FastScratch {
    v1: Vec<f64>,
    v2: Vec<f64>,
    ytmp: Vec<f64>,
}

impl FastScratch {
    pub fn new(dim: usize) -> Self {
        Self { v1: vec![0.0; dim], v2: vec![0.0; dim], ytmp: vec![0.0; dim] }
    }
}

/// One substep of the fast subsystem in unscaled time with effective step
/// `eta = kappa/K`. Writing the update in terms of `eta` (rather than
/// `dt/K` times `1/eps^2`) keeps the fast map bitwise independent of `eps`.
#[inline]
pub fn fast_substep(
    kind: StepperKind,
    fast: &FastSystem,
    y: &mut [f64],
    eta: f64,
    tau: f64,
    scratch: &mut FastScratch,
) {
    let n = y.len();
    match kind {
        StepperKind::Euler => {
            fast.eval(y, &mut scratch.v1);
            for i in 0..n {
                y[i] += eta * scratch.v1[i];
            }
        }
        StepperKind::Heun => {
            fast.eval(y, &mut scratch.v1);
            for i in 0..n {
                scratch.ytmp[i] = y[i] + eta * scratch.v1[i];
            }
            fast.eval(&scratch.ytmp, &mut scratch.v2);
            for i in 0..n {
                y[i] += 0.5 * eta * (scratch.v1[i] + scratch.v2[i]);
            }
        }
        StepperKind::Taylor2 => {
            fast.eval(y, &mut scratch.v1);
            for i in 0..n {
                scratch.ytmp[i] = y[i] + tau * scratch.v1[i];
            }
            fast.eval(&scratch.ytmp, &mut scratch.v2);
            for i in 0..n {
                let jvp = (scratch.v2[i] - scratch.v1[i]) / tau;
                y[i] += eta * scratch.v1[i] + 0.5 * eta * eta * jvp;
            }
        }
    }
}

/// The discrete fast map: repeated unscaled substeps of a fixed rule.
/// This is the map whose invariant measure all statistical estimators
/// sample, and the same code path the multi-scale driver uses.
#[derive(Debug, Clone, Copy)]
pub struct FastMap<'a> {
    pub fast: &'a FastSystem,
    pub kind: StepperKind,
    /// Unscaled substep, `kappa/K` in production runs.
    pub eta: f64,
    pub tau: f64,
}

impl<'a> FastMap<'a> {
    pub fn new(fast: &'a FastSystem, kind: StepperKind, eta: f64) -> Self {
        Self { fast, kind, eta, tau: f64::EPSILON.sqrt() }
    }

    /// Advance `y` by `n` substeps in place.
    pub fn advance(&self, y: &mut [f64], n: usize, scratch: &mut FastScratch) {
        for _ in 0..n {
            fast_substep(self.kind, self.fast, y, self.eta, self.tau, scratch);
        }
    }
}

/// Trajectory output of [`integrate`]: uniformly spaced samples plus the
/// exact final state.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Sample times, spaced `record_every * dt` apart, starting at 0.
    pub times: Vec<f64>,
    pub slow_values: Vec<f64>,
    pub fast_values: Option<Vec<Vec<f64>>>,
    pub clamp_count: u64,
    /// Slow state after the last step (also present in `slow_values` when
    /// `record_every` divides the step count).
    pub final_x: f64,
    pub final_y: Vec<f64>,
    /// `n_steps * dt`; equals the requested end time up to rounding to a
    /// whole number of steps.
    pub realized_t_end: f64,
}

/// Driver state for advancing one multi-scale trajectory.
pub struct MultiScaleStepper<'a> {
    system: &'a MultiScaleSystem,
    kind: StepperKind,
    policy: StepPolicy,
    scratch: FastScratch,
    clamp_count: u64,
}

impl<'a> MultiScaleStepper<'a> {
    pub fn new(system: &'a MultiScaleSystem, kind: StepperKind, policy: StepPolicy) -> Self {
        let scratch = FastScratch::new(system.fast.dim());
        Self { system, kind, policy, scratch, clamp_count: 0 }
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    /// Guard an intermediate or final slow value with the positivity
    /// policy. Returns the admissible value and whether it was clamped.
    fn guard(&self, x: f64, step_index: usize) -> Result<(f64, bool)> {
        if x >= 0.0 {
            return Ok((x, false));
        }
        match self.policy.positivity {
            PositivityPolicy::ClampToZero => Ok((0.0, true)),
            PositivityPolicy::Reject => Err(Error::Step {
                index: step_index,
                reason: format!("slow state left [0, inf): x = {x}"),
            }),
        }
    }

    /// Advance `(x, y)` by one slow step (and `K` fast substeps) in place.
    ///
    /// The fast substeps use the same one-step rule as the slow update.
    /// Euler and Taylor-2 evaluate the slow field at the step-entry fast
    /// state `y_n`; Heun evaluates its second stage at `y_{n+1}`, which is
    /// why the fast substeps run between the two slow stages.
    pub fn step(&mut self, x: &mut f64, y: &mut [f64], step_index: usize) -> Result<()> {
        let dt = self.policy.dt_slow();
        let eta = self.policy.eta();
        let tau = self.policy.tau;
        let mut clamped = false;

        let x_new = match self.kind {
            StepperKind::Euler => {
                let v = self.system.slow_rhs(*x, y);
                for _ in 0..self.policy.substeps {
                    fast_substep(self.kind, &self.system.fast, y, eta, tau, &mut self.scratch);
                }
                *x + dt * v
            }
            StepperKind::Heun => {
                let v1 = self.system.slow_rhs(*x, y);
                for _ in 0..self.policy.substeps {
                    fast_substep(self.kind, &self.system.fast, y, eta, tau, &mut self.scratch);
                }
                let (pred, c) = self.guard(*x + dt * v1, step_index)?;
                clamped |= c;
                let v2 = self.system.slow_rhs(pred, y);
                *x + 0.5 * dt * (v1 + v2)
            }
            StepperKind::Taylor2 => {
                let v = self.system.slow_rhs(*x, y);
                let (probe, c) = self.guard(*x + tau * v, step_index)?;
                clamped |= c;
                let jvp = (self.system.slow_rhs(probe, y) - v) / tau;
                for _ in 0..self.policy.substeps {
                    fast_substep(self.kind, &self.system.fast, y, eta, tau, &mut self.scratch);
                }
                *x + dt * v + 0.5 * dt * dt * jvp
            }
        };

        let (x_new, c) = self.guard(x_new, step_index)?;
        clamped |= c;
        if clamped {
            self.clamp_count += 1;
        }
        *x = x_new;
        Ok(())
    }
}

/// One multi-scale step: K fast substeps plus one slow step. Returns the
/// new `(x, y)` and the number of positivity clamps (0 or 1).
pub fn multiscale_step(
    system: &MultiScaleSystem,
    kind: StepperKind,
    policy: StepPolicy,
    x: f64,
    y: &[f64],
) -> Result<(f64, Vec<f64>, u64)> {
    let mut stepper = MultiScaleStepper::new(system, kind, policy);
    let mut x = x;
    let mut y = y.to_vec();
    stepper.step(&mut x, &mut y, 0)?;
    Ok((x, y, stepper.clamp_count()))
}

/// Integrate the multi-scale system over `[0, t_end]`, recording the slow
/// state every `record_every` steps (index 0 included).
///
/// The step count is `round(t_end / dt)` and the realized end time
/// `n_steps * dt` is reported in the record.
pub fn integrate(
    system: &MultiScaleSystem,
    kind: StepperKind,
    policy: StepPolicy,
    x0: f64,
    y0: &[f64],
    t_end: f64,
    record_every: usize,
    record_fast: bool,
) -> Result<TrajectoryRecord> {
    if t_end <= 0.0 {
        return Err(Error::Config(format!("t_end must be positive, got {t_end}")));
    }
    if record_every == 0 {
        return Err(Error::Config("record_every must be >= 1".into()));
    }
    let dt = policy.dt_slow();
    let n_steps = (t_end / dt).round() as usize;
    if n_steps == 0 {
        return Err(Error::Config(format!(
            "t_end = {t_end} is below half a slow step (dt = {dt})"
        )));
    }

    let mut stepper = MultiScaleStepper::new(system, kind, policy);
    let mut x = x0;
    let mut y = y0.to_vec();

    let n_records = n_steps / record_every + 1;
    let mut times = Vec::with_capacity(n_records);
    let mut slow_values = Vec::with_capacity(n_records);
    let mut fast_values = record_fast.then(|| Vec::with_capacity(n_records));

    let mut record = |step: usize, x: f64, y: &[f64]| {
        times.push(step as f64 * dt);
        slow_values.push(x);
        if let Some(fv) = fast_values.as_mut() {
            fv.push(y.to_vec());
        }
    };
    record(0, x, &y);

    for step in 1..=n_steps {
        stepper.step(&mut x, &mut y, step - 1)?;
        if step % record_every == 0 {
            record(step, x, &y);
        }
    }

    Ok(TrajectoryRecord {
        times,
        slow_values,
        fast_values,
        clamp_count: stepper.clamp_count(),
        final_x: x,
        final_y: y,
        realized_t_end: n_steps as f64 * dt,
    })
}
