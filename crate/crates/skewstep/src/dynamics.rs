//! Skew-product fast-slow systems and the concrete Rossler/CIR instance.
//!
//! The systems treated here have the form
//!
//! ```text
//! dx/dt = (1/eps)  h(x) f0(y) + f(x, y),     x scalar
//! dy/dt = (1/eps^2) g(y),                    y in R^l
//! ```
//!
//! where the fast dynamics does not feel the slow variable (skew product).
//! All vector fields are stored **unscaled**: the `1/eps` and `1/eps^2`
//! factors are applied by the steppers in [`crate::integrators`], so a
//! single [`FastSystem`] serves both scaled production runs and the
//! unscaled statistical estimation in [`crate::homogenization`].
//!
//! The concrete instance is the square-root slow system
//! `dx/dt = (a/eps) sqrt(x) y + b (c - x) y^2` driven by `y = z2 + z3` of a
//! chaotic Rossler flow; its homogenized limit is a Cox-Ingersoll-Ross SDE.

use crate::{Error, Result};

/// Parameters of the Rossler vector field. The defaults put the system in
/// the slowly decorrelating chaotic regime used throughout this crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RosslerParams {
    pub r: f64,
    pub s: f64,
    pub u: f64,
}

impl Default for RosslerParams {
    fn default() -> Self {
        Self { r: 0.25, s: 0.25, u: 7.0 }
    }
}

/// Parameters (a, b, c) of the square-root slow system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirSlowParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for CirSlowParams {
    fn default() -> Self {
        Self { a: 0.1, b: 0.005, c: 0.75 }
    }
}

impl CirSlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.b > 0.0 && self.c > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "slow parameters must be positive, got a={}, b={}, c={}",
                self.a, self.b, self.c
            )))
        }
    }
}

/// Unscaled Rossler vector field at `state = (z1, z2, z3)`.
///
/// Returns `(-z2 - z3, z1 + r z2, s + (z1 - u) z3)`.
pub fn rossler_rhs(state: [f64; 3], params: RosslerParams) -> Result<[f64; 3]> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("non-finite fast state {state:?}")));
    }
    Ok(rossler_rhs_raw(state, params))
}

#[inline]
fn rossler_rhs_raw(z: [f64; 3], p: RosslerParams) -> [f64; 3] {
    [-z[1] - z[2], z[0] + p.r * z[1], p.s + (z[0] - p.u) * z[2]]
}

/// The scalar observable `y = z2 + z3` that drives the slow dynamics.
pub fn rossler_observable(state: &[f64]) -> f64 {
    state[1] + state[2]
}

/// Slow right-hand side `(a/eps) sqrt(x) y + b (c - x) y^2` with `y` the
/// value of the driving observable.
///
/// The caller is responsible for keeping `x >= 0` (see the positivity
/// policy in [`crate::integrators`]); negative `x` is a domain error.
pub fn cir_slow_rhs(x: f64, y_obs: f64, params: CirSlowParams, epsilon: f64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::Domain(format!("slow state x={x} outside [0, inf)")));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    // Same operation order as the composed MultiScaleSystem slow field.
    Ok(x.sqrt() * (params.a * y_obs) / epsilon + params.b * (params.c - x) * (y_obs * y_obs))
}

/// A fast subsystem: an unscaled autonomous vector field on `R^dim`.
///
/// `rhs` must be a pure function of the state; evaluating it twice at the
/// same point yields bitwise-identical results.
pub struct FastSystem {
    dim: usize,
    rhs: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl FastSystem {
    pub fn new(dim: usize, rhs: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { dim, rhs: Box::new(rhs) }
    }

    /// The Rossler system in unscaled time.
    pub fn rossler(params: RosslerParams) -> Self {
        Self::new(3, move |y, dy| {
            let out = rossler_rhs_raw([y[0], y[1], y[2]], params);
            dy.copy_from_slice(&out);
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluate the unscaled vector field `g(y)` into `dy`.
    #[inline]
    pub fn eval(&self, y: &[f64], dy: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim);
        debug_assert_eq!(dy.len(), self.dim);
        (self.rhs)(y, dy)
    }
}

impl std::fmt::Debug for FastSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FastSystem").field("dim", &self.dim).finish()
    }
}

/// The slow-side coupling functions: multiplicative factor `h`, its
/// analytic derivative, the centered fast observable `f0`, and the
/// remainder `f`.
pub struct SlowCoupling {
    pub h: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub h_prime: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub f0: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub f: Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
}

impl SlowCoupling {
    /// The square-root coupling `h(x) = sqrt(x)`, `f0(y) = a (z2 + z3)`,
    /// `f(x, y) = b (c - x) (z2 + z3)^2`.
    ///
    /// `h'(x) = 1/(2 sqrt(x))` is singular at `x = 0`; its domain is
    /// `x > 0`.
    pub fn cir(params: CirSlowParams) -> Self {
        let CirSlowParams { a, b, c } = params;
        Self {
            h: Box::new(|x| x.sqrt()),
            h_prime: Box::new(|x| 0.5 / x.sqrt()),
            f0: Box::new(move |y| a * (y[1] + y[2])),
            f: Box::new(move |x, y| {
                let obs = y[1] + y[2];
                b * (c - x) * (obs * obs)
            }),
        }
    }

    /// Max relative mismatch between `h_prime` and a central finite
    /// difference of `h` over the given sample points.
    pub fn h_prime_fd_error(&self, xs: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for &x in xs {
            let step = f64::EPSILON.cbrt() * x.abs().max(1.0);
            let fd = ((self.h)(x + step) - (self.h)(x - step)) / (2.0 * step);
            let exact = (self.h_prime)(x);
            let err = (exact - fd).abs() / exact.abs().max(1.0);
            worst = worst.max(err);
        }
        worst
    }
}

impl std::fmt::Debug for SlowCoupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SlowCoupling { .. }")
    }
}

/// The full skew-product system bundle. The slow variable is scalar; the
/// field is kept explicit so a later vector-valued generalization is a
/// data change rather than a redesign.
#[derive(Debug)]
pub struct MultiScaleSystem {
    pub fast: FastSystem,
    pub coupling: SlowCoupling,
    pub epsilon: f64,
    pub slow_dimension: usize,
}

impl MultiScaleSystem {
    pub fn new(fast: FastSystem, coupling: SlowCoupling, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { fast, coupling, epsilon, slow_dimension: 1 })
    }

    /// The Rossler-driven square-root system of the headline experiment.
    pub fn cir_rossler(
        slow: CirSlowParams,
        rossler: RosslerParams,
        epsilon: f64,
    ) -> Result<Self> {
        slow.validate()?;
        Self::new(FastSystem::rossler(rossler), SlowCoupling::cir(slow), epsilon)
    }

    /// The scaled slow field `(1/eps) h(x) f0(y) + f(x, y)`.
    #[inline]
    pub fn slow_rhs(&self, x: f64, y: &[f64]) -> f64 {
        (self.coupling.h)(x) * (self.coupling.f0)(y) / self.epsilon + (self.coupling.f)(x, y)
    }
}
