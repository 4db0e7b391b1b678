//! Truncated modified (backward-error) vector fields.
//!
//! A one-step method of order `p` applied to `dz/dt = v(z)` is a higher
//! order approximation to a perturbed field
//! `v~(z) = v(z) + dt v1(z) + dt^2 v2(z) + ...`. Truncating at the first
//! nonvanishing correction gives:
//!
//! - Euler:    `v - dt/2 v'v`                       (order-1 correction)
//! - Heun:     `v + dt^2/12 (v''(v,v) - 2 v'v'v)`   (order-2 correction)
//! - Taylor-2: `v - dt^2/6  (v''(v,v) + v'v'v)`     (order-2 correction)
//!
//! Integrating the stepper against its own modified field should show an
//! elevated convergence order (2 for Euler, 3 for Heun and Taylor-2),
//! which [`elevated_order_check`] measures.

use std::sync::Arc;

use crate::integrators::{euler_step, heun_step, taylor2_step, StepperKind};
use crate::{Error, Result};

/// A shareable autonomous vector field `z -> v(z)` written into an output
/// slice.
pub type Field = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Wrap a closure as a [`Field`].
pub fn field(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Field {
    Arc::new(f)
}

/// Produces directional derivatives of a field: the Jacobian-vector
/// product `v'(z) w` and the second-derivative contraction `v''(z)(w, w)`.
pub enum DerivativeEngine {
    /// Central differences along the (normalized) direction. `fd_first`
    /// and `fd_second` are relative steps, scaled by `1 + |z|`.
    CentralFd { fd_first: f64, fd_second: f64 },
    /// User-supplied exact derivatives.
    Analytic {
        jvp: Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
        second_contraction: Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    },
}

impl DerivativeEngine {
    /// Central differences with the usual optimal step exponents:
    /// `eps^(1/3)` for first and `eps^(1/4)` for second derivatives.
    pub fn central_fd() -> Self {
        DerivativeEngine::CentralFd {
            fd_first: f64::EPSILON.cbrt(),
            fd_second: f64::EPSILON.powf(0.25),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DerivativeEngine::CentralFd { fd_first, fd_second } => {
                if *fd_first > 0.0 && *fd_second > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "finite-difference steps must be positive, got {fd_first}, {fd_second}"
                    )))
                }
            }
            DerivativeEngine::Analytic { .. } => Ok(()),
        }
    }

    /// `v'(z) w`.
    pub fn jvp(&self, v: &Field, z: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            DerivativeEngine::Analytic { jvp, .. } => jvp(z, w),
            DerivativeEngine::CentralFd { fd_first, .. } => {
                let wn = norm(w);
                if wn == 0.0 {
                    return vec![0.0; z.len()];
                }
                let delta = fd_first * (1.0 + norm(z));
                let step = delta / wn;
                let plus = shifted_eval(v, z, w, step);
                let minus = shifted_eval(v, z, w, -step);
                plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * step)).collect()
            }
        }
    }

    /// `v''(z)(w, w)`, evaluated as a directional second difference along
    /// `w`; only the contraction is ever needed, never the full 3-tensor.
    pub fn second_contraction(&self, v: &Field, z: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            DerivativeEngine::Analytic { second_contraction, .. } => second_contraction(z, w),
            DerivativeEngine::CentralFd { fd_second, .. } => {
                let wn = norm(w);
                if wn == 0.0 {
                    return vec![0.0; z.len()];
                }
                let delta = fd_second * (1.0 + norm(z));
                let step = delta / wn;
                let plus = shifted_eval(v, z, w, step);
                let minus = shifted_eval(v, z, w, -step);
                let mut center = vec![0.0; z.len()];
                v(z, &mut center);
                (0..z.len())
                    .map(|i| (plus[i] - 2.0 * center[i] + minus[i]) / (step * step))
                    .collect()
            }
        }
    }
}

impl std::fmt::Debug for DerivativeEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DerivativeEngine::CentralFd { fd_first, fd_second } => f
                .debug_struct("CentralFd")
                .field("fd_first", fd_first)
                .field("fd_second", fd_second)
                .finish(),
            DerivativeEngine::Analytic { .. } => f.write_str("Analytic { .. }"),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shifted_eval(v: &Field, z: &[f64], dir: &[f64], step: f64) -> Vec<f64> {
    let shifted: Vec<f64> = z.iter().zip(dir).map(|(zi, di)| zi + step * di).collect();
    let mut out = vec![0.0; z.len()];
    v(&shifted, &mut out);
    out
}

/// Which first-nonvanishing correction a [`ModifiedField`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CorrectionKind {
    /// `-1/2 v'v`, order 1 (Euler's modified equation).
    Euler,
    /// `+1/2 v'v`, order 1 (the corrected field whose Euler map is the
    /// second-order Taylor method).
    EulerCorrected,
    /// `1/12 v''(v,v) - 1/6 v'v'v`, order 2.
    Heun,
    /// `-1/6 (v''(v,v) + v'v'v)`, order 2.
    Taylor2,
}

/// A base field plus its truncated backward-error correction:
/// `eval = v(z) + dt^p * correction(z)`.
pub struct ModifiedField {
    v: Field,
    engine: DerivativeEngine,
    kind: CorrectionKind,
    pub dt: f64,
}

impl ModifiedField {
    pub fn order_of_correction(&self) -> u32 {
        match self.kind {
            CorrectionKind::Euler | CorrectionKind::EulerCorrected => 1,
            CorrectionKind::Heun | CorrectionKind::Taylor2 => 2,
        }
    }

    /// The base field `v(z)`.
    pub fn base(&self, z: &[f64], out: &mut [f64]) {
        (self.v)(z, out)
    }

    /// The bare correction term (without the `dt^p` factor).
    pub fn correction(&self, z: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; z.len()];
        (self.v)(z, &mut w);
        match self.kind {
            CorrectionKind::Euler => {
                scale(self.engine.jvp(&self.v, z, &w), -0.5)
            }
            CorrectionKind::EulerCorrected => {
                scale(self.engine.jvp(&self.v, z, &w), 0.5)
            }
            CorrectionKind::Heun => {
                let second = self.engine.second_contraction(&self.v, z, &w);
                let vv = self.engine.jvp(&self.v, z, &w);
                let vvv = self.engine.jvp(&self.v, z, &vv);
                second
                    .iter()
                    .zip(&vvv)
                    .map(|(s, t)| s / 12.0 - t / 6.0)
                    .collect()
            }
            CorrectionKind::Taylor2 => {
                let second = self.engine.second_contraction(&self.v, z, &w);
                let vv = self.engine.jvp(&self.v, z, &w);
                let vvv = self.engine.jvp(&self.v, z, &vv);
                second
                    .iter()
                    .zip(&vvv)
                    .map(|(s, t)| -(s + t) / 6.0)
                    .collect()
            }
        }
    }

    /// `v(z) + dt^p correction(z)`.
    pub fn eval(&self, z: &[f64], out: &mut [f64]) {
        (self.v)(z, out);
        let factor = self.dt.powi(self.order_of_correction() as i32);
        for (o, c) in out.iter_mut().zip(self.correction(z)) {
            *o += factor * c;
        }
    }
}

impl std::fmt::Debug for ModifiedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModifiedField")
            .field("kind", &self.kind)
            .field("dt", &self.dt)
            .finish()
    }
}

fn scale(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| s * x).collect()
}

/// Modified equation of Euler's method: `v - dt/2 v'v`.
pub fn modified_field_euler(v: Field, dt: f64, engine: DerivativeEngine) -> ModifiedField {
    ModifiedField { v, engine, kind: CorrectionKind::Euler, dt }
}

/// Modified equation of Heun's method:
/// `v + dt^2 (1/12 v''(v,v) - 1/6 v'v'v)`.
pub fn modified_field_heun(v: Field, dt: f64, engine: DerivativeEngine) -> ModifiedField {
    ModifiedField { v, engine, kind: CorrectionKind::Heun, dt }
}

/// Modified equation of the second-order Taylor method:
/// `v - dt^2/6 (v''(v,v) + v'v'v)`.
pub fn modified_field_taylor2(v: Field, dt: f64, engine: DerivativeEngine) -> ModifiedField {
    ModifiedField { v, engine, kind: CorrectionKind::Taylor2, dt }
}

/// The corrected field `v + dt/2 v'v`; applying Euler's method to it
/// reproduces the second-order Taylor step on `v`.
pub fn corrected_field_euler(v: Field, dt: f64, engine: DerivativeEngine) -> ModifiedField {
    ModifiedField { v, engine, kind: CorrectionKind::EulerCorrected, dt }
}

/// Which reference the stepper's output is measured against in
/// [`elevated_order_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderTarget {
    /// The stepper's own modified equation: expect order p + 1.
    ModifiedEquation,
    /// The plain field: expect the stepper's nominal order.
    PlainField,
}

/// Result of a convergence-order measurement.
#[derive(Debug, Clone)]
pub struct OrderCheck {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log(error)` against `log(dt)`.
    pub slope: f64,
}

/// Measure the convergence order of `kind` against either its own modified
/// equation or the plain field, integrating `dz/dt = v(z)` from `z0` over
/// `[0, t_end]` for each step size in `dt_list` (decreasing, at least 3
/// entries).
///
/// The reference solution is produced by the second-order Taylor method on
/// the target field at 1000x finer steps, which keeps the harness
/// field-agnostic. A non-monotone error sequence is reported as a
/// diagnostic failure carrying the raw error table.
pub fn elevated_order_check(
    kind: StepperKind,
    v: Field,
    z0: &[f64],
    t_end: f64,
    dt_list: &[f64],
    target: OrderTarget,
) -> Result<OrderCheck> {
    if dt_list.len() < 3 {
        return Err(Error::Config("dt_list needs at least 3 entries".into()));
    }
    if dt_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("dt_list must be strictly decreasing".into()));
    }

    let tau = f64::EPSILON.sqrt();
    let mut errors = Vec::with_capacity(dt_list.len());

    for &dt in dt_list {
        // stepper run on the plain field
        let n = (t_end / dt).round() as usize;
        let mut z = z0.to_vec();
        for _ in 0..n {
            z = match kind {
                StepperKind::Euler => euler_step(|y, dy| v(y, dy), &z, dt),
                StepperKind::Heun => heun_step(|y, dy| v(y, dy), &z, dt),
                StepperKind::Taylor2 => taylor2_step(|y, dy| v(y, dy), &z, dt, tau)?,
            };
        }

        // high-resolution reference on the target field
        let modified = match target {
            OrderTarget::ModifiedEquation => Some(match kind {
                StepperKind::Euler => {
                    modified_field_euler(v.clone(), dt, DerivativeEngine::central_fd())
                }
                StepperKind::Heun => {
                    modified_field_heun(v.clone(), dt, DerivativeEngine::central_fd())
                }
                StepperKind::Taylor2 => {
                    modified_field_taylor2(v.clone(), dt, DerivativeEngine::central_fd())
                }
            }),
            OrderTarget::PlainField => None,
        };
        let ref_rhs = |y: &[f64], dy: &mut [f64]| match &modified {
            Some(m) => m.eval(y, dy),
            None => v(y, dy),
        };
        let dt_ref = dt / 1000.0;
        let n_ref = (t_end / dt_ref).round() as usize;
        let mut zr = z0.to_vec();
        for _ in 0..n_ref {
            zr = taylor2_step(ref_rhs, &zr, dt_ref, tau)?;
        }

        let err = z
            .iter()
            .zip(&zr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        errors.push(err);
    }

    if errors.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Estimator(format!(
            "non-monotone error sequence for {kind}: dts {dt_list:?}, errors {errors:?}"
        )));
    }

    let slope = least_squares_slope(
        &dt_list.iter().map(|d| d.ln()).collect::<Vec<_>>(),
        &errors.iter().map(|e| e.ln()).collect::<Vec<_>>(),
    );
    Ok(OrderCheck { dts: dt_list.to_vec(), errors, slope })
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear(a: f64) -> Field {
        field(move |z, dz| dz[0] = a * z[0])
    }

    fn quadratic() -> Field {
        field(|z, dz| dz[0] = z[0] * z[0])
    }

    #[test]
    fn euler_modified_field_linear_closed_form() {
        // v = A z: correction -A^2 z / 2
        let (a, dt, z) = (1.7, 0.05, 3.0);
        let m = modified_field_euler(linear(a), dt, DerivativeEngine::central_fd());
        let mut out = [0.0];
        m.eval(&[z], &mut out);
        assert_relative_eq!(out[0], a * z - 0.5 * dt * a * a * z, epsilon = 1e-9);
        assert_eq!(m.order_of_correction(), 1);
    }

    #[test]
    fn euler_modified_field_constant_is_exact() {
        let m = modified_field_euler(
            field(|_, dz| dz[0] = 4.2),
            0.1,
            DerivativeEngine::central_fd(),
        );
        let mut out = [0.0];
        m.eval(&[9.0], &mut out);
        assert_relative_eq!(out[0], 4.2, epsilon = 1e-12);
    }

    #[test]
    fn euler_modified_field_quadratic_hand_value() {
        // v = -z^2 at z = 2: v'v = 16, correction -8
        let m = modified_field_euler(
            field(|z, dz| dz[0] = -z[0] * z[0]),
            0.1,
            DerivativeEngine::central_fd(),
        );
        assert_relative_eq!(m.correction(&[2.0])[0], -8.0, epsilon = 1e-6, max_relative = 1e-6);
    }

    #[test]
    fn heun_modified_field_values() {
        // linear: v'' = 0, v'v'v = A^3 z -> correction -A^3 z / 6
        let (a, z) = (1.3, 2.0);
        let m = modified_field_heun(linear(a), 0.05, DerivativeEngine::central_fd());
        assert_relative_eq!(m.correction(&[z])[0], -a * a * a * z / 6.0, epsilon = 1e-6);
        assert_eq!(m.order_of_correction(), 2);

        // constant field: zero correction
        let m = modified_field_heun(
            field(|_, dz| dz[0] = -0.7),
            0.05,
            DerivativeEngine::central_fd(),
        );
        assert!(m.correction(&[5.0])[0].abs() < 1e-9);

        // v = z^2 at z = 1: v''(v,v) = 2, v'v'v = 4 -> 2/12 - 4/6 = -1/2
        let m = modified_field_heun(quadratic(), 0.05, DerivativeEngine::central_fd());
        assert_relative_eq!(m.correction(&[1.0])[0], -0.5, epsilon = 1e-5);
    }

    #[test]
    fn taylor2_modified_field_values() {
        let (a, z) = (1.3, 2.0);
        let m = modified_field_taylor2(linear(a), 0.05, DerivativeEngine::central_fd());
        assert_relative_eq!(m.correction(&[z])[0], -a * a * a * z / 6.0, epsilon = 1e-6);

        // v = z^2 at z = 1: -(2 + 4)/6 = -1
        let m = modified_field_taylor2(quadratic(), 0.05, DerivativeEngine::central_fd());
        assert_relative_eq!(m.correction(&[1.0])[0], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn analytic_engine_matches_central_fd() {
        // v = -z^2: v'w = -2 z w, v''(w,w) = -2 w^2
        let v = field(|z, dz| dz[0] = -z[0] * z[0]);
        let analytic = DerivativeEngine::Analytic {
            jvp: Box::new(|z, w| vec![-2.0 * z[0] * w[0]]),
            second_contraction: Box::new(|_, w| vec![-2.0 * w[0] * w[0]]),
        };
        let fd = DerivativeEngine::central_fd();
        for z in [[0.5], [2.0], [-3.0]] {
            let w = [-z[0] * z[0]];
            let j_exact = analytic.jvp(&v, &z, &w)[0];
            let j_fd = fd.jvp(&v, &z, &w)[0];
            assert_relative_eq!(j_fd, j_exact, max_relative = 1e-5);
            let s_exact = analytic.second_contraction(&v, &z, &w)[0];
            let s_fd = fd.second_contraction(&v, &z, &w)[0];
            assert_relative_eq!(s_fd, s_exact, max_relative = 1e-3);
        }
    }

    #[test]
    fn euler_on_corrected_field_is_taylor2() {
        let v = field(|z, dz| dz[0] = -z[0] * z[0]);
        let analytic = DerivativeEngine::Analytic {
            jvp: Box::new(|z, w| vec![-2.0 * z[0] * w[0]]),
            second_contraction: Box::new(|_, w| vec![-2.0 * w[0] * w[0]]),
        };
        let dt = 0.25;
        let corrected = corrected_field_euler(v, dt, analytic);
        let stepped = euler_step(|z, dz| corrected.eval(z, dz), &[2.0], dt);
        // matches the hand value of the Taylor-2 step: 2 - 1 + 0.03125*16
        assert_relative_eq!(stepped[0], 1.5, epsilon = 1e-13);
    }

    #[test]
    fn elevated_orders_on_cubic_field() {
        let v = field(|z, dz| dz[0] = z[0] - z[0] * z[0] * z[0]);
        let dts: Vec<f64> = (4..=9).map(|k| 0.5f64.powi(k)).collect();

        let euler =
            elevated_order_check(StepperKind::Euler, v.clone(), &[0.5], 1.0, &dts, OrderTarget::ModifiedEquation)
                .unwrap();
        assert!((euler.slope - 2.0).abs() <= 0.2, "euler slope {}", euler.slope);

        let heun =
            elevated_order_check(StepperKind::Heun, v.clone(), &[0.5], 1.0, &dts, OrderTarget::ModifiedEquation)
                .unwrap();
        assert!((heun.slope - 3.0).abs() <= 0.3, "heun slope {}", heun.slope);

        let plain =
            elevated_order_check(StepperKind::Euler, v, &[0.5], 1.0, &dts, OrderTarget::PlainField)
                .unwrap();
        assert!((plain.slope - 1.0).abs() <= 0.1, "plain euler slope {}", plain.slope);
    }

    #[test]
    fn order_check_input_validation() {
        let v = field(|z, dz| dz[0] = z[0]);
        assert!(elevated_order_check(
            StepperKind::Euler,
            v.clone(),
            &[1.0],
            1.0,
            &[0.1, 0.05],
            OrderTarget::PlainField
        )
        .is_err());
        assert!(elevated_order_check(
            StepperKind::Euler,
            v,
            &[1.0],
            1.0,
            &[0.1, 0.2, 0.05],
            OrderTarget::PlainField
        )
        .is_err());
    }
}
