//! Kinematic car model and its one-step RK4 discretization.
//!
//! The continuous model tracks the rear-axle position, yaw, speed and
//! steering angle; the controls are acceleration and steering rate. The
//! discrete map `f(x, u) = x + h Phi(x, u, h)` is one classical Runge-Kutta
//! step with the control held constant over the interval.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ad::{HyperDual, Scalar};

pub const STATE_DIM: usize = 5;
pub const CONTROL_DIM: usize = 2;

/// Steering angles at or beyond this magnitude are rejected (tan singularity).
pub const MAX_STEERING_MAGNITUDE: f64 = 1.4;

/// Jacobians with a condition estimate above this are singular to working precision.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("model evaluation left its domain: {0}")]
    Domain(String),
    #[error("step Jacobian is singular (condition estimate {condition:e})")]
    AssumptionViolated { condition: f64 },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarState {
    pub x_pos: f64,
    pub y_pos: f64,
    pub psi: f64,
    pub v: f64,
    pub delta: f64,
}

impl CarState {
    pub fn new(x_pos: f64, y_pos: f64, psi: f64, v: f64, delta: f64) -> Self {
        Self {
            x_pos,
            y_pos,
            psi,
            v,
            delta,
        }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.x_pos, self.y_pos, self.psi, self.v, self.delta]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }

    pub fn from_slice(s: &[f64]) -> Result<Self, DynamicsError> {
        if s.len() != STATE_DIM {
            return Err(DynamicsError::Dimension {
                expected: STATE_DIM,
                got: s.len(),
            });
        }
        Ok(Self::new(s[0], s[1], s[2], s[3], s[4]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct CarControl {
    /// Acceleration [m/s^2].
    pub u1: f64,
    /// Steering rate [rad/s].
    pub u2: f64,
}

impl CarControl {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn to_array(self) -> [f64; CONTROL_DIM] {
        [self.u1, self.u2]
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }

    pub fn from_slice(s: &[f64]) -> Result<Self, DynamicsError> {
        if s.len() != CONTROL_DIM {
            return Err(DynamicsError::Dimension {
                expected: CONTROL_DIM,
                got: s.len(),
            });
        }
        Ok(Self::new(s[0], s[1]))
    }
}

/// Time derivative of a [`CarState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CarStateDerivative {
    pub x_dot: f64,
    pub y_dot: f64,
    pub psi_dot: f64,
    pub v_dot: f64,
    pub delta_dot: f64,
}

impl CarStateDerivative {
    pub fn to_array(self) -> [f64; STATE_DIM] {
        [
            self.x_dot,
            self.y_dot,
            self.psi_dot,
            self.v_dot,
            self.delta_dot,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CarParams {
    /// Wheelbase [m].
    pub wheelbase_l: f64,
    /// Sampling time [s].
    pub step_h: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            wheelbase_l: 4.0,
            step_h: 0.3,
        }
    }
}

impl CarParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.wheelbase_l > 0.0 && self.wheelbase_l.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!(
                "wheelbase must be positive, got {}",
                self.wheelbase_l
            )));
        }
        // h = 0 is accepted: it degenerates f to the identity map, which the
        // sensitivity tests use as a stub.
        if !(self.step_h >= 0.0 && self.step_h.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!(
                "step size must be non-negative, got {}",
                self.step_h
            )));
        }
        Ok(())
    }
}

fn rhs_generic<T: Scalar>(
    x: &[T; STATE_DIM],
    u: &[T; CONTROL_DIM],
    wheelbase: f64,
) -> Result<[T; STATE_DIM], DynamicsError> {
    let [_, _, psi, v, delta] = *x;
    if !(delta.value().abs() < MAX_STEERING_MAGNITUDE) {
        return Err(DynamicsError::Domain(format!(
            "steering angle {} outside (-{MAX_STEERING_MAGNITUDE}, {MAX_STEERING_MAGNITUDE})",
            delta.value()
        )));
    }
    Ok([
        v * psi.cos(),
        v * psi.sin(),
        (v * delta.tan()).scale(1.0 / wheelbase),
        u[0],
        u[1],
    ])
}

fn axpy<T: Scalar>(x: &[T; STATE_DIM], k: &[T; STATE_DIM], a: f64) -> [T; STATE_DIM] {
    std::array::from_fn(|i| x[i] + k[i].scale(a))
}

fn rk4_generic<T: Scalar>(
    x: &[T; STATE_DIM],
    u: &[T; CONTROL_DIM],
    p: &CarParams,
) -> Result<[T; STATE_DIM], DynamicsError> {
    let h = p.step_h;
    let l = p.wheelbase_l;
    let k1 = rhs_generic(x, u, l)?;
    let k2 = rhs_generic(&axpy(x, &k1, 0.5 * h), u, l)?;
    let k3 = rhs_generic(&axpy(x, &k2, 0.5 * h), u, l)?;
    let k4 = rhs_generic(&axpy(x, &k3, h), u, l)?;
    Ok(std::array::from_fn(|i| {
        x[i] + (k1[i] + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i]).scale(h / 6.0)
    }))
}

fn check_finite(vals: &[f64], what: &str) -> Result<(), DynamicsError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::Domain(format!("non-finite {what}")))
    }
}

/// Right-hand side of the continuous kinematic model.
pub fn ode_rhs(
    s: &CarState,
    c: &CarControl,
    p: &CarParams,
) -> Result<CarStateDerivative, DynamicsError> {
    check_finite(&s.to_array(), "state")?;
    check_finite(&c.to_array(), "control")?;
    let d = rhs_generic(&s.to_array(), &c.to_array(), p.wheelbase_l)?;
    check_finite(&d, "state derivative")?;
    Ok(CarStateDerivative {
        x_dot: d[0],
        y_dot: d[1],
        psi_dot: d[2],
        v_dot: d[3],
        delta_dot: d[4],
    })
}

/// One RK4 step of length `p.step_h` with zero-order-hold control.
pub fn step(s: &CarState, c: &CarControl, p: &CarParams) -> Result<CarState, DynamicsError> {
    p.validate()?;
    check_finite(&s.to_array(), "state")?;
    check_finite(&c.to_array(), "control")?;
    let next = rk4_generic(&s.to_array(), &c.to_array(), p)?;
    check_finite(&next, "successor state")?;
    Ok(CarState::from_array(next))
}

/// A step Jacobian with a 2-norm condition estimate.
#[derive(Debug, Clone)]
pub struct StepJacobian {
    pub matrix: DMatrix<f64>,
    pub condition: f64,
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Evaluate RK4 with e1 seeded along input `i` (0..5 states, 5..7 controls)
/// and e2 seeded along input `j` (if any).
fn seeded_rk4(
    x: &[f64; STATE_DIM],
    u: &[f64; CONTROL_DIM],
    p: &CarParams,
    i: usize,
    j: Option<usize>,
) -> Result<[HyperDual; STATE_DIM], DynamicsError> {
    let seed = |k: usize, v: f64| {
        HyperDual::new(
            v,
            if k == i { 1.0 } else { 0.0 },
            if Some(k) == j { 1.0 } else { 0.0 },
            0.0,
        )
    };
    let xd: [HyperDual; STATE_DIM] = std::array::from_fn(|k| seed(k, x[k]));
    let ud: [HyperDual; CONTROL_DIM] = std::array::from_fn(|k| seed(STATE_DIM + k, u[k]));
    rk4_generic(&xd, &ud, p)
}

/// Full 5x7 Jacobian of the RK4 step by forward-mode AD.
fn full_jacobian(
    s: &CarState,
    c: &CarControl,
    p: &CarParams,
) -> Result<(DVector<f64>, DMatrix<f64>), DynamicsError> {
    p.validate()?;
    let x = s.to_array();
    let u = c.to_array();
    check_finite(&x, "state")?;
    check_finite(&u, "control")?;
    let mut jac = DMatrix::zeros(STATE_DIM, STATE_DIM + CONTROL_DIM);
    let mut next = DVector::zeros(STATE_DIM);
    for col in 0..STATE_DIM + CONTROL_DIM {
        let out = seeded_rk4(&x, &u, p, col, None)?;
        for (r, o) in out.iter().enumerate() {
            jac[(r, col)] = o.e1;
            next[r] = o.re;
        }
    }
    check_finite(jac.as_slice(), "Jacobian")?;
    Ok((next, jac))
}

/// Jacobian of [`step`] with respect to the state.
///
/// Fails with [`DynamicsError::AssumptionViolated`] when the matrix is
/// singular to working precision; callers then fall back to re-optimization.
pub fn step_jacobian_x(
    s: &CarState,
    c: &CarControl,
    p: &CarParams,
) -> Result<StepJacobian, DynamicsError> {
    let (_, jac) = full_jacobian(s, c, p)?;
    let matrix = jac.columns(0, STATE_DIM).into_owned();
    let condition = condition_estimate(&matrix);
    if !(condition < SINGULAR_CONDITION) {
        return Err(DynamicsError::AssumptionViolated { condition });
    }
    Ok(StepJacobian { matrix, condition })
}

/// Jacobian of [`step`] with respect to the control (5x2).
pub fn step_jacobian_u(
    s: &CarState,
    c: &CarControl,
    p: &CarParams,
) -> Result<StepJacobian, DynamicsError> {
    let (_, jac) = full_jacobian(s, c, p)?;
    let matrix = jac.columns(STATE_DIM, CONTROL_DIM).into_owned();
    let condition = condition_estimate(&matrix);
    Ok(StepJacobian { matrix, condition })
}

/// Value and first derivatives of a discrete model at one grid point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub next: DVector<f64>,
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
}

/// A discrete-time control system `x+ = f(x, u)` as seen by the transcription.
pub trait Model: Send + Sync + std::fmt::Debug {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    /// Sampling time of one step.
    fn sample_time(&self) -> f64;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError>;
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>)
        -> Result<Linearization, DynamicsError>;
    /// Hessian of `sum_i w_i f_i(x, u)` with respect to the stacked `(x, u)`.
    fn weighted_hessian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CarModel {
    pub params: CarParams,
}

impl CarModel {
    pub fn new(params: CarParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        Ok(Self { params })
    }
}

fn state_of(x: &DVector<f64>) -> Result<CarState, DynamicsError> {
    CarState::from_slice(x.as_slice())
}

fn control_of(u: &DVector<f64>) -> Result<CarControl, DynamicsError> {
    CarControl::from_slice(u.as_slice())
}

impl Model for CarModel {
    fn nx(&self) -> usize {
        STATE_DIM
    }

    fn nu(&self) -> usize {
        CONTROL_DIM
    }

    fn sample_time(&self) -> f64 {
        self.params.step_h
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        Ok(step(&state_of(x)?, &control_of(u)?, &self.params)?.to_vector())
    }

    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<Linearization, DynamicsError> {
        let (next, jac) = full_jacobian(&state_of(x)?, &control_of(u)?, &self.params)?;
        Ok(Linearization {
            next,
            fx: jac.columns(0, STATE_DIM).into_owned(),
            fu: jac.columns(STATE_DIM, CONTROL_DIM).into_owned(),
        })
    }

    fn weighted_hessian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        const N: usize = STATE_DIM + CONTROL_DIM;
        let xs = state_of(x)?.to_array();
        let us = control_of(u)?.to_array();
        let mut hess = DMatrix::zeros(N, N);
        if w.iter().all(|&wi| wi == 0.0) {
            return Ok(hess);
        }
        for i in 0..N {
            for j in i..N {
                let out = seeded_rk4(&xs, &us, &self.params, i, Some(j))?;
                let v: f64 = out.iter().zip(w.iter()).map(|(o, wi)| o.e12 * wi).sum();
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        check_finite(hess.as_slice(), "Hessian")?;
        Ok(hess)
    }
}

/// Linear time-invariant model `x+ = A x + B u`, used as a test stub and for
/// Riccati cross-checks.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, h: f64) -> Result<Self, DynamicsError> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(DynamicsError::InvalidParams(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, h })
    }

    /// Sampled double integrator with state (position, velocity).
    pub fn double_integrator(h: f64) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5 * h * h, h]);
        Self { a, b, h }
    }
}

impl Model for LinearModel {
    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn sample_time(&self) -> f64 {
        self.h
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        Ok(&self.a * x + &self.b * u)
    }

    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<Linearization, DynamicsError> {
        Ok(Linearization {
            next: self.step(x, u)?,
            fx: self.a.clone(),
            fu: self.b.clone(),
        })
    }

    fn weighted_hessian(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        let n = self.nx() + self.nu();
        Ok(DMatrix::zeros(n, n))
    }
}
