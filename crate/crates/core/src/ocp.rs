//! Tracking optimal control problems and their transcription into NLPs.
//!
//! The decision vector is `z = (x_1, ..., x_N, u_0, ..., u_{N-1}[, s_1, ..., s_N])`
//! and the parameter is the initial state `x_0`. The equalities are the
//! defects `x_{k+1} - f(x_k, u_k)`; the inequalities are finite box bounds on
//! the controls and on the states `x_1..x_N`, one row per side. In elastic
//! mode every stage gets one slack `s_k >= 0` shared by its state-bound rows.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Linearization, Model, CONTROL_DIM, STATE_DIM};
use crate::nlp::{
    self, EvalError, EvalResult, KktSolution, NlpDims, NlpError, ParametricNlp, SolverOptions,
    StartPoint,
};
use crate::sensitivity::{
    kkt_sensitivity, shifted_sensitivities, ChainRule, SensitivityDifferentials, SensitivityError,
    ShiftedControlSensitivity,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OcpError {
    #[error("invalid OCP: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] NlpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("tail index {j} out of range for horizon {horizon}")]
    TailOutOfRange { j: usize, horizon: usize },
}

/// Whether the stage costs are summed or integrated with the rectangle rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Stage costs multiplied by the sampling time.
    #[default]
    Integral,
    Sum,
}

/// Componentwise bounds; infinite entries produce no constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: &[f64], upper: &[f64]) -> Result<Self, OcpError> {
        if lower.len() != upper.len() {
            return Err(OcpError::Invalid("bound vectors differ in length".into()));
        }
        if lower
            .iter()
            .zip(upper)
            .any(|(l, u)| !(l <= u) || l.is_nan())
        {
            return Err(OcpError::Invalid("lower bound above upper bound".into()));
        }
        Ok(Self {
            lower: DVector::from_row_slice(lower),
            upper: DVector::from_row_slice(upper),
        })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    /// Acceleration in [-12, 3] m/s^2, steering rate in [-0.5, 0.5] rad/s.
    pub fn car_controls() -> Self {
        Self::new(&[-12.0, -0.5], &[3.0, 0.5]).expect("static bounds")
    }

    /// Speed in [0, 60] m/s, steering angle in [-0.5, 0.5] rad.
    pub fn car_states() -> Self {
        let inf = f64::INFINITY;
        Self::new(&[-inf, -inf, -inf, 0.0, -0.5], &[inf, inf, inf, 60.0, 0.5])
            .expect("static bounds")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .enumerate()
                .map(|(i, x)| x.clamp(self.lower[i], self.upper[i])),
        )
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.iter()
            .enumerate()
            .all(|(i, x)| *x >= self.lower[i] - tol && *x <= self.upper[i] + tol)
    }
}

/// `V = diag(a1, a1, 0, a2, 0)` over `(x, y, psi, v, delta)` and `W = a3 I`.
pub fn build_objective_weights(
    alpha1: f64,
    alpha2: f64,
    alpha3: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError> {
    if [alpha1, alpha2, alpha3]
        .iter()
        .any(|a| !(*a >= 0.0) || !a.is_finite())
    {
        return Err(OcpError::Invalid(
            "objective weights must be non-negative".into(),
        ));
    }
    let v = DMatrix::from_diagonal(&DVector::from_row_slice(&[
        alpha1, alpha1, 0.0, alpha2, 0.0,
    ]));
    let w = DMatrix::from_diagonal(&DVector::from_element(CONTROL_DIM, alpha3));
    Ok((v, w))
}

fn check_psd(m: &DMatrix<f64>, n: usize, what: &str) -> Result<(), OcpError> {
    if m.shape() != (n, n) {
        return Err(OcpError::Invalid(format!("{what} must be {n}x{n}")));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(OcpError::Invalid(format!("{what} is not symmetric")));
    }
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -1e-12 * (1.0 + m.amax()) {
        return Err(OcpError::Invalid(format!(
            "{what} is not positive semidefinite"
        )));
    }
    Ok(())
}

/// Everything an OCP shares with the other OCPs of a closed-loop run.
#[derive(Debug, Clone)]
pub struct OcpSetup {
    pub model: Arc<dyn Model>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub state_bounds: Bounds,
    pub control_bounds: Bounds,
    pub mode: ObjectiveMode,
    /// Multiple of the stage state cost charged on `x_N`; zero by default.
    pub terminal_weight: f64,
    /// Weight of the l1 slack penalty in elastic mode.
    pub elastic_penalty: f64,
    /// Small quadratic slack weight that keeps elastic problems strictly convex in `s`.
    pub elastic_quadratic: f64,
    pub solver: SolverOptions,
}

impl OcpSetup {
    pub fn new(
        model: Arc<dyn Model>,
        v: DMatrix<f64>,
        w: DMatrix<f64>,
        state_bounds: Bounds,
        control_bounds: Bounds,
    ) -> Result<Self, OcpError> {
        check_psd(&v, model.nx(), "V")?;
        check_psd(&w, model.nu(), "W")?;
        if state_bounds.dim() != model.nx() || control_bounds.dim() != model.nu() {
            return Err(OcpError::Invalid(
                "bounds do not match model dimensions".into(),
            ));
        }
        Ok(Self {
            model,
            v,
            w,
            state_bounds,
            control_bounds,
            mode: ObjectiveMode::Integral,
            terminal_weight: 0.0,
            elastic_penalty: 1e4,
            elastic_quadratic: 1e-2,
            solver: SolverOptions::default(),
        })
    }

    /// The car model setup with the standard weights and bounds.
    pub fn car(model: Arc<dyn Model>, alpha: [f64; 3]) -> Result<Self, OcpError> {
        if model.nx() != STATE_DIM || model.nu() != CONTROL_DIM {
            return Err(OcpError::Invalid(
                "car setup needs a 5-state, 2-input model".into(),
            ));
        }
        let (v, w) = build_objective_weights(alpha[0], alpha[1], alpha[2])?;
        Self::new(model, v, w, Bounds::car_states(), Bounds::car_controls())
    }

    fn stage_scale(&self) -> f64 {
        match self.mode {
            ObjectiveMode::Integral => self.model.sample_time(),
            ObjectiveMode::Sum => 1.0,
        }
    }

    /// Stage cost `f0(x, u)` including the objective scale.
    pub fn stage_cost(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        xr: &DVector<f64>,
        ur: &DVector<f64>,
    ) -> f64 {
        let dx = x - xr;
        let du = u - ur;
        self.stage_scale() * (dx.dot(&(&self.v * &dx)) + du.dot(&(&self.w * &du)))
    }

    /// Cost on the final predicted state.
    pub fn terminal_cost(&self, x: &DVector<f64>, xr: &DVector<f64>) -> f64 {
        if self.terminal_weight == 0.0 {
            return 0.0;
        }
        let dx = x - xr;
        self.terminal_weight * self.stage_scale() * dx.dot(&(&self.v * &dx))
    }
}

/// `OCP(k0, x0, N)`: track `ref_states[0..=N]`, `ref_controls[0..N]` from `x0`.
#[derive(Debug, Clone)]
pub struct TrackingOcp {
    pub setup: Arc<OcpSetup>,
    pub k0: usize,
    pub x0: DVector<f64>,
    pub ref_states: Vec<DVector<f64>>,
    pub ref_controls: Vec<DVector<f64>>,
    pub elastic: bool,
}

impl TrackingOcp {
    pub fn new(
        setup: Arc<OcpSetup>,
        k0: usize,
        x0: DVector<f64>,
        ref_states: Vec<DVector<f64>>,
        ref_controls: Vec<DVector<f64>>,
    ) -> Result<Self, OcpError> {
        let (nx, nu) = (setup.model.nx(), setup.model.nu());
        if ref_controls.is_empty() {
            return Err(OcpError::Invalid(
                "horizon must contain at least one interval".into(),
            ));
        }
        if ref_states.len() < ref_controls.len() + 1 {
            return Err(OcpError::Invalid(format!(
                "reference window has {} states for {} intervals",
                ref_states.len(),
                ref_controls.len()
            )));
        }
        if x0.len() != nx
            || ref_states.iter().any(|x| x.len() != nx)
            || ref_controls.iter().any(|u| u.len() != nu)
        {
            return Err(OcpError::Invalid("dimension mismatch in OCP data".into()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(OcpError::Invalid("initial state is not finite".into()));
        }
        let mut ref_states = ref_states;
        ref_states.truncate(ref_controls.len() + 1);
        Ok(Self {
            setup,
            k0,
            x0,
            ref_states,
            ref_controls,
            elastic: false,
        })
    }

    pub fn horizon(&self) -> usize {
        self.ref_controls.len()
    }

    /// The same problem started at a different initial state.
    pub fn with_initial_state(&self, x0: DVector<f64>) -> Self {
        Self { x0, ..self.clone() }
    }

    /// `OCP(k0 + j, x0, N - j)` on the shrinking horizon.
    pub fn shrink(&self, j: usize, x0: DVector<f64>) -> Result<Self, OcpError> {
        if j >= self.horizon() {
            return Err(OcpError::TailOutOfRange {
                j,
                horizon: self.horizon(),
            });
        }
        Ok(Self {
            setup: self.setup.clone(),
            k0: self.k0 + j,
            x0,
            ref_states: self.ref_states[j..].to_vec(),
            ref_controls: self.ref_controls[j..].to_vec(),
            elastic: self.elastic,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.setup, self.horizon(), self.elastic)
    }
}

/// One inequality row `sign * (z[var] - bound) - z[slack] <= 0`.
#[derive(Debug, Clone, Copy)]
struct BoundRow {
    var: usize,
    sign: f64,
    bound: f64,
    slack: Option<usize>,
}

/// Index bookkeeping of the transcription.
#[derive(Debug, Clone)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub elastic: bool,
    rows: Vec<BoundRow>,
    /// Inequality rows belonging to interval `k` (controls `u_k`, states `x_{k+1}`).
    stage_rows: Vec<Range<usize>>,
}

impl Layout {
    fn new(setup: &OcpSetup, horizon: usize, elastic: bool) -> Self {
        let (nx, nu) = (setup.model.nx(), setup.model.nu());
        let mut layout = Self {
            nx,
            nu,
            horizon,
            elastic,
            rows: Vec::new(),
            stage_rows: Vec::with_capacity(horizon),
        };
        for k in 0..horizon {
            let start = layout.rows.len();
            let (uo, xo) = (layout.u(k), layout.x(k + 1));
            let push = |rows: &mut Vec<BoundRow>, b: &Bounds, base: usize, slack| {
                for i in 0..b.dim() {
                    if b.upper[i].is_finite() {
                        rows.push(BoundRow {
                            var: base + i,
                            sign: 1.0,
                            bound: b.upper[i],
                            slack,
                        });
                    }
                    if b.lower[i].is_finite() {
                        rows.push(BoundRow {
                            var: base + i,
                            sign: -1.0,
                            bound: b.lower[i],
                            slack,
                        });
                    }
                }
            };
            push(&mut layout.rows, &setup.control_bounds, uo, None);
            let slack = elastic.then(|| layout.s(k + 1));
            push(&mut layout.rows, &setup.state_bounds, xo, slack);
            if let Some(s) = slack {
                layout.rows.push(BoundRow {
                    var: s,
                    sign: -1.0,
                    bound: 0.0,
                    slack: None,
                });
            }
            layout.stage_rows.push(start..layout.rows.len());
        }
        layout
    }

    /// Offset of `x_k`, `1 <= k <= N`.
    pub fn x(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon);
        (k - 1) * self.nx
    }

    /// Offset of `u_k`, `0 <= k < N`.
    pub fn u(&self, k: usize) -> usize {
        self.horizon * self.nx + k * self.nu
    }

    /// Index of the slack of stage `k`, `1 <= k <= N`.
    pub fn s(&self, k: usize) -> usize {
        self.horizon * (self.nx + self.nu) + k - 1
    }

    pub fn n_z(&self) -> usize {
        self.horizon * (self.nx + self.nu) + if self.elastic { self.horizon } else { 0 }
    }

    pub fn n_h(&self) -> usize {
        self.horizon * self.nx
    }

    pub fn n_g(&self) -> usize {
        self.rows.len()
    }

    pub fn stage_rows(&self, k: usize) -> Range<usize> {
        self.stage_rows[k].clone()
    }
}

/// An OCP viewed as a [`ParametricNlp`] in the initial state.
#[derive(Debug, Clone)]
pub struct OcpNlp {
    pub ocp: TrackingOcp,
    pub layout: Layout,
}

pub fn transcribe(ocp: &TrackingOcp) -> OcpNlp {
    OcpNlp {
        layout: ocp.layout(),
        ocp: ocp.clone(),
    }
}

impl OcpNlp {
    fn check(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<()> {
        if z.len() != self.layout.n_z() || p.len() != self.layout.nx {
            return Err(EvalError(format!(
                "expected z of length {} and p of length {}, got {} and {}",
                self.layout.n_z(),
                self.layout.nx,
                z.len(),
                p.len()
            )));
        }
        Ok(())
    }

    fn state(&self, z: &DVector<f64>, p: &DVector<f64>, k: usize) -> DVector<f64> {
        if k == 0 {
            p.clone()
        } else {
            z.rows(self.layout.x(k), self.layout.nx).into_owned()
        }
    }

    fn control(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(self.layout.u(k), self.layout.nu).into_owned()
    }

    fn linearizations(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<Vec<Linearization>> {
        let model = &self.ocp.setup.model;
        (0..self.layout.horizon)
            .map(|k| {
                model
                    .linearize(&self.state(z, p, k), &self.control(z, k))
                    .map_err(EvalError::from)
            })
            .collect()
    }

    fn lambda_block(&self, lambda: &DVector<f64>, k: usize) -> DVector<f64> {
        lambda.rows(k * self.layout.nx, self.layout.nx).into_owned()
    }
}

impl ParametricNlp for OcpNlp {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: self.layout.n_z(),
            n_p: self.layout.nx,
            n_h: self.layout.n_h(),
            n_g: self.layout.n_g(),
        }
    }

    fn objective(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<f64> {
        self.check(z, p)?;
        let setup = &self.ocp.setup;
        let mut j = 0.0;
        for k in 0..self.layout.horizon {
            j += setup.stage_cost(
                &self.state(z, p, k),
                &self.control(z, k),
                &self.ocp.ref_states[k],
                &self.ocp.ref_controls[k],
            );
        }
        let n = self.layout.horizon;
        j += setup.terminal_cost(&self.state(z, p, n), &self.ocp.ref_states[n]);
        if self.layout.elastic {
            for k in 1..=self.layout.horizon {
                let s = z[self.layout.s(k)];
                j += setup.elastic_penalty * s + 0.5 * setup.elastic_quadratic * s * s;
            }
        }
        Ok(j)
    }

    fn objective_grad(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>> {
        self.check(z, p)?;
        let setup = &self.ocp.setup;
        let (l, c) = (&self.layout, 2.0 * setup.stage_scale());
        let mut g = DVector::zeros(l.n_z());
        for k in 0..l.horizon {
            if k >= 1 {
                let dx = self.state(z, p, k) - &self.ocp.ref_states[k];
                g.rows_mut(l.x(k), l.nx).copy_from(&(&setup.v * dx * c));
            }
            let du = self.control(z, k) - &self.ocp.ref_controls[k];
            g.rows_mut(l.u(k), l.nu).copy_from(&(&setup.w * du * c));
        }
        if setup.terminal_weight != 0.0 {
            let n = l.horizon;
            let dx = self.state(z, p, n) - &self.ocp.ref_states[n];
            let mut blk = g.rows_mut(l.x(n), l.nx);
            blk += &setup.v * dx * (c * setup.terminal_weight);
        }
        if l.elastic {
            for k in 1..=l.horizon {
                g[l.s(k)] = setup.elastic_penalty + setup.elastic_quadratic * z[l.s(k)];
            }
        }
        Ok(g)
    }

    fn eq_constraints(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>> {
        self.check(z, p)?;
        let l = &self.layout;
        let model = &self.ocp.setup.model;
        let mut h = DVector::zeros(l.n_h());
        for k in 0..l.horizon {
            let next = model.step(&self.state(z, p, k), &self.control(z, k))?;
            h.rows_mut(k * l.nx, l.nx)
                .copy_from(&(self.state(z, p, k + 1) - next));
        }
        Ok(h)
    }

    fn eq_jacobian(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        self.check(z, p)?;
        let l = &self.layout;
        let mut jac = DMatrix::zeros(l.n_h(), l.n_z());
        for (k, lin) in self.linearizations(z, p)?.into_iter().enumerate() {
            let r = k * l.nx;
            jac.view_mut((r, l.x(k + 1)), (l.nx, l.nx))
                .fill_with_identity();
            if k >= 1 {
                jac.view_mut((r, l.x(k)), (l.nx, l.nx))
                    .copy_from(&(-lin.fx));
            }
            jac.view_mut((r, l.u(k)), (l.nx, l.nu))
                .copy_from(&(-lin.fu));
        }
        Ok(jac)
    }

    fn ineq_constraints(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>> {
        self.check(z, p)?;
        Ok(DVector::from_iterator(
            self.layout.n_g(),
            self.layout
                .rows
                .iter()
                .map(|r| r.sign * (z[r.var] - r.bound) - r.slack.map_or(0.0, |s| z[s])),
        ))
    }

    fn ineq_jacobian(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        self.check(z, p)?;
        let mut jac = DMatrix::zeros(self.layout.n_g(), self.layout.n_z());
        for (i, r) in self.layout.rows.iter().enumerate() {
            jac[(i, r.var)] = r.sign;
            if let Some(s) = r.slack {
                jac[(i, s)] = -1.0;
            }
        }
        Ok(jac)
    }

    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        p: &DVector<f64>,
        _mu: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        let run = || -> EvalResult<DMatrix<f64>> {
            self.check(z, p)?;
            let setup = &self.ocp.setup;
            let (l, c) = (&self.layout, 2.0 * setup.stage_scale());
            let (nx, nu) = (l.nx, l.nu);
            let mut hess = DMatrix::zeros(l.n_z(), l.n_z());
            for k in 0..l.horizon {
                let (x, u) = (self.state(z, p, k), self.control(z, k));
                // lambda_k' H_k contains -lambda_k' f(x_k, u_k).
                let wh = setup
                    .model
                    .weighted_hessian(&x, &u, &self.lambda_block(lambda, k))?;
                let mut blk_uu = hess.view_mut((l.u(k), l.u(k)), (nu, nu));
                blk_uu += &setup.w * c - wh.view((nx, nx), (nu, nu));
                if k >= 1 {
                    let (xo, uo) = (l.x(k), l.u(k));
                    let mut blk = hess.view_mut((xo, xo), (nx, nx));
                    blk += &setup.v * c - wh.view((0, 0), (nx, nx));
                    let xu = wh.view((0, nx), (nx, nu)).into_owned();
                    let mut blk = hess.view_mut((xo, uo), (nx, nu));
                    blk -= &xu;
                    let mut blk = hess.view_mut((uo, xo), (nu, nx));
                    blk -= xu.transpose();
                }
            }
            if setup.terminal_weight != 0.0 {
                let xo = l.x(l.horizon);
                let mut blk = hess.view_mut((xo, xo), (nx, nx));
                blk += &setup.v * (c * setup.terminal_weight);
            }
            if l.elastic {
                for k in 1..=l.horizon {
                    hess[(l.s(k), l.s(k))] = setup.elastic_quadratic;
                }
            }
            Ok(hess)
        };
        Some(run())
    }

    fn lagrangian_hessian_zp(
        &self,
        z: &DVector<f64>,
        p: &DVector<f64>,
        _mu: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> EvalResult<DMatrix<f64>> {
        self.check(z, p)?;
        let l = &self.layout;
        let wh = self.ocp.setup.model.weighted_hessian(
            p,
            &self.control(z, 0),
            &self.lambda_block(lambda, 0),
        )?;
        let mut out = DMatrix::zeros(l.n_z(), l.nx);
        out.view_mut((l.u(0), 0), (l.nu, l.nx))
            .copy_from(&(-wh.view((l.nx, 0), (l.nu, l.nx))));
        Ok(out)
    }

    fn eq_jacobian_p(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        self.check(z, p)?;
        let l = &self.layout;
        let lin = self.ocp.setup.model.linearize(p, &self.control(z, 0))?;
        let mut out = DMatrix::zeros(l.n_h(), l.nx);
        out.view_mut((0, 0), (l.nx, l.nx)).copy_from(&(-lin.fx));
        Ok(out)
    }

    fn ineq_jacobian_p(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        self.check(z, p)?;
        Ok(DMatrix::zeros(self.layout.n_g(), self.layout.nx))
    }
}

/// A solved OCP, unpacked.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub k0: usize,
    /// `x_0..x_N`, `x_0` being the parameter.
    pub states: Vec<DVector<f64>>,
    /// `u_0..u_{N-1}`.
    pub controls: Vec<DVector<f64>>,
    /// Per-stage slacks (all zero unless the elastic problem was solved).
    pub slacks: Vec<f64>,
    pub objective: f64,
    pub kkt: KktSolution,
    pub relaxation_used: bool,
}

impl OcpSolution {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    fn unpack(ocp: &TrackingOcp, layout: &Layout, kkt: KktSolution) -> Self {
        let z = &kkt.z_star;
        let mut states = vec![ocp.x0.clone()];
        states.extend((1..=layout.horizon).map(|k| z.rows(layout.x(k), layout.nx).into_owned()));
        let controls = (0..layout.horizon)
            .map(|k| z.rows(layout.u(k), layout.nu).into_owned())
            .collect();
        let slacks = if layout.elastic {
            (1..=layout.horizon).map(|k| z[layout.s(k)]).collect()
        } else {
            vec![0.0; layout.horizon]
        };
        Self {
            k0: ocp.k0,
            states,
            controls,
            slacks,
            objective: kkt.objective,
            relaxation_used: layout.elastic,
            kkt,
        }
    }

    /// `max_k ||x_{k+1} - f(x_k, u_k)||_inf`.
    pub fn dynamics_residual(&self, model: &dyn Model) -> Result<f64, DynamicsError> {
        let mut worst = 0.0f64;
        for k in 0..self.horizon() {
            let next = model.step(&self.states[k], &self.controls[k])?;
            worst = worst.max((&self.states[k + 1] - next).amax());
        }
        Ok(worst)
    }
}

/// Initial controls for `ocp` from a previous solution: drop the intervals
/// before `ocp.k0`, repeat the last control.
fn shifted_controls(ocp: &TrackingOcp, prev: &OcpSolution) -> Vec<DVector<f64>> {
    let d = ocp.k0.saturating_sub(prev.k0);
    let last = prev
        .controls
        .last()
        .cloned()
        .unwrap_or_else(|| ocp.ref_controls[0].clone());
    (0..ocp.horizon())
        .map(|k| {
            prev.controls
                .get(d + k)
                .cloned()
                .unwrap_or_else(|| last.clone())
        })
        .collect()
}

/// Shift per-stage blocks of a vector the same way as the controls.
fn shift_blocks(v: &DVector<f64>, block: usize, d: usize, stages: usize) -> Option<DVector<f64>> {
    if block == 0 || v.len() % block != 0 {
        return None;
    }
    let have = v.len() / block;
    if have == 0 {
        return None;
    }
    let mut out = DVector::zeros(stages * block);
    for k in 0..stages {
        let src = (d + k).min(have - 1);
        out.rows_mut(k * block, block)
            .copy_from(&v.rows(src * block, block));
    }
    Some(out)
}

fn initial_point(ocp: &TrackingOcp, layout: &Layout, warm: Option<&OcpSolution>) -> StartPoint {
    let setup = &ocp.setup;
    let controls: Vec<DVector<f64>> = match warm {
        Some(prev) => shifted_controls(ocp, prev),
        None => ocp.ref_controls.clone(),
    }
    .iter()
    .map(|u| setup.control_bounds.clamp(u))
    .collect();

    let mut z = DVector::zeros(layout.n_z());
    let mut x = ocp.x0.clone();
    for k in 0..layout.horizon {
        z.rows_mut(layout.u(k), layout.nu).copy_from(&controls[k]);
        x = match setup.model.step(&x, &controls[k]) {
            Ok(next) => next,
            Err(_) => ocp.ref_states[k + 1].clone(),
        };
        z.rows_mut(layout.x(k + 1), layout.nx).copy_from(&x);
        if layout.elastic {
            let b = &setup.state_bounds;
            let viol = (0..layout.nx).fold(0.0f64, |m, i| {
                m.max(x[i] - b.upper[i]).max(b.lower[i] - x[i])
            });
            z[layout.s(k + 1)] = viol.max(0.0) + 1e-3;
        }
    }

    let mut start = StartPoint::primal(z);
    if let Some(prev) = warm.filter(|p| !p.relaxation_used && !layout.elastic) {
        let d = ocp.k0.saturating_sub(prev.k0);
        let per_stage = if prev.horizon() > 0 {
            prev.kkt.mu_star.len() / prev.horizon()
        } else {
            0
        };
        if per_stage * layout.horizon == layout.n_g() {
            start.mu = shift_blocks(&prev.kkt.mu_star, per_stage, d, layout.horizon);
        }
        start.lambda = shift_blocks(&prev.kkt.lambda_star, layout.nx, d, layout.horizon);
    }
    start
}

/// Solve `ocp`, optionally warm-started from a previous solution.
///
/// If the QP subproblem is infeasible the problem is solved once more with
/// elastic state bounds, and the result is flagged as relaxed.
pub fn solve_ocp(ocp: &TrackingOcp, warm: Option<&OcpSolution>) -> Result<OcpSolution, OcpError> {
    let nlp = transcribe(ocp);
    let start = initial_point(ocp, &nlp.layout, warm);
    match nlp::solve_with(&nlp, &ocp.x0, &start, &ocp.setup.solver) {
        Ok(kkt) => Ok(OcpSolution::unpack(ocp, &nlp.layout, kkt)),
        Err(NlpError::QpInfeasible) if !ocp.elastic => {
            log::warn!(
                "OCP at k0={} infeasible, retrying with elastic state bounds",
                ocp.k0
            );
            let mut relaxed = ocp.clone();
            relaxed.elastic = true;
            let nlp = transcribe(&relaxed);
            let start = initial_point(&relaxed, &nlp.layout, warm);
            let kkt = nlp::solve_with(&nlp, &relaxed.x0, &start, &relaxed.setup.solver)?;
            Ok(OcpSolution::unpack(&relaxed, &nlp.layout, kkt))
        }
        Err(e) => Err(e.into()),
    }
}

/// The tail of `sol` as a solution of `OCP(k0 + j, x_j, N - j)`, without
/// re-solving. Multipliers are restricted to the tail rows.
pub fn tail(
    ocp: &TrackingOcp,
    sol: &OcpSolution,
    j: usize,
) -> Result<(TrackingOcp, OcpSolution), OcpError> {
    let n = sol.horizon();
    if j >= n || ocp.horizon() != n {
        return Err(OcpError::TailOutOfRange { j, horizon: n });
    }
    let mut problem = ocp.shrink(j, sol.states[j].clone())?;
    problem.elastic = sol.relaxation_used;
    if j == 0 {
        return Ok((problem, sol.clone()));
    }
    let full_layout = Layout::new(&ocp.setup, n, sol.relaxation_used);
    let mut z_idx = Vec::new();
    for k in j + 1..=n {
        z_idx.extend(full_layout.x(k)..full_layout.x(k) + full_layout.nx);
    }
    for k in j..n {
        z_idx.extend(full_layout.u(k)..full_layout.u(k) + full_layout.nu);
    }
    if full_layout.elastic {
        z_idx.extend((j + 1..=n).map(|k| full_layout.s(k)));
    }
    let g_idx: Vec<usize> = (j..n).flat_map(|k| full_layout.stage_rows(k)).collect();
    let h_idx: Vec<usize> = (j * full_layout.nx..n * full_layout.nx).collect();
    let kkt = sol.kkt.restrict(&z_idx, &g_idx, &h_idx);

    let setup = &ocp.setup;
    let dropped: f64 = (0..j)
        .map(|k| {
            setup.stage_cost(
                &sol.states[k],
                &sol.controls[k],
                &ocp.ref_states[k],
                &ocp.ref_controls[k],
            )
        })
        .sum();
    let slack_cost: f64 = sol.slacks[..j]
        .iter()
        .map(|s| setup.elastic_penalty * s + 0.5 * setup.elastic_quadratic * s * s)
        .sum();
    let objective = if sol.relaxation_used {
        sol.objective - dropped - slack_cost
    } else {
        sol.objective - dropped
    };
    let mut kkt = kkt;
    kkt.objective = objective;
    Ok((
        problem,
        OcpSolution {
            k0: sol.k0 + j,
            states: sol.states[j..].to_vec(),
            controls: sol.controls[j..].to_vec(),
            slacks: sol.slacks[j..].to_vec(),
            objective,
            kkt,
            relaxation_used: sol.relaxation_used,
        },
    ))
}

/// Sensitivities of the solution of `ocp` with respect to its initial state.
pub fn ocp_sensitivity(
    ocp: &TrackingOcp,
    sol: &OcpSolution,
) -> Result<SensitivityDifferentials, SensitivityError> {
    let nlp = transcribe(ocp);
    kkt_sensitivity(&nlp, &sol.kkt, &ocp.x0)
}

/// `du_l/dx_0` for every interval `l`, read from the differentials.
pub fn control_sensitivities(
    layout: &Layout,
    diff: &SensitivityDifferentials,
) -> Vec<DMatrix<f64>> {
    (0..layout.horizon)
        .map(|l| diff.dz_dp.rows(layout.u(l), layout.nu).into_owned())
        .collect()
}

/// `S_0..S_m` along the nominal solution of `ocp`.
pub fn shifted_control_sensitivities(
    ocp: &TrackingOcp,
    sol: &OcpSolution,
    m: usize,
    rule: ChainRule,
) -> Result<ShiftedControlSensitivity, SensitivityError> {
    let diff = ocp_sensitivity(ocp, sol)?;
    let d = control_sensitivities(&ocp.layout(), &diff);
    shifted_sensitivities(
        ocp.setup.model.as_ref(),
        &sol.states,
        &sol.controls,
        &d,
        m.min(ocp.horizon() - 1),
        rule,
    )
}
