//! Classic, multistep, re-optimizing and sensitivity-updated NMPC.
//!
//! Every scheme solves `OCP(k, x(k), N)` at the start of a shift and applies
//! `M` controls before the next full solve (`M = 1` for classic NMPC). They
//! differ in what happens at the intermediate steps `j = 1..M-1`:
//!
//! * multistep: apply the stored `u(k+j)` open loop;
//! * re-optimizing: re-solve on the shrinking horizon `[k+j, k+N]` when the
//!   measurement deviates from the prediction;
//! * sensitivity: apply `u(k+j) + S_j (x(k+j) - x_hat(k+j))`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Model};
use crate::ocp::{
    shifted_control_sensitivities, solve_ocp, tail, OcpError, OcpSetup, OcpSolution, TrackingOcp,
};
use crate::par::{self, ExecutionMode};
use crate::reference::ReferenceTrajectory;
use crate::sensitivity::{scaled_inf_norm, ChainRule, ShiftedControlSensitivity};

/// Deviations at or below this level count as none.
pub const DEVIATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Classic,
    Multistep,
    MultistepReopt,
    MultistepSens,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Classic,
        Scheme::Multistep,
        Scheme::MultistepReopt,
        Scheme::MultistepSens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Classic => "classic",
            Scheme::Multistep => "multistep",
            Scheme::MultistepReopt => "multistep_reopt",
            Scheme::MultistepSens => "multistep_sens",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classic" => Ok(Scheme::Classic),
            "multistep" => Ok(Scheme::Multistep),
            "multistep_reopt" | "reopt" => Ok(Scheme::MultistepReopt),
            "multistep_sens" | "sens" => Ok(Scheme::MultistepSens),
            other => Err(format!(
                "unknown scheme `{other}` (expected classic, multistep, multistep_reopt or multistep_sens)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Preview horizon (number of intervals).
    pub n: usize,
    /// Control horizon; forced to 1 for classic NMPC.
    pub m: usize,
    /// Re-solve only when the measurement deviates from the prediction.
    pub reopt_on_deviation_only: bool,
    /// Scaled deviation beyond which a sensitivity update is replaced by a re-solve.
    pub sens_fallback_threshold: f64,
    /// Per-component scale of the deviation norm.
    pub deviation_scale: DVector<f64>,
    pub chain_rule: ChainRule,
    /// Also compute `S_M`, which no step of the shift uses.
    pub compute_last_sensitivity: bool,
    pub execution: ExecutionMode,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, n: usize, m: usize, nx: usize) -> Self {
        Self {
            scheme,
            n,
            m,
            reopt_on_deviation_only: true,
            sens_fallback_threshold: 0.5,
            deviation_scale: DVector::from_element(nx, 1.0),
            chain_rule: ChainRule::ClosedLoop,
            compute_last_sensitivity: true,
            execution: ExecutionMode::Parallel,
        }
    }

    /// The control horizon actually used.
    pub fn control_horizon(&self) -> usize {
        match self.scheme {
            Scheme::Classic => 1,
            _ => self.m,
        }
    }

    pub fn validate(&self) -> Result<(), NmpcError> {
        if self.n == 0 {
            return Err(NmpcError::Config("horizon N must be at least 1".into()));
        }
        let m = self.control_horizon();
        if m == 0 || m > self.n {
            return Err(NmpcError::Config(format!(
                "need 1 <= M <= N, got M={m}, N={}",
                self.n
            )));
        }
        if self.deviation_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(NmpcError::Config(
                "deviation scales must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Full-horizon solve at the start of a shift.
    Solve,
    /// Stored control applied unchanged.
    Reuse,
    /// Shrinking-horizon re-solve.
    Reopt,
    /// First-order sensitivity update.
    SensUpdate,
    /// Solver failure; a stored or previous control was applied.
    Fallback,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Action::Solve => "solve",
            Action::Reuse => "reuse",
            Action::Reopt => "reopt",
            Action::SensUpdate => "sens_update",
            Action::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    /// True plant state at `k`.
    pub plant_state: DVector<f64>,
    pub measured_state: DVector<f64>,
    /// Prediction `x_hat(k)` of the current plan.
    pub nominal_state: DVector<f64>,
    pub applied_control: DVector<f64>,
    /// Scaled inf-norm of `measured - nominal`.
    pub deviation_norm: f64,
    pub action: Action,
    /// Informational only; never compared.
    pub decision_time: Duration,
}

/// Quality of one successful OCP solve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveRecord {
    pub k: usize,
    pub full_horizon: bool,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub strongly_regular: bool,
    pub relaxation_used: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveCounts {
    /// Full-horizon solves at shift starts (attempted).
    pub full_solves: usize,
    /// Shrinking-horizon re-solves (attempted).
    pub reopt_solves: usize,
    pub sens_updates: usize,
    pub fallbacks: usize,
    /// Shift starts where the sensitivity pass was refused.
    pub sens_unavailable: usize,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub scheme: Scheme,
    pub h: f64,
    pub records: Vec<StepRecord>,
    /// Plant state after the last step.
    pub final_state: DVector<f64>,
    pub counts: SolveCounts,
    pub solves: Vec<SolveRecord>,
}

impl ClosedLoopTrace {
    pub fn applied_controls(&self) -> Vec<DVector<f64>> {
        self.records
            .iter()
            .map(|r| r.applied_control.clone())
            .collect()
    }

    pub fn count_actions(&self, action: Action) -> usize {
        self.records.iter().filter(|r| r.action == action).count()
    }
}

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plant simulation failed at step {k}: {source}")]
    Plant {
        k: usize,
        source: DynamicsError,
        partial: Box<ClosedLoopTrace>,
    },
}

/// Produces the state the controller sees at step `k`.
pub trait Measurement: Send + Sync {
    fn measure(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;

    /// When true the measured state replaces the plant state, so the
    /// perturbation acts as a process disturbance rather than sensor noise.
    fn disturbs_plant(&self) -> bool {
        false
    }
}

/// Exact state feedback.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMeasurement;

impl Measurement for ExactMeasurement {
    fn measure(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

/// Reference samples as vectors, holding the last sample past the end.
#[derive(Debug, Clone)]
pub struct ReferenceData {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl ReferenceData {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Self {
        assert!(!states.is_empty() && states.len() == controls.len());
        Self { states, controls }
    }

    pub fn state(&self, k: usize) -> &DVector<f64> {
        &self.states[k.min(self.states.len() - 1)]
    }

    pub fn control(&self, k: usize) -> &DVector<f64> {
        &self.controls[k.min(self.controls.len() - 1)]
    }

    pub fn window(&self, k0: usize, n: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        (
            (k0..=k0 + n).map(|k| self.state(k).clone()).collect(),
            (k0..k0 + n).map(|k| self.control(k).clone()).collect(),
        )
    }
}

impl From<&ReferenceTrajectory> for ReferenceData {
    fn from(r: &ReferenceTrajectory) -> Self {
        Self::new(
            r.states.iter().map(|s| s.to_vector()).collect(),
            r.controls.iter().map(|c| c.to_vector()).collect(),
        )
    }
}

/// Number of control steps in `[0, t_f)` on a grid of width `h`.
pub fn step_count(t_f: f64, h: f64) -> usize {
    (t_f / h + 1e-9).floor().max(0.0) as usize
}

/// The OCP solution a shift is executing, with the predicted states.
struct Plan {
    ocp: TrackingOcp,
    sol: OcpSolution,
    /// `predicted[i]` is the prediction for step `start + i`.
    predicted: Vec<DVector<f64>>,
    start: usize,
}

impl Plan {
    fn new(ocp: TrackingOcp, sol: OcpSolution, model: &dyn Model) -> Self {
        let start = ocp.k0;
        // Rolling the model forward keeps zero-noise predictions bit-exact.
        let mut predicted = vec![ocp.x0.clone()];
        for u in &sol.controls {
            let last = predicted.last().expect("non-empty");
            match model.step(last, u) {
                Ok(next) => predicted.push(next),
                Err(_) => break,
            }
        }
        Self {
            ocp,
            sol,
            predicted,
            start,
        }
    }

    fn nominal(&self, k: usize) -> Option<&DVector<f64>> {
        self.predicted.get(k.checked_sub(self.start)?)
    }

    fn control(&self, k: usize) -> Option<&DVector<f64>> {
        self.sol.controls.get(k.checked_sub(self.start)?)
    }
}

/// One of the four feedback laws, bound to a problem setup and reference.
pub struct Controller {
    pub config: SchemeConfig,
    pub setup: Arc<OcpSetup>,
    pub reference: Arc<ReferenceData>,
    counts: SolveCounts,
    solves: Vec<SolveRecord>,
    last_control: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(
        config: SchemeConfig,
        setup: Arc<OcpSetup>,
        reference: Arc<ReferenceData>,
    ) -> Result<Self, NmpcError> {
        config.validate()?;
        if config.deviation_scale.len() != setup.model.nx() {
            return Err(NmpcError::Config(
                "deviation scale length differs from state dimension".into(),
            ));
        }
        Ok(Self {
            config,
            setup,
            reference,
            counts: SolveCounts::default(),
            solves: Vec::new(),
            last_control: None,
        })
    }

    fn ocp(&self, k: usize, x: &DVector<f64>, n: usize) -> Result<TrackingOcp, OcpError> {
        let (states, controls) = self.reference.window(k, n);
        TrackingOcp::new(self.setup.clone(), k, x.clone(), states, controls)
    }

    fn record_solve(&mut self, k: usize, full: bool, sol: &OcpSolution) {
        let kkt = &sol.kkt;
        self.solves.push(SolveRecord {
            k,
            full_horizon: full,
            stationarity: kkt.kkt_residual,
            feasibility: kkt.feasibility,
            complementarity: kkt.complementarity,
            strongly_regular: kkt.regularity.is_strongly_regular(),
            relaxation_used: sol.relaxation_used,
            iterations: kkt.iterations,
        });
    }

    fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        self.setup.control_bounds.clamp(u)
    }

    /// Control held when no solution is available.
    fn hold(&self, k: usize) -> DVector<f64> {
        let u = self
            .last_control
            .clone()
            .unwrap_or_else(|| self.reference.control(k).clone());
        self.clamp(&u)
    }

    /// Full-horizon solve at `k`; the plan for a new shift.
    fn solve_full(
        &mut self,
        k: usize,
        x: &DVector<f64>,
        warm: Option<&OcpSolution>,
    ) -> Option<Plan> {
        self.counts.full_solves += 1;
        let ocp = match self.ocp(k, x, self.config.n) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("k={k}: cannot build OCP: {e}");
                return None;
            }
        };
        match solve_ocp(&ocp, warm) {
            Ok(sol) => {
                self.record_solve(k, true, &sol);
                if !sol.kkt.regularity.is_strongly_regular() {
                    log::info!(
                        "k={k}: OCP solution not strongly regular: {:?}",
                        sol.kkt.regularity
                    );
                }
                Some(Plan::new(ocp, sol, self.setup.model.as_ref()))
            }
            Err(e) => {
                log::warn!("k={k}: full-horizon solve failed: {e}");
                None
            }
        }
    }

    /// Algorithm 1: `u(k)` from `OCP(k, x(k), N)`.
    pub fn classic_step(
        &mut self,
        k: usize,
        x_measured: &DVector<f64>,
        warm: Option<&OcpSolution>,
    ) -> (DVector<f64>, Action, Option<OcpSolution>) {
        match self.solve_full(k, x_measured, warm) {
            Some(plan) => (
                self.clamp(&plan.sol.controls[0]),
                Action::Solve,
                Some(plan.sol),
            ),
            None => {
                self.counts.fallbacks += 1;
                (self.hold(k), Action::Fallback, None)
            }
        }
    }

    /// Algorithm 2 inside a shift: the stored control, open loop.
    fn multistep_step(&mut self, plan: &Plan, k: usize) -> (DVector<f64>, Action) {
        match plan.control(k) {
            Some(u) => (self.clamp(u), Action::Reuse),
            None => {
                self.counts.fallbacks += 1;
                (self.hold(k), Action::Fallback)
            }
        }
    }

    /// Shrinking-horizon re-solve at `k` from `x`, warm-started from the plan's
    /// tail with an optional replacement for its first control.
    fn resolve_tail(
        &mut self,
        plan: &Plan,
        k: usize,
        x: &DVector<f64>,
        first: Option<&DVector<f64>>,
    ) -> Option<Plan> {
        let j = k - plan.start;
        self.counts.reopt_solves += 1;
        let (tail_ocp, mut warm) = match tail(&plan.ocp, &plan.sol, j) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("k={k}: no tail for re-solve: {e}");
                return None;
            }
        };
        if let Some(u) = first {
            warm.controls[0] = u.clone();
        }
        let ocp = tail_ocp.with_initial_state(x.clone());
        match solve_ocp(&ocp, Some(&warm)) {
            Ok(sol) => {
                self.record_solve(k, false, &sol);
                Some(Plan::new(ocp, sol, self.setup.model.as_ref()))
            }
            Err(e) => {
                log::warn!("k={k}: shrinking-horizon re-solve failed: {e}");
                None
            }
        }
    }

    /// Algorithm 3 inside a shift. Returns the replacement plan, if any.
    fn reopt_step(
        &mut self,
        plan: &Plan,
        k: usize,
        x_measured: &DVector<f64>,
        deviation: f64,
    ) -> (DVector<f64>, Action, Option<Plan>) {
        if self.config.reopt_on_deviation_only && deviation <= DEVIATION_EPS {
            let (u, a) = self.multistep_step(plan, k);
            return (u, a, None);
        }
        match self.resolve_tail(plan, k, x_measured, None) {
            Some(new_plan) => (
                self.clamp(&new_plan.sol.controls[0]),
                Action::Reopt,
                Some(new_plan),
            ),
            None => {
                self.counts.fallbacks += 1;
                let (u, _) = self.multistep_step(plan, k);
                (u, Action::Fallback, None)
            }
        }
    }

    /// Algorithm 4 inside a shift.
    fn sens_step(
        &mut self,
        plan: &Plan,
        sens: Option<&ShiftedControlSensitivity>,
        k: usize,
        x_measured: &DVector<f64>,
        deviation: f64,
    ) -> (DVector<f64>, Action) {
        let j = k - plan.start;
        let (Some(s), Some(u_nom), Some(x_nom)) = (
            sens.and_then(|s| s.get(j)),
            plan.control(k),
            plan.nominal(k),
        ) else {
            let (u, a, _) = self.reopt_step(plan, k, x_measured, deviation);
            return (u, a);
        };
        let dx = x_measured - x_nom;
        let updated = self.clamp(&(u_nom + s * &dx));
        if deviation <= self.config.sens_fallback_threshold {
            self.counts.sens_updates += 1;
            return (updated, Action::SensUpdate);
        }
        match self.resolve_tail(plan, k, x_measured, Some(&updated)) {
            Some(p) => (self.clamp(&p.sol.controls[0]), Action::Reopt),
            None => {
                self.counts.fallbacks += 1;
                (updated, Action::Fallback)
            }
        }
    }

    fn sensitivities(&self, plan: &Plan) -> Option<ShiftedControlSensitivity> {
        let m = self.config.control_horizon();
        let upto = if self.config.compute_last_sensitivity {
            m
        } else {
            m - 1
        };
        if upto == 0 {
            return None;
        }
        match shifted_control_sensitivities(&plan.ocp, &plan.sol, upto, self.config.chain_rule) {
            Ok(s) => Some(s),
            Err(e) => {
                log::info!(
                    "k={}: sensitivity unavailable, re-optimizing instead: {e}",
                    plan.start
                );
                None
            }
        }
    }

    /// Closed-loop run over `steps` control steps from `x0`.
    pub fn run(
        mut self,
        plant: &dyn Model,
        measurement: &dyn Measurement,
        x0: &DVector<f64>,
        steps: usize,
    ) -> Result<ClosedLoopTrace, NmpcError> {
        let scheme = self.config.scheme;
        let m = self.config.control_horizon();
        let mut records = Vec::with_capacity(steps);
        let mut x = x0.clone();
        let mut prev: Option<OcpSolution> = None;
        let mut k = 0;

        let finish =
            |this: &Controller, records: Vec<StepRecord>, x: DVector<f64>| ClosedLoopTrace {
                scheme,
                h: plant.sample_time(),
                records,
                final_state: x,
                counts: this.counts,
                solves: this.solves.clone(),
            };

        while k < steps {
            // Shift start.
            let t0 = Instant::now();
            let y = measurement.measure(k, &x);
            if measurement.disturbs_plant() {
                x = y.clone();
            }
            let plan = self.solve_full(k, &y, prev.as_ref());
            let Some(mut plan) = plan else {
                self.counts.fallbacks += 1;
                let u = self.hold(k);
                records.push(StepRecord {
                    k,
                    plant_state: x.clone(),
                    measured_state: y.clone(),
                    nominal_state: y,
                    applied_control: u.clone(),
                    deviation_norm: 0.0,
                    action: Action::Fallback,
                    decision_time: t0.elapsed(),
                });
                x = match plant.step(&x, &u) {
                    Ok(next) => next,
                    Err(source) => {
                        return Err(NmpcError::Plant {
                            k,
                            source,
                            partial: Box::new(finish(&self, records, x)),
                        })
                    }
                };
                self.last_control = Some(u);
                k += 1;
                continue;
            };
            let u0 = self.clamp(&plan.sol.controls[0]);
            records.push(StepRecord {
                k,
                plant_state: x.clone(),
                measured_state: y.clone(),
                nominal_state: y.clone(),
                applied_control: u0.clone(),
                deviation_norm: 0.0,
                action: Action::Solve,
                decision_time: t0.elapsed(),
            });

            // The sensitivity pass overlaps with the first plant step.
            let want_sens = scheme == Scheme::MultistepSens && m > 1 && k + 1 < steps;
            let (sens, next) = par::join(
                self.config.execution,
                || want_sens.then(|| self.sensitivities(&plan)).flatten(),
                || plant.step(&x, &u0),
            );
            if want_sens && sens.is_none() {
                self.counts.sens_unavailable += 1;
            }
            x = match next {
                Ok(next) => next,
                Err(source) => {
                    return Err(NmpcError::Plant {
                        k,
                        source,
                        partial: Box::new(finish(&self, records, x)),
                    })
                }
            };
            self.last_control = Some(u0);
            let shift_solution = plan.sol.clone();
            k += 1;

            for _ in 1..m {
                if k >= steps {
                    break;
                }
                let t0 = Instant::now();
                let y = measurement.measure(k, &x);
                if measurement.disturbs_plant() {
                    x = y.clone();
                }
                let nominal = plan.nominal(k).cloned().unwrap_or_else(|| y.clone());
                let deviation = scaled_inf_norm(&(&y - &nominal), &self.config.deviation_scale);
                let (u, action) = match scheme {
                    Scheme::Classic => unreachable!("classic NMPC has M = 1"),
                    Scheme::Multistep => self.multistep_step(&plan, k),
                    Scheme::MultistepReopt => {
                        let (u, a, new_plan) = self.reopt_step(&plan, k, &y, deviation);
                        if let Some(p) = new_plan {
                            plan = p;
                        }
                        (u, a)
                    }
                    Scheme::MultistepSens => self.sens_step(&plan, sens.as_ref(), k, &y, deviation),
                };
                records.push(StepRecord {
                    k,
                    plant_state: x.clone(),
                    measured_state: y,
                    nominal_state: nominal,
                    applied_control: u.clone(),
                    deviation_norm: deviation,
                    action,
                    decision_time: t0.elapsed(),
                });
                x = match plant.step(&x, &u) {
                    Ok(next) => next,
                    Err(source) => {
                        return Err(NmpcError::Plant {
                            k,
                            source,
                            partial: Box::new(finish(&self, records, x)),
                        })
                    }
                };
                self.last_control = Some(u);
                k += 1;
            }
            prev = Some(shift_solution);
        }
        Ok(finish(&self, records, x))
    }
}

/// Run one scheme in closed loop.
pub fn run_scheme(
    config: SchemeConfig,
    setup: Arc<OcpSetup>,
    reference: Arc<ReferenceData>,
    plant: &dyn Model,
    measurement: &dyn Measurement,
    x0: &DVector<f64>,
    t_f: f64,
) -> Result<ClosedLoopTrace, NmpcError> {
    let steps = step_count(t_f, plant.sample_time());
    Controller::new(config, setup, reference)?.run(plant, measurement, x0, steps)
}
