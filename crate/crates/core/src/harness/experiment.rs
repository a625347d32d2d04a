//! Multi-scheme closed-loop comparison runs and their file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{CarModel, CarParams, DynamicsError, Model};
use crate::harness::config::{ConfigError, ExperimentConfig};
use crate::harness::metrics::{l2_norm, tracking_error_l2, tracking_errors};
use crate::harness::noise::NoiseSource;
use crate::nmpc::{
    step_count, ClosedLoopTrace, Controller, NmpcError, ReferenceData, Scheme, SchemeConfig,
};
use crate::ocp::{solve_ocp, OcpError, OcpSetup, OcpSolution, TrackingOcp};
use crate::par::{self, ExecutionMode};
use crate::reference::{synth_track, ReferenceError, ReferenceTrajectory, SynthParams};

/// Per-component scale of the deviation norm: metres, radians, and the
/// speed range for `v`.
pub const CAR_DEVIATION_SCALE: [f64; 5] = [1.0, 1.0, 1.0, 60.0, 1.0];

/// Header of the per-scheme trace CSV.
pub const TRACE_HEADER: &str = "k,t,x,y,psi,v,delta,u1,u2,x_meas,y_meas,v_meas,x_ref,y_ref,v_ref,err_x,err_y,err_v,deviation,action";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reference: {0}")]
    Reference(#[from] ReferenceError),
    #[error("vehicle model: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("problem setup: {0}")]
    Setup(#[from] OcpError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Whether the error stems from the user's input rather than a solver.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, ExperimentError::Io { .. })
    }
}

/// Outcome of one scheme.
#[derive(Debug)]
pub struct SchemeOutcome {
    pub scheme: Scheme,
    /// Complete trace, or the partial trace up to a fatal failure.
    pub trace: Option<ClosedLoopTrace>,
    pub error: Option<String>,
}

impl SchemeOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub l2_error: Option<f64>,
    pub steps: usize,
    pub full_solves: usize,
    pub reopt_solves: usize,
    pub sens_updates: usize,
    pub fallbacks: usize,
    /// Successful solves whose regularity check passed.
    pub regular_solves: usize,
    pub total_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub noise_half_width: f64,
    pub h: f64,
    pub t_f: f64,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, scheme: Scheme) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == "ok")
    }

    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed {}  noise +/-{}  h {}  t_f {}\n{:<16} {:>12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>9}  {}\n",
            self.seed,
            self.noise_half_width,
            self.h,
            self.t_f,
            "scheme",
            "l2_error",
            "steps",
            "solves",
            "reopt",
            "sens",
            "fallbk",
            "regular",
            "status"
        );
        for r in &self.rows {
            let err = r
                .l2_error
                .map_or_else(|| "-".to_string(), |e| format!("{e:.6}"));
            s.push_str(&format!(
                "{:<16} {:>12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>4}/{:<4}  {}\n",
                r.scheme.name(),
                err,
                r.steps,
                r.full_solves,
                r.reopt_solves,
                r.sens_updates,
                r.fallbacks,
                r.regular_solves,
                r.total_solves,
                r.status
            ));
        }
        s
    }
}

/// Everything a run needs, built once from a config and shared by all schemes.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Arc<CarModel>,
    pub setup: Arc<OcpSetup>,
    pub reference: ReferenceTrajectory,
    pub reference_data: Arc<ReferenceData>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let hz = &config.horizon;
        let model = Arc::new(CarModel::new(CarParams {
            wheelbase_l: config.wheelbase,
            step_h: hz.h,
        })?);
        let reference = match &config.track.file {
            Some(path) => ReferenceTrajectory::load_csv_with(path, config.wheelbase)?,
            None => {
                let t = &config.track;
                // Long enough that the last horizon still sees a moving reference.
                let params = SynthParams {
                    speed: t.speed,
                    duration: hz.t_f + hz.n as f64 * hz.h,
                    h: hz.h,
                    wheelbase: config.wheelbase,
                    radius: t.radius,
                    straight_length: t.straight_length,
                    bend_length: t.bend_length,
                    x0: t.origin[0],
                    y0: t.origin[1],
                    psi0: t.origin[2],
                };
                synth_track(t.kind, &params)?
            }
        };
        if (reference.h - hz.h).abs() > 1e-12 * hz.h {
            return Err(ConfigError::Invalid(format!(
                "reference sampled with h={}, horizon uses h={}",
                reference.h, hz.h
            ))
            .into());
        }
        let mut setup = OcpSetup::car(model.clone(), config.objective.alpha)?;
        setup.mode = config.objective.mode;
        setup.terminal_weight = config.objective.terminal_weight;
        let reference_data = Arc::new(ReferenceData::from(&reference));
        Ok(Self {
            config,
            model,
            setup: Arc::new(setup),
            reference,
            reference_data,
        })
    }

    pub fn execution(&self) -> ExecutionMode {
        if self.config.parallel {
            ExecutionMode::Parallel
        } else {
            ExecutionMode::Sequential
        }
    }

    pub fn steps(&self) -> usize {
        step_count(self.config.horizon.t_f, self.config.horizon.h)
    }

    pub fn x0(&self) -> DVector<f64> {
        self.config.initial_state.to_vector()
    }

    pub fn noise(&self) -> NoiseSource {
        NoiseSource::new(self.config.seed, self.config.noise_half_width())
            .with_target(self.config.noise.target)
    }

    pub fn scheme_config(&self, scheme: Scheme) -> SchemeConfig {
        let c = &self.config;
        let mut sc = SchemeConfig::new(scheme, c.horizon.n, c.horizon.m, self.model.nx());
        sc.reopt_on_deviation_only = c.reopt_on_deviation_only;
        sc.sens_fallback_threshold = c.sensitivity.fallback_threshold;
        sc.deviation_scale = DVector::from_row_slice(&CAR_DEVIATION_SCALE);
        sc.chain_rule = c.sensitivity.chain_rule;
        sc.compute_last_sensitivity = c.sensitivity.compute_last;
        sc.execution = self.execution();
        sc
    }

    /// The OCP of the first control step.
    pub fn initial_ocp(&self) -> Result<TrackingOcp, OcpError> {
        let (states, controls) = self.reference_data.window(0, self.config.horizon.n);
        TrackingOcp::new(self.setup.clone(), 0, self.x0(), states, controls)
    }

    pub fn solve_initial(&self) -> Result<OcpSolution, OcpError> {
        solve_ocp(&self.initial_ocp()?, None)
    }

    /// Closed loop of one scheme under the configured noise.
    pub fn run_scheme(&self, scheme: Scheme) -> SchemeOutcome {
        let noise = self.noise();
        let result = Controller::new(
            self.scheme_config(scheme),
            self.setup.clone(),
            self.reference_data.clone(),
        )
        .and_then(|c| c.run(self.model.as_ref(), &noise, &self.x0(), self.steps()));
        match result {
            Ok(trace) => SchemeOutcome {
                scheme,
                trace: Some(trace),
                error: None,
            },
            Err(e) => {
                log::warn!("{scheme}: {e}");
                let trace = match e {
                    NmpcError::Plant { ref partial, .. } => Some((**partial).clone()),
                    NmpcError::Config(_) => None,
                };
                SchemeOutcome {
                    scheme,
                    trace,
                    error: Some(e.to_string()),
                }
            }
        }
    }

    /// All configured schemes, concurrently when enabled.
    pub fn run_all(&self) -> Vec<SchemeOutcome> {
        par::map(self.execution(), self.config.schemes.clone(), |s| {
            self.run_scheme(s)
        })
    }

    pub fn summary_row(&self, outcome: &SchemeOutcome) -> SummaryRow {
        let mut row = SummaryRow {
            scheme: outcome.scheme,
            status: outcome
                .error
                .as_ref()
                .map_or_else(|| "ok".to_string(), |e| format!("failed: {e}")),
            l2_error: None,
            steps: 0,
            full_solves: 0,
            reopt_solves: 0,
            sens_updates: 0,
            fallbacks: 0,
            regular_solves: 0,
            total_solves: 0,
        };
        if let Some(t) = &outcome.trace {
            let c = t.counts;
            row.steps = t.records.len();
            row.full_solves = c.full_solves;
            row.reopt_solves = c.reopt_solves;
            row.sens_updates = c.sens_updates;
            row.fallbacks = c.fallbacks;
            row.regular_solves = t.solves.iter().filter(|s| s.strongly_regular).count();
            row.total_solves = t.solves.len();
            if outcome.succeeded() {
                row.l2_error =
                    tracking_error_l2(t, &self.reference_data, self.config.horizon.h).ok();
            }
        }
        row
    }

    pub fn summarize(&self, outcomes: &[SchemeOutcome]) -> Summary {
        Summary {
            seed: self.config.seed,
            noise_half_width: self.config.noise_half_width(),
            h: self.config.horizon.h,
            t_f: self.config.horizon.t_f,
            rows: outcomes.iter().map(|o| self.summary_row(o)).collect(),
        }
    }

    /// Trace CSV: plant state, applied control, measurement, reference and
    /// tracking error per step. Floats use the shortest exact representation.
    pub fn write_trace_csv(
        &self,
        trace: &ClosedLoopTrace,
        w: &mut impl Write,
    ) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        let errors = tracking_errors(trace, &self.reference_data);
        for (r, e) in trace.records.iter().zip(&errors) {
            let x = &r.plant_state;
            let u = &r.applied_control;
            let y = &r.measured_state;
            let xr = self.reference_data.state(r.k);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.k as f64 * trace.h,
                x[0],
                x[1],
                x[2],
                x[3],
                x[4],
                u[0],
                u[1],
                y[0],
                y[1],
                y[3],
                xr[0],
                xr[1],
                xr[3],
                e[0],
                e[1],
                e[2],
                r.deviation_norm,
                r.action.name()
            )?;
        }
        Ok(())
    }
}

pub fn trace_file_name(scheme: Scheme) -> String {
    format!("trace_{}.csv", scheme.name())
}

/// Result of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentReport {
    pub outcomes: Vec<SchemeOutcome>,
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Run every configured scheme under one shared noise realization, then
/// write `trace_<scheme>.csv`, `summary.txt` and `summary.json` to the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let exp = Experiment::new(config.clone())?;
    let outcomes = exp.run_all();
    let summary = exp.summarize(&outcomes);

    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut files = Vec::new();
    for o in &outcomes {
        let Some(trace) = &o.trace else { continue };
        let path = dir.join(trace_file_name(o.scheme));
        let mut buf = Vec::new();
        exp.write_trace_csv(trace, &mut buf)
            .expect("writing to memory");
        write_file(&path, &buf)?;
        files.push(path);
    }
    let text = dir.join("summary.txt");
    write_file(&text, summary.to_text().as_bytes())?;
    let json = dir.join("summary.json");
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&json, body.as_bytes())?;
    files.push(text);
    files.push(json);
    Ok(ExperimentReport {
        outcomes,
        summary,
        files,
    })
}

/// Recompute the L2 tracking error from a trace CSV written by this module.
pub fn l2_from_trace_csv(path: impl AsRef<Path>, h: f64) -> Result<f64, csv::Error> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|c| c == name)
            .expect("trace column")
    };
    let idx = ["x", "y", "v", "x_ref", "y_ref", "v_ref"].map(col);
    let mut errors = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| rec[idx[i]].parse::<f64>().unwrap_or(f64::NAN);
        errors.push([f(0) - f(3), f(1) - f(4), f(2) - f(5)]);
    }
    Ok(l2_norm(&errors, h))
}
