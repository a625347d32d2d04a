//! Reference trajectories: CSV ingestion, synthetic tracks and OCP windows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{step, CarControl, CarParams, CarState, DynamicsError};

pub const CSV_HEADER: [&str; 9] = ["k", "t", "x", "y", "psi", "v", "delta", "u1", "u2"];

/// Steering-rate limit used by the generators, 10% inside the control bound.
const STEER_RATE_LIMIT: f64 = 0.45;
/// Steering-angle bound of the vehicle.
const STEER_LIMIT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: time step deviates from the grid")]
    NonUniformGrid { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("a reference needs at least two samples")]
    TooShort,
    #[error("track needs steering {required:.4} rad, beyond the {limit} rad bound")]
    InfeasibleGeometry { required: f64, limit: f64 },
    #[error("invalid track parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Sampled reference `(x_r(k), u_r(k))` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub h: f64,
    pub states: Vec<CarState>,
    pub controls: Vec<CarControl>,
    /// `max_k ||step(x_k, u_k) - x_{k+1}||_inf` under the car model.
    pub consistency: f64,
}

impl ReferenceTrajectory {
    pub fn new(
        h: f64,
        states: Vec<CarState>,
        controls: Vec<CarControl>,
        wheelbase: f64,
    ) -> Result<Self, ReferenceError> {
        if states.len() != controls.len() {
            return Err(ReferenceError::InvalidParams(
                "state and control sequences differ in length".into(),
            ));
        }
        if states.len() < 2 {
            return Err(ReferenceError::TooShort);
        }
        if !(h > 0.0) {
            return Err(ReferenceError::InvalidParams(
                "sampling time must be positive".into(),
            ));
        }
        let mut r = Self {
            h,
            states,
            controls,
            consistency: 0.0,
        };
        r.consistency = r.consistency_defect(&CarParams {
            wheelbase_l: wheelbase,
            step_h: h,
        });
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Largest one-step defect when rolling the model along the samples.
    /// Infinite if the model cannot be evaluated somewhere.
    pub fn consistency_defect(&self, params: &CarParams) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.len() - 1 {
            match step(&self.states[k], &self.controls[k], params) {
                Ok(next) => {
                    let a = next.to_array();
                    let b = self.states[k + 1].to_array();
                    for i in 0..a.len() {
                        worst = worst.max((a[i] - b[i]).abs());
                    }
                }
                Err(_) => return f64::INFINITY,
            }
        }
        worst
    }

    /// Sample `k`, holding the last one past the end.
    pub fn sample(&self, k: usize) -> (CarState, CarControl) {
        let i = k.min(self.len() - 1);
        (self.states[i], self.controls[i])
    }

    /// States `k0..=k0+n` and controls `k0..k0+n` for an OCP window.
    pub fn window(&self, k0: usize, n: usize) -> ReferenceWindow {
        ReferenceWindow {
            states: (k0..=k0 + n)
                .map(|k| self.sample(k).0.to_vector())
                .collect(),
            controls: (k0..k0 + n).map(|k| self.sample(k).1.to_vector()).collect(),
        }
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, ReferenceError> {
        Self::load_csv_with(path, CarParams::default().wheelbase_l)
    }

    /// Parse a reference file; `.gz` files are decompressed.
    pub fn load_csv_with(path: impl AsRef<Path>, wheelbase: f64) -> Result<Self, ReferenceError> {
        let path = path.as_ref();
        let file = BufReader::new(File::open(path)?);
        let reader: Box<dyn Read> = if is_gz(path) {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        let r = Self::read_csv(reader, wheelbase)?;
        if r.consistency > 1e-6 {
            log::warn!(
                "{}: reference is not dynamically consistent (defect {:e})",
                path.display(),
                r.consistency
            );
        }
        Ok(r)
    }

    pub fn read_csv(reader: impl Read, wheelbase: f64) -> Result<Self, ReferenceError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        let mut cols = [0usize; 9];
        for (c, name) in CSV_HEADER.iter().enumerate() {
            cols[c] = headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| ReferenceError::MissingColumn(name.to_string()))?;
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut controls = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| csv_error(e, line))?;
            let mut vals = [0.0f64; 9];
            for (c, &col) in cols.iter().enumerate() {
                let field = rec.get(col).ok_or_else(|| ReferenceError::Parse {
                    line,
                    message: format!("missing field `{}`", CSV_HEADER[c]),
                })?;
                vals[c] = field.trim().parse().map_err(|e| ReferenceError::Parse {
                    line,
                    message: format!("field `{}`: {e}", CSV_HEADER[c]),
                })?;
            }
            times.push((line, vals[1]));
            states.push(CarState::new(vals[2], vals[3], vals[4], vals[5], vals[6]));
            controls.push(CarControl::new(vals[7], vals[8]));
        }
        if times.len() < 2 {
            return Err(ReferenceError::TooShort);
        }
        let h = times[1].1 - times[0].1;
        if !(h > 0.0) {
            return Err(ReferenceError::NonUniformGrid { line: times[1].0 });
        }
        for w in times.windows(2) {
            if ((w[1].1 - w[0].1) - h).abs() > 1e-9 {
                return Err(ReferenceError::NonUniformGrid { line: w[1].0 });
            }
        }
        Self::new(h, states, controls, wheelbase)
    }

    /// Write the canonical CSV form; `.gz` paths are compressed.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), ReferenceError> {
        let path = path.as_ref();
        let file = BufWriter::new(File::create(path)?);
        if is_gz(path) {
            let mut enc = GzEncoder::new(file, Compression::default());
            self.write_csv(&mut enc)?;
            enc.finish()?.flush()?;
        } else {
            let mut file = file;
            self.write_csv(&mut file)?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), ReferenceError> {
        writeln!(w, "{}", CSV_HEADER.join(","))?;
        for (k, (s, c)) in self.states.iter().zip(&self.controls).enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                k,
                k as f64 * self.h,
                s.x_pos,
                s.y_pos,
                s.psi,
                s.v,
                s.delta,
                c.u1,
                c.u2
            )?;
        }
        Ok(())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn csv_error(e: csv::Error, fallback_line: usize) -> ReferenceError {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    ReferenceError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reference data for one OCP: `N + 1` states and `N` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Straight,
    Circle,
    Oval,
    Chicane,
}

impl std::str::FromStr for TrackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "straight" => Ok(Self::Straight),
            "circle" => Ok(Self::Circle),
            "oval" => Ok(Self::Oval),
            "chicane" => Ok(Self::Chicane),
            other => Err(format!("unknown track kind `{other}`")),
        }
    }
}

/// Parameters of the synthetic track generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Constant reference speed [m/s].
    pub speed: f64,
    /// Length of the generated reference [s].
    pub duration: f64,
    /// Sampling time [s].
    pub h: f64,
    pub wheelbase: f64,
    /// Turn radius of circles, oval ends and chicane bends [m].
    pub radius: f64,
    /// Length of oval straights and of the lead-in before each chicane [m].
    pub straight_length: f64,
    /// Arc length of each chicane bend [m].
    pub bend_length: f64,
    /// Initial pose of the reference.
    pub x0: f64,
    pub y0: f64,
    pub psi0: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            speed: 10.0,
            duration: 110.0,
            h: 0.3,
            wheelbase: 4.0,
            radius: 40.0,
            straight_length: 100.0,
            bend_length: 20.0,
            x0: 0.0,
            y0: 0.0,
            psi0: 0.0,
        }
    }
}

/// Number of samples covering `[0, duration]` on the grid.
pub fn sample_count(duration: f64, h: f64) -> usize {
    (duration / h - 1e-9).ceil().max(0.0) as usize + 1
}

/// Steering angle for a steady turn of radius `r` (signed, left positive).
fn steady_steering(r: f64, wheelbase: f64) -> Result<f64, ReferenceError> {
    let required = (wheelbase / r.abs()).atan();
    if required > STEER_LIMIT {
        return Err(ReferenceError::InfeasibleGeometry {
            required,
            limit: STEER_LIMIT,
        });
    }
    Ok(required.copysign(r))
}

/// Generate a dynamically consistent reference at constant speed.
///
/// The steering angle follows a piecewise-constant target in arc length,
/// approached at a bounded steering rate; states come from rolling the
/// model forward.
pub fn synth_track(
    kind: TrackKind,
    params: &SynthParams,
) -> Result<ReferenceTrajectory, ReferenceError> {
    let p = params;
    if !(p.h > 0.0 && p.duration > 0.0 && p.wheelbase > 0.0) {
        return Err(ReferenceError::InvalidParams(
            "h, duration and wheelbase must be positive".into(),
        ));
    }
    if !(p.speed >= 0.0 && p.speed <= 60.0) {
        return Err(ReferenceError::InvalidParams(
            "speed must lie in [0, 60]".into(),
        ));
    }
    let turn = match kind {
        TrackKind::Straight => 0.0,
        _ => {
            if !(p.radius > 0.0) {
                return Err(ReferenceError::InvalidParams(
                    "radius must be positive".into(),
                ));
            }
            steady_steering(p.radius, p.wheelbase)?
        }
    };
    let half_circle = std::f64::consts::PI * p.radius;
    let target = |s: f64| -> f64 {
        match kind {
            TrackKind::Straight => 0.0,
            TrackKind::Circle => turn,
            TrackKind::Oval => {
                let lap = 2.0 * (p.straight_length + half_circle);
                let s = s.rem_euclid(lap);
                let s = if s >= lap / 2.0 { s - lap / 2.0 } else { s };
                if s < p.straight_length {
                    0.0
                } else {
                    turn
                }
            }
            TrackKind::Chicane => {
                let period = p.straight_length + 2.0 * p.bend_length;
                let s = s.rem_euclid(period);
                if s < p.straight_length {
                    0.0
                } else if s < p.straight_length + p.bend_length {
                    turn
                } else {
                    -turn
                }
            }
        }
    };
    if matches!(kind, TrackKind::Oval | TrackKind::Chicane)
        && !(p.straight_length >= 0.0 && p.bend_length > 0.0)
    {
        return Err(ReferenceError::InvalidParams(
            "segment lengths must be positive".into(),
        ));
    }

    let n = sample_count(p.duration, p.h);
    let car = CarParams {
        wheelbase_l: p.wheelbase,
        step_h: p.h,
    };
    let mut states = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    let mut x = CarState::new(p.x0, p.y0, p.psi0, p.speed, target(0.0));
    for k in 0..n {
        // Aim at the steering target of the next sample.
        let s_next = p.speed * p.h * (k + 1) as f64;
        let u2 = ((target(s_next) - x.delta) / p.h).clamp(-STEER_RATE_LIMIT, STEER_RATE_LIMIT);
        let u = CarControl::new(0.0, u2);
        states.push(x);
        controls.push(u);
        if k + 1 < n {
            x = step(&x, &u, &car)?;
        }
    }
    ReferenceTrajectory::new(p.h, states, controls, p.wheelbase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_count_matches_grid() {
        assert_eq!(sample_count(110.0, 0.3), 368);
        assert_eq!(sample_count(3.0, 0.3), 11);
        assert_eq!(sample_count(0.9, 0.3), 4);
    }

    #[test]
    fn straight_track() {
        let r = synth_track(TrackKind::Straight, &SynthParams::default()).unwrap();
        assert_eq!(r.len(), 368);
        assert!(r.states.iter().all(|s| s.y_pos == 0.0));
        assert!(r.consistency <= 1e-12);
    }

    #[test]
    fn infeasible_radius_rejected() {
        let p = SynthParams {
            radius: 7.0,
            ..Default::default()
        };
        assert!(matches!(
            synth_track(TrackKind::Circle, &p),
            Err(ReferenceError::InfeasibleGeometry { .. })
        ));
        let p = SynthParams {
            radius: 7.4,
            ..Default::default()
        };
        assert!(synth_track(TrackKind::Circle, &p).is_ok());
    }

    #[test]
    fn window_holds_last_sample() {
        let p = SynthParams {
            duration: 0.9,
            ..Default::default()
        };
        let r = synth_track(TrackKind::Straight, &p).unwrap();
        let w = r.window(2, 3);
        assert_eq!(w.states.len(), 4);
        assert_eq!(w.controls.len(), 3);
        assert_eq!(w.states[1], r.states[3].to_vector());
        assert_eq!(w.states[2], r.states[3].to_vector());
        assert_eq!(w.states[3], r.states[3].to_vector());
    }
}
