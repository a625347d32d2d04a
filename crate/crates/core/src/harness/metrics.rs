//! Tracking-error metrics.

use thiserror::Error;

use crate::nmpc::{ClosedLoopTrace, ReferenceData};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("trace sampled with h={trace}, reference with h={reference}")]
    GridMismatch { trace: f64, reference: f64 },
}

/// Per-step errors `(x - x_r, y - y_r, v - v_r)` of the plant state.
pub fn tracking_errors(trace: &ClosedLoopTrace, reference: &ReferenceData) -> Vec<[f64; 3]> {
    trace
        .records
        .iter()
        .map(|r| {
            let xr = reference.state(r.k);
            let x = &r.plant_state;
            [x[0] - xr[0], x[1] - xr[1], x[3] - xr[3]]
        })
        .collect()
}

/// `sqrt(h * sum_k |e_k|^2)`, the rectangle rule for the L2 norm on `(0, t_f)`.
pub fn l2_norm(errors: &[[f64; 3]], h: f64) -> f64 {
    let sum: f64 = errors
        .iter()
        .map(|e| e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        .sum();
    (h * sum).sqrt()
}

/// L2 tracking error of the closed-loop plant trajectory.
pub fn tracking_error_l2(
    trace: &ClosedLoopTrace,
    reference: &ReferenceData,
    reference_h: f64,
) -> Result<f64, MetricError> {
    if (trace.h - reference_h).abs() > 1e-12 * reference_h.abs().max(1.0) {
        return Err(MetricError::GridMismatch {
            trace: trace.h,
            reference: reference_h,
        });
    }
    Ok(l2_norm(&tracking_errors(trace, reference), trace.h))
}
