//! Parametric nonlinear programs and their KKT points.
//!
//! Problems have the form
//!
//! ```text
//!     minimize  J(z, p)   subject to   H(z, p) = 0,   G(z, p) <= 0
//! ```
//!
//! with Lagrangian `L = J + mu' G + lambda' H`. [`solve`] runs an SQP method
//! to a KKT point and [`check_strong_regularity`] certifies LICQ, the KKT
//! conditions, strict complementarity and second-order sufficiency, which
//! are the hypotheses the sensitivity analysis needs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::DynamicsError;

mod qp;
mod regularity;
mod sqp;

pub mod problems;

pub use qp::{solve_reduced_qp, QpError, QpSolution};
pub use regularity::{check_strong_regularity, check_strong_regularity_with, RegularityReport};
pub use sqp::{solve, solve_with, HessianMode, SolverOptions, StartPoint};

/// Failure to evaluate a problem function at a point.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("evaluation failed: {0}")]
pub struct EvalError(pub String);

impl From<DynamicsError> for EvalError {
    fn from(e: DynamicsError) -> Self {
        EvalError(e.to_string())
    }
}

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NlpError {
    #[error("no KKT point after {iterations} iterations (KKT error {kkt_error:e})")]
    MaxIterations { iterations: usize, kkt_error: f64 },
    #[error("QP subproblem infeasible")]
    QpInfeasible,
    #[error("degenerate problem: {0}")]
    Degenerate(String),
    #[error("line search stalled at KKT error {kkt_error:e}")]
    Stalled { kkt_error: f64 },
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlpDims {
    pub n_z: usize,
    pub n_p: usize,
    pub n_h: usize,
    pub n_g: usize,
}

/// Step used by the default finite-difference parameter derivatives.
const FD_STEP: f64 = 1e-6;

/// A smooth parametric NLP with first-derivative callbacks.
///
/// Second derivatives are optional: problems that provide
/// [`lagrangian_hessian`](ParametricNlp::lagrangian_hessian) are solved with
/// exact Newton-SQP, others with damped BFGS. Parameter derivatives default
/// to central differences and should be overridden where they are cheap.
pub trait ParametricNlp: Send + Sync {
    fn dims(&self) -> NlpDims;
    fn objective(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<f64>;
    fn objective_grad(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>>;
    fn eq_constraints(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>>;
    /// `n_h x n_z`.
    fn eq_jacobian(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>>;
    fn ineq_constraints(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>>;
    /// `n_g x n_z`.
    fn ineq_jacobian(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>>;

    /// Exact `grad_zz L`, if available.
    fn lagrangian_hessian(
        &self,
        _z: &DVector<f64>,
        _p: &DVector<f64>,
        _mu: &DVector<f64>,
        _lambda: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        None
    }

    fn lagrangian_grad(
        &self,
        z: &DVector<f64>,
        p: &DVector<f64>,
        mu: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> EvalResult<DVector<f64>> {
        let mut g = self.objective_grad(z, p)?;
        if !mu.is_empty() {
            g += self.ineq_jacobian(z, p)?.tr_mul(mu);
        }
        if !lambda.is_empty() {
            g += self.eq_jacobian(z, p)?.tr_mul(lambda);
        }
        Ok(g)
    }

    /// `grad_zp L`, `n_z x n_p`.
    fn lagrangian_hessian_zp(
        &self,
        z: &DVector<f64>,
        p: &DVector<f64>,
        mu: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> EvalResult<DMatrix<f64>> {
        fd_columns(p, self.dims().n_z, |pp| {
            self.lagrangian_grad(z, pp, mu, lambda)
        })
    }

    /// `H'_p`, `n_h x n_p`.
    fn eq_jacobian_p(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        fd_columns(p, self.dims().n_h, |pp| self.eq_constraints(z, pp))
    }

    /// `G'_p`, `n_g x n_p`.
    fn ineq_jacobian_p(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        fd_columns(p, self.dims().n_g, |pp| self.ineq_constraints(z, pp))
    }
}

/// Central differences of a vector function of `p`, one column per parameter.
fn fd_columns<F>(p: &DVector<f64>, rows: usize, f: F) -> EvalResult<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> EvalResult<DVector<f64>>,
{
    let mut out = DMatrix::zeros(rows, p.len());
    for j in 0..p.len() {
        let step = FD_STEP * p[j].abs().max(1.0);
        let mut pp = p.clone();
        pp[j] += step;
        let plus = f(&pp)?;
        pp[j] = p[j] - step;
        let minus = f(&pp)?;
        out.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(out)
}

/// Central-difference Hessian of the Lagrangian from its gradient.
pub fn lagrangian_hessian_fd<P: ParametricNlp + ?Sized>(
    nlp: &P,
    z: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    lambda: &DVector<f64>,
) -> EvalResult<DMatrix<f64>> {
    let n = z.len();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = FD_STEP * z[j].abs().max(1.0);
        let mut zz = z.clone();
        zz[j] += step;
        let plus = nlp.lagrangian_grad(&zz, p, mu, lambda)?;
        zz[j] = z[j] - step;
        let minus = nlp.lagrangian_grad(&zz, p, mu, lambda)?;
        hess.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// `grad_zz L`: exact when the problem provides it, finite differences otherwise.
pub fn hessian_or_fd<P: ParametricNlp + ?Sized>(
    nlp: &P,
    z: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    lambda: &DVector<f64>,
) -> EvalResult<(DMatrix<f64>, bool)> {
    match nlp.lagrangian_hessian(z, p, mu, lambda) {
        Some(h) => Ok((h?, true)),
        None => Ok((lagrangian_hessian_fd(nlp, z, p, mu, lambda)?, false)),
    }
}

/// A primal-dual point returned by [`solve`].
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub z_star: DVector<f64>,
    /// Inequality multipliers (`n_g`, non-negative).
    pub mu_star: DVector<f64>,
    /// Equality multipliers (`n_h`).
    pub lambda_star: DVector<f64>,
    /// 0-based indices of active inequalities.
    pub active_set: Vec<usize>,
    /// `||grad_z L||_inf`.
    pub kkt_residual: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub objective: f64,
    pub iterations: usize,
    pub regularity: RegularityReport,
}

impl KktSolution {
    /// Restrict the point to a subset of variables and constraint rows.
    ///
    /// The regularity report is reset; callers re-check it on the restricted
    /// problem.
    pub fn restrict(&self, z_idx: &[usize], g_idx: &[usize], h_idx: &[usize]) -> KktSolution {
        let pick = |v: &DVector<f64>, idx: &[usize]| {
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
        };
        let active_set = g_idx
            .iter()
            .enumerate()
            .filter(|(_, gi)| self.active_set.contains(gi))
            .map(|(k, _)| k)
            .collect();
        KktSolution {
            z_star: pick(&self.z_star, z_idx),
            mu_star: pick(&self.mu_star, g_idx),
            lambda_star: pick(&self.lambda_star, h_idx),
            active_set,
            kkt_residual: f64::NAN,
            feasibility: f64::NAN,
            complementarity: f64::NAN,
            objective: f64::NAN,
            iterations: 0,
            regularity: RegularityReport::unchecked(),
        }
    }
}

pub const DEFAULT_ACTIVE_TOL: f64 = 1e-6;

/// Indices `i` (0-based) with `G_i >= -tol`; a constraint exactly at `-tol`
/// counts as active.
///
/// `mu` is accepted for interface symmetry with the multiplier-aware
/// callers and must match `g_values` in length.
pub fn active_set(g_values: &DVector<f64>, mu: &DVector<f64>, tol: f64) -> Vec<usize> {
    debug_assert!(mu.is_empty() || mu.len() == g_values.len());
    g_values
        .iter()
        .enumerate()
        .filter(|(_, &g)| g >= -tol)
        .map(|(i, _)| i)
        .collect()
}

/// Residuals of the KKT conditions at a primal-dual point.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub dual_infeasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn kkt_residuals(
    grad_l: &DVector<f64>,
    h: &DVector<f64>,
    g: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let feas_g = g.iter().fold(0.0f64, |m, &x| m.max(x));
    KktResiduals {
        stationarity: inf_norm(grad_l),
        feasibility: inf_norm(h).max(feas_g),
        complementarity: mu
            .iter()
            .zip(g.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a * b).abs())),
        dual_infeasibility: mu.iter().fold(0.0f64, |m, &x| m.max(-x)),
    }
}

/// Evaluate the KKT residuals of `(z, mu, lambda)` for `nlp` at `p`.
pub fn evaluate_kkt<P: ParametricNlp + ?Sized>(
    nlp: &P,
    z: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    lambda: &DVector<f64>,
) -> EvalResult<KktResiduals> {
    let grad = nlp.lagrangian_grad(z, p, mu, lambda)?;
    let h = nlp.eq_constraints(z, p)?;
    let g = nlp.ineq_constraints(z, p)?;
    Ok(kkt_residuals(&grad, &h, &g, mu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_set_definition() {
        let g = DVector::from_row_slice(&[-1.0, 0.0, -1e-9]);
        assert_eq!(active_set(&g, &DVector::zeros(3), 1e-6), vec![1, 2]);
    }

    #[test]
    fn active_set_empty_when_all_strictly_inactive() {
        let g = DVector::from_element(4, -1.0);
        assert!(active_set(&g, &DVector::zeros(4), 1e-6).is_empty());
    }

    #[test]
    fn active_set_boundary_inclusive() {
        let g = DVector::from_row_slice(&[-1e-6]);
        assert_eq!(active_set(&g, &DVector::zeros(1), 1e-6), vec![0]);
    }
}
