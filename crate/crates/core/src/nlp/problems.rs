//! Small closed-form problems for tests, examples and diagnostics.

use nalgebra::{DMatrix, DVector};

use super::{EvalResult, NlpDims, ParametricNlp};

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn mat1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// `min z^2  s.t.  1 - z <= 0`; no parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoundedSquare;

impl ParametricNlp for BoundedSquare {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: 1,
            n_p: 0,
            n_h: 0,
            n_g: 1,
        }
    }
    fn objective(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<f64> {
        Ok(z[0] * z[0])
    }
    fn objective_grad(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(2.0 * z[0]))
    }
    fn eq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn eq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 1))
    }
    fn ineq_constraints(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(1.0 - z[0]))
    }
    fn ineq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(mat1(-1.0))
    }
    fn lagrangian_hessian(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        Some(Ok(mat1(2.0)))
    }
}

/// `min (z - p)^2`, optionally subject to `z <= upper`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedSquare {
    pub upper: Option<f64>,
}

impl ParametricNlp for ShiftedSquare {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: 1,
            n_p: 1,
            n_h: 0,
            n_g: usize::from(self.upper.is_some()),
        }
    }
    fn objective(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<f64> {
        Ok((z[0] - p[0]).powi(2))
    }
    fn objective_grad(&self, z: &DVector<f64>, p: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(2.0 * (z[0] - p[0])))
    }
    fn eq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn eq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 1))
    }
    fn ineq_constraints(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(match self.upper {
            Some(u) => scalar(z[0] - u),
            None => DVector::zeros(0),
        })
    }
    fn ineq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(match self.upper {
            Some(_) => mat1(1.0),
            None => DMatrix::zeros(0, 1),
        })
    }
    fn lagrangian_hessian(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        Some(Ok(mat1(2.0)))
    }
    fn lagrangian_hessian_zp(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> EvalResult<DMatrix<f64>> {
        Ok(mat1(-2.0))
    }
}

/// Rosenbrock's function on the line `z1 + z2 = 1`; no parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct RosenbrockOnLine;

impl ParametricNlp for RosenbrockOnLine {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: 2,
            n_p: 0,
            n_h: 1,
            n_g: 0,
        }
    }
    fn objective(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<f64> {
        Ok((1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2))
    }
    fn objective_grad(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        let r = z[1] - z[0] * z[0];
        Ok(DVector::from_row_slice(&[
            -2.0 * (1.0 - z[0]) - 400.0 * z[0] * r,
            200.0 * r,
        ]))
    }
    fn eq_constraints(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(z[0] + z[1] - 1.0))
    }
    fn eq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
    }
    fn ineq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn ineq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 2))
    }
    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        let h00 = 2.0 - 400.0 * (z[1] - 3.0 * z[0] * z[0]);
        let h01 = -400.0 * z[0];
        Some(Ok(DMatrix::from_row_slice(2, 2, &[h00, h01, h01, 200.0])))
    }
}

/// `min z^4`, whose minimizer has zero curvature.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quartic;

impl ParametricNlp for Quartic {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: 1,
            n_p: 0,
            n_h: 0,
            n_g: 0,
        }
    }
    fn objective(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<f64> {
        Ok(z[0].powi(4))
    }
    fn objective_grad(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(4.0 * z[0].powi(3)))
    }
    fn eq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn eq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 1))
    }
    fn ineq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn ineq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 1))
    }
    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        Some(Ok(mat1(12.0 * z[0] * z[0])))
    }
}

/// `min z^2  s.t.  -z <= 0`: the bound is active with a zero multiplier.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeaklyActive;

impl ParametricNlp for WeaklyActive {
    fn dims(&self) -> NlpDims {
        NlpDims {
            n_z: 1,
            n_p: 0,
            n_h: 0,
            n_g: 1,
        }
    }
    fn objective(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<f64> {
        Ok(z[0] * z[0])
    }
    fn objective_grad(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(2.0 * z[0]))
    }
    fn eq_constraints(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn eq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, 1))
    }
    fn ineq_constraints(&self, z: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DVector<f64>> {
        Ok(scalar(-z[0]))
    }
    fn ineq_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> EvalResult<DMatrix<f64>> {
        Ok(mat1(-1.0))
    }
    fn lagrangian_hessian(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> Option<EvalResult<DMatrix<f64>>> {
        Some(Ok(mat1(2.0)))
    }
}
