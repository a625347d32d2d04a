//! Parametric sensitivity of KKT points and its shift along a solution.
//!
//! At a strongly regular KKT point the solution map `p -> (z, mu, lambda)`
//! is differentiable and its derivative solves
//!
//! ```text
//!     [ Lzz      Gz'  Hz' ] [dz  ]     [ Lzp       ]
//!     [ Xi Gz    Gam  0   ] [dmu ] = - [ Xi Gp     ]
//!     [ Hz       0    0   ] [dlam]     [ Hp        ]
//! ```
//!
//! with `Xi = diag(mu)` and `Gam = diag(G)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Model, SINGULAR_CONDITION};
use crate::nlp::{
    check_strong_regularity, hessian_or_fd, EvalError, KktSolution, NlpError, ParametricNlp,
    RegularityReport,
};

/// Default radius of validity of the first-order update, in the scaled norm.
pub const DEFAULT_TRUST_RADIUS: f64 = 0.5;

/// Bound on the normwise relative residual of the sensitivity solve.
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SensitivityError {
    #[error("KKT point is not strongly regular")]
    NotStronglyRegular(Box<RegularityReport>),
    #[error("KKT sensitivity matrix is singular (relative residual {residual:e})")]
    SingularKktMatrix { residual: f64 },
    #[error("perturbation {distance} exceeds trust radius {radius}")]
    TrustRadiusExceeded { distance: f64, radius: f64 },
    #[error("shift factor {step} is singular (condition estimate {condition:e})")]
    AssumptionViolated { step: usize, condition: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

impl From<NlpError> for SensitivityError {
    fn from(e: NlpError) -> Self {
        match e {
            NlpError::Evaluation(e) => SensitivityError::Evaluation(e),
            other => SensitivityError::Evaluation(EvalError(other.to_string())),
        }
    }
}

/// Derivatives of a KKT point with respect to the parameter.
#[derive(Debug, Clone)]
pub struct SensitivityDifferentials {
    /// `n_z x n_p`.
    pub dz_dp: DMatrix<f64>,
    /// `n_g x n_p`.
    pub dmu_dp: DMatrix<f64>,
    /// `n_h x n_p`.
    pub dlambda_dp: DMatrix<f64>,
    pub z_star: DVector<f64>,
    pub nominal_p: DVector<f64>,
    pub trust_radius: f64,
    /// Per-component scale of the parameter norm used against `trust_radius`.
    pub scale: DVector<f64>,
}

impl SensitivityDifferentials {
    pub fn with_trust_region(mut self, radius: f64, scale: DVector<f64>) -> Self {
        self.trust_radius = radius;
        self.scale = scale;
        self
    }

    /// `max_i |p_i - p_hat_i| / scale_i`.
    pub fn scaled_distance(&self, p: &DVector<f64>) -> f64 {
        scaled_inf_norm(&(p - &self.nominal_p), &self.scale)
    }
}

pub fn scaled_inf_norm(v: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    v.iter()
        .zip(scale.iter())
        .fold(0.0, |m, (x, s)| m.max((x / s).abs()))
}

/// First-order approximation of the perturbed primal solution.
#[derive(Debug, Clone)]
pub struct TaylorUpdate {
    pub z: DVector<f64>,
    /// Always true; the update is never an exact solve.
    pub first_order: bool,
}

/// Solve the sensitivity system at `sol` for all parameter directions.
pub fn kkt_sensitivity<P: ParametricNlp + ?Sized>(
    nlp: &P,
    sol: &KktSolution,
    p_hat: &DVector<f64>,
) -> Result<SensitivityDifferentials, SensitivityError> {
    let dims = nlp.dims();
    if p_hat.len() != dims.n_p {
        return Err(SensitivityError::Dimension {
            what: "p_hat",
            expected: dims.n_p,
            got: p_hat.len(),
        });
    }
    let report = if sol.regularity.is_strongly_regular() {
        sol.regularity
    } else {
        check_strong_regularity(nlp, sol, p_hat)?
    };
    if !report.is_strongly_regular() {
        return Err(SensitivityError::NotStronglyRegular(Box::new(report)));
    }

    let z = &sol.z_star;
    let (mu, lambda) = (&sol.mu_star, &sol.lambda_star);
    let (nz, ng, nh, np) = (dims.n_z, dims.n_g, dims.n_h, dims.n_p);
    let (hess, _) = hessian_or_fd(nlp, z, p_hat, mu, lambda)?;
    let gz = nlp.ineq_jacobian(z, p_hat)?;
    let hz = nlp.eq_jacobian(z, p_hat)?;
    let g = nlp.ineq_constraints(z, p_hat)?;

    let n = nz + ng + nh;
    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (nz, nz)).copy_from(&hess);
    k.view_mut((0, nz), (nz, ng)).copy_from(&gz.transpose());
    k.view_mut((0, nz + ng), (nz, nh))
        .copy_from(&hz.transpose());
    for i in 0..ng {
        let mut row = k.view_mut((nz + i, 0), (1, nz));
        row.copy_from(&gz.row(i));
        row *= mu[i];
        k[(nz + i, nz + i)] = g[i];
    }
    k.view_mut((nz + ng, 0), (nh, nz)).copy_from(&hz);

    let mut rhs = DMatrix::zeros(n, np);
    if np > 0 {
        let lzp = nlp.lagrangian_hessian_zp(z, p_hat, mu, lambda)?;
        let gp = nlp.ineq_jacobian_p(z, p_hat)?;
        let hp = nlp.eq_jacobian_p(z, p_hat)?;
        rhs.view_mut((0, 0), (nz, np)).copy_from(&(-lzp));
        for i in 0..ng {
            let mut row = rhs.view_mut((nz + i, 0), (1, np));
            row.copy_from(&gp.row(i));
            row *= -mu[i];
        }
        rhs.view_mut((nz + ng, 0), (nh, np)).copy_from(&(-hp));
    }

    let x = solve_refined(&k, &rhs)?;
    Ok(SensitivityDifferentials {
        dz_dp: x.rows(0, nz).into_owned(),
        dmu_dp: x.rows(nz, ng).into_owned(),
        dlambda_dp: x.rows(nz + ng, nh).into_owned(),
        z_star: z.clone(),
        nominal_p: p_hat.clone(),
        trust_radius: DEFAULT_TRUST_RADIUS,
        scale: DVector::from_element(np, 1.0),
    })
}

/// Dense LU solve with one step of iterative refinement and a residual check.
fn solve_refined(k: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, SensitivityError> {
    if rhs.ncols() == 0 {
        return Ok(DMatrix::zeros(k.nrows(), 0));
    }
    let lu = k.clone().lu();
    let singular = SensitivityError::SingularKktMatrix {
        residual: f64::INFINITY,
    };
    let mut x = lu.solve(rhs).ok_or(singular.clone())?;
    let r = rhs - k * &x;
    x += lu.solve(&r).ok_or(singular)?;
    let residual =
        (rhs - k * &x).amax() / (k.amax() * x.amax() + rhs.amax()).max(f64::MIN_POSITIVE);
    if !(residual <= RESIDUAL_TOL) || x.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::SingularKktMatrix { residual });
    }
    Ok(x)
}

/// `z* + dz/dp (p - p_hat)`, refused outside the trust radius.
pub fn taylor_update(
    diff: &SensitivityDifferentials,
    p: &DVector<f64>,
) -> Result<TaylorUpdate, SensitivityError> {
    if p.len() != diff.nominal_p.len() {
        return Err(SensitivityError::Dimension {
            what: "p",
            expected: diff.nominal_p.len(),
            got: p.len(),
        });
    }
    let distance = diff.scaled_distance(p);
    if distance > diff.trust_radius {
        return Err(SensitivityError::TrustRadiusExceeded {
            distance,
            radius: diff.trust_radius,
        });
    }
    Ok(TaylorUpdate {
        z: &diff.z_star + &diff.dz_dp * (p - &diff.nominal_p),
        first_order: true,
    })
}

/// How the state-to-state factors of the shifted sensitivity are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainRule {
    /// Closed-loop factors `f_x + f_u S_l`, which account for the optimal
    /// controls reacting to the state along the nominal trajectory.
    #[default]
    ClosedLoop,
    /// Open-loop factors `f_x` only.
    ModelJacobian,
}

/// Sensitivities of the nominal controls `u(k+j)` with respect to the state
/// `x(k+j)` for `j = 0..M`.
#[derive(Debug, Clone)]
pub struct ShiftedControlSensitivity {
    /// `s[j]` is `m x n`; `s[0]` is the first-control sensitivity itself.
    pub s: Vec<DMatrix<f64>>,
    /// Factors `Phi_l` inverted on the right when building `s[l + 1..]`.
    pub factors: Vec<DMatrix<f64>>,
    pub rule: ChainRule,
}

impl ShiftedControlSensitivity {
    pub fn get(&self, j: usize) -> Option<&DMatrix<f64>> {
        self.s.get(j)
    }
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Shift first-control sensitivities along a nominal solution.
///
/// `control_sens[l]` is `du(k+l)/dx(k)` read from the sensitivity of the
/// OCP solved at `k`; `states[l]`, `controls[l]` are the nominal
/// `x(k+l), u(k+l)`. Returns `S_0..S_m` with
/// `S_j = du(k+j)/dx(k) * Phi_0^-1 * ... * Phi_{j-1}^-1`, each inverse
/// applied by a linear solve.
pub fn shifted_sensitivities(
    model: &dyn Model,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    control_sens: &[DMatrix<f64>],
    m: usize,
    rule: ChainRule,
) -> Result<ShiftedControlSensitivity, SensitivityError> {
    let have = states.len().min(controls.len()).min(control_sens.len());
    if m + 1 > control_sens.len() || m > have {
        return Err(SensitivityError::Dimension {
            what: "shift length",
            expected: m + 1,
            got: control_sens.len().min(have + 1),
        });
    }
    let mut s = vec![control_sens[0].clone()];
    let mut factors = Vec::with_capacity(m);
    for l in 0..m {
        let lin = model.linearize(&states[l], &controls[l])?;
        let fx_cond = condition(&lin.fx);
        if !(fx_cond < SINGULAR_CONDITION) {
            return Err(SensitivityError::AssumptionViolated {
                step: l,
                condition: fx_cond,
            });
        }
        let phi = match rule {
            ChainRule::ModelJacobian => lin.fx,
            ChainRule::ClosedLoop => &lin.fx + &lin.fu * &s[l],
        };
        let cond = condition(&phi);
        if !(cond < SINGULAR_CONDITION) {
            return Err(SensitivityError::AssumptionViolated {
                step: l,
                condition: cond,
            });
        }
        factors.push(phi);

        // S_{l+1} = D_{l+1} Phi_0^-1 ... Phi_l^-1, one transposed solve per factor.
        let mut t = control_sens[l + 1].transpose();
        for f in &factors {
            let lu = f.transpose().lu();
            t = lu.solve(&t).ok_or(SensitivityError::AssumptionViolated {
                step: l,
                condition: f64::INFINITY,
            })?;
        }
        s.push(t.transpose());
    }
    Ok(ShiftedControlSensitivity { s, factors, rule })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearModel;
    use crate::nlp::problems::ShiftedSquare;
    use crate::nlp::solve;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn identity_tracking() {
        let nlp = ShiftedSquare { upper: None };
        let p = v(&[0.7]);
        let sol = solve(&nlp, &p, &v(&[0.0])).unwrap();
        let d = kkt_sensitivity(&nlp, &sol, &p).unwrap();
        assert!((d.dz_dp[(0, 0)] - 1.0).abs() < 1e-12);
        for q in [-5.0, 0.0, 1.2] {
            let mut d = d.clone();
            d.trust_radius = 10.0;
            let t = taylor_update(&d, &v(&[q])).unwrap();
            assert!((t.z[0] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn active_upper_bound() {
        let nlp = ShiftedSquare { upper: Some(1.0) };
        let p = v(&[2.0]);
        let sol = solve(&nlp, &p, &v(&[0.0])).unwrap();
        assert!((sol.mu_star[0] - 2.0).abs() < 1e-10);
        let d = kkt_sensitivity(&nlp, &sol, &p).unwrap();
        assert!(d.dz_dp[(0, 0)].abs() < 1e-12);
        assert!((d.dmu_dp[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_perturbation_returns_nominal() {
        let nlp = ShiftedSquare { upper: Some(1.0) };
        let p = v(&[2.0]);
        let sol = solve(&nlp, &p, &v(&[0.0])).unwrap();
        let d = kkt_sensitivity(&nlp, &sol, &p).unwrap();
        assert_eq!(taylor_update(&d, &p).unwrap().z, sol.z_star);
    }

    #[test]
    fn trust_radius_enforced() {
        let nlp = ShiftedSquare { upper: None };
        let p = v(&[0.0]);
        let sol = solve(&nlp, &p, &v(&[0.0])).unwrap();
        let d = kkt_sensitivity(&nlp, &sol, &p).unwrap();
        let err = taylor_update(&d, &v(&[0.6])).unwrap_err();
        assert!(matches!(err, SensitivityError::TrustRadiusExceeded { .. }));
    }

    #[test]
    fn weakly_active_refused() {
        let nlp = ShiftedSquare { upper: Some(1.0) };
        let p = v(&[1.0]);
        let sol = solve(&nlp, &p, &v(&[0.0])).unwrap();
        let err = kkt_sensitivity(&nlp, &sol, &p).unwrap_err();
        assert!(matches!(err, SensitivityError::NotStronglyRegular(_)));
    }

    #[test]
    fn identity_dynamics_leave_sensitivities_unchanged() {
        let model = LinearModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 0.0).unwrap();
        let d: Vec<DMatrix<f64>> = (0..4)
            .map(|j| DMatrix::from_row_slice(1, 2, &[j as f64, -1.0]))
            .collect();
        let xs = vec![DVector::zeros(2); 3];
        let us = vec![DVector::zeros(1); 3];
        for rule in [ChainRule::ClosedLoop, ChainRule::ModelJacobian] {
            let sh = shifted_sensitivities(&model, &xs, &us, &d, 3, rule).unwrap();
            for j in 0..=3 {
                assert_eq!(sh.s[j], d[j]);
            }
        }
    }

    #[test]
    fn singular_factor_rejected() {
        let model = LinearModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), 0.1).unwrap();
        let d = vec![DMatrix::zeros(1, 2); 2];
        let err = shifted_sensitivities(
            &model,
            &[DVector::zeros(2)],
            &[DVector::zeros(1)],
            &d,
            1,
            ChainRule::ClosedLoop,
        )
        .unwrap_err();
        assert!(matches!(err, SensitivityError::AssumptionViolated { .. }));
    }
}
