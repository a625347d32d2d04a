//! Line-search SQP to a KKT point.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_reduced_qp, solve_working_set_qp, QpError};
use super::{
    active_set, check_strong_regularity_with, inf_norm, kkt_residuals, EvalResult, KktSolution,
    NlpError, ParametricNlp, DEFAULT_ACTIVE_TOL,
};

/// KKT error below which full steps may be accepted on KKT progress alone.
const LOCAL_REGIME: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Exact Lagrangian Hessian where the problem provides one, BFGS otherwise.
    Exact,
    /// Damped BFGS regardless of what the problem provides.
    Bfgs,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Target for every KKT residual.
    pub tol: f64,
    /// A point is still returned as converged at this level once progress stalls.
    pub acceptable_tol: f64,
    pub max_iter: usize,
    pub active_tol: f64,
    pub regularity_tol: f64,
    pub hessian: HessianMode,
    pub check_regularity: bool,
    /// Multipliers beyond this magnitude mark the problem as degenerate.
    pub multiplier_limit: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            acceptable_tol: 1e-8,
            max_iter: 200,
            active_tol: DEFAULT_ACTIVE_TOL,
            regularity_tol: 1e-8,
            hessian: HessianMode::Exact,
            check_regularity: true,
            multiplier_limit: 1e10,
        }
    }
}

/// Initial primal point with optional multiplier estimates.
#[derive(Debug, Clone)]
pub struct StartPoint {
    pub z: DVector<f64>,
    pub mu: Option<DVector<f64>>,
    pub lambda: Option<DVector<f64>>,
}

impl StartPoint {
    pub fn primal(z: DVector<f64>) -> Self {
        Self {
            z,
            mu: None,
            lambda: None,
        }
    }

    pub fn from_solution(sol: &KktSolution) -> Self {
        Self {
            z: sol.z_star.clone(),
            mu: Some(sol.mu_star.clone()),
            lambda: Some(sol.lambda_star.clone()),
        }
    }
}

/// Function values and first derivatives at one iterate.
struct Eval {
    obj: f64,
    grad: DVector<f64>,
    h: DVector<f64>,
    hz: DMatrix<f64>,
    g: DVector<f64>,
    gz: DMatrix<f64>,
}

impl Eval {
    fn at<P: ParametricNlp + ?Sized>(
        nlp: &P,
        z: &DVector<f64>,
        p: &DVector<f64>,
    ) -> EvalResult<Self> {
        Ok(Self {
            obj: nlp.objective(z, p)?,
            grad: nlp.objective_grad(z, p)?,
            h: nlp.eq_constraints(z, p)?,
            hz: nlp.eq_jacobian(z, p)?,
            g: nlp.ineq_constraints(z, p)?,
            gz: nlp.ineq_jacobian(z, p)?,
        })
    }

    fn violation(&self) -> f64 {
        self.h.iter().map(|x| x.abs()).sum::<f64>() + self.g.iter().map(|x| x.max(0.0)).sum::<f64>()
    }

    fn merit(&self, penalty: f64) -> f64 {
        self.obj + penalty * self.violation()
    }

    fn lagrangian_grad(&self, mu: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let mut g = self.grad.clone();
        if !mu.is_empty() {
            g += self.gz.tr_mul(mu);
        }
        if !lambda.is_empty() {
            g += self.hz.tr_mul(lambda);
        }
        g
    }

    fn kkt_error(&self, mu: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        kkt_residuals(&self.lagrangian_grad(mu, lambda), &self.h, &self.g, mu).max()
    }
}

fn check_dims<P: ParametricNlp + ?Sized>(
    nlp: &P,
    p: &DVector<f64>,
    start: &StartPoint,
) -> Result<(), NlpError> {
    let dims = nlp.dims();
    let checks = [
        ("z0", dims.n_z, start.z.len()),
        ("p", dims.n_p, p.len()),
        (
            "mu0",
            dims.n_g,
            start.mu.as_ref().map_or(dims.n_g, |m| m.len()),
        ),
        (
            "lambda0",
            dims.n_h,
            start.lambda.as_ref().map_or(dims.n_h, |l| l.len()),
        ),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(NlpError::Dimension {
                what,
                expected,
                got,
            });
        }
    }
    if start.z.iter().any(|v| !v.is_finite()) {
        return Err(NlpError::Evaluation(super::EvalError(
            "non-finite initial guess".into(),
        )));
    }
    Ok(())
}

/// Least-squares equality multipliers for `mu = 0`.
fn initial_lambda(ev: &Eval) -> DVector<f64> {
    let m = ev.h.len();
    if m == 0 {
        return DVector::zeros(0);
    }
    let a = ev.hz.transpose();
    match a.clone().svd(true, true).solve(&(-&ev.grad), 1e-12) {
        Ok(l) => l,
        Err(_) => DVector::zeros(m),
    }
}

/// Solve `nlp` at parameter `p` from the primal guess `z0`.
pub fn solve<P: ParametricNlp + ?Sized>(
    nlp: &P,
    p: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<KktSolution, NlpError> {
    solve_with(
        nlp,
        p,
        &StartPoint::primal(z0.clone()),
        &SolverOptions::default(),
    )
}

/// Solve `nlp` at parameter `p` with explicit start point and options.
pub fn solve_with<P: ParametricNlp + ?Sized>(
    nlp: &P,
    p: &DVector<f64>,
    start: &StartPoint,
    opts: &SolverOptions,
) -> Result<KktSolution, NlpError> {
    check_dims(nlp, p, start)?;
    let n = start.z.len();
    let mut z = start.z.clone();
    let mut ev = Eval::at(nlp, &z, p)?;
    let mut mu = start
        .mu
        .clone()
        .unwrap_or_else(|| DVector::zeros(ev.g.len()))
        .map(|m| m.max(0.0));
    let mut lambda = start.lambda.clone().unwrap_or_else(|| initial_lambda(&ev));
    let mut penalty = 1.0f64;
    let mut bfgs: Option<DMatrix<f64>> = None;
    let mut best_error = f64::INFINITY;
    let mut stalled_iters = 0;

    let mut iterations = 0;
    loop {
        let error = ev.kkt_error(&mu, &lambda);
        if error <= opts.tol {
            break;
        }
        if error < 0.5 * best_error {
            best_error = error;
            stalled_iters = 0;
        } else {
            stalled_iters += 1;
        }
        if error <= opts.acceptable_tol && stalled_iters >= 3 {
            break;
        }
        if iterations >= opts.max_iter {
            if error <= opts.acceptable_tol {
                break;
            }
            return Err(NlpError::MaxIterations {
                iterations,
                kkt_error: error,
            });
        }
        iterations += 1;

        let exact = match opts.hessian {
            HessianMode::Exact => nlp.lagrangian_hessian(&z, p, &mu, &lambda).transpose()?,
            HessianMode::Bfgs => None,
        };
        let b = match exact {
            Some(h) => h,
            None => bfgs.get_or_insert_with(|| DMatrix::identity(n, n)).clone(),
        };

        let qp =
            solve_reduced_qp(&b, &ev.grad, &ev.hz, &ev.h, &ev.gz, &ev.g).map_err(|e| match e {
                QpError::Infeasible => NlpError::QpInfeasible,
                QpError::RankDeficient => {
                    NlpError::Degenerate("constraint Jacobian rank deficient".into())
                }
                QpError::IterationLimit => NlpError::Degenerate("QP cycling".into()),
            })?;
        // A convexified QP only yields a linearly convergent step; when its
        // working set supports an exact-curvature step, take that instead.
        let qp = match qp.convexified {
            true => solve_working_set_qp(&b, &ev.grad, &ev.hz, &ev.h, &ev.gz, &ev.g, &qp.active)
                .unwrap_or(qp),
            false => qp,
        };
        let mult_max = inf_norm(&qp.mu).max(inf_norm(&qp.lambda));
        if !(mult_max <= opts.multiplier_limit) {
            return Err(NlpError::Degenerate(format!(
                "multiplier magnitude {mult_max:e} unbounded"
            )));
        }
        let d = qp.d;

        // l1 merit line search with a second-order correction on the full step.
        penalty = penalty.max(1.5 * mult_max + 1e-3);
        let phi0 = ev.merit(penalty);
        let slope = ev.grad.dot(&d) - penalty * ev.violation();
        let armijo = 1e-4 * slope.min(0.0);
        let merit_blind = slope.abs() <= 1e-8 * phi0.abs().max(1.0);
        let mut alpha = 1.0;
        let accepted = loop {
            let trial = &z + &d * alpha;
            let trial_ev = Eval::at(nlp, &trial, p).ok();
            if let Some(te) = &trial_ev {
                if te.merit(penalty) <= phi0 + alpha * armijo + 1e-14 * phi0.abs() {
                    break Some((trial, trial_ev.unwrap()));
                }
                // Near a solution, or whenever the predicted merit change is
                // lost in rounding, accept full steps that shrink the KKT error.
                if alpha == 1.0
                    && (error < LOCAL_REGIME || merit_blind)
                    && te.kkt_error(&qp.mu, &qp.lambda) <= 0.5 * error
                {
                    break Some((trial, trial_ev.unwrap()));
                }
                if alpha == 1.0 && te.h.len() > 0 {
                    if let Some(soc) = second_order_correction(nlp, p, &trial, te, &qp.active) {
                        if soc.1.merit(penalty) <= phi0 + armijo + 1e-14 * phi0.abs() {
                            break Some(soc);
                        }
                    }
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                break None;
            }
        };
        let Some((z_new, ev_new)) = accepted else {
            if error <= opts.acceptable_tol {
                break;
            }
            return Err(NlpError::Stalled { kkt_error: error });
        };

        let mu_new = &mu + (&qp.mu - &mu) * alpha;
        let lambda_new = &lambda + (&qp.lambda - &lambda) * alpha;
        if exact_is_missing(opts, nlp, &z_new, p, &mu_new, &lambda_new) {
            let s = &z_new - &z;
            let y = ev_new.lagrangian_grad(&mu_new, &lambda_new)
                - ev.lagrangian_grad(&mu_new, &lambda_new);
            if let Some(bk) = bfgs.as_mut() {
                damped_bfgs_update(bk, &s, &y);
            }
        }
        z = z_new;
        ev = ev_new;
        mu = mu_new;
        lambda = lambda_new;
    }

    let grad_l = ev.lagrangian_grad(&mu, &lambda);
    let res = kkt_residuals(&grad_l, &ev.h, &ev.g, &mu);
    let mut sol = KktSolution {
        active_set: active_set(&ev.g, &mu, opts.active_tol),
        z_star: z,
        mu_star: mu,
        lambda_star: lambda,
        kkt_residual: res.stationarity,
        feasibility: res.feasibility,
        complementarity: res.complementarity,
        objective: ev.obj,
        iterations,
        regularity: super::RegularityReport::unchecked(),
    };
    if opts.check_regularity {
        sol.regularity =
            check_strong_regularity_with(nlp, &sol, p, opts.active_tol, opts.regularity_tol)?;
    }
    Ok(sol)
}

fn exact_is_missing<P: ParametricNlp + ?Sized>(
    opts: &SolverOptions,
    nlp: &P,
    z: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    lambda: &DVector<f64>,
) -> bool {
    match opts.hessian {
        HessianMode::Bfgs => true,
        HessianMode::Exact => nlp.lagrangian_hessian(z, p, mu, lambda).is_none(),
    }
}

/// Minimum-norm step back onto the linearized equalities at the trial point,
/// keeping the working-set inequalities at their linearized values.
fn second_order_correction<P: ParametricNlp + ?Sized>(
    nlp: &P,
    p: &DVector<f64>,
    trial: &DVector<f64>,
    te: &Eval,
    working: &[usize],
) -> Option<(DVector<f64>, Eval)> {
    let (m, n) = (te.h.len(), trial.len());
    let k = m + working.len();
    let mut a = DMatrix::zeros(k, n);
    let mut rhs = DVector::zeros(k);
    a.rows_mut(0, m).copy_from(&te.hz);
    rhs.rows_mut(0, m).copy_from(&(-&te.h));
    for (r, &i) in working.iter().enumerate() {
        a.row_mut(m + r).copy_from(&te.gz.row(i));
        rhs[m + r] = -te.g[i];
    }
    let gram = &a * a.transpose();
    let w = gram.cholesky()?.solve(&rhs);
    let corrected = trial + a.tr_mul(&w);
    let ev = Eval::at(nlp, &corrected, p).ok()?;
    Some((corrected, ev))
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-300 {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}
