//! QP subproblem of the SQP method.
//!
//! ```text
//!     minimize  g'd + 1/2 d'Bd   s.t.   H + Hz d = 0,   G + Gz d <= 0
//! ```
//!
//! The equalities are eliminated with a QR basis of their null space; the
//! remaining inequality-constrained QP is solved by the dual active-set
//! method of Goldfarb and Idnani, which needs no feasible starting point,
//! reports infeasibility, and returns the exact active set and multipliers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum QpError {
    #[error("QP constraints are inconsistent")]
    Infeasible,
    #[error("equality constraint Jacobian is rank deficient")]
    RankDeficient,
    #[error("dual active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    /// Multipliers of `G + Gz d <= 0` (non-negative).
    pub mu: DVector<f64>,
    /// Multipliers of `H + Hz d = 0`.
    pub lambda: DVector<f64>,
    /// Inequalities in the final working set.
    pub active: Vec<usize>,
    /// True when the reduced Hessian had to be convexified.
    pub convexified: bool,
}

/// Orthogonal split of `R^n` into the row space of `Hz` and its complement.
struct EqualitySpace {
    /// Orthonormal basis of range(Hz'), `n x m`.
    range: DMatrix<f64>,
    /// Orthonormal basis of null(Hz), `n x (n - m)`.
    null: DMatrix<f64>,
    /// Upper triangular factor with `Hz' = range * r`.
    r: DMatrix<f64>,
}

fn equality_space(hz: &DMatrix<f64>) -> Result<EqualitySpace, QpError> {
    let (m, n) = hz.shape();
    if m == 0 {
        return Ok(EqualitySpace {
            range: DMatrix::zeros(n, 0),
            null: DMatrix::identity(n, n),
            r: DMatrix::zeros(0, 0),
        });
    }
    if m > n {
        return Err(QpError::RankDeficient);
    }
    // Pad to square so the Householder QR yields a full orthogonal factor.
    let mut padded = DMatrix::zeros(n, n);
    padded.columns_mut(0, m).copy_from(&hz.transpose());
    let qr = padded.qr();
    let q = qr.q();
    let r_full = qr.r();
    let r = r_full.view((0, 0), (m, m)).into_owned();
    let diag_max = (0..m).fold(0.0f64, |a, i| a.max(r[(i, i)].abs()));
    if diag_max == 0.0 || (0..m).any(|i| r[(i, i)].abs() <= 1e-12 * diag_max) {
        return Err(QpError::RankDeficient);
    }
    Ok(EqualitySpace {
        range: q.columns(0, m).into_owned(),
        null: q.columns(m, n - m).into_owned(),
        r,
    })
}

/// Symmetric positive definite inverse of `h`, flipping and flooring
/// eigenvalues when `h` is not safely positive definite.
fn convexified_inverse(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = h.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &l| a.max(l.abs()));
    let floor = 1e-10 * scale;
    let mut modified = false;
    let inv_diag = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| {
            if l > floor {
                1.0 / l
            } else {
                modified = true;
                1.0 / l.abs().max(1e-8 * scale)
            }
        }),
    );
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_diag) * v.transpose();
    (inv, modified)
}

/// Goldfarb-Idnani dual active-set method for
/// `min 1/2 y'Qy + c'y  s.t.  C y <= e` with `Q` given through its inverse.
///
/// Returns the minimizer, the multiplier of every row and the final working set.
fn dual_active_set(
    q_inv: &DMatrix<f64>,
    c: &DVector<f64>,
    cmat: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, Vec<usize>), QpError> {
    let n = c.len();
    let m = e.len();
    let mut y = -(q_inv * c);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let row_norm: Vec<f64> = (0..m).map(|i| cmat.row(i).norm().max(1e-300)).collect();
    let max_iter = 50 * (n + m + 10);
    let mut iter = 0;

    loop {
        // Most violated constraint, scaled by its row norm.
        let mut add = None;
        let mut worst = 0.0;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let slack = e[i] - cmat.row(i).dot(&y.transpose());
            let tol = 1e-12 * (1.0 + e[i].abs());
            if slack < -tol {
                let v = -slack / row_norm[i];
                if v > worst {
                    worst = v;
                    add = Some(i);
                }
            }
        }
        let Some(p) = add else {
            let mut mu = DVector::zeros(m);
            for (k, &i) in active.iter().enumerate() {
                mu[i] = u[k].max(0.0);
            }
            return Ok((y, mu, active));
        };

        let a_p = cmat.row(p).transpose();
        let mut u_plus = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::IterationLimit);
            }
            // Primal direction z and dual direction r for the candidate normal.
            let qa = q_inv * &a_p;
            let (z, r) = if active.is_empty() {
                (qa, DVector::zeros(0))
            } else {
                let na = DMatrix::from_fn(n, active.len(), |i, k| cmat[(active[k], i)]);
                let qn = q_inv * &na;
                let schur = na.transpose() * &qn;
                let rhs = na.transpose() * &qa;
                let r = schur
                    .clone()
                    .lu()
                    .solve(&rhs)
                    .ok_or(QpError::RankDeficient)?;
                (qa - &qn * &r, r)
            };

            // Partial step: largest dual step keeping active multipliers >= 0.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            // Full step: makes constraint p active.
            let za = z.dot(&a_p);
            let violation = cmat.row(p).dot(&y.transpose()) - e[p];
            let t2 = if z.norm() <= 1e-14 * a_p.norm() * q_inv.norm().max(1.0) || za <= 0.0 {
                f64::INFINITY
            } else {
                violation / za
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                for (uk, rk) in u.iter_mut().zip(r.iter()) {
                    *uk -= t1 * rk;
                }
                u_plus += t1;
                let k = drop.expect("finite t1 has an index");
                active.remove(k);
                u.remove(k);
                continue;
            }
            let t = t1.min(t2);
            // z = H a_p points away from the feasible side of row p.
            y -= &z * t;
            for (uk, rk) in u.iter_mut().zip(r.iter()) {
                *uk -= t * rk;
            }
            u_plus += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_plus);
                break;
            }
            let k = drop.expect("finite t1 has an index");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Solve the SQP subproblem in the null space of the equality Jacobian.
pub fn solve_reduced_qp(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    hz: &DMatrix<f64>,
    h: &DVector<f64>,
    gz: &DMatrix<f64>,
    gv: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let space = equality_space(hz)?;
    let m = h.len();
    let d_p = if m == 0 {
        DVector::zeros(g.len())
    } else {
        // Hz d_p = -H with d_p in range(Hz'): R' w = -H, d_p = Q1 w.
        let w = space
            .r
            .tr_solve_upper_triangular(&(-h))
            .ok_or(QpError::RankDeficient)?;
        &space.range * w
    };
    let z = &space.null;
    let reduced_h = z.transpose() * b * z;
    let reduced_g = z.transpose() * (g + b * &d_p);
    let (q_inv, convexified) = convexified_inverse(&reduced_h);
    let cmat = gz * z;
    let e = -(gv + gz * &d_p);
    let (y, mu, active) = dual_active_set(&q_inv, &reduced_g, &cmat, &e)?;
    let d = &d_p + z * y;

    let lambda = if m == 0 {
        DVector::zeros(0)
    } else {
        let rhs = -(g + b * &d + gz.tr_mul(&mu));
        space
            .r
            .solve_upper_triangular(&space.range.tr_mul(&rhs))
            .ok_or(QpError::RankDeficient)?
    };
    Ok(QpSolution {
        d,
        mu,
        lambda,
        active,
        convexified,
    })
}

/// Equality-constrained step with a fixed working set.
///
/// Treats the inequalities in `working` as equalities and solves with the
/// unmodified `b`. Returns `None` unless the reduced Hessian is positive
/// definite, the working-set multipliers are non-negative and every other
/// linearized inequality holds, i.e. unless the step also solves the
/// inequality-constrained QP. Near a solution whose active set makes the QP
/// convex only on a subspace this restores the Newton step that
/// [`solve_reduced_qp`] loses by convexifying.
pub fn solve_working_set_qp(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    hz: &DMatrix<f64>,
    h: &DVector<f64>,
    gz: &DMatrix<f64>,
    gv: &DVector<f64>,
    working: &[usize],
) -> Option<QpSolution> {
    let (m, n) = (h.len(), g.len());
    let k = m + working.len();
    let mut a = DMatrix::zeros(k, n);
    let mut c = DVector::zeros(k);
    if m > 0 {
        a.rows_mut(0, m).copy_from(hz);
        c.rows_mut(0, m).copy_from(&(-h));
    }
    for (r, &i) in working.iter().enumerate() {
        a.row_mut(m + r).copy_from(&gz.row(i));
        c[m + r] = -gv[i];
    }
    let space = equality_space(&a).ok()?;
    let d_p = if k == 0 {
        DVector::zeros(n)
    } else {
        &space.range * space.r.tr_solve_upper_triangular(&c)?
    };
    let z = &space.null;
    let reduced_h = z.transpose() * b * z;
    let reduced_h = (&reduced_h + reduced_h.transpose()) * 0.5;
    let scale = reduced_h.amax().max(1.0);
    if reduced_h.nrows() > 0 && reduced_h.symmetric_eigenvalues().min() <= 1e-10 * scale {
        return None;
    }
    let y = if reduced_h.nrows() == 0 {
        DVector::zeros(0)
    } else {
        reduced_h
            .cholesky()?
            .solve(&(-(z.transpose() * (g + b * &d_p))))
    };
    let d = d_p + z * y;
    let w = if k == 0 {
        DVector::zeros(0)
    } else {
        space
            .r
            .solve_upper_triangular(&space.range.tr_mul(&(-(g + b * &d))))?
    };
    let mut mu = DVector::zeros(gv.len());
    for (r, &i) in working.iter().enumerate() {
        if w[m + r] < 0.0 {
            return None;
        }
        mu[i] = w[m + r];
    }
    let lin = gv + gz * &d;
    let slack_tol = 1e-12 * (1.0 + gv.amax());
    if lin
        .iter()
        .enumerate()
        .any(|(i, v)| *v > slack_tol && !working.contains(&i))
    {
        return None;
    }
    Some(QpSolution {
        d,
        mu,
        lambda: w.rows(0, m).into_owned(),
        active: working.to_vec(),
        convexified: false,
    })
}
