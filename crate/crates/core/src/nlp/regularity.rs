//! Strong-regularity certificate of a KKT point.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use super::{
    hessian_or_fd, kkt_residuals, KktSolution, NlpError, ParametricNlp, DEFAULT_ACTIVE_TOL,
};

/// Residual level at which the KKT conditions count as satisfied.
const KKT_TOL: f64 = 1e-8;

/// Outcome of the four strong-regularity tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityReport {
    pub licq_ok: bool,
    /// Smallest singular value of the stacked active constraint gradients.
    pub licq_min_singular: f64,
    pub strict_complementarity_ok: bool,
    /// `min_i (mu_i - G_i)`.
    pub strict_complementarity_margin: f64,
    pub second_order_ok: bool,
    /// Smallest eigenvalue of the Hessian projected on the tangent space of
    /// the active constraints (`+inf` when that space is trivial).
    pub reduced_hessian_min_eig: f64,
    pub kkt_ok: bool,
    pub kkt_residual: f64,
}

impl RegularityReport {
    /// Placeholder for points that have not been checked; fails every test.
    pub fn unchecked() -> Self {
        Self {
            licq_ok: false,
            licq_min_singular: f64::NAN,
            strict_complementarity_ok: false,
            strict_complementarity_margin: f64::NAN,
            second_order_ok: false,
            reduced_hessian_min_eig: f64::NAN,
            kkt_ok: false,
            kkt_residual: f64::NAN,
        }
    }

    pub fn is_strongly_regular(&self) -> bool {
        self.licq_ok && self.strict_complementarity_ok && self.second_order_ok && self.kkt_ok
    }
}

pub fn check_strong_regularity<P: ParametricNlp + ?Sized>(
    nlp: &P,
    sol: &KktSolution,
    p: &DVector<f64>,
) -> Result<RegularityReport, NlpError> {
    check_strong_regularity_with(nlp, sol, p, DEFAULT_ACTIVE_TOL, 1e-8)
}

/// As [`check_strong_regularity`] with explicit active-set and decision
/// tolerances.
pub fn check_strong_regularity_with<P: ParametricNlp + ?Sized>(
    nlp: &P,
    sol: &KktSolution,
    p: &DVector<f64>,
    active_tol: f64,
    tol: f64,
) -> Result<RegularityReport, NlpError> {
    let z = &sol.z_star;
    let (mu, lambda) = (&sol.mu_star, &sol.lambda_star);
    let n = z.len();
    let g = nlp.ineq_constraints(z, p)?;
    let h = nlp.eq_constraints(z, p)?;
    let gz = nlp.ineq_jacobian(z, p)?;
    let hz = nlp.eq_jacobian(z, p)?;

    let grad_l = nlp.lagrangian_grad(z, p, mu, lambda)?;
    let kkt_residual = kkt_residuals(&grad_l, &h, &g, mu).max();

    let active: Vec<usize> = (0..g.len()).filter(|&i| g[i] >= -active_tol).collect();
    let m = hz.nrows() + active.len();
    let mut a = DMatrix::zeros(m.max(n), n);
    a.rows_mut(0, hz.nrows()).copy_from(&hz);
    for (r, &i) in active.iter().enumerate() {
        a.row_mut(hz.nrows() + r).copy_from(&gz.row(i));
    }

    let (licq_min_singular, null_basis) = if m == 0 {
        (f64::INFINITY, DMatrix::identity(n, n))
    } else if m > n {
        (0.0, DMatrix::zeros(n, 0))
    } else {
        // Square padding makes the SVD return a full set of right singular vectors.
        let svd = a.svd(false, true);
        let v_t = svd.v_t.expect("requested V'");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let smin = svd.singular_values[order[m - 1]];
        let mut basis = DMatrix::zeros(n, n - m);
        for (c, &k) in order[m..].iter().enumerate() {
            basis.set_column(c, &v_t.row(k).transpose());
        }
        (smin, basis)
    };

    let margin = mu
        .iter()
        .zip(g.iter())
        .map(|(m, g)| m - g)
        .fold(f64::INFINITY, f64::min);

    let (hess, _) = hessian_or_fd(nlp, z, p, mu, lambda)?;
    let reduced_hessian_min_eig = if null_basis.ncols() == 0 {
        f64::INFINITY
    } else {
        let red = null_basis.tr_mul(&hess) * &null_basis;
        let red = (&red + red.transpose()) * 0.5;
        SymmetricEigen::new(red)
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    };

    Ok(RegularityReport {
        licq_ok: licq_min_singular > tol,
        licq_min_singular,
        strict_complementarity_ok: margin > tol,
        strict_complementarity_margin: margin,
        second_order_ok: reduced_hessian_min_eig > tol,
        reduced_hessian_min_eig,
        kkt_ok: kkt_residual <= KKT_TOL,
        kkt_residual,
    })
}
