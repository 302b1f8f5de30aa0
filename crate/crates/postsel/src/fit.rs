//! Restricted M-estimation refit on a selected support and the covariance
//! blocks built from it.
//!
//! With E the active columns, the restricted estimator beta_E solves
//! X_E' rho'(X_E beta_E; Y) = 0 by damped Newton. From the moment matrices
//! at the fit the code assembles
//!
//!   Sigma_E    = H_EE^-1 K_EE H_EE^-1          (target covariance scale),
//!   A_E        = H_E'E - K_E'E K_EE^-1 H_EE    (cross-block drift),
//!   beta_perp  = (1/n) X_E'' rho'(X_E beta_E) - A_E beta_E,
//!   Sigma_perp = K_E'E' - K_E'E K_EE^-1 K_EE'  (inactive score covariance),
//!
//! where E' is the inactive columns. For the loss families here K is a
//! scalar multiple of H, which makes A_E vanish; the general formulas are
//! kept so the code stays correct if that ever changes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    curvature_weights, estimate_moments, loss_gradient, loss_value, Dataset, LossModel,
    MomentMatrices,
};
use crate::solver::SupportLayout;

const GRAD_TOL: f64 = 1e-10;
const GRAD_TOL_STALLED: f64 = 1e-7;
const SEPARATION_GUARD: f64 = 1e4;
const MAX_NEWTON_ITER: usize = 100;
const MAX_HALVINGS: usize = 50;

/// Newton solve outcome for the restricted fit.
#[derive(Debug, Clone)]
pub struct NewtonFit {
    /// Coefficients on the support, in support order.
    pub beta_e: DVector<f64>,
    pub iterations: usize,
    /// Final max-norm of (1/sqrt n) X_E' rho'.
    pub grad_max: f64,
}

/// Solves X_E' rho'(X_E beta; Y) = 0 by damped Newton.
///
/// `warm` is an optional starting point of length |E| (for example the
/// group-lasso solution restricted to E); the zero vector is used otherwise.
pub fn fit_restricted(
    model: &LossModel,
    ds: &Dataset,
    e: &[usize],
    warm: Option<&DVector<f64>>,
) -> Result<NewtonFit> {
    if e.is_empty() {
        return Err(Error::NothingSelected);
    }
    if e.iter().any(|&c| c >= ds.p()) {
        return Err(Error::InvalidInput("support references a column beyond p".into()));
    }
    let m = e.len();
    let sqn = (ds.n() as f64).sqrt();
    let mut beta = match warm {
        Some(w) => {
            if w.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "warm start has length {} but |E| = {m}",
                    w.len()
                )));
            }
            w.clone()
        }
        None => DVector::zeros(m),
    };
    // A warm start that already overflows the loss is replaced by zero.
    let mut loss = match loss_value(model, ds, &beta, e) {
        Ok(v) => v,
        Err(Error::LossOverflow { .. }) if warm.is_some() => {
            beta = DVector::zeros(m);
            loss_value(model, ds, &beta, e)?
        }
        Err(other) => return Err(other),
    };

    let mut grad_max = f64::INFINITY;
    for it in 0..MAX_NEWTON_ITER {
        let grad_full = loss_gradient(model, ds, &beta, e)?;
        let grad = linalg::gather(&grad_full, e);
        grad_max = linalg::max_norm(&grad) / sqn;
        if grad_max < GRAD_TOL {
            return Ok(NewtonFit {
                beta_e: beta,
                iterations: it,
                grad_max,
            });
        }
        let hess = restricted_curvature(model, ds, &beta, e)?;
        let chol = match linalg::cholesky(&hess, "restricted fit curvature") {
            Ok(c) => c,
            Err(_) => return Err(rank_deficiency_error(&hess, e)),
        };
        let delta = chol.solve(&-&grad);
        let mut scale = 1.0;
        let mut stepped = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &delta * scale;
            match loss_value(model, ds, &cand, e) {
                Ok(cand_loss) if cand_loss <= loss + 1e-12 * (1.0 + loss.abs()) => {
                    // The guard applies to accepted iterates only; an
                    // overshooting candidate that the line search rejects is
                    // handled by halving, not treated as divergence.
                    if cand.norm() > SEPARATION_GUARD {
                        return Err(Error::Separation {
                            norm: cand.norm(),
                            guard: SEPARATION_GUARD,
                        });
                    }
                    beta = cand;
                    loss = cand_loss;
                    stepped = true;
                    break;
                }
                Ok(_) | Err(Error::LossOverflow { .. }) => scale *= 0.5,
                Err(other) => return Err(other),
            }
        }
        if !stepped {
            if grad_max <= GRAD_TOL_STALLED {
                return Ok(NewtonFit {
                    beta_e: beta,
                    iterations: it + 1,
                    grad_max,
                });
            }
            return Err(Error::NonConvergence {
                what: "restricted fit line search".into(),
                iterations: it + 1,
                residual: grad_max,
            });
        }
    }
    if grad_max <= GRAD_TOL_STALLED {
        return Ok(NewtonFit {
            beta_e: beta,
            iterations: MAX_NEWTON_ITER,
            grad_max,
        });
    }
    Err(Error::NonConvergence {
        what: "restricted fit".into(),
        iterations: MAX_NEWTON_ITER,
        residual: grad_max,
    })
}

/// X_E' diag(rho'') X_E (unnormalized).
fn restricted_curvature(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<DMatrix<f64>> {
    let w = curvature_weights(model, ds, beta_e, e)?;
    let m = e.len();
    let mut hess = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mut s = 0.0;
            for i in 0..ds.n() {
                s += ds.x[(i, e[a])] * w[i] * ds.x[(i, e[b])];
            }
            hess[(a, b)] = s;
            hess[(b, a)] = s;
        }
    }
    Ok(hess)
}

fn rank_deficiency_error(hess: &DMatrix<f64>, e: &[usize]) -> Error {
    let mut sym = hess.clone();
    linalg::symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let mut min_idx = 0;
    for (i, v) in eig.eigenvalues.iter().enumerate() {
        if *v < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let null = eig.eigenvectors.column(min_idx);
    let max_load = null.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let cols: Vec<String> = e
        .iter()
        .enumerate()
        .filter(|(k, _)| null[*k].abs() > 0.3 * max_load)
        .map(|(_, &c)| c.to_string())
        .collect();
    Error::RankDeficient {
        what: "restricted design X_E".into(),
        detail: format!(
            "columns [{}] are collinear on the support (min eigenvalue {:.3e})",
            cols.join(", "),
            eig.eigenvalues[min_idx]
        ),
    }
}

/// Covariance blocks derived from the moment matrices on a support layout.
#[derive(Debug, Clone)]
pub struct CovarianceBlocks {
    /// |E| x |E| covariance scale of the restricted estimator.
    pub sigma_e: DMatrix<f64>,
    /// Its inverse.
    pub sigma_e_inv: DMatrix<f64>,
    /// |E'| x |E'| covariance scale of the inactive score block.
    pub sigma_perp: DMatrix<f64>,
    /// |E'| x |E| cross-block drift matrix.
    pub a_e: DMatrix<f64>,
    /// H_EE^-1, reused by several downstream formulas.
    pub h_ee_inv: DMatrix<f64>,
}

/// Builds Sigma_E, Sigma_perp, and A_E from moment matrices.
pub fn covariance_blocks(
    moments: &MomentMatrices,
    layout: &SupportLayout,
) -> Result<CovarianceBlocks> {
    let e = &layout.e_cols;
    let ep = &layout.ep_cols;
    let h_ee = linalg::block(&moments.h, e, e);
    let k_ee = linalg::block(&moments.k, e, e);
    let h_ee_inv = linalg::spd_inverse(&h_ee, "H_EE")?;
    let k_ee_chol = linalg::cholesky(&k_ee, "K_EE")?;

    let mut sigma_e = &h_ee_inv * &k_ee * &h_ee_inv;
    linalg::symmetrize(&mut sigma_e);
    let sigma_e_inv = linalg::spd_inverse(&sigma_e, "Sigma_E")?;

    let (sigma_perp, a_e) = if ep.is_empty() {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, e.len()))
    } else {
        let k_pe = linalg::block(&moments.k, ep, e);
        let k_pp = linalg::block(&moments.k, ep, ep);
        let h_pe = linalg::block(&moments.h, ep, e);
        // K_EE^-1 K_EE' and K_EE^-1 H_EE via the Cholesky factor.
        let kinv_kep = k_ee_chol.solve(&k_pe.transpose());
        let kinv_hee = k_ee_chol.solve(&h_ee);
        let mut sigma_perp = &k_pp - &k_pe * &kinv_kep;
        linalg::symmetrize(&mut sigma_perp);
        let a_e = &h_pe - &k_pe * &kinv_hee;
        (sigma_perp, a_e)
    };

    Ok(CovarianceBlocks {
        sigma_e,
        sigma_e_inv,
        sigma_perp,
        a_e,
        h_ee_inv,
    })
}

/// Inactive-score offset beta_perp = (1/n) X_E'' rho'(X_E beta_E) - A_E beta_E.
pub fn compute_beta_perp(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    layout: &SupportLayout,
    a_e: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let grad_full = loss_gradient(model, ds, beta_e, &layout.e_cols)?;
    let score_p = linalg::gather(&grad_full, &layout.ep_cols) / ds.n() as f64;
    Ok(score_p - a_e * beta_e)
}

/// Restricted fit together with its moment matrices and covariance blocks.
#[derive(Debug, Clone)]
pub struct RestrictedFit {
    /// Restricted coefficients on the active columns (coefficient scale).
    pub beta_e: DVector<f64>,
    /// Inactive-score offset (length p - |E|).
    pub beta_perp: DVector<f64>,
    /// Moment matrices evaluated at the fit.
    pub moments: MomentMatrices,
    pub blocks: CovarianceBlocks,
    pub iterations: usize,
    pub grad_max: f64,
}

/// Runs the restricted Newton fit and assembles every derived quantity the
/// conditional inference step needs.
pub fn restricted_fit(
    model: &LossModel,
    ds: &Dataset,
    layout: &SupportLayout,
    warm: Option<&DVector<f64>>,
) -> Result<RestrictedFit> {
    let warm_e = warm.map(|w| linalg::gather(w, &layout.e_cols));
    let newton = fit_restricted(model, ds, &layout.e_cols, warm_e.as_ref())?;
    let moments = estimate_moments(model, ds, &newton.beta_e, &layout.e_cols)?;
    let blocks = covariance_blocks(&moments, layout)?;
    let beta_perp = compute_beta_perp(model, ds, &newton.beta_e, layout, &blocks.a_e)?;
    Ok(RestrictedFit {
        beta_e: newton.beta_e,
        beta_perp,
        moments,
        blocks,
        iterations: newton.iterations,
        grad_max: newton.grad_max,
    })
}
