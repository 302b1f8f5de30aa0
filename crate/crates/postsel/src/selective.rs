//! Conditional inference after a randomized group-lasso selection.
//!
//! Conditioning on the observed active set, the active directions u, the
//! inactive subgradients z, and the sign event {active norms > 0} leaves a
//! low-dimensional conditional law. Writing b for sqrt(n) times the target
//! coefficient vector and g for the vector of active group norms, the
//! stationarity map
//!
//!   Pi(b, g) = A b + (B U) g + q
//!
//! reconstructs the randomization, where A and B are moment-matrix blocks in
//! active-first layout, U stacks the unit directions, and q collects the
//! subgradient and inactive-score offsets. Gaussian randomization with
//! covariance Omega then yields conditional parameters
//!
//!   Omega_bar = ((BU)' Omega^-1 BU)^-1,
//!   A_bar     = -Omega_bar (BU)' Omega^-1 A,
//!   b_bar     = -Omega_bar (BU)' Omega^-1 q,
//!   Theta_bar = (Sigma_E^-1 - A_bar' Omega_bar^-1 A_bar + A' Omega^-1 A)^-1,
//!   R_bar     = Theta_bar Sigma_E^-1,
//!   s_bar     = Theta_bar (A_bar' Omega_bar^-1 b_bar - A' Omega^-1 q),
//!
//! and the change of variables to (u, g) contributes the Jacobian factor
//! det(Gamma(g) + Ubar' H_EE^-1 Lambda_E Ubar) with Ubar the orthonormal
//! completions of the active directions. The sign constraint g > c is
//! handled with a log-barrier; the profiled optimizer g*, the selective MLE,
//! and the observed Fisher information all come out of one damped Newton
//! solve in g.
//!
//! When Omega = f * H for the same curvature matrix H used in the blocks,
//! the parameters collapse to
//!
//!   Omega_bar = f (U' H_EE U)^-1,
//!   A_bar     = (U' H_EE U)^-1 U' H_EE,
//!   b_bar     = -(U' H_EE U)^-1 U' Lambda_E u,
//!
//! which skips every p x p solve; the builder uses this form whenever it
//! applies and cross-checks it against the general path in debug builds.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fit::RestrictedFit;
use crate::linalg;
use crate::model::GroupStructure;
use crate::solver::{check_selection_event, GroupLassoSolution, Penalty, RandomizationSpec, SupportLayout};

/// Which formulas build the conditional parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamPath {
    /// Use the simplified form when Omega matches f * H, otherwise the
    /// general form.
    Auto,
    /// Force the general form.
    General,
    /// Force the simplified form; errors when Omega does not match f * H.
    Shortcut,
}

/// Conditional inference problem for one realized selection.
///
/// All p-dimensional quantities use the active-first layout: active columns
/// (group by group) first, then inactive columns.
#[derive(Debug, Clone)]
pub struct SelectiveProblem {
    pub n: usize,
    pub layout: SupportLayout,
    /// Penalty level per active coordinate (block-constant within groups).
    pub lambda_e: DVector<f64>,
    /// Observed active group norms gamma_hat.
    pub gamma_hat: DVector<f64>,
    /// Randomization covariance in layout coordinates.
    pub omega: DMatrix<f64>,
    /// Offset vector q in layout coordinates.
    pub q: DVector<f64>,
    /// p x |E| drift block of the stationarity map.
    pub a_cal: DMatrix<f64>,
    /// p x (number of active groups) direction block B U.
    pub bu: DMatrix<f64>,
    pub omega_bar: DMatrix<f64>,
    pub omega_bar_inv: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub theta_bar: DMatrix<f64>,
    pub theta_bar_inv: DMatrix<f64>,
    pub s_bar: DVector<f64>,
    pub sigma_e: DMatrix<f64>,
    pub sigma_e_inv: DMatrix<f64>,
    /// Symmetrized Jacobian core W' H_EE^-1 W with W = Ubar diag(sqrt lambda).
    jac_core: DMatrix<f64>,
    /// (offset, length) of each active group's columns inside the Jacobian
    /// core; length is the group size minus one.
    jac_extents: Vec<(usize, usize)>,
    /// Barrier offset c; the constraint region is g > c componentwise.
    pub barrier_c: f64,
    /// Curvature constant for the entrywise bound on the inverse Fisher
    /// information: max(lambda_max(Sigma_E), lambda_max(A' Omega^-1 A)).
    pub u0: f64,
    /// True when the simplified parameter formulas were used.
    pub shortcut: bool,
}

impl SelectiveProblem {
    pub fn e_size(&self) -> usize {
        self.layout.e_size()
    }

    pub fn n_active_groups(&self) -> usize {
        self.layout.n_active_groups()
    }

    /// R_bar = Theta_bar Sigma_E^-1.
    pub fn r_bar(&self) -> DMatrix<f64> {
        &self.theta_bar * &self.sigma_e_inv
    }
}

/// Orthonormal completion of a unit vector via a Householder reflection:
/// returns a d x (d-1) matrix with orthonormal columns orthogonal to `u`.
fn orthonormal_completion(u: &DVector<f64>) -> DMatrix<f64> {
    let d = u.len();
    if d == 1 {
        return DMatrix::zeros(1, 0);
    }
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = u.clone();
    v[0] += sign;
    let vtv = v.norm_squared();
    // Columns 1..d of H = I - 2 v v' / v'v are orthonormal and orthogonal to
    // column 0, which is proportional to u.
    DMatrix::from_fn(d, d - 1, |i, j| {
        let col = j + 1;
        let id = if i == col { 1.0 } else { 0.0 };
        id - 2.0 * v[i] * v[col] / vtv
    })
}

/// Builds the conditional problem for an accepted selection event.
pub fn build_problem(
    sol: &GroupLassoSolution,
    fit: &RestrictedFit,
    groups: &GroupStructure,
    penalty: &Penalty,
    rand: &RandomizationSpec,
    barrier_c: f64,
) -> Result<SelectiveProblem> {
    build_problem_with(sol, fit, groups, penalty, rand, barrier_c, ParamPath::Auto)
}

/// As [`build_problem`] with an explicit choice of parameter formulas.
pub fn build_problem_with(
    sol: &GroupLassoSolution,
    fit: &RestrictedFit,
    groups: &GroupStructure,
    penalty: &Penalty,
    rand: &RandomizationSpec,
    barrier_c: f64,
    path: ParamPath,
) -> Result<SelectiveProblem> {
    if sol.is_empty() {
        return Err(Error::NothingSelected);
    }
    if !check_selection_event(sol) {
        return Err(Error::InvalidInput(
            "selection event is not usable for conditioning (solver did not \
             converge cleanly or the active set is ambiguous)"
                .into(),
        ));
    }
    let layout = sol.layout.clone();
    let e = layout.e_size();
    let g_count = layout.n_active_groups();
    let p = groups.p();

    if rand.omega.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "randomization dimension {} does not match p = {p}",
            rand.omega.len()
        )));
    }

    // Layout permutation: active columns then inactive columns.
    let mut perm = layout.e_cols.clone();
    perm.extend_from_slice(&layout.ep_cols);

    let h_ee = linalg::block(&fit.moments.h, &layout.e_cols, &layout.e_cols);
    let h_pe = linalg::block(&fit.moments.h, &layout.ep_cols, &layout.e_cols);

    // Per-coordinate penalty levels on the active and inactive blocks.
    let mut lambda_e = DVector::zeros(e);
    for (k, &g) in layout.active_groups.iter().enumerate() {
        let (off, len) = layout.e_extents[k];
        for j in 0..len {
            lambda_e[off + j] = penalty.level(g);
        }
    }
    let mut lambda_p = DVector::zeros(layout.ep_size());
    for (k, &g) in layout.inactive_groups.iter().enumerate() {
        let (off, len) = layout.ep_extents[k];
        for j in 0..len {
            lambda_p[off + j] = penalty.level(g);
        }
    }

    // Stationarity-map blocks in layout coordinates. With K = phi H the drift
    // block is -H restricted to the active columns; the general form keeps
    // the K-dependent correction A_E from the restricted fit.
    let mut a_cal = DMatrix::zeros(p, e);
    for i in 0..e {
        for j in 0..e {
            a_cal[(i, j)] = -h_ee[(i, j)];
        }
    }
    for i in 0..layout.ep_size() {
        for j in 0..e {
            a_cal[(e + i, j)] = fit.blocks.a_e[(i, j)] - h_pe[(i, j)];
        }
    }
    let mut b_cal = DMatrix::zeros(p, e);
    for i in 0..e {
        for j in 0..e {
            b_cal[(i, j)] = h_ee[(i, j)];
        }
    }
    for i in 0..layout.ep_size() {
        for j in 0..e {
            b_cal[(e + i, j)] = h_pe[(i, j)];
        }
    }

    // Direction matrix U: one column per active group holding its unit
    // direction in that group's rows.
    let mut u_mat = DMatrix::zeros(e, g_count);
    for k in 0..g_count {
        let (off, len) = layout.e_extents[k];
        for j in 0..len {
            u_mat[(off + j, k)] = sol.u_stack[off + j];
        }
    }
    let bu = &b_cal * &u_mat;

    // Offset q: active rows carry lambda * u, inactive rows carry the
    // subgradient offset lambda * z plus the scaled inactive score.
    let n_data = rand.n;
    let sqn = (n_data as f64).sqrt();
    let mut q = DVector::zeros(p);
    for i in 0..e {
        q[i] = lambda_e[i] * sol.u_stack[i];
    }
    for i in 0..layout.ep_size() {
        q[e + i] = lambda_p[i] * sol.z_stack[i] + sqn * fit.beta_perp[i];
    }

    let omega = linalg::block(&rand.omega_matrix, &perm, &perm);

    // Shortcut applicability: Omega must equal f * H for the same H the
    // blocks were built from.
    let shortcut_f = match rand.scaled_h {
        Some(f) => {
            let h_perm = linalg::block(&fit.moments.h, &perm, &perm);
            let scale = linalg::max_abs(&omega).max(1.0);
            let diff = linalg::max_abs(&(&omega - &h_perm * f));
            if diff <= 1e-10 * scale {
                Some(f)
            } else {
                None
            }
        }
        None => None,
    };

    let use_shortcut = match path {
        ParamPath::Auto => shortcut_f.is_some(),
        ParamPath::General => false,
        ParamPath::Shortcut => {
            if shortcut_f.is_none() {
                return Err(Error::InvalidInput(
                    "simplified parameter formulas require Omega = f * H for \
                     the fitted curvature matrix"
                        .into(),
                ));
            }
            true
        }
    };

    let general = |with_aq: bool| -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        let omega_chol = linalg::cholesky(&omega, "randomization covariance")?;
        let oinv_bu = omega_chol.solve(&bu);
        let mut omega_bar_inv = bu.transpose() * &oinv_bu;
        linalg::symmetrize(&mut omega_bar_inv);
        let omega_bar = linalg::spd_inverse(&omega_bar_inv, "Omega_bar^-1")?;
        let a_bar = -&omega_bar * (oinv_bu.transpose() * &a_cal);
        let b_bar = -&omega_bar * (oinv_bu.transpose() * &q);
        let (aoa, aoq) = if with_aq {
            let oinv_a = omega_chol.solve(&a_cal);
            let mut aoa = a_cal.transpose() * &oinv_a;
            linalg::symmetrize(&mut aoa);
            let aoq = a_cal.transpose() * (omega_chol.solve(&q));
            (aoa, aoq)
        } else {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        };
        Ok((omega_bar, omega_bar_inv, a_bar, b_bar, aoa, aoq))
    };

    let (omega_bar, omega_bar_inv, a_bar, b_bar, aoa, aoq) = if use_shortcut {
        let f = shortcut_f.unwrap();
        let mut uhu = u_mat.transpose() * &h_ee * &u_mat;
        linalg::symmetrize(&mut uhu);
        let uhu_inv = linalg::spd_inverse(&uhu, "U' H_EE U")?;
        let omega_bar = &uhu_inv * f;
        let omega_bar_inv = &uhu / f;
        let a_bar = &uhu_inv * (u_mat.transpose() * &h_ee);
        let lam_u = DVector::from_fn(e, |i, _| lambda_e[i] * sol.u_stack[i]);
        let b_bar = -&uhu_inv * (u_mat.transpose() * &lam_u);
        #[cfg(debug_assertions)]
        {
            let (gob, _goi, goa, gobb, _, _) = general(false)?;
            let scale = linalg::max_abs(&gob).max(1.0);
            debug_assert!(
                linalg::max_abs(&(&gob - &omega_bar)) <= 1e-8 * scale,
                "simplified Omega_bar disagrees with the general form"
            );
            let scale = linalg::max_abs(&goa).max(1.0);
            debug_assert!(
                linalg::max_abs(&(&goa - &a_bar)) <= 1e-8 * scale,
                "simplified A_bar disagrees with the general form"
            );
            let scale = linalg::max_norm(&gobb).max(1.0);
            debug_assert!(
                linalg::max_norm(&(&gobb - &b_bar)) <= 1e-8 * scale,
                "simplified b_bar disagrees with the general form"
            );
        }
        // Theta_bar and s_bar still need A' Omega^-1 A and A' Omega^-1 q;
        // with Omega = f H these reduce to H-block solves of size p, done
        // once. Omega^-1 A has active rows -(1/f) on the identity pattern:
        // H^-1 H_E = columns of the identity, so A' Omega^-1 A = H_EE / f
        // and A' Omega^-1 q = -q_E / f.
        let aoa = &h_ee / f;
        let aoq = -DVector::from_fn(e, |i, _| q[i]) / f;
        (omega_bar, omega_bar_inv, a_bar, b_bar, aoa, aoq)
    } else {
        general(true)?
    };

    let sigma_e = fit.blocks.sigma_e.clone();
    let sigma_e_inv = fit.blocks.sigma_e_inv.clone();

    let mut theta_bar_inv =
        &sigma_e_inv - a_bar.transpose() * &omega_bar_inv * &a_bar + &aoa;
    linalg::symmetrize(&mut theta_bar_inv);
    let theta_bar = linalg::spd_inverse(&theta_bar_inv, "Theta_bar^-1")?;
    let s_bar = &theta_bar * (a_bar.transpose() * &omega_bar_inv * &b_bar - &aoq);

    // Jacobian core: diagonally rescaling by sqrt(lambda) makes
    // Gamma(g) + Ubar' H_EE^-1 Lambda_E Ubar similar to the symmetric
    // Gamma(g) + W' H_EE^-1 W with W = Ubar diag(sqrt lambda); determinant,
    // inverse diagonal, and the (i,j)(j,i) products are invariant, so the
    // symmetric form is used throughout.
    let jac_cols = e - g_count;
    let mut w = DMatrix::zeros(e, jac_cols);
    let mut jac_extents = Vec::with_capacity(g_count);
    {
        let mut col = 0;
        for k in 0..g_count {
            let (off, len) = layout.e_extents[k];
            let u_g = DVector::from_fn(len, |j, _| sol.u_stack[off + j]);
            let comp = orthonormal_completion(&u_g);
            let s = lambda_e[off].sqrt();
            for j in 0..(len - 1) {
                for i in 0..len {
                    w[(off + i, col + j)] = s * comp[(i, j)];
                }
            }
            jac_extents.push((col, len - 1));
            col += len - 1;
        }
    }
    let mut jac_core = w.transpose() * &fit.blocks.h_ee_inv * &w;
    linalg::symmetrize(&mut jac_core);

    let u0 = linalg::sym_max_eig(&sigma_e).max(linalg::sym_max_eig(&aoa));

    Ok(SelectiveProblem {
        n: n_data,
        layout,
        lambda_e,
        gamma_hat: sol.gamma.clone(),
        omega,
        q,
        a_cal,
        bu,
        omega_bar,
        omega_bar_inv,
        a_bar,
        b_bar,
        theta_bar,
        theta_bar_inv,
        s_bar,
        sigma_e,
        sigma_e_inv,
        jac_core,
        jac_extents,
        barrier_c,
        u0,
        shortcut: use_shortcut,
    })
}

/// Reconstructs the sqrt(n)-scaled randomization vector from the
/// stationarity map at (beta_scaled, g), in layout coordinates.
pub fn reconstruct_randomization(
    problem: &SelectiveProblem,
    beta_scaled: &DVector<f64>,
    g: &DVector<f64>,
) -> DVector<f64> {
    &problem.a_cal * beta_scaled + &problem.bu * g + &problem.q
}

fn jacobian_matrix(problem: &SelectiveProblem, g: &DVector<f64>) -> DMatrix<f64> {
    let mut m = problem.jac_core.clone();
    for (k, &(off, len)) in problem.jac_extents.iter().enumerate() {
        for j in 0..len {
            m[(off + j, off + j)] += g[k];
        }
    }
    m
}

/// log det of the reparametrization Jacobian at g; identically zero when all
/// active groups are singletons.
pub fn log_jacobian(problem: &SelectiveProblem, g: &DVector<f64>) -> Result<f64> {
    if problem.jac_core.nrows() == 0 {
        return Ok(0.0);
    }
    let m = jacobian_matrix(problem, g);
    linalg::spd_log_det(&m, "Jacobian matrix")
}

/// Gradient of log det with respect to g (one entry per active group).
pub fn grad_log_jacobian(problem: &SelectiveProblem, g: &DVector<f64>) -> Result<DVector<f64>> {
    let g_count = problem.n_active_groups();
    if problem.jac_core.nrows() == 0 {
        return Ok(DVector::zeros(g_count));
    }
    let m = jacobian_matrix(problem, g);
    let inv = linalg::spd_inverse(&m, "Jacobian matrix")?;
    let mut grad = DVector::zeros(g_count);
    for (k, &(off, len)) in problem.jac_extents.iter().enumerate() {
        grad[k] = (0..len).map(|j| inv[(off + j, off + j)]).sum();
    }
    Ok(grad)
}

/// Hessian of log det with respect to g.
pub fn hess_log_jacobian(problem: &SelectiveProblem, g: &DVector<f64>) -> Result<DMatrix<f64>> {
    let g_count = problem.n_active_groups();
    if problem.jac_core.nrows() == 0 {
        return Ok(DMatrix::zeros(g_count, g_count));
    }
    let m = jacobian_matrix(problem, g);
    let inv = linalg::spd_inverse(&m, "Jacobian matrix")?;
    let mut hess = DMatrix::zeros(g_count, g_count);
    for (k, &(ko, kl)) in problem.jac_extents.iter().enumerate() {
        for (l, &(lo, ll)) in problem.jac_extents.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..kl {
                for j2 in 0..ll {
                    let v = inv[(ko + j, lo + j2)];
                    s += v * v;
                }
            }
            hess[(k, l)] = -s;
        }
    }
    Ok(hess)
}

/// Barrier value sum_k log(1 + 1/(v_k - c)); domain v > c componentwise.
pub fn barrier_value(v: &DVector<f64>, c: f64) -> Result<f64> {
    let mut total = 0.0;
    for (k, &x) in v.iter().enumerate() {
        let d = x - c;
        if d <= 0.0 {
            return Err(Error::BarrierDomain {
                index: k,
                value: x,
                c,
            });
        }
        total += (1.0 + 1.0 / d).ln();
    }
    Ok(total)
}

/// Barrier gradient: -1 / ((v - c)(v - c + 1)) componentwise.
pub fn barrier_grad(v: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(v.len());
    for (k, &x) in v.iter().enumerate() {
        let d = x - c;
        if d <= 0.0 {
            return Err(Error::BarrierDomain {
                index: k,
                value: x,
                c,
            });
        }
        grad[k] = -1.0 / (d * (d + 1.0));
    }
    Ok(grad)
}

/// Diagonal of the barrier Hessian: (2(v - c) + 1) / ((v - c)^2 (v - c + 1)^2).
pub fn barrier_hess_diag(v: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    let mut diag = DVector::zeros(v.len());
    for (k, &x) in v.iter().enumerate() {
        let d = x - c;
        if d <= 0.0 {
            return Err(Error::BarrierDomain {
                index: k,
                value: x,
                c,
            });
        }
        diag[k] = (2.0 * d + 1.0) / (d * d * (d + 1.0) * (d + 1.0));
    }
    Ok(diag)
}

/// Solution of the profiled optimization over the active group norms.
#[derive(Debug, Clone)]
pub struct GStarSolution {
    /// Optimizer g*.
    pub g: DVector<f64>,
    pub iterations: usize,
    pub grad_max: f64,
    /// Curvature Omega_bar^-1 - hess log J + hess Barr at g*.
    pub curvature: DMatrix<f64>,
    /// Objective value at g*.
    pub value: f64,
}

// Tight enough that the argmin error stays below 1e-10 even when the
// curvature at the optimum is small; Newton pays at most one extra iteration.
const GSTAR_TOL: f64 = 1e-12;
const GSTAR_MAX_ITER: usize = 200;

fn gstar_objective(problem: &SelectiveProblem, m: &DVector<f64>, g: &DVector<f64>) -> Result<f64> {
    let diff = g - m;
    let quad = 0.5 * diff.dot(&(&problem.omega_bar_inv * &diff));
    Ok(quad - log_jacobian(problem, g)? + barrier_value(g, problem.barrier_c)?)
}

/// Minimizes the profiled objective
///
///   (1/2)(g - m)' Omega_bar^-1 (g - m) - log J(g) + Barr(g)
///
/// over g > c by damped Newton with a fraction-to-boundary step control.
/// `m` is the conditional mean input; the data version is
/// m = A_bar beta_scaled + b_bar.
pub fn solve_gstar_at(
    problem: &SelectiveProblem,
    m: &DVector<f64>,
    init: Option<&DVector<f64>>,
) -> Result<GStarSolution> {
    let c = problem.barrier_c;
    let k = problem.n_active_groups();
    let mut g = match init {
        Some(v) => v.clone(),
        None => DVector::from_fn(k, |i, _| problem.gamma_hat[i] * (problem.n as f64).sqrt()),
    };
    for v in g.iter_mut() {
        *v = v.max(c + 1.0);
    }
    let mut value = gstar_objective(problem, m, &g)?;
    let mut grad_max = f64::INFINITY;
    for it in 0..GSTAR_MAX_ITER {
        let grad = &problem.omega_bar_inv * &(&g - m) - grad_log_jacobian(problem, &g)?
            + barrier_grad(&g, c)?;
        grad_max = linalg::max_norm(&grad);
        if grad_max < GSTAR_TOL {
            let curvature = gstar_curvature(problem, &g)?;
            return Ok(GStarSolution {
                g,
                iterations: it,
                grad_max,
                curvature,
                value,
            });
        }
        let curvature = gstar_curvature(problem, &g)?;
        let chol = linalg::cholesky(&curvature, "profiled objective curvature")?;
        let delta = chol.solve(&-&grad);
        // Fraction-to-boundary rule: keep at least 1% of the current distance
        // to the constraint.
        let mut alpha: f64 = 1.0;
        for i in 0..k {
            if delta[i] < 0.0 {
                alpha = alpha.min(0.99 * (g[i] - c) / (-delta[i]));
            }
        }
        let mut stepped = false;
        for _ in 0..60 {
            let cand = &g + &delta * alpha;
            match gstar_objective(problem, m, &cand) {
                Ok(cand_val) if cand_val <= value + 1e-14 * (1.0 + value.abs()) => {
                    g = cand;
                    value = cand_val;
                    stepped = true;
                    break;
                }
                Ok(_) | Err(Error::BarrierDomain { .. }) | Err(Error::NotPositiveDefinite { .. }) => {
                    alpha *= 0.5;
                }
                Err(other) => return Err(other),
            }
        }
        if !stepped {
            if grad_max < 1e-6 {
                let curvature = gstar_curvature(problem, &g)?;
                return Ok(GStarSolution {
                    g,
                    iterations: it + 1,
                    grad_max,
                    curvature,
                    value,
                });
            }
            return Err(Error::NonConvergence {
                what: "profiled norm optimization line search".into(),
                iterations: it + 1,
                residual: grad_max,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "profiled norm optimization".into(),
        iterations: GSTAR_MAX_ITER,
        residual: grad_max,
    })
}

fn gstar_curvature(problem: &SelectiveProblem, g: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut curv = &problem.omega_bar_inv - hess_log_jacobian(problem, g)?;
    let bh = barrier_hess_diag(g, problem.barrier_c)?;
    for i in 0..g.len() {
        curv[(i, i)] += bh[i];
    }
    linalg::symmetrize(&mut curv);
    Ok(curv)
}

/// Solves the profiled optimization at the observed data.
pub fn solve_gstar(problem: &SelectiveProblem, beta_scaled: &DVector<f64>) -> Result<GStarSolution> {
    let m = &problem.a_bar * beta_scaled + &problem.b_bar;
    solve_gstar_at(problem, &m, None)
}

/// Selective MLE on the coefficient scale:
///
///   sqrt(n) b_hat = Sigma_E [ Theta_bar^-1 (beta_scaled - s_bar)
///                             + A_bar' Omega_bar^-1 (m - g*) ].
pub fn selective_mle(
    problem: &SelectiveProblem,
    beta_scaled: &DVector<f64>,
    gstar: &GStarSolution,
) -> DVector<f64> {
    let m = &problem.a_bar * beta_scaled + &problem.b_bar;
    let inner = &problem.theta_bar_inv * &(beta_scaled - &problem.s_bar)
        + problem.a_bar.transpose() * &problem.omega_bar_inv * (&m - &gstar.g);
    (&problem.sigma_e * inner) / (problem.n as f64).sqrt()
}

/// Observed Fisher information of the selective likelihood on the
/// coefficient scale:
///
///   M = Theta_bar^-1 + A_bar' Omega_bar^-1 A_bar
///       - A_bar' Omega_bar^-1 P^-1 Omega_bar^-1 A_bar,
///   I = n Sigma_E^-1 M^-1 Sigma_E^-1,
///
/// with P the curvature of the profiled objective at g*.
pub fn observed_fisher(problem: &SelectiveProblem, gstar: &GStarSolution) -> Result<DMatrix<f64>> {
    let p_inv = linalg::spd_inverse(&gstar.curvature, "profiled objective curvature")?;
    let oa = &problem.omega_bar_inv * &problem.a_bar;
    let mut m = &problem.theta_bar_inv + problem.a_bar.transpose() * &oa
        - oa.transpose() * &p_inv * &oa;
    linalg::symmetrize(&mut m);
    let m_inv = linalg::spd_inverse(&m, "information core")?;
    let fisher = (&problem.sigma_e_inv * &m_inv * &problem.sigma_e_inv) * problem.n as f64;
    let asym = linalg::asymmetry(&fisher);
    let scale = linalg::max_abs(&fisher).max(1.0);
    if asym > 1e-8 * scale {
        return Err(Error::NotPositiveDefinite {
            what: "observed Fisher information".into(),
            detail: format!("asymmetry {asym:.3e} exceeds tolerance"),
        });
    }
    let mut sym = fisher;
    linalg::symmetrize(&mut sym);
    Ok(sym)
}

/// Entrywise bound check on the inverse Fisher information:
/// max_ij |I^-1_ij| must not exceed u0 (1 + u0^2) / n. Returns
/// (max entry, bound).
pub fn fisher_inverse_bound(problem: &SelectiveProblem, fisher_inv: &DMatrix<f64>) -> (f64, f64) {
    let max_entry = linalg::max_abs(fisher_inv);
    let bound = problem.u0 * (1.0 + problem.u0 * problem.u0) / problem.n as f64;
    (max_entry, bound)
}

/// Wald-style selective inference output.
#[derive(Debug, Clone)]
pub struct SelectiveFit {
    /// Selective MLE on the coefficient scale, in active layout order.
    pub mle: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    pub p_values: DVector<f64>,
    /// Per active group: chi-square statistic, degrees of freedom, p-value.
    pub group_chi2: Vec<f64>,
    pub group_df: Vec<usize>,
    pub group_p_values: Vec<f64>,
    pub gstar: DVector<f64>,
    pub gstar_iterations: usize,
    pub fisher: DMatrix<f64>,
    pub fisher_inv: DMatrix<f64>,
    /// Largest |entry| of the inverse information and its theoretical bound.
    pub inv_max_entry: f64,
    pub inv_entry_bound: f64,
    pub alpha: f64,
}

/// Builds Wald intervals, coefficient p-values, and per-group chi-square
/// statistics from the selective MLE and observed information.
pub fn wald_inference(
    problem: &SelectiveProblem,
    mle: &DVector<f64>,
    gstar: &GStarSolution,
    fisher: &DMatrix<f64>,
    alpha: f64,
) -> Result<SelectiveFit> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence level alpha must be in (0, 1), got {alpha}"
        )));
    }
    let e = problem.e_size();
    let fisher_inv = linalg::spd_inverse(fisher, "observed Fisher information")?;
    let (inv_max_entry, inv_entry_bound) = fisher_inverse_bound(problem, &fisher_inv);
    debug_assert!(
        inv_max_entry <= inv_entry_bound * (1.0 + 1e-10),
        "inverse information entry {inv_max_entry:.3e} violates bound {inv_entry_bound:.3e}"
    );
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let mut std_errors = DVector::zeros(e);
    let mut ci_lower = DVector::zeros(e);
    let mut ci_upper = DVector::zeros(e);
    let mut p_values = DVector::zeros(e);
    for j in 0..e {
        let var = fisher_inv[(j, j)];
        if var <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                what: "inverse Fisher information".into(),
                detail: format!("diagonal entry {j} is {var:.3e}"),
            });
        }
        let se = var.sqrt();
        std_errors[j] = se;
        ci_lower[j] = mle[j] - z * se;
        ci_upper[j] = mle[j] + z * se;
        let t = (mle[j] / se).abs();
        p_values[j] = 2.0 * (1.0 - normal.cdf(t));
    }

    let g_count = problem.n_active_groups();
    let mut group_chi2 = Vec::with_capacity(g_count);
    let mut group_df = Vec::with_capacity(g_count);
    let mut group_p_values = Vec::with_capacity(g_count);
    for k in 0..g_count {
        let (off, len) = problem.layout.e_extents[k];
        let idx: Vec<usize> = (off..off + len).collect();
        let sub_inv = linalg::block(&fisher_inv, &idx, &idx);
        let sub_prec = linalg::spd_inverse(&sub_inv, "group covariance block")?;
        let b = DVector::from_fn(len, |j, _| mle[off + j]);
        let stat = b.dot(&(&sub_prec * &b));
        let chi = ChiSquared::new(len as f64).map_err(|e| {
            Error::InvalidInput(format!("chi-square with {len} degrees of freedom: {e}"))
        })?;
        group_chi2.push(stat);
        group_df.push(len);
        group_p_values.push(1.0 - chi.cdf(stat));
    }

    Ok(SelectiveFit {
        mle: mle.clone(),
        std_errors,
        ci_lower,
        ci_upper,
        p_values,
        group_chi2,
        group_df,
        group_p_values,
        gstar: gstar.g.clone(),
        gstar_iterations: gstar.iterations,
        fisher: fisher.clone(),
        fisher_inv,
        inv_max_entry,
        inv_entry_bound,
        alpha,
    })
}

/// Selective log-likelihood at a candidate coefficient value, evaluated by
/// direct minimization of the joint objective over the nuisance pair (B, G):
///
///   l(b) = log phi(beta_scaled; R_bar b_s + s_bar, Theta_bar)
///          + inf_{B, G > c} { (1/2)(B - R_bar b_s - s_bar)' Theta_bar^-1 (.)
///                             + (1/2)(G - A_bar B - b_bar)' Omega_bar^-1 (.)
///                             - log J(G) + Barr(G) },
///
/// with b_s = sqrt(n) b. Slow; used as an independent check of the MLE and
/// information formulas.
pub fn brute_force_loglik(
    problem: &SelectiveProblem,
    beta_scaled: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<f64> {
    let e = problem.e_size();
    let b_scaled = b * (problem.n as f64).sqrt();
    let mean = problem.r_bar() * &b_scaled + &problem.s_bar;

    let diff = beta_scaled - &mean;
    let log_det = linalg::spd_log_det(&problem.theta_bar, "Theta_bar")?;
    let density = -0.5 * diff.dot(&(&problem.theta_bar_inv * &diff))
        - 0.5 * log_det
        - 0.5 * e as f64 * (2.0 * std::f64::consts::PI).ln();

    // Inner minimization by alternating a closed-form B-step with the Newton
    // G-step.
    let mut big_b = mean.clone();
    let mut gsol = solve_gstar_at(problem, &(&problem.a_bar * &big_b + &problem.b_bar), None)?;
    let b_prec = {
        let mut m = &problem.theta_bar_inv
            + problem.a_bar.transpose() * &problem.omega_bar_inv * &problem.a_bar;
        linalg::symmetrize(&mut m);
        linalg::cholesky(&m, "nuisance quadratic")?
    };
    let mut value = f64::INFINITY;
    for _ in 0..500 {
        // B-step: (Theta_bar^-1 + A_bar' Omega_bar^-1 A_bar) B =
        //         Theta_bar^-1 mean + A_bar' Omega_bar^-1 (G - b_bar).
        let rhs = &problem.theta_bar_inv * &mean
            + problem.a_bar.transpose() * &problem.omega_bar_inv * (&gsol.g - &problem.b_bar);
        big_b = b_prec.solve(&rhs);
        let m_g = &problem.a_bar * &big_b + &problem.b_bar;
        gsol = solve_gstar_at(problem, &m_g, Some(&gsol.g))?;
        let db = &big_b - &mean;
        let new_value = 0.5 * db.dot(&(&problem.theta_bar_inv * &db)) + gsol.value;
        if (value - new_value).abs() <= 1e-12 * (1.0 + new_value.abs()) {
            value = new_value;
            break;
        }
        value = new_value;
    }
    Ok(density + value)
}
