//! Randomized group-lasso solver.
//!
//! Minimizes
//!
//!   (1/sqrt n) sum_i rho(x_i' beta; y_i) + sum_g lambda_g ||beta_g||_2
//!     - sqrt(n) omega' beta
//!
//! where omega is a gaussian randomization draw (optionally absent, which
//! gives the plain group lasso). The main algorithm is accelerated proximal
//! gradient (FISTA) with backtracking and a function-value restart, followed
//! by a Newton polish on the detected support that drives the active-block
//! stationarity residual to near machine precision without changing the
//! support. Block coordinate descent is kept as an independent fallback.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    rho, rho_prime, Dataset, GroupStructure,
    LossModel,
};

/// Per-group penalty levels lambda_g > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    lambda: Vec<f64>,
}

impl Penalty {
    pub fn new(lambda: Vec<f64>, groups: &GroupStructure) -> Result<Self> {
        if lambda.len() != groups.n_groups() {
            return Err(Error::DimensionMismatch(format!(
                "{} penalty levels for {} groups",
                lambda.len(),
                groups.n_groups()
            )));
        }
        if let Some(g) = lambda.iter().position(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "penalty level for group {g} is {} (must be positive and finite)",
                lambda[g]
            )));
        }
        Ok(Penalty { lambda })
    }

    /// Same level for every group.
    pub fn constant(level: f64, groups: &GroupStructure) -> Result<Self> {
        Penalty::new(vec![level; groups.n_groups()], groups)
    }

    pub fn level(&self, g: usize) -> f64 {
        self.lambda[g]
    }

    pub fn levels(&self) -> &[f64] {
        &self.lambda
    }

    /// sum_g lambda_g ||beta_g||.
    pub fn value(&self, beta: &DVector<f64>, groups: &GroupStructure) -> f64 {
        groups
            .iter()
            .map(|(g, cols)| self.lambda[g] * group_norm(beta, cols))
            .sum()
    }

    /// Scales every level by `s`.
    pub fn scaled(&self, s: f64) -> Penalty {
        Penalty {
            lambda: self.lambda.iter().map(|l| l * s).collect(),
        }
    }
}

fn group_norm(beta: &DVector<f64>, cols: &[usize]) -> f64 {
    cols.iter().map(|&c| beta[c] * beta[c]).sum::<f64>().sqrt()
}

/// Default penalty calibration
///
///   lambda_g = base * sqrt((|g| / mean group size) * n * var(Y) * 2 log p),
///
/// so groups are penalized proportionally to the square root of their size
/// and the level tracks the sqrt(n log p) score scale of the objective.
pub fn default_lambda(ds: &Dataset, groups: &GroupStructure, base: f64) -> Result<Penalty> {
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::InvalidInput(format!(
            "base penalty level must be positive, got {base}"
        )));
    }
    let n = ds.n() as f64;
    let mean = ds.y.sum() / n;
    let var = ds.y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateResponse(
            "response has zero variance, cannot calibrate the penalty".into(),
        ));
    }
    let scale = n * var * 2.0 * (ds.p() as f64).ln();
    let mean_size = groups.mean_size();
    let lambda = (0..groups.n_groups())
        .map(|g| base * (groups.size(g) as f64 / mean_size * scale).sqrt())
        .collect();
    Penalty::new(lambda, groups)
}

/// A realized randomization draw together with its covariance.
///
/// omega is distributed so that sqrt(n) * omega ~ N_p(0, Omega).
#[derive(Debug, Clone)]
pub struct RandomizationSpec {
    /// Covariance Omega of sqrt(n) * omega, positive definite.
    pub omega_matrix: DMatrix<f64>,
    /// The realized draw omega (length p).
    pub omega: DVector<f64>,
    /// Sample size the draw was scaled for.
    pub n: usize,
    /// Seed the draw was generated from.
    pub seed: u64,
    /// Set to the factor f when Omega was constructed as f * H for a
    /// curvature estimate H; downstream code can then use the simplified
    /// conditional algebra whenever that same H is in effect.
    pub scaled_h: Option<f64>,
    /// True when the supplied curvature estimate needed a ridge repair to
    /// become positive definite.
    pub repaired: bool,
}

fn draw_from_sqrt(
    sqrt_omega: &DMatrix<f64>,
    seed: u64,
    n: usize,
) -> DVector<f64> {
    let p = sqrt_omega.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
    sqrt_omega * xi / (n as f64).sqrt()
}

/// Draws omega with Omega = f * H, repairing H with a small ridge if it is
/// numerically singular.
pub fn draw_randomization_scaled(
    h: &DMatrix<f64>,
    f: f64,
    seed: u64,
    n: usize,
) -> Result<RandomizationSpec> {
    if h.nrows() != h.ncols() || h.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "curvature estimate is {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::InvalidInput(format!(
            "randomization scale f must be positive, got {f}"
        )));
    }
    let p = h.nrows();
    let (min_eig, max_eig) = linalg::sym_eig_range(h);
    let mut base = h.clone();
    let mut repaired = false;
    if min_eig < 1e-10 * max_eig.max(1.0) {
        let trace: f64 = (0..p).map(|i| h[(i, i)]).sum();
        if trace <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                what: "randomization curvature estimate".into(),
                detail: "matrix has nonpositive trace, ridge repair impossible".into(),
            });
        }
        let ridge = 1e-8 * trace / p as f64;
        for i in 0..p {
            base[(i, i)] += ridge;
        }
        repaired = true;
    }
    let omega_matrix = &base * f;
    let sqrt_omega = linalg::sym_sqrt(&omega_matrix, "randomization covariance")?;
    let omega = draw_from_sqrt(&sqrt_omega, seed, n);
    Ok(RandomizationSpec {
        omega_matrix,
        omega,
        n,
        seed,
        scaled_h: Some(f),
        repaired,
    })
}

/// Draws omega for an explicitly supplied positive definite Omega.
pub fn draw_randomization_explicit(
    omega_matrix: DMatrix<f64>,
    seed: u64,
    n: usize,
) -> Result<RandomizationSpec> {
    linalg::cholesky(&omega_matrix, "randomization covariance")?;
    let sqrt_omega = linalg::sym_sqrt(&omega_matrix, "randomization covariance")?;
    let omega = draw_from_sqrt(&sqrt_omega, seed, n);
    Ok(RandomizationSpec {
        omega_matrix,
        omega,
        n,
        seed,
        scaled_h: None,
        repaired: false,
    })
}

/// Solver algorithm choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Accelerated proximal gradient with backtracking and restarts.
    Fista,
    /// Cyclic block coordinate descent; slower, kept as an independent check.
    Bcd,
}

/// Options controlling the group-lasso solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Relative objective-change stopping tolerance.
    pub tol: f64,
    /// Group-norm threshold separating active from inactive groups.
    pub active_tol: f64,
    pub algorithm: Algorithm,
    /// Run the support-restricted Newton polish after the first-order solve.
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 5000,
            tol: 1e-10,
            active_tol: 1e-8,
            algorithm: Algorithm::Fista,
            polish: true,
        }
    }
}

/// Active-set layout induced by a selection.
///
/// Coordinates of every downstream block vector and matrix follow this
/// layout: active columns first, group by group in group order, then the
/// inactive columns in the same convention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportLayout {
    pub active_groups: Vec<usize>,
    pub inactive_groups: Vec<usize>,
    /// Active columns in layout order (length |E|).
    pub e_cols: Vec<usize>,
    /// Inactive columns in layout order (length p - |E|).
    pub ep_cols: Vec<usize>,
    /// (offset, length) of each active group inside `e_cols`.
    pub e_extents: Vec<(usize, usize)>,
    /// (offset, length) of each inactive group inside `ep_cols`.
    pub ep_extents: Vec<(usize, usize)>,
}

impl SupportLayout {
    pub fn from_active(groups: &GroupStructure, active: &[usize]) -> Self {
        let is_active: Vec<bool> = {
            let mut v = vec![false; groups.n_groups()];
            for &g in active {
                v[g] = true;
            }
            v
        };
        let mut layout = SupportLayout {
            active_groups: Vec::new(),
            inactive_groups: Vec::new(),
            e_cols: Vec::new(),
            ep_cols: Vec::new(),
            e_extents: Vec::new(),
            ep_extents: Vec::new(),
        };
        for (g, cols) in groups.iter() {
            if is_active[g] {
                layout.active_groups.push(g);
                layout.e_extents.push((layout.e_cols.len(), cols.len()));
                layout.e_cols.extend_from_slice(cols);
            } else {
                layout.inactive_groups.push(g);
                layout.ep_extents.push((layout.ep_cols.len(), cols.len()));
                layout.ep_cols.extend_from_slice(cols);
            }
        }
        layout
    }

    pub fn n_active_groups(&self) -> usize {
        self.active_groups.len()
    }

    pub fn e_size(&self) -> usize {
        self.e_cols.len()
    }

    pub fn ep_size(&self) -> usize {
        self.ep_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_cols.is_empty()
    }
}

/// Solution of the randomized group-lasso problem.
#[derive(Debug, Clone)]
pub struct GroupLassoSolution {
    /// Full coefficient vector (length p).
    pub beta: DVector<f64>,
    pub layout: SupportLayout,
    /// Active group norms gamma_g > 0, one per active group in layout order.
    pub gamma: DVector<f64>,
    /// Unit directions of the active groups, stacked in layout order (length |E|).
    pub u_stack: DVector<f64>,
    /// Subgradient directions of the inactive groups recovered from
    /// stationarity, stacked in layout order (length p - |E|).
    pub z_stack: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some group norm fell in the ambiguity band around `active_tol`, so the
    /// active set is not numerically well determined.
    pub degenerate: bool,
    /// Max-norm of the stationarity residual over the active coordinates.
    pub kkt_residual: f64,
    /// Largest inactive subgradient norm; must be <= 1 at a solution.
    pub max_z_norm: f64,
}

impl GroupLassoSolution {
    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Unit direction of the k-th active group.
    pub fn u_group(&self, k: usize) -> DVector<f64> {
        let (off, len) = self.layout.e_extents[k];
        self.u_stack.rows(off, len).into_owned()
    }

    /// Subgradient direction of the k-th inactive group.
    pub fn z_group(&self, k: usize) -> DVector<f64> {
        let (off, len) = self.layout.ep_extents[k];
        self.z_stack.rows(off, len).into_owned()
    }
}

/// Checks whether the solution determines a usable selection event: the
/// solve converged, the active set is nonempty and unambiguous, every active
/// norm is strictly positive, and the inactive subgradients are feasible.
pub fn check_selection_event(sol: &GroupLassoSolution) -> bool {
    sol.converged
        && !sol.degenerate
        && !sol.is_empty()
        && sol.gamma.iter().all(|&g| g > 0.0)
        && sol.max_z_norm <= 1.0 + 1e-8
}

struct SmoothPart<'a> {
    model: &'a LossModel,
    ds: &'a Dataset,
    sqn: f64,
    /// sqrt(n) * omega, zeros when unrandomized.
    lin: DVector<f64>,
}

impl<'a> SmoothPart<'a> {
    fn new(model: &'a LossModel, ds: &'a Dataset, rand: Option<&RandomizationSpec>) -> Result<Self> {
        let p = ds.p();
        let sqn = (ds.n() as f64).sqrt();
        let lin = match rand {
            Some(r) => {
                if r.omega.len() != p {
                    return Err(Error::DimensionMismatch(format!(
                        "randomization has length {} but p = {p}",
                        r.omega.len()
                    )));
                }
                &r.omega * sqn
            }
            None => DVector::zeros(p),
        };
        Ok(SmoothPart { model, ds, sqn, lin })
    }

    fn theta(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.ds.x * beta
    }

    fn value_at_theta(&self, theta: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
        if let Some(i) = theta.iter().position(|t| !t.is_finite() || t.abs() > 500.0) {
            if matches!(
                self.model.kind,
                crate::model::LossKind::Poisson | crate::model::LossKind::QuasiPoisson
            ) || !theta[i].is_finite()
            {
                return Err(Error::LossOverflow {
                    row: i,
                    theta: theta[i],
                    model: self.model.kind.name(),
                });
            }
        }
        let loss: f64 = (0..self.ds.n())
            .map(|i| rho(self.model.kind, theta[i], self.ds.y[i]))
            .sum();
        Ok(loss / self.sqn - self.lin.dot(beta))
    }

    fn value(&self, beta: &DVector<f64>) -> Result<f64> {
        let theta = self.theta(beta);
        self.value_at_theta(&theta, beta)
    }

    fn grad(&self, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let theta = self.theta(beta);
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::LossOverflow {
                row: i,
                theta: theta[i],
                model: self.model.kind.name(),
            });
        }
        let r = DVector::from_fn(self.ds.n(), |i, _| {
            rho_prime(self.model.kind, theta[i], self.ds.y[i])
        });
        let grad = self.ds.x.transpose() * r / self.sqn - &self.lin;
        Ok((grad, theta))
    }
}

fn prox(v: &DVector<f64>, t: f64, penalty: &Penalty, groups: &GroupStructure) -> DVector<f64> {
    let mut out = v.clone();
    for (g, cols) in groups.iter() {
        let norm = group_norm(v, cols);
        let thresh = t * penalty.level(g);
        if norm <= thresh {
            for &c in cols {
                out[c] = 0.0;
            }
        } else {
            let shrink = 1.0 - thresh / norm;
            for &c in cols {
                out[c] *= shrink;
            }
        }
    }
    out
}

/// Rough upper bound on the largest squared singular value of X via power
/// iteration, used only to seed the backtracking step size.
fn spectral_bound(x: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    let mut v = DVector::from_fn(p, |i, _| 1.0 + 0.01 * (i % 7) as f64);
    v /= v.norm();
    let mut est = 1.0;
    for _ in 0..30 {
        let w = x.transpose() * (x * &v);
        let norm = w.norm();
        if norm <= 0.0 {
            return 1.0;
        }
        est = norm;
        v = w / norm;
    }
    est.max(1e-12)
}

/// Full objective value at `beta`.
pub fn objective_value(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    rand: Option<&RandomizationSpec>,
    beta: &DVector<f64>,
) -> Result<f64> {
    let smooth = SmoothPart::new(model, ds, rand)?;
    Ok(smooth.value(beta)? + penalty.value(beta, groups))
}

/// Solves the randomized group-lasso problem.
///
/// `rand = None` solves the unrandomized problem (used by the data splitting
/// and naive baselines). The returned solution carries the detected support
/// layout, the active directions and norms, the recovered inactive
/// subgradients, and stationarity diagnostics.
pub fn solve_group_lasso(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    rand: Option<&RandomizationSpec>,
    opts: &SolveOptions,
) -> Result<GroupLassoSolution> {
    if groups.p() != ds.p() {
        return Err(Error::DimensionMismatch(format!(
            "groups cover {} columns but design has {}",
            groups.p(),
            ds.p()
        )));
    }
    if penalty.levels().len() != groups.n_groups() {
        return Err(Error::DimensionMismatch(
            "penalty does not match the group structure".into(),
        ));
    }
    let smooth = SmoothPart::new(model, ds, rand)?;
    let (beta, iterations, converged) = match opts.algorithm {
        Algorithm::Fista => fista(&smooth, groups, penalty, opts)?,
        Algorithm::Bcd => bcd(&smooth, groups, penalty, opts)?,
    };
    let mut beta = beta;
    let mut extraction = extract(&smooth, groups, penalty, &beta, opts)?;
    if opts.polish && !extraction.layout.is_empty() && !extraction.degenerate {
        if let Some(polished) = polish(&smooth, groups, penalty, &beta, &extraction.layout, opts)? {
            let polished_extraction = extract(&smooth, groups, penalty, &polished, opts)?;
            if polished_extraction.layout == extraction.layout
                && !polished_extraction.degenerate
                && polished_extraction.max_z_norm <= 1.0 + 1e-8
            {
                beta = polished;
                extraction = polished_extraction;
            }
        }
    }
    let objective = smooth.value(&beta)? + penalty.value(&beta, groups);
    Ok(GroupLassoSolution {
        beta,
        layout: extraction.layout,
        gamma: extraction.gamma,
        u_stack: extraction.u_stack,
        z_stack: extraction.z_stack,
        objective,
        iterations,
        converged,
        degenerate: extraction.degenerate,
        kkt_residual: extraction.kkt_residual,
        max_z_norm: extraction.max_z_norm,
    })
}

fn fista(
    smooth: &SmoothPart,
    groups: &GroupStructure,
    penalty: &Penalty,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, usize, bool)> {
    let p = smooth.ds.p();
    let mut beta = DVector::zeros(p);
    let mut momentum = beta.clone();
    let mut theta_k = 1.0_f64;
    let mut step = (smooth.sqn / spectral_bound(&smooth.ds.x)).min(1e6);
    let mut f_prev = smooth.value(&beta)? + penalty.value(&beta, groups);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let (cand, f_cand, used_step) =
            prox_grad_step(smooth, groups, penalty, &momentum, step)?;
        let mut used = used_step;
        let (accepted, f_new) = if f_cand <= f_prev + 1e-15 * (1.0 + f_prev.abs()) {
            (cand, f_cand)
        } else {
            // Momentum overshot: restart from the last iterate, where the
            // backtracked step is a guaranteed descent step.
            theta_k = 1.0;
            let (cand2, f_cand2, used2) = prox_grad_step(smooth, groups, penalty, &beta, step)?;
            used = used2;
            (cand2, f_cand2)
        };
        step = (used * 1.1).min(1e6);

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta_k * theta_k).sqrt());
        let accel = (theta_k - 1.0) / theta_next;
        momentum = &accepted + (&accepted - &beta) * accel;
        theta_k = theta_next;

        let delta = (f_prev - f_new).abs();
        beta = accepted;
        f_prev = f_new;
        if it > 0 && delta <= opts.tol * f_new.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok((beta, iterations, converged))
}

/// One backtracked proximal gradient step from `point`; returns the new
/// iterate, its objective value, and the step size that satisfied the
/// sufficient-decrease condition.
fn prox_grad_step(
    smooth: &SmoothPart,
    groups: &GroupStructure,
    penalty: &Penalty,
    point: &DVector<f64>,
    step0: f64,
) -> Result<(DVector<f64>, f64, f64)> {
    let (grad, theta_pt) = smooth.grad(point)?;
    let s_point = smooth.value_at_theta(&theta_pt, point)?;
    let mut step = step0;
    for _ in 0..80 {
        let cand = prox(&(point - &grad * step), step, penalty, groups);
        let diff = &cand - point;
        let quad = s_point + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
        match smooth.value(&cand) {
            Ok(s_cand) => {
                if s_cand <= quad + 1e-12 * (1.0 + s_point.abs()) {
                    let f_cand = s_cand + penalty.value(&cand, groups);
                    return Ok((cand, f_cand, step));
                }
            }
            Err(Error::LossOverflow { .. }) => {}
            Err(e) => return Err(e),
        }
        step *= 0.5;
    }
    Err(Error::NonConvergence {
        what: "group-lasso backtracking line search".into(),
        iterations: 80,
        residual: step,
    })
}

fn bcd(
    smooth: &SmoothPart,
    groups: &GroupStructure,
    penalty: &Penalty,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, usize, bool)> {
    let p = smooth.ds.p();
    let mut beta = DVector::zeros(p);
    let mut f_prev = smooth.value(&beta)? + penalty.value(&beta, groups);
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 0..opts.max_iter {
        sweeps = sweep + 1;
        for (g, cols) in groups.iter() {
            // Per-block proximal steps with backtracking, holding the other
            // blocks fixed.
            let mut block_step = 1.0_f64;
            for _ in 0..40 {
                let (grad, _) = smooth.grad(&beta)?;
                let gb = linalg::gather(&grad, cols);
                let bb = linalg::gather(&beta, cols);
                let s_cur = smooth.value(&beta)?;
                let mut accepted = false;
                for _ in 0..60 {
                    let target = &bb - &gb * block_step;
                    let norm = target.norm();
                    let thresh = block_step * penalty.level(g);
                    let new_block = if norm <= thresh {
                        DVector::zeros(cols.len())
                    } else {
                        &target * (1.0 - thresh / norm)
                    };
                    let mut cand = beta.clone();
                    linalg::scatter(&mut cand, cols, &new_block);
                    let diff = &new_block - &bb;
                    let quad = s_cur + gb.dot(&diff) + diff.norm_squared() / (2.0 * block_step);
                    if let Ok(s_cand) = smooth.value(&cand) {
                        if s_cand <= quad + 1e-12 * (1.0 + s_cur.abs()) {
                            let moved = diff.norm();
                            beta = cand;
                            accepted = true;
                            if moved <= 1e-13 * (1.0 + bb.norm()) {
                                block_step = 0.0;
                            }
                            break;
                        }
                    }
                    block_step *= 0.5;
                }
                if !accepted || block_step == 0.0 {
                    break;
                }
                block_step = (block_step * 2.0).min(1e6);
            }
        }
        let f_new = smooth.value(&beta)? + penalty.value(&beta, groups);
        if (f_prev - f_new).abs() <= opts.tol * f_new.abs().max(1.0) {
            converged = true;
            break;
        }
        f_prev = f_new;
    }
    Ok((beta, sweeps, converged))
}

struct Extraction {
    layout: SupportLayout,
    gamma: DVector<f64>,
    u_stack: DVector<f64>,
    z_stack: DVector<f64>,
    degenerate: bool,
    kkt_residual: f64,
    max_z_norm: f64,
}

fn extract(
    smooth: &SmoothPart,
    groups: &GroupStructure,
    penalty: &Penalty,
    beta: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<Extraction> {
    let mut active = Vec::new();
    let mut degenerate = false;
    for (g, cols) in groups.iter() {
        let norm = group_norm(beta, cols);
        if norm > opts.active_tol {
            active.push(g);
        }
        // Norms this close to the threshold leave the active set numerically
        // ambiguous; flag instead of silently picking a side.
        if norm > 0.1 * opts.active_tol && norm <= 10.0 * opts.active_tol {
            degenerate = true;
        }
    }
    let layout = SupportLayout::from_active(groups, &active);

    let mut gamma = DVector::zeros(layout.n_active_groups());
    let mut u_stack = DVector::zeros(layout.e_size());
    for (k, &g) in layout.active_groups.iter().enumerate() {
        let cols = groups.cols(g);
        let norm = group_norm(beta, cols);
        gamma[k] = norm;
        let (off, _len) = layout.e_extents[k];
        for (j, &c) in cols.iter().enumerate() {
            u_stack[off + j] = beta[c] / norm;
        }
    }

    // Stationarity: (1/sqrt n) X' rho'(X beta) - sqrt(n) omega + lambda u = 0
    // on the active coordinates; the inactive subgradient directions are
    // recovered so the inactive coordinates balance exactly.
    let (grad, _) = smooth.grad(beta)?;
    let mut kkt_residual = 0.0_f64;
    for (k, &g) in layout.active_groups.iter().enumerate() {
        let cols = groups.cols(g);
        let (off, _) = layout.e_extents[k];
        for (j, &c) in cols.iter().enumerate() {
            let r = grad[c] + penalty.level(g) * u_stack[off + j];
            kkt_residual = kkt_residual.max(r.abs());
        }
    }

    let mut z_stack = DVector::zeros(layout.ep_size());
    let mut max_z_norm = 0.0_f64;
    for (k, &g) in layout.inactive_groups.iter().enumerate() {
        let cols = groups.cols(g);
        let (off, _) = layout.ep_extents[k];
        let mut sq = 0.0;
        for (j, &c) in cols.iter().enumerate() {
            let z = -grad[c] / penalty.level(g);
            z_stack[off + j] = z;
            sq += z * z;
        }
        max_z_norm = max_z_norm.max(sq.sqrt());
    }

    Ok(Extraction {
        layout,
        gamma,
        u_stack,
        z_stack,
        degenerate,
        kkt_residual,
        max_z_norm,
    })
}

/// Newton refinement of the solution on its detected support. Minimizes the
/// objective restricted to the active columns; the penalty term
/// lambda_g ||beta_g|| is smooth there as long as the norms stay away from
/// zero. Returns None when the refinement cannot be applied safely.
fn polish(
    smooth: &SmoothPart,
    groups: &GroupStructure,
    penalty: &Penalty,
    beta: &DVector<f64>,
    layout: &SupportLayout,
    opts: &SolveOptions,
) -> Result<Option<DVector<f64>>> {
    let e = &layout.e_cols;
    let m = e.len();
    let mut current = beta.clone();
    let obj = |b: &DVector<f64>| -> Result<f64> {
        Ok(smooth.value(b)? + penalty.value(b, groups))
    };
    let mut f_cur = obj(&current)?;

    for _ in 0..50 {
        let (grad_full, theta) = smooth.grad(&current)?;
        let w = DVector::from_fn(smooth.ds.n(), |i, _| {
            crate::model::rho_double_prime(smooth.model.kind, theta[i])
        });
        // Gradient and Hessian of the support-restricted objective.
        let mut grad_e = linalg::gather(&grad_full, e);
        let mut hess = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let mut s = 0.0;
                for i in 0..smooth.ds.n() {
                    s += smooth.ds.x[(i, e[a])] * w[i] * smooth.ds.x[(i, e[b])];
                }
                let v = s / smooth.sqn;
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        for (k, &g) in layout.active_groups.iter().enumerate() {
            let (off, len) = layout.e_extents[k];
            let cols = groups.cols(g);
            let bg = linalg::gather(&current, cols);
            let norm = bg.norm();
            if norm <= 0.5 * opts.active_tol {
                return Ok(None);
            }
            let lam = penalty.level(g);
            for j in 0..len {
                grad_e[off + j] += lam * bg[j] / norm;
                for l in 0..len {
                    let id = if j == l { 1.0 } else { 0.0 };
                    hess[(off + j, off + l)] +=
                        lam * (id / norm - bg[j] * bg[l] / (norm * norm * norm));
                }
            }
        }
        let grad_max = linalg::max_norm(&grad_e);
        if grad_max <= 1e-12 * (1.0 + f_cur.abs()).max(1.0) {
            break;
        }
        let chol = match linalg::cholesky(&hess, "polish hessian") {
            Ok(c) => c,
            Err(_) => return Ok(None),
        };
        let delta = chol.solve(&-&grad_e);
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut cand = current.clone();
            for (k, &c) in e.iter().enumerate() {
                cand[c] += scale * delta[k];
            }
            match obj(&cand) {
                Ok(f_cand) if f_cand <= f_cur + 1e-14 * (1.0 + f_cur.abs()) => {
                    let step_norm = delta.norm() * scale;
                    current = cand;
                    f_cur = f_cand;
                    improved = true;
                    if step_norm <= 1e-15 * (1.0 + current.norm()) {
                        return Ok(Some(current));
                    }
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(Some(current))
}
