//! Data containers, group structure, and M-estimation loss models.
//!
//! The loss enters everywhere through per-observation terms rho(theta_i; y_i)
//! evaluated at the linear predictor theta_i = x_i' beta, together with the
//! first two derivatives in theta. Estimating-equation moment matrices
//!
//!   H = (1/n) X' diag(rho'') X,   K = cov of the score contributions,
//!
//! are evaluated at a fitted point and drive all downstream covariance
//! algebra. For the likelihood losses K equals H (information equality);
//! for gaussian with unknown variance K = sigma2 * H, and for quasi-poisson
//! K = phi * H with a Pearson dispersion estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Design matrix and response.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x p design matrix.
    pub x: DMatrix<f64>,
    /// Response vector of length n.
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidInput(
                "design matrix must have at least one row and one column".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "design or response contains non-finite values".into(),
            ));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Returns the rows indexed by `rows` as a new dataset.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("row subset is empty".into()));
        }
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        Dataset::new(x, y)
    }
}

/// Non-overlapping partition of the columns 0..p into groups.
///
/// Group order is part of the structure: the active set and every block
/// matrix downstream lay out their coordinates group by group in this order,
/// with columns inside a group in their listed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStructure {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl GroupStructure {
    pub fn new(groups: Vec<Vec<usize>>, p: usize) -> Result<Self> {
        let mut group_of = vec![usize::MAX; p];
        for (g, cols) in groups.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::InvalidInput(format!("group {g} is empty")));
            }
            for &c in cols {
                if c >= p {
                    return Err(Error::InvalidInput(format!(
                        "group {g} references column {c} but p = {p}"
                    )));
                }
                if group_of[c] != usize::MAX {
                    return Err(Error::InvalidInput(format!(
                        "column {c} appears in groups {} and {g}",
                        group_of[c]
                    )));
                }
                group_of[c] = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidInput(format!(
                "column {c} is not assigned to any group"
            )));
        }
        Ok(GroupStructure { groups, group_of })
    }

    /// One group per column.
    pub fn singletons(p: usize) -> Self {
        GroupStructure {
            groups: (0..p).map(|c| vec![c]).collect(),
            group_of: (0..p).collect(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn p(&self) -> usize {
        self.group_of.len()
    }

    /// Columns of group `g`, in layout order.
    pub fn cols(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn size(&self, g: usize) -> usize {
        self.groups[g].len()
    }

    /// Group index owning column `c`.
    pub fn group_of(&self, c: usize) -> usize {
        self.group_of[c]
    }

    pub fn mean_size(&self) -> f64 {
        self.p() as f64 / self.n_groups() as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.groups.iter().enumerate().map(|(g, c)| (g, c.as_slice()))
    }
}

/// Loss family for the per-observation term rho(theta; y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// rho = (y - theta)^2 / 2.
    Gaussian,
    /// rho = log(1 + e^theta) - y theta, y in {0, 1}.
    Logistic,
    /// rho = e^theta - y theta, y a count.
    Poisson,
    /// Same rho as poisson; a Pearson dispersion estimate scales K at
    /// inference time.
    QuasiPoisson,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gaussian => "gaussian",
            LossKind::Logistic => "logistic",
            LossKind::Poisson => "poisson",
            LossKind::QuasiPoisson => "quasi_poisson",
        }
    }

    fn validate_response(self, y: &DVector<f64>) -> Result<()> {
        match self {
            LossKind::Gaussian => Ok(()),
            LossKind::Logistic => {
                if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "logistic response must be 0/1 but row {i} has y = {}",
                        y[i]
                    )));
                }
                Ok(())
            }
            LossKind::Poisson | LossKind::QuasiPoisson => {
                if let Some(i) = y.iter().position(|&v| v < 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "count response must be nonnegative but row {i} has y = {}",
                        y[i]
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Loss model: family plus the dispersion in effect.
///
/// The dispersion is 1 for the likelihood families. For quasi-poisson the
/// value used at inference time is the Pearson estimate attached to
/// [`MomentMatrices`]; the field here is only the a-priori value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub dispersion: f64,
}

impl LossModel {
    pub fn new(kind: LossKind) -> Self {
        LossModel {
            kind,
            dispersion: 1.0,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(LossKind::Gaussian)
    }

    pub fn logistic() -> Self {
        Self::new(LossKind::Logistic)
    }

    pub fn poisson() -> Self {
        Self::new(LossKind::Poisson)
    }

    pub fn quasi_poisson() -> Self {
        Self::new(LossKind::QuasiPoisson)
    }
}

/// Largest linear predictor magnitude before e^theta handling degrades.
const THETA_GUARD: f64 = 500.0;

/// Numerically stable log(1 + e^t).
fn log1p_exp(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic mean h(t) = e^t / (1 + e^t), stable for large |t|.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// rho(theta; y) for a single observation.
pub fn rho(kind: LossKind, theta: f64, y: f64) -> f64 {
    match kind {
        LossKind::Gaussian => 0.5 * (y - theta) * (y - theta),
        LossKind::Logistic => log1p_exp(theta) - y * theta,
        LossKind::Poisson | LossKind::QuasiPoisson => theta.exp() - y * theta,
    }
}

/// d rho / d theta.
pub fn rho_prime(kind: LossKind, theta: f64, y: f64) -> f64 {
    match kind {
        LossKind::Gaussian => theta - y,
        LossKind::Logistic => sigmoid(theta) - y,
        LossKind::Poisson | LossKind::QuasiPoisson => theta.exp() - y,
    }
}

/// d^2 rho / d theta^2.
pub fn rho_double_prime(kind: LossKind, theta: f64) -> f64 {
    match kind {
        LossKind::Gaussian => 1.0,
        LossKind::Logistic => {
            let h = sigmoid(theta);
            h * (1.0 - h)
        }
        LossKind::Poisson | LossKind::QuasiPoisson => theta.exp(),
    }
}

fn check_theta(kind: LossKind, theta: &DVector<f64>) -> Result<()> {
    if matches!(kind, LossKind::Poisson | LossKind::QuasiPoisson) {
        if let Some(i) = theta.iter().position(|t| t.abs() > THETA_GUARD) {
            return Err(Error::LossOverflow {
                row: i,
                theta: theta[i],
                model: kind.name(),
            });
        }
    }
    if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::LossOverflow {
            row: i,
            theta: theta[i],
            model: kind.name(),
        });
    }
    Ok(())
}

/// Linear predictor X_E beta_E as an n-vector. An empty support gives zeros.
pub fn linear_predictor(ds: &Dataset, beta_e: &DVector<f64>, e: &[usize]) -> DVector<f64> {
    debug_assert_eq!(beta_e.len(), e.len());
    let mut theta = DVector::zeros(ds.n());
    for (k, &j) in e.iter().enumerate() {
        let b = beta_e[k];
        if b != 0.0 {
            theta.axpy(b, &ds.x.column(j), 1.0);
        }
    }
    theta
}

/// Total loss sum_i rho(x_i' beta; y_i) for beta supported on `e`.
pub fn loss_value(model: &LossModel, ds: &Dataset, beta_e: &DVector<f64>, e: &[usize]) -> Result<f64> {
    model.kind.validate_response(&ds.y)?;
    let theta = linear_predictor(ds, beta_e, e);
    check_theta(model.kind, &theta)?;
    Ok((0..ds.n())
        .map(|i| rho(model.kind, theta[i], ds.y[i]))
        .sum())
}

/// Per-observation residuals rho'(x_i' beta; y_i) as an n-vector.
pub fn score_residuals(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<DVector<f64>> {
    model.kind.validate_response(&ds.y)?;
    let theta = linear_predictor(ds, beta_e, e);
    check_theta(model.kind, &theta)?;
    Ok(DVector::from_fn(ds.n(), |i, _| {
        rho_prime(model.kind, theta[i], ds.y[i])
    }))
}

/// Full-coordinate loss gradient X' rho'(X_E beta_E; Y) as a p-vector.
pub fn loss_gradient(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<DVector<f64>> {
    let r = score_residuals(model, ds, beta_e, e)?;
    Ok(ds.x.transpose() * r)
}

/// Curvature weights rho''(x_i' beta) as an n-vector.
pub fn curvature_weights(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<DVector<f64>> {
    let theta = linear_predictor(ds, beta_e, e);
    check_theta(model.kind, &theta)?;
    Ok(DVector::from_fn(ds.n(), |i, _| {
        rho_double_prime(model.kind, theta[i])
    }))
}

/// Estimating-equation moment matrices evaluated at a fitted point.
#[derive(Debug, Clone)]
pub struct MomentMatrices {
    /// p x p curvature matrix (1/n) X' diag(rho'') X.
    pub h: DMatrix<f64>,
    /// p x p score covariance matrix; equals H scaled by the dispersion.
    pub k: DMatrix<f64>,
    /// Dispersion applied to K: 1 (logistic, poisson), the residual variance
    /// estimate (gaussian), or the Pearson estimate floored at 1 (quasi-poisson).
    pub dispersion: f64,
    /// Support the evaluation point was restricted to.
    pub support: Vec<usize>,
}

/// Pearson dispersion estimate for quasi-poisson.
///
/// phi = (1 / (n - |E|)) sum_i (y_i - mu_i)^2 / mu_i with mu_i = e^theta_i,
/// floored at 1.0. Requires a quasi-poisson model and n > |E|.
pub fn estimate_dispersion(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<f64> {
    if model.kind != LossKind::QuasiPoisson {
        return Err(Error::InvalidInput(format!(
            "dispersion estimation applies to quasi_poisson, not {}",
            model.kind.name()
        )));
    }
    if ds.n() <= e.len() {
        return Err(Error::DegreesOfFreedom {
            n: ds.n(),
            fitted: e.len(),
        });
    }
    let theta = linear_predictor(ds, beta_e, e);
    check_theta(model.kind, &theta)?;
    let mut pearson = 0.0;
    for i in 0..ds.n() {
        let mu = theta[i].exp();
        let d = ds.y[i] - mu;
        pearson += d * d / mu;
    }
    let phi = pearson / (ds.n() - e.len()) as f64;
    Ok(phi.max(1.0))
}

/// Residual variance estimate RSS / (n - |E|) for the gaussian loss, not floored.
fn gaussian_sigma2(ds: &Dataset, beta_e: &DVector<f64>, e: &[usize]) -> Result<f64> {
    if ds.n() <= e.len() {
        return Err(Error::DegreesOfFreedom {
            n: ds.n(),
            fitted: e.len(),
        });
    }
    let theta = linear_predictor(ds, beta_e, e);
    let rss: f64 = (0..ds.n()).map(|i| (ds.y[i] - theta[i]).powi(2)).sum();
    Ok(rss / (ds.n() - e.len()) as f64)
}

/// Evaluates H and K at beta supported on `e`.
///
/// H = (1/n) X' diag(rho'') X at the evaluation point. K = dispersion * H
/// with the family-specific dispersion: 1 for logistic and poisson, the
/// residual variance RSS/(n-|E|) for gaussian, and the Pearson estimate
/// (floored at 1) for quasi-poisson.
pub fn estimate_moments(
    model: &LossModel,
    ds: &Dataset,
    beta_e: &DVector<f64>,
    e: &[usize],
) -> Result<MomentMatrices> {
    model.kind.validate_response(&ds.y)?;
    let w = curvature_weights(model, ds, beta_e, e)?;
    let n = ds.n() as f64;
    let mut xw = ds.x.clone();
    for i in 0..ds.n() {
        let s = w[i] / n;
        for j in 0..ds.p() {
            xw[(i, j)] *= s;
        }
    }
    let mut h = ds.x.transpose() * xw;
    linalg::symmetrize(&mut h);
    let dispersion = match model.kind {
        LossKind::Gaussian => gaussian_sigma2(ds, beta_e, e)?,
        LossKind::Logistic | LossKind::Poisson => 1.0,
        LossKind::QuasiPoisson => estimate_dispersion(model, ds, beta_e, e)?,
    };
    let k = &h * dispersion;
    Ok(MomentMatrices {
        h,
        k,
        dispersion,
        support: e.to_vec(),
    })
}
