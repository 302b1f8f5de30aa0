//! End-to-end selective analysis: draw the randomization, run the group
//! lasso, refit on the selected support, and produce conditional inference.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fit::{restricted_fit, RestrictedFit};
use crate::model::{estimate_moments, Dataset, GroupStructure, LossKind, LossModel};
use crate::report::{CoefficientRow, GroupRow, InferenceReport, Method, ReportStatus};
use crate::selective::{
    build_problem, observed_fisher, selective_mle, solve_gstar, wald_inference, SelectiveFit,
};
use crate::solver::{
    draw_randomization_scaled, solve_group_lasso, GroupLassoSolution, Penalty, RandomizationSpec,
    SolveOptions,
};

/// Column and group display names for reports.
#[derive(Debug, Clone)]
pub struct Labels {
    pub columns: Vec<String>,
    pub groups: Vec<String>,
}

impl Labels {
    pub fn default_for(groups: &GroupStructure) -> Labels {
        Labels {
            columns: (0..groups.p()).map(|c| format!("x{c}")).collect(),
            groups: (0..groups.n_groups()).map(|g| format!("group{g}")).collect(),
        }
    }

    fn validate(&self, groups: &GroupStructure) -> Result<()> {
        if self.columns.len() != groups.p() || self.groups.len() != groups.n_groups() {
            return Err(Error::DimensionMismatch(
                "label counts do not match the design".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for the selective pipeline.
#[derive(Debug, Clone)]
pub struct SelectiveSettings {
    /// Randomization scale: the randomization covariance is f times the
    /// pilot curvature estimate. For the gaussian loss the pilot residual
    /// variance is folded in as well, so f stays on the scale of the
    /// signal-to-noise trade-off in every family.
    pub f: f64,
    /// Barrier offset; the active norms are constrained to exceed it.
    pub barrier_c: f64,
    pub alpha: f64,
    pub seed: u64,
    pub solve: SolveOptions,
}

impl Default for SelectiveSettings {
    fn default() -> Self {
        SelectiveSettings {
            f: 1.0,
            barrier_c: 0.0,
            alpha: 0.1,
            seed: 0,
            solve: SolveOptions::default(),
        }
    }
}

/// Everything produced by a selective analysis beyond the report.
#[derive(Debug, Clone)]
pub struct SelectiveDetail {
    pub solution: GroupLassoSolution,
    pub fit: RestrictedFit,
    pub sfit: SelectiveFit,
    pub randomization: RandomizationSpec,
    /// True when the simplified conditional-parameter formulas applied.
    pub shortcut: bool,
}

/// Result of a selective analysis. `detail` is None exactly when nothing was
/// selected.
#[derive(Debug, Clone)]
pub struct SelectiveAnalysis {
    pub report: InferenceReport,
    pub detail: Option<SelectiveDetail>,
}

/// Residual variance of the full-data least squares fit, used to put the
/// gaussian randomization on the score scale. Falls back to the response
/// variance when the design is too wide or singular.
fn pilot_dispersion(model: &LossModel, ds: &Dataset) -> f64 {
    if model.kind != LossKind::Gaussian {
        return 1.0;
    }
    let n = ds.n();
    let p = ds.p();
    let fallback = || {
        let mean = ds.y.sum() / n as f64;
        (ds.y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64).max(1e-12)
    };
    if n <= p + 1 {
        return fallback();
    }
    let xtx = ds.x.transpose() * &ds.x;
    let xty = ds.x.transpose() * &ds.y;
    match crate::linalg::cholesky(&xtx, "pilot normal equations") {
        Ok(chol) => {
            let beta = chol.solve(&xty);
            let resid = &ds.y - &ds.x * beta;
            (resid.norm_squared() / (n - p) as f64).max(1e-12)
        }
        Err(_) => fallback(),
    }
}

/// Runs the full selective pipeline.
///
/// The randomization covariance is built from a pilot curvature estimate at
/// beta = 0, the realized covariance is stored exactly, and the conditional
/// algebra uses whichever parameter formulas are valid for it. An empty
/// selection is a regular outcome (status `NothingSelected`), not an error.
pub fn selective_analysis(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    settings: &SelectiveSettings,
    labels: Option<&Labels>,
) -> Result<SelectiveAnalysis> {
    // Pilot curvature at beta = 0; only H is used.
    let pilot = estimate_moments(model, ds, &DVector::zeros(0), &[])?;
    let f_eff = settings.f * pilot_dispersion(model, ds);
    let rand = draw_randomization_scaled(&pilot.h, f_eff, settings.seed, ds.n())?;
    selective_analysis_with(model, ds, groups, penalty, settings, labels, &rand)
}

/// Runs the selective pipeline with a caller-supplied randomization draw,
/// for explicitly chosen covariances. `settings.f` and `settings.seed` are
/// ignored here; the draw already fixes both.
pub fn selective_analysis_with(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    settings: &SelectiveSettings,
    labels: Option<&Labels>,
    rand: &RandomizationSpec,
) -> Result<SelectiveAnalysis> {
    let owned_labels;
    let labels = match labels {
        Some(l) => {
            l.validate(groups)?;
            l
        }
        None => {
            owned_labels = Labels::default_for(groups);
            &owned_labels
        }
    };
    let mut notes = Vec::new();
    if rand.repaired {
        notes.push("pilot curvature needed a ridge repair to be positive definite".into());
    }

    let sol = solve_group_lasso(model, ds, groups, penalty, Some(rand), &settings.solve)?;
    if sol.is_empty() {
        let mut report = InferenceReport::nothing_selected(
            Method::Selective,
            settings.alpha,
            penalty.levels().to_vec(),
            Some(rand.seed),
        );
        report.notes = notes;
        return Ok(SelectiveAnalysis {
            report,
            detail: None,
        });
    }

    let fit = restricted_fit(model, ds, &sol.layout, Some(&sol.beta))?;
    let problem = build_problem(&sol, &fit, groups, penalty, rand, settings.barrier_c)?;
    let beta_scaled = &fit.beta_e * (ds.n() as f64).sqrt();
    let gstar = solve_gstar(&problem, &beta_scaled)?;
    let mle = selective_mle(&problem, &beta_scaled, &gstar);
    let fisher = observed_fisher(&problem, &gstar)?;
    let sfit = wald_inference(&problem, &mle, &gstar, &fisher, settings.alpha)?;

    let mut rows = Vec::with_capacity(sol.layout.e_size());
    for (k, &g) in sol.layout.active_groups.iter().enumerate() {
        let (off, len) = sol.layout.e_extents[k];
        for j in 0..len {
            let col = sol.layout.e_cols[off + j];
            rows.push(CoefficientRow {
                column: col,
                name: labels.columns[col].clone(),
                group: g,
                estimate: sfit.mle[off + j],
                std_error: sfit.std_errors[off + j],
                ci_lower: sfit.ci_lower[off + j],
                ci_upper: sfit.ci_upper[off + j],
                p_value: sfit.p_values[off + j],
            });
        }
    }
    let group_rows = sol
        .layout
        .active_groups
        .iter()
        .enumerate()
        .map(|(k, &g)| GroupRow {
            group: g,
            name: labels.groups[g].clone(),
            chi2: sfit.group_chi2[k],
            df: sfit.group_df[k],
            p_value: sfit.group_p_values[k],
        })
        .collect();

    let report = InferenceReport {
        method: Method::Selective,
        status: ReportStatus::Ok,
        selection_valid: true,
        alpha: settings.alpha,
        selected_groups: sol.layout.active_groups.clone(),
        selected_columns: sol.layout.e_cols.clone(),
        rows,
        group_rows,
        lambda: penalty.levels().to_vec(),
        randomization_seed: Some(rand.seed),
        notes,
    };
    let shortcut = problem.shortcut;
    Ok(SelectiveAnalysis {
        report,
        detail: Some(SelectiveDetail {
            solution: sol,
            fit,
            sfit,
            randomization: rand.clone(),
            shortcut,
        }),
    })
}
