//! Baseline inference procedures: data splitting and the naive refit.
//!
//! Both run the unrandomized group lasso for selection and a classical Wald
//! analysis on the refit, using the sandwich covariance
//! Sigma_E = H_EE^-1 K_EE H_EE^-1 evaluated on the inference data. Data
//! splitting selects on one random part of the rows and infers on the rest,
//! which restores validity at a sample-size cost; the naive method reuses
//! all rows for both steps and its intervals are not selection-valid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fit::restricted_fit;
use crate::linalg;
use crate::model::{Dataset, GroupStructure, LossModel};
use crate::pipeline::Labels;
use crate::report::{CoefficientRow, GroupRow, InferenceReport, Method, ReportStatus};
use crate::solver::{solve_group_lasso, Penalty, SolveOptions, SupportLayout};

/// Row partition for data splitting.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    /// Rows used for selection, sorted ascending.
    pub selection_rows: Vec<usize>,
    /// Remaining rows used for inference, sorted ascending.
    pub inference_rows: Vec<usize>,
    /// Fraction of rows given to selection.
    pub r: f64,
    pub seed: u64,
}

/// Draws a random row split with round(r * n) selection rows.
pub fn make_split(n: usize, r: f64, seed: u64) -> Result<SplitPlan> {
    if !(0.0 < r && r < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split fraction r must be in (0, 1), got {r}"
        )));
    }
    let n_sel = (r * n as f64).round() as usize;
    if n_sel == 0 || n_sel >= n {
        return Err(Error::InvalidInput(format!(
            "split fraction r = {r} leaves an empty selection or inference set (n = {n})"
        )));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let mut selection_rows = rows[..n_sel].to_vec();
    let mut inference_rows = rows[n_sel..].to_vec();
    selection_rows.sort_unstable();
    inference_rows.sort_unstable();
    Ok(SplitPlan {
        selection_rows,
        inference_rows,
        r,
        seed,
    })
}

/// Classical Wald rows for a restricted fit on `ds`, with standard errors
/// sqrt(Sigma_E[jj] / n).
fn classical_wald(
    model: &LossModel,
    ds: &Dataset,
    layout: &SupportLayout,
    alpha: f64,
    labels: &Labels,
) -> Result<(Vec<CoefficientRow>, Vec<GroupRow>)> {
    let fit = restricted_fit(model, ds, layout, None)?;
    let n = ds.n() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let cov = &fit.blocks.sigma_e / n;

    let mut rows = Vec::with_capacity(layout.e_size());
    for (k, &g) in layout.active_groups.iter().enumerate() {
        let (off, len) = layout.e_extents[k];
        for j in 0..len {
            let col = layout.e_cols[off + j];
            let est = fit.beta_e[off + j];
            let se = cov[(off + j, off + j)].sqrt();
            rows.push(CoefficientRow {
                column: col,
                name: labels.columns[col].clone(),
                group: g,
                estimate: est,
                std_error: se,
                ci_lower: est - z * se,
                ci_upper: est + z * se,
                p_value: 2.0 * (1.0 - normal.cdf((est / se).abs())),
            });
        }
    }

    let mut group_rows = Vec::with_capacity(layout.n_active_groups());
    for (k, &g) in layout.active_groups.iter().enumerate() {
        let (off, len) = layout.e_extents[k];
        let idx: Vec<usize> = (off..off + len).collect();
        let sub_cov = linalg::block(&cov, &idx, &idx);
        let sub_prec = linalg::spd_inverse(&sub_cov, "group covariance block")?;
        let b = nalgebra::DVector::from_fn(len, |j, _| fit.beta_e[off + j]);
        let stat = b.dot(&(&sub_prec * &b));
        let chi = ChiSquared::new(len as f64).map_err(|e| {
            Error::InvalidInput(format!("chi-square with {len} degrees of freedom: {e}"))
        })?;
        group_rows.push(GroupRow {
            group: g,
            name: labels.groups[g].clone(),
            chi2: stat,
            df: len,
            p_value: 1.0 - chi.cdf(stat),
        });
    }
    Ok((rows, group_rows))
}

fn select_unrandomized(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    opts: &SolveOptions,
) -> Result<SupportLayout> {
    let sol = solve_group_lasso(model, ds, groups, penalty, None, opts)?;
    if !sol.converged {
        return Err(Error::NonConvergence {
            what: "baseline group-lasso selection".into(),
            iterations: sol.iterations,
            residual: sol.kkt_residual,
        });
    }
    if sol.degenerate {
        return Err(Error::InvalidInput(
            "baseline selection is ambiguous at the active threshold".into(),
        ));
    }
    Ok(sol.layout)
}

/// Data-splitting inference.
///
/// Selection runs on the plan's selection rows with the penalty scaled by
/// sqrt(r), matching the shorter sample's score scale; the refit and the
/// classical Wald analysis use only the held-out inference rows.
pub fn split_inference(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    plan: &SplitPlan,
    alpha: f64,
    opts: &SolveOptions,
    labels: Option<&Labels>,
) -> Result<InferenceReport> {
    let owned;
    let labels = match labels {
        Some(l) => l,
        None => {
            owned = Labels::default_for(groups);
            &owned
        }
    };
    if plan.selection_rows.len() + plan.inference_rows.len() != ds.n() {
        return Err(Error::InvalidInput(
            "split plan does not cover the dataset rows".into(),
        ));
    }
    let ds_sel = ds.subset_rows(&plan.selection_rows)?;
    let penalty_sel = penalty.scaled(plan.r.sqrt());
    let layout = select_unrandomized(model, &ds_sel, groups, &penalty_sel, opts)?;
    if layout.is_empty() {
        return Ok(InferenceReport::nothing_selected(
            Method::Split,
            alpha,
            penalty.levels().to_vec(),
            None,
        ));
    }
    let ds_inf = ds.subset_rows(&plan.inference_rows)?;
    let (rows, group_rows) = classical_wald(model, &ds_inf, &layout, alpha, labels)?;
    Ok(InferenceReport {
        method: Method::Split,
        status: ReportStatus::Ok,
        selection_valid: true,
        alpha,
        selected_groups: layout.active_groups.clone(),
        selected_columns: layout.e_cols.clone(),
        rows,
        group_rows,
        lambda: penalty.levels().to_vec(),
        randomization_seed: None,
        notes: vec![format!(
            "selection on {} rows, inference on {} rows",
            plan.selection_rows.len(),
            plan.inference_rows.len()
        )],
    })
}

/// Naive inference: unrandomized selection and classical Wald analysis on
/// the same data. Reported intervals ignore the selection step and are not
/// selection-valid; kept as a comparison baseline.
pub fn naive_inference(
    model: &LossModel,
    ds: &Dataset,
    groups: &GroupStructure,
    penalty: &Penalty,
    alpha: f64,
    opts: &SolveOptions,
    labels: Option<&Labels>,
) -> Result<InferenceReport> {
    let owned;
    let labels = match labels {
        Some(l) => l,
        None => {
            owned = Labels::default_for(groups);
            &owned
        }
    };
    let layout = select_unrandomized(model, ds, groups, penalty, opts)?;
    if layout.is_empty() {
        let mut report = InferenceReport::nothing_selected(
            Method::Naive,
            alpha,
            penalty.levels().to_vec(),
            None,
        );
        report.selection_valid = false;
        return Ok(report);
    }
    let (rows, group_rows) = classical_wald(model, ds, &layout, alpha, labels)?;
    Ok(InferenceReport {
        method: Method::Naive,
        status: ReportStatus::Ok,
        selection_valid: false,
        alpha,
        selected_groups: layout.active_groups.clone(),
        selected_columns: layout.e_cols.clone(),
        rows,
        group_rows,
        lambda: penalty.levels().to_vec(),
        randomization_seed: None,
        notes: vec!["intervals do not account for selection".into()],
    })
}
