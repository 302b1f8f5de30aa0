//! Inference report types shared by the selective method and the baselines.

use serde::{Deserialize, Serialize};

/// Inference method that produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Randomized selection with conditional (selective) inference.
    Selective,
    /// Data splitting: select on one part, infer on the other.
    Split,
    /// Refit and classical inference on the full data, ignoring selection.
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Selective => "selective",
            Method::Split => "split",
            Method::Naive => "naive",
        }
    }
}

/// Report status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    /// The selection step returned an empty active set; no inference rows.
    NothingSelected,
}

/// Per-coefficient inference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    /// Column index in the original design.
    pub column: usize,
    /// Column name if one is known.
    pub name: String,
    /// Group index the column belongs to.
    pub group: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

/// Per-group chi-square test row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub name: String,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Full inference report for one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: Method,
    pub status: ReportStatus,
    /// Whether the reported intervals account for the selection step.
    /// False for the naive method.
    pub selection_valid: bool,
    pub alpha: f64,
    /// Indices of the selected groups, in group order.
    pub selected_groups: Vec<usize>,
    /// Selected columns in active layout order (matches `rows`).
    pub selected_columns: Vec<usize>,
    pub rows: Vec<CoefficientRow>,
    pub group_rows: Vec<GroupRow>,
    /// Per-group penalty levels used by the selection solve.
    pub lambda: Vec<f64>,
    /// Randomization seed when the method used one.
    pub randomization_seed: Option<u64>,
    /// Free-form notes (degeneracies, repairs, fallbacks).
    pub notes: Vec<String>,
}

impl InferenceReport {
    /// A report for an empty selection.
    pub fn nothing_selected(method: Method, alpha: f64, lambda: Vec<f64>, seed: Option<u64>) -> Self {
        InferenceReport {
            method,
            status: ReportStatus::NothingSelected,
            selection_valid: method != Method::Naive,
            alpha,
            selected_groups: Vec::new(),
            selected_columns: Vec::new(),
            rows: Vec::new(),
            group_rows: Vec::new(),
            lambda,
            randomization_seed: seed,
            notes: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let report = InferenceReport {
            method: Method::Selective,
            status: ReportStatus::Ok,
            selection_valid: true,
            alpha: 0.1,
            selected_groups: vec![1, 3],
            selected_columns: vec![2, 3, 7],
            rows: vec![CoefficientRow {
                column: 2,
                name: "x2".into(),
                group: 1,
                estimate: 0.5,
                std_error: 0.1,
                ci_lower: 0.34,
                ci_upper: 0.66,
                p_value: 0.01,
            }],
            group_rows: vec![GroupRow {
                group: 1,
                name: "g1".into(),
                chi2: 9.3,
                df: 2,
                p_value: 0.0095,
            }],
            lambda: vec![1.0, 1.0, 1.0, 1.0],
            randomization_seed: Some(7),
            notes: vec!["ridge repair applied".into()],
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: InferenceReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
