//! The analyze command: ingest a CSV, run the requested inference methods,
//! and write reports as JSON and CSV.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use postsel::baselines::{make_split, naive_inference, split_inference};
use postsel::error::{Error, Result};
use postsel::model::{LossKind, LossModel};
use postsel::pipeline::{
    selective_analysis, selective_analysis_with, SelectiveSettings,
};
use postsel::report::{InferenceReport, ReportStatus};
use postsel::solver::{default_lambda, draw_randomization_explicit, Penalty, SolveOptions};

use crate::ingest::{self, EncodeOptions, Encoded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Gaussian,
    Logistic,
    Poisson,
    QuasiPoisson,
}

impl ModelArg {
    fn kind(self) -> LossKind {
        match self {
            ModelArg::Gaussian => LossKind::Gaussian,
            ModelArg::Logistic => LossKind::Logistic,
            ModelArg::Poisson => LossKind::Poisson,
            ModelArg::QuasiPoisson => LossKind::QuasiPoisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Selective,
    Split,
    Naive,
    All,
}

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    /// CSV data file with a header row
    #[arg(long)]
    pub data: PathBuf,

    /// Name of the response column
    #[arg(long)]
    pub response: String,

    /// Loss model for selection and inference
    #[arg(long, value_enum, default_value_t = ModelArg::Gaussian)]
    pub model: ModelArg,

    /// Categorical columns, one-hot encoded with one group per column
    #[arg(long, value_delimiter = ',', value_name = "COLS")]
    pub categorical: Vec<String>,

    /// Named group of continuous columns, as LABEL=COL1,COL2; repeatable.
    /// Unlisted continuous columns become singleton groups.
    #[arg(long = "group", value_name = "LABEL=COLS")]
    pub group: Vec<String>,

    /// Base multiplier for the default penalty rule
    #[arg(long, default_value_t = 0.1)]
    pub base_lambda: f64,

    /// Constant penalty level for every group, replacing the default rule
    #[arg(long, conflicts_with = "base_lambda")]
    pub lambda: Option<f64>,

    /// Randomization scale: the randomization covariance is f times the
    /// pilot curvature estimate
    #[arg(long, default_value_t = 1.0)]
    pub f: f64,

    /// CSV file with an explicit randomization covariance (p x p after
    /// encoding, no header), replacing the scaled pilot curvature
    #[arg(long, conflicts_with = "f", value_name = "FILE")]
    pub omega: Option<PathBuf>,

    /// Confidence level is 1 - alpha
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,

    /// Master seed; the randomization and split seeds derive from it
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Which inference methods to run
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    pub method: MethodArg,

    /// Fraction of rows used for selection when data splitting
    #[arg(long = "split-r", default_value_t = 0.7)]
    pub split_r: f64,

    /// Encode every categorical level instead of dropping the first
    #[arg(long)]
    pub full_one_hot: bool,

    /// Keep continuous columns on their original scale
    #[arg(long)]
    pub no_standardize: bool,

    /// Directory the report files are written to
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct DerivedSeeds {
    randomization: u64,
    split: u64,
}

/// Everything written alongside one report so the run is reproducible from
/// the file alone.
#[derive(Serialize)]
struct ReportEnvelope<'a> {
    config: &'a AnalyzeArgs,
    derived_seeds: &'a DerivedSeeds,
    encoded_columns: &'a [String],
    groups: &'a [ingest::GroupEcho],
    standardized: &'a [ingest::StandardizedColumn],
    reference_levels: &'a [ingest::ReferenceLevel],
    elapsed_ms: f64,
    report: &'a InferenceReport,
}

fn parse_group_flags(raw: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let mut groups = Vec::new();
    for spec in raw {
        let (label, cols) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidInput(format!(
                "group spec '{spec}' is not of the form LABEL=COL1,COL2"
            ))
        })?;
        let cols: Vec<String> = cols
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if label.trim().is_empty() || cols.is_empty() {
            return Err(Error::InvalidInput(format!(
                "group spec '{spec}' needs a label and at least one column"
            )));
        }
        if groups.iter().any(|(l, _)| l == label) {
            return Err(Error::InvalidInput(format!(
                "group label '{label}' given twice"
            )));
        }
        groups.push((label.trim().to_string(), cols));
    }
    Ok(groups)
}

fn write_report_files(
    args: &AnalyzeArgs,
    enc: &Encoded,
    seeds: &DerivedSeeds,
    report: &InferenceReport,
    elapsed_ms: f64,
) -> Result<()> {
    let method = report.method.name();
    let envelope = ReportEnvelope {
        config: args,
        derived_seeds: seeds,
        encoded_columns: &enc.labels.columns,
        groups: &enc.group_members,
        standardized: &enc.standardized,
        reference_levels: &enc.references,
        elapsed_ms,
        report,
    };
    let json_path = args.out_dir.join(format!("report_{method}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&envelope)?)?;

    let coef_path = args.out_dir.join(format!("coefficients_{method}.csv"));
    let mut w = csv::Writer::from_path(&coef_path)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", coef_path.display())))?;
    w.write_record([
        "name",
        "group",
        "estimate",
        "std_error",
        "ci_lower",
        "ci_upper",
        "p_value",
    ])?;
    for row in &report.rows {
        w.write_record([
            row.name.clone(),
            enc.labels.groups[row.group].clone(),
            row.estimate.to_string(),
            row.std_error.to_string(),
            row.ci_lower.to_string(),
            row.ci_upper.to_string(),
            row.p_value.to_string(),
        ])?;
    }
    w.flush()?;

    let group_path = args.out_dir.join(format!("groups_{method}.csv"));
    let mut w = csv::Writer::from_path(&group_path)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", group_path.display())))?;
    w.write_record(["group", "chi2", "df", "p_value"])?;
    for row in &report.group_rows {
        w.write_record([
            row.name.clone(),
            row.chi2.to_string(),
            row.df.to_string(),
            row.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_report(report: &InferenceReport) {
    println!(
        "method {}: {}",
        report.method.name(),
        match report.status {
            ReportStatus::Ok => format!(
                "{} group(s), {} coefficient(s) selected",
                report.selected_groups.len(),
                report.rows.len()
            ),
            ReportStatus::NothingSelected => "nothing selected".to_string(),
        }
    );
    for note in &report.notes {
        println!("  note: {note}");
    }
    if report.rows.is_empty() {
        return;
    }
    let name_w = report
        .rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    println!(
        "  {:<name_w$}  {:>12} {:>12} {:>12} {:>12} {:>10}",
        "name", "estimate", "std. error", "ci lower", "ci upper", "p-value"
    );
    for row in &report.rows {
        println!(
            "  {:<name_w$}  {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>10.2e}",
            row.name, row.estimate, row.std_error, row.ci_lower, row.ci_upper, row.p_value
        );
    }
    for grow in &report.group_rows {
        println!(
            "  group {}: chi2 = {:.4} on {} df, p = {:.2e}",
            grow.name, grow.chi2, grow.df, grow.p_value
        );
    }
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be in (0, 1), got {}",
            args.alpha
        )));
    }
    let table = ingest::read_table(&args.data)?;
    let enc = ingest::encode(
        &table,
        &EncodeOptions {
            response: args.response.clone(),
            categorical: args.categorical.clone(),
            groups: parse_group_flags(&args.group)?,
            full_one_hot: args.full_one_hot,
            standardize: !args.no_standardize,
        },
    )?;

    let model = LossModel::new(args.model.kind());
    let penalty = match args.lambda {
        Some(level) => Penalty::constant(level, &enc.groups)?,
        None => default_lambda(&enc.ds, &enc.groups, args.base_lambda)?,
    };
    let opts = SolveOptions::default();

    // One master seed pins both sources of randomness, so method=all runs
    // share the same draw and the same split.
    let mut seed_rng = ChaCha8Rng::seed_from_u64(args.seed);
    let seeds = DerivedSeeds {
        randomization: seed_rng.next_u64(),
        split: seed_rng.next_u64(),
    };

    fs::create_dir_all(&args.out_dir)?;
    let preprocessing_note = if args.no_standardize {
        "continuous columns kept on their original scale".to_string()
    } else {
        "continuous columns standardized to mean 0, sd 1; estimates are on \
         the standardized scale (constants recorded in the report JSON)"
            .to_string()
    };

    let run_selective = matches!(args.method, MethodArg::Selective | MethodArg::All);
    let run_split = matches!(args.method, MethodArg::Split | MethodArg::All);
    let run_naive = matches!(args.method, MethodArg::Naive | MethodArg::All);

    if run_selective {
        let settings = SelectiveSettings {
            f: args.f,
            barrier_c: 0.0,
            alpha: args.alpha,
            seed: seeds.randomization,
            solve: opts.clone(),
        };
        let t0 = Instant::now();
        let analysis = match &args.omega {
            None => selective_analysis(
                &model,
                &enc.ds,
                &enc.groups,
                &penalty,
                &settings,
                Some(&enc.labels),
            )?,
            Some(path) => {
                let omega = ingest::read_matrix(path)?;
                if omega.nrows() != enc.ds.p() || omega.ncols() != enc.ds.p() {
                    return Err(Error::DimensionMismatch(format!(
                        "randomization covariance is {}x{} but the encoded design has {} columns",
                        omega.nrows(),
                        omega.ncols(),
                        enc.ds.p()
                    )));
                }
                let rand = draw_randomization_explicit(omega, seeds.randomization, enc.ds.n())?;
                selective_analysis_with(
                    &model,
                    &enc.ds,
                    &enc.groups,
                    &penalty,
                    &settings,
                    Some(&enc.labels),
                    &rand,
                )?
            }
        };
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        let mut report = analysis.report;
        report.notes.push(preprocessing_note.clone());
        write_report_files(args, &enc, &seeds, &report, elapsed)?;
        print_report(&report);
    }

    if run_split {
        let t0 = Instant::now();
        let plan = make_split(enc.ds.n(), args.split_r, seeds.split)?;
        let mut report = split_inference(
            &model,
            &enc.ds,
            &enc.groups,
            &penalty,
            &plan,
            args.alpha,
            &opts,
            Some(&enc.labels),
        )?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        report.notes.push(preprocessing_note.clone());
        write_report_files(args, &enc, &seeds, &report, elapsed)?;
        print_report(&report);
    }

    if run_naive {
        let t0 = Instant::now();
        let mut report = naive_inference(
            &model,
            &enc.ds,
            &enc.groups,
            &penalty,
            args.alpha,
            &opts,
            Some(&enc.labels),
        )?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        report.notes.push(preprocessing_note);
        write_report_files(args, &enc, &seeds, &report, elapsed)?;
        print_report(&report);
    }
    Ok(())
}
