//! Simulation studies comparing selective inference against data splitting
//! and the naive refit.
//!
//! Designs mix AR(1)-correlated continuous blocks with one-hot encoded
//! categorical predictors. Coverage is measured against an oracle target:
//! the restricted fit on an independent dataset many times larger than the
//! analysis one, refit per replication for each method's selected support.
//! Selection accuracy is group-level F1 against the true signal groups.
//!
//! Everything is deterministic given the master seed: each replication owns
//! a set of independent RNG streams, and replications run in parallel with
//! order-stable collection, so record files are byte-identical across runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::baselines::{make_split, naive_inference, split_inference};
use crate::error::{Error, Result};
use crate::fit::fit_restricted;
use crate::model::{Dataset, GroupStructure, LossModel};
use crate::pipeline::{selective_analysis, SelectiveSettings};
use crate::report::{InferenceReport, Method, ReportStatus};
use crate::solver::{default_lambda, SolveOptions};

/// Response-generating family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Gaussian,
    Logistic,
    Poisson,
    /// Gamma-Poisson mixture with variance phi * mean; analyzed with the
    /// quasi-poisson loss.
    NegativeBinomial,
}

impl ResponseKind {
    /// The loss model used to analyze this response.
    pub fn loss(self) -> LossModel {
        match self {
            ResponseKind::Gaussian => LossModel::gaussian(),
            ResponseKind::Logistic => LossModel::logistic(),
            ResponseKind::Poisson => LossModel::poisson(),
            ResponseKind::NegativeBinomial => LossModel::quasi_poisson(),
        }
    }
}

/// Configuration of one simulation study cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub name: String,
    pub n: usize,
    /// Total number of design columns; validated against the block layout.
    pub p: usize,
    /// Continuous columns (drawn from a stationary AR(1) process).
    pub n_continuous: usize,
    /// Group size for the continuous block; must divide `n_continuous`.
    pub continuous_group_size: usize,
    /// Number of categorical predictors; each is one group.
    pub n_discrete_groups: usize,
    /// Levels per categorical predictor.
    pub levels: usize,
    /// Encode all levels instead of dropping the first one.
    pub full_one_hot: bool,
    pub response: ResponseKind,
    /// Gaussian noise standard deviation.
    pub sigma: f64,
    /// Overdispersion for the negative binomial response (variance = phi * mean).
    pub phi: f64,
    /// Signal strength knob: every signal coefficient equals sqrt(2 tau log p).
    pub tau: f64,
    /// Leading continuous groups carrying signal.
    pub s_c: usize,
    /// Leading discrete groups carrying signal.
    pub s_d: usize,
    /// AR(1) correlation of the continuous block.
    pub rho: f64,
    pub base_lambda: f64,
    /// Randomization scale for the selective method.
    pub f: f64,
    /// Selection fraction for data splitting.
    pub r: f64,
    pub reps: usize,
    pub alpha: f64,
    pub master_seed: u64,
    /// Oracle dataset size as a multiple of n.
    pub oracle_multiplier: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            name: "unnamed".into(),
            n: 200,
            p: 20,
            n_continuous: 0,
            continuous_group_size: 1,
            n_discrete_groups: 5,
            levels: 5,
            full_one_hot: false,
            response: ResponseKind::Logistic,
            sigma: 1.0,
            phi: 1.5,
            tau: 0.1,
            s_c: 0,
            s_d: 2,
            rho: 0.0,
            base_lambda: 0.05,
            f: 1.0,
            r: 0.7,
            reps: 100,
            alpha: 0.1,
            master_seed: 20260822,
            oracle_multiplier: 50,
        }
    }
}

impl SimConfig {
    /// Columns contributed by one categorical predictor.
    fn discrete_cols(&self) -> usize {
        if self.full_one_hot {
            self.levels
        } else {
            self.levels - 1
        }
    }

    /// Signal magnitude m = sqrt(2 tau log p).
    pub fn signal_magnitude(&self) -> f64 {
        (2.0 * self.tau * (self.p as f64).ln()).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let derived = self.n_continuous + self.n_discrete_groups * self.discrete_cols();
        if derived != self.p {
            return Err(Error::InvalidInput(format!(
                "p = {} does not match the design layout ({} continuous + {} discrete columns)",
                self.p,
                self.n_continuous,
                self.n_discrete_groups * self.discrete_cols()
            )));
        }
        if self.n_continuous > 0 && self.n_continuous % self.continuous_group_size != 0 {
            return Err(Error::InvalidInput(format!(
                "continuous group size {} does not divide {}",
                self.continuous_group_size, self.n_continuous
            )));
        }
        let n_cont_groups = if self.n_continuous == 0 {
            0
        } else {
            self.n_continuous / self.continuous_group_size
        };
        if self.s_c > n_cont_groups || self.s_d > self.n_discrete_groups {
            return Err(Error::InvalidInput(
                "more signal groups requested than the design has".into(),
            ));
        }
        if self.levels < 2 && self.n_discrete_groups > 0 {
            return Err(Error::InvalidInput(
                "categorical predictors need at least two levels".into(),
            ));
        }
        if self.response == ResponseKind::NegativeBinomial && self.phi <= 1.0 {
            return Err(Error::InvalidInput(format!(
                "negative binomial overdispersion must exceed 1, got {}",
                self.phi
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidInput(format!(
                "AR(1) correlation must be in (-1, 1), got {}",
                self.rho
            )));
        }
        if self.reps == 0 || self.n < 4 {
            return Err(Error::InvalidInput("reps and n must be positive".into()));
        }
        Ok(())
    }

    /// Group structure of the generated design.
    pub fn groups(&self) -> Result<GroupStructure> {
        let mut groups = Vec::new();
        let mut col = 0;
        if self.n_continuous > 0 {
            for _ in 0..(self.n_continuous / self.continuous_group_size) {
                groups.push((col..col + self.continuous_group_size).collect());
                col += self.continuous_group_size;
            }
        }
        for _ in 0..self.n_discrete_groups {
            groups.push((col..col + self.discrete_cols()).collect());
            col += self.discrete_cols();
        }
        GroupStructure::new(groups, self.p)
    }

    /// True signal coefficient vector. Signs alternate within each signal
    /// group so a group's mean contribution to the linear predictor stays
    /// near zero; the count families would otherwise see exploding rates as
    /// the signal groups accumulate.
    pub fn true_beta(&self) -> Result<DVector<f64>> {
        let groups = self.groups()?;
        let m = self.signal_magnitude();
        let mut beta = DVector::zeros(self.p);
        let n_cont_groups = if self.n_continuous == 0 {
            0
        } else {
            self.n_continuous / self.continuous_group_size
        };
        let mut fill = |group: usize, beta: &mut DVector<f64>| {
            for (k, &c) in groups.cols(group).iter().enumerate() {
                beta[c] = if k % 2 == 0 { m } else { -m };
            }
        };
        for g in 0..self.s_c {
            fill(g, &mut beta);
        }
        for g in 0..self.s_d {
            fill(n_cont_groups + g, &mut beta);
        }
        Ok(beta)
    }

    /// Indices of the true signal groups.
    pub fn signal_groups(&self) -> Vec<usize> {
        let n_cont_groups = if self.n_continuous == 0 {
            0
        } else {
            self.n_continuous / self.continuous_group_size
        };
        let mut sig: Vec<usize> = (0..self.s_c).collect();
        sig.extend((0..self.s_d).map(|g| n_cont_groups + g));
        sig
    }
}

/// Generates the design matrix: a stationary AR(1) continuous block followed
/// by one-hot encoded uniform categorical predictors.
pub fn generate_design(cfg: &SimConfig, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(cfg.n, cfg.p);
    let rho = cfg.rho;
    let innov = (1.0 - rho * rho).sqrt();
    for i in 0..cfg.n {
        let mut prev = 0.0;
        for j in 0..cfg.n_continuous {
            let eps: f64 = StandardNormal.sample(rng);
            let v = if j == 0 { eps } else { rho * prev + innov * eps };
            x[(i, j)] = v;
            prev = v;
        }
        let mut col = cfg.n_continuous;
        for _ in 0..cfg.n_discrete_groups {
            let level = rng.random_range(0..cfg.levels);
            if cfg.full_one_hot {
                x[(i, col + level)] = 1.0;
            } else if level > 0 {
                x[(i, col + level - 1)] = 1.0;
            }
            col += cfg.discrete_cols();
        }
    }
    x
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Generates the response for a design and the true coefficients.
pub fn generate_response(
    cfg: &SimConfig,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let theta = x * beta;
    let n = x.nrows();
    let mut y = DVector::zeros(n);
    match cfg.response {
        ResponseKind::Gaussian => {
            for i in 0..n {
                let eps: f64 = StandardNormal.sample(rng);
                y[i] = theta[i] + cfg.sigma * eps;
            }
        }
        ResponseKind::Logistic => {
            for i in 0..n {
                y[i] = if rng.random::<f64>() < sigmoid(theta[i]) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        ResponseKind::Poisson => {
            for i in 0..n {
                y[i] = sample_poisson(theta[i].exp(), rng)?;
            }
        }
        ResponseKind::NegativeBinomial => {
            // Gamma-Poisson mixture: lambda ~ Gamma(mu / (phi - 1), phi - 1)
            // gives mean mu and variance phi * mu.
            let spread = cfg.phi - 1.0;
            for i in 0..n {
                let mu = theta[i].exp();
                let lambda = if mu <= 0.0 {
                    0.0
                } else {
                    let gamma = Gamma::new(mu / spread, spread).map_err(|e| {
                        Error::InvalidInput(format!("gamma mixture parameters: {e}"))
                    })?;
                    gamma.sample(rng)
                };
                y[i] = sample_poisson(lambda, rng)?;
            }
        }
    }
    Ok(y)
}

fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(Error::InvalidInput(format!(
            "poisson rate is not finite: {lambda}"
        )));
    }
    if lambda < 1e-12 {
        return Ok(0.0);
    }
    let dist = Poisson::new(lambda)
        .map_err(|e| Error::InvalidInput(format!("poisson rate {lambda}: {e}")))?;
    Ok(dist.sample(rng))
}

/// Group-level F1 between a selected set and the true signal groups. Both
/// empty counts as a perfect score.
pub fn f1_score(selected: &[usize], truth: &[usize]) -> f64 {
    let tp = selected.iter().filter(|g| truth.contains(g)).count() as f64;
    let fp = selected.len() as f64 - tp;
    let fn_ = truth.len() as f64 - tp;
    if tp == 0.0 && fp == 0.0 && fn_ == 0.0 {
        return 1.0;
    }
    let denom = tp + 0.5 * (fp + fn_);
    if denom == 0.0 {
        0.0
    } else {
        tp / denom
    }
}

/// Per-method outcome of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    /// "ok", "empty", or "failed: <reason>".
    pub status: String,
    pub n_selected_groups: usize,
    pub selected_groups: Vec<usize>,
    /// Group-level F1; absent when the method failed outright.
    pub f1: Option<f64>,
    pub n_intervals: Option<usize>,
    pub covered: Option<usize>,
    pub coverage: Option<f64>,
    pub mean_length: Option<f64>,
    /// Selective method only: whether the inverse-information entry bound held.
    pub bound_ok: Option<bool>,
    /// True when the oracle-target refit for this support failed.
    pub oracle_failed: bool,
}

/// One replication's records for all three methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub methods: Vec<MethodRecord>,
}

/// Wall-clock timings, kept separate from the deterministic records.
#[derive(Debug, Clone)]
pub struct RepTiming {
    pub rep: usize,
    pub selective_ms: f64,
    pub split_ms: f64,
    pub naive_ms: f64,
}

/// Aggregate summary for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub reps_ok: usize,
    pub reps_empty: usize,
    pub reps_failed: usize,
    pub mean_f1: f64,
    /// Mean over replications of the per-replication coverage rate.
    pub mean_coverage: f64,
    pub median_coverage: f64,
    /// Covered intervals over all intervals, pooled across replications.
    pub pooled_coverage: f64,
    pub mean_length: f64,
    pub mean_selected_groups: f64,
    pub bound_violations: usize,
    pub oracle_failures: usize,
}

/// Full study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: SimConfig,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
    #[serde(skip)]
    pub timings: Vec<RepTiming>,
}

const STREAM_DESIGN: u64 = 0;
const STREAM_RESPONSE: u64 = 1;
const STREAM_RAND_SEED: u64 = 2;
const STREAM_SPLIT_SEED: u64 = 3;
const STREAM_ORACLE_DESIGN: u64 = 4;
const STREAM_ORACLE_RESPONSE: u64 = 5;
const STREAMS_PER_REP: u64 = 8;

fn rep_rng(master_seed: u64, rep: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep as u64 * STREAMS_PER_REP + stream);
    rng
}

/// Oracle coefficient target: restricted fit of the method's support on an
/// independent large dataset.
fn oracle_target(
    model: &LossModel,
    oracle: &Dataset,
    e_cols: &[usize],
) -> Result<DVector<f64>> {
    Ok(fit_restricted(model, oracle, e_cols, None)?.beta_e)
}

struct ScoredReport {
    record: MethodRecord,
    elapsed_ms: f64,
}

fn score_report(
    method: Method,
    outcome: Result<InferenceReport>,
    bound_ok: Option<bool>,
    model: &LossModel,
    oracle: &Dataset,
    truth_groups: &[usize],
    elapsed_ms: f64,
) -> ScoredReport {
    let record = match outcome {
        Err(err) => MethodRecord {
            method,
            status: format!("failed: {err}"),
            n_selected_groups: 0,
            selected_groups: Vec::new(),
            f1: None,
            n_intervals: None,
            covered: None,
            coverage: None,
            mean_length: None,
            bound_ok: None,
            oracle_failed: false,
        },
        Ok(report) => {
            let f1 = f1_score(&report.selected_groups, truth_groups);
            if report.status == ReportStatus::NothingSelected {
                MethodRecord {
                    method,
                    status: "empty".into(),
                    n_selected_groups: 0,
                    selected_groups: Vec::new(),
                    f1: Some(f1),
                    n_intervals: None,
                    covered: None,
                    coverage: None,
                    mean_length: None,
                    bound_ok: None,
                    oracle_failed: false,
                }
            } else {
                let (covered, n_int, mean_len, oracle_failed) =
                    match oracle_target(model, oracle, &report.selected_columns) {
                        Ok(target) => {
                            let mut covered = 0usize;
                            let mut total_len = 0.0;
                            for (j, row) in report.rows.iter().enumerate() {
                                if row.ci_lower <= target[j] && target[j] <= row.ci_upper {
                                    covered += 1;
                                }
                                total_len += row.ci_upper - row.ci_lower;
                            }
                            let n_int = report.rows.len();
                            (
                                Some(covered),
                                Some(n_int),
                                Some(total_len / n_int as f64),
                                false,
                            )
                        }
                        Err(_) => (None, None, None, true),
                    };
                MethodRecord {
                    method,
                    status: "ok".into(),
                    n_selected_groups: report.selected_groups.len(),
                    selected_groups: report.selected_groups.clone(),
                    f1: Some(f1),
                    n_intervals: n_int,
                    covered,
                    coverage: match (covered, n_int) {
                        (Some(c), Some(t)) if t > 0 => Some(c as f64 / t as f64),
                        _ => None,
                    },
                    mean_length: mean_len,
                    bound_ok,
                    oracle_failed,
                }
            }
        }
    };
    ScoredReport { record, elapsed_ms }
}

fn run_rep(cfg: &SimConfig, rep: usize) -> Result<(RepRecord, RepTiming)> {
    let model = cfg.response.loss();
    let groups = cfg.groups()?;
    let beta_true = cfg.true_beta()?;
    let truth_groups = cfg.signal_groups();

    let mut design_rng = rep_rng(cfg.master_seed, rep, STREAM_DESIGN);
    let x = generate_design(cfg, &mut design_rng);
    let mut resp_rng = rep_rng(cfg.master_seed, rep, STREAM_RESPONSE);
    let y = generate_response(cfg, &x, &beta_true, &mut resp_rng)?;
    let ds = Dataset::new(x, y)?;

    let oracle_n = cfg.oracle_multiplier * cfg.n;
    let oracle_cfg = SimConfig {
        n: oracle_n,
        ..cfg.clone()
    };
    let mut odesign_rng = rep_rng(cfg.master_seed, rep, STREAM_ORACLE_DESIGN);
    let ox = generate_design(&oracle_cfg, &mut odesign_rng);
    let mut oresp_rng = rep_rng(cfg.master_seed, rep, STREAM_ORACLE_RESPONSE);
    let oy = generate_response(&oracle_cfg, &ox, &beta_true, &mut oresp_rng)?;
    let oracle = Dataset::new(ox, oy)?;

    let penalty = default_lambda(&ds, &groups, cfg.base_lambda)?;
    let opts = SolveOptions::default();

    let rand_seed = rep_rng(cfg.master_seed, rep, STREAM_RAND_SEED).next_u64();
    let split_seed = rep_rng(cfg.master_seed, rep, STREAM_SPLIT_SEED).next_u64();

    let settings = SelectiveSettings {
        f: cfg.f,
        barrier_c: 0.0,
        alpha: cfg.alpha,
        seed: rand_seed,
        solve: opts.clone(),
    };
    let t0 = Instant::now();
    let selective = selective_analysis(&model, &ds, &groups, &penalty, &settings, None);
    let selective_ms = t0.elapsed().as_secs_f64() * 1e3;
    let (sel_outcome, sel_bound_ok) = match selective {
        Ok(analysis) => {
            let bound_ok = analysis
                .detail
                .as_ref()
                .map(|d| d.sfit.inv_max_entry <= d.sfit.inv_entry_bound * (1.0 + 1e-10));
            (Ok(analysis.report), bound_ok)
        }
        Err(e) => (Err(e), None),
    };

    let t0 = Instant::now();
    let split = make_split(cfg.n, cfg.r, split_seed).and_then(|plan| {
        split_inference(&model, &ds, &groups, &penalty, &plan, cfg.alpha, &opts, None)
    });
    let split_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t0 = Instant::now();
    let naive = naive_inference(&model, &ds, &groups, &penalty, cfg.alpha, &opts, None);
    let naive_ms = t0.elapsed().as_secs_f64() * 1e3;

    let scored = vec![
        score_report(
            Method::Selective,
            sel_outcome,
            sel_bound_ok,
            &model,
            &oracle,
            &truth_groups,
            selective_ms,
        ),
        score_report(
            Method::Split,
            split,
            None,
            &model,
            &oracle,
            &truth_groups,
            split_ms,
        ),
        score_report(
            Method::Naive,
            naive,
            None,
            &model,
            &oracle,
            &truth_groups,
            naive_ms,
        ),
    ];
    let timing = RepTiming {
        rep,
        selective_ms: scored[0].elapsed_ms,
        split_ms: scored[1].elapsed_ms,
        naive_ms: scored[2].elapsed_ms,
    };
    Ok((
        RepRecord {
            rep,
            methods: scored.into_iter().map(|s| s.record).collect(),
        },
        timing,
    ))
}

/// Runs every replication of a study cell and aggregates the results.
/// Replications run in parallel; output order and content are deterministic.
pub fn run_study(cfg: &SimConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let outcomes: Vec<Result<(RepRecord, RepTiming)>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep))
        .collect();
    let mut records = Vec::with_capacity(cfg.reps);
    let mut timings = Vec::with_capacity(cfg.reps);
    for outcome in outcomes {
        let (record, timing) = outcome?;
        records.push(record);
        timings.push(timing);
    }
    let summaries = [Method::Selective, Method::Split, Method::Naive]
        .iter()
        .map(|&m| summarize(m, &records))
        .collect();
    Ok(StudyResult {
        config: cfg.clone(),
        summaries,
        records,
        timings,
    })
}

fn summarize(method: Method, records: &[RepRecord]) -> MethodSummary {
    let rows: Vec<&MethodRecord> = records
        .iter()
        .flat_map(|r| r.methods.iter().filter(|m| m.method == method))
        .collect();
    let reps_ok = rows.iter().filter(|m| m.status == "ok").count();
    let reps_empty = rows.iter().filter(|m| m.status == "empty").count();
    let reps_failed = rows.len() - reps_ok - reps_empty;
    let f1s: Vec<f64> = rows.iter().filter_map(|m| m.f1).collect();
    let mean_f1 = mean(&f1s);
    let coverages: Vec<f64> = rows.iter().filter_map(|m| m.coverage).collect();
    let mean_coverage = mean(&coverages);
    let median_coverage = median(&coverages);
    let total_covered: usize = rows.iter().filter_map(|m| m.covered).sum();
    let total_intervals: usize = rows.iter().filter_map(|m| m.n_intervals).sum();
    let pooled_coverage = if total_intervals > 0 {
        total_covered as f64 / total_intervals as f64
    } else {
        f64::NAN
    };
    let lengths: Vec<f64> = rows.iter().filter_map(|m| m.mean_length).collect();
    let mean_length = mean(&lengths);
    let mean_selected_groups = mean(
        &rows
            .iter()
            .filter(|m| !m.status.starts_with("failed"))
            .map(|m| m.n_selected_groups as f64)
            .collect::<Vec<_>>(),
    );
    let bound_violations = rows.iter().filter(|m| m.bound_ok == Some(false)).count();
    let oracle_failures = rows.iter().filter(|m| m.oracle_failed).count();
    MethodSummary {
        method,
        reps_ok,
        reps_empty,
        reps_failed,
        mean_f1,
        mean_coverage,
        median_coverage,
        pooled_coverage,
        mean_length,
        mean_selected_groups,
        bound_violations,
        oracle_failures,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn opt_str<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Writes the per-replication records as CSV. Deterministic for a fixed
/// configuration: no timestamps or timings.
pub fn write_records_csv<W: std::io::Write>(result: &StudyResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rep",
        "method",
        "status",
        "n_selected_groups",
        "selected_groups",
        "f1",
        "n_intervals",
        "covered",
        "coverage",
        "mean_length",
    ])?;
    for rec in &result.records {
        for m in &rec.methods {
            let groups = m
                .selected_groups
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                rec.rep.to_string(),
                m.method.name().to_string(),
                m.status.clone(),
                m.n_selected_groups.to_string(),
                groups,
                opt_str(&m.f1),
                opt_str(&m.n_intervals),
                opt_str(&m.covered),
                opt_str(&m.coverage),
                opt_str(&m.mean_length),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes wall-clock timings as CSV (not deterministic across runs).
pub fn write_timings_csv<W: std::io::Write>(result: &StudyResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "selective_ms", "split_ms", "naive_ms"])?;
    for t in &result.timings {
        w.write_record([
            t.rep.to_string(),
            format!("{:.3}", t.selective_ms),
            format!("{:.3}", t.split_ms),
            format!("{:.3}", t.naive_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the aggregate summaries (with the configuration echoed) as JSON.
pub fn write_summary_json<W: std::io::Write>(result: &StudyResult, mut out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a SimConfig,
        summaries: &'a [MethodSummary],
    }
    let text = serde_json::to_string_pretty(&Summary {
        config: &result.config,
        summaries: &result.summaries,
    })?;
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}
