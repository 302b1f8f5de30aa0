//! Fast numerical invariant battery for the installed binary.
//!
//! Each check regenerates small random problems and verifies a property the
//! library must satisfy exactly or to tight numerical tolerance: penalty
//! validation, solver KKT conditions, the stationarity reconstruction of the
//! randomization, derivative formulas against finite differences, agreement
//! of the two conditional-parameter code paths, the inverse-information
//! entry bound, and an independent bisection solve of the one-dimensional
//! profiled optimization. One line is printed per check; the battery is
//! meant to finish in well under a minute.

use std::time::Instant;

use clap::Args;
use nalgebra::{DMatrix, DVector};
use postsel::error::Result;
use postsel::fit::{restricted_fit, RestrictedFit};
use postsel::model::{estimate_moments, Dataset, GroupStructure, LossModel};
use postsel::selective::{
    build_problem, grad_log_jacobian, hess_log_jacobian, log_jacobian, observed_fisher,
    reconstruct_randomization, selective_mle, solve_gstar, wald_inference, SelectiveProblem,
};
use postsel::solver::{
    check_selection_event, default_lambda, draw_randomization_scaled, solve_group_lasso,
    GroupLassoSolution, Penalty, RandomizationSpec, SolveOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Corrupts one penalty level before the checks run (testing hook).
    #[arg(long, hide = true)]
    pub corrupt_lambda: bool,
}

/// Runs the whole battery and reports whether every check passed.
pub fn run(args: &SelftestArgs) -> Result<bool> {
    let start = Instant::now();
    let mut passed = 0usize;
    let mut total = 0usize;

    report("penalty invariants", penalty_invariants(args.corrupt_lambda), &mut passed, &mut total);
    report("solver KKT conditions", kkt_and_reconstruction(), &mut passed, &mut total);
    report("Jacobian derivatives", jacobian_derivatives(), &mut passed, &mut total);
    report("parameter paths", parameter_paths(), &mut passed, &mut total);
    report("information bound", information_bound(), &mut passed, &mut total);
    report("scalar profile solve", scalar_profile_solve(), &mut passed, &mut total);

    let secs = start.elapsed().as_secs_f64();
    println!("selftest: {passed}/{total} checks passed in {secs:.1}s");
    Ok(passed == total)
}

fn report(
    name: &str,
    outcome: std::result::Result<String, String>,
    passed: &mut usize,
    total: &mut usize,
) {
    *total += 1;
    let label = format!("{name} ");
    match outcome {
        Ok(detail) => {
            *passed += 1;
            println!("{label:.<28} ok: {detail}");
        }
        Err(detail) => println!("{label:.<28} FAIL: {detail}"),
    }
}

/// A generated problem with everything the checks need.
struct Built {
    ds: Dataset,
    groups: GroupStructure,
    penalty: Penalty,
    rand: RandomizationSpec,
    sol: GroupLassoSolution,
    fit: RestrictedFit,
    problem: SelectiveProblem,
}

impl Built {
    fn beta_scaled(&self) -> DVector<f64> {
        &self.fit.beta_e * (self.ds.n() as f64).sqrt()
    }

    fn gamma_scaled(&self) -> DVector<f64> {
        &self.sol.gamma * (self.ds.n() as f64).sqrt()
    }
}

fn gaussian_dataset(n: usize, beta: &DVector<f64>, rng: &mut ChaCha8Rng) -> Dataset {
    let p = beta.len();
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    let eta = &x * beta;
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(rng);
        eta[i] + e
    });
    Dataset::new(x, y).expect("generated data is finite")
}

fn contiguous_groups(sizes: &[usize]) -> GroupStructure {
    let mut groups = Vec::with_capacity(sizes.len());
    let mut next = 0;
    for &s in sizes {
        groups.push((next..next + s).collect());
        next += s;
    }
    GroupStructure::new(groups, next).expect("group layout is valid")
}

/// Scans seeds until `count` problems with a clean nonempty selection event
/// pass the `accept` filter. Deterministic, and bounded so a regression that
/// makes selection impossible fails the check instead of hanging.
fn find_instances(
    n: usize,
    sizes: &[usize],
    beta_true: &[f64],
    base: f64,
    seed0: u64,
    count: usize,
    accept: impl Fn(&Built) -> bool,
) -> std::result::Result<Vec<Built>, String> {
    let model = LossModel::gaussian();
    let beta = DVector::from_row_slice(beta_true);
    let mut found: Vec<Built> = Vec::new();
    for seed in seed0..seed0 + 2000 {
        if found.len() == count {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = gaussian_dataset(n, &beta, &mut rng);
        let groups = contiguous_groups(sizes);
        let penalty = match default_lambda(&ds, &groups, base) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let pilot = match estimate_moments(&model, &ds, &DVector::zeros(0), &[]) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let rand =
            match draw_randomization_scaled(&pilot.h, 1.0, seed.wrapping_mul(31) + 7, ds.n()) {
                Ok(r) => r,
                Err(_) => continue,
            };
        let sol = match solve_group_lasso(
            &model,
            &ds,
            &groups,
            &penalty,
            Some(&rand),
            &SolveOptions::default(),
        ) {
            Ok(s) => s,
            Err(_) => continue,
        };
        if sol.is_empty() || !check_selection_event(&sol) {
            continue;
        }
        let fit = match restricted_fit(&model, &ds, &sol.layout, Some(&sol.beta)) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let problem = match build_problem(&sol, &fit, &groups, &penalty, &rand, 0.0) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let built = Built {
            ds,
            groups,
            penalty,
            rand,
            sol,
            fit,
            problem,
        };
        if accept(&built) {
            found.push(built);
        }
    }
    if found.len() < count {
        return Err(format!(
            "only {} of {count} usable problems found in the seed budget",
            found.len()
        ));
    }
    Ok(found)
}

/// The realized randomization in active layout order, scaled by sqrt(n).
fn omega_in_layout(inst: &Built) -> DVector<f64> {
    let sqn = (inst.ds.n() as f64).sqrt();
    let mut perm = inst.problem.layout.e_cols.clone();
    perm.extend_from_slice(&inst.problem.layout.ep_cols);
    DVector::from_fn(perm.len(), |i, _| inst.rand.omega[perm[i]] * sqn)
}

fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut hess = DMatrix::zeros(d, d);
    let f0 = f(x);
    for i in 0..d {
        for j in i..d {
            let v = if i == j {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - 2.0 * f0 + f(&xm)) / (h * h)
            } else {
                let mut xpp = x.clone();
                let mut xpm = x.clone();
                let mut xmp = x.clone();
                let mut xmm = x.clone();
                xpp[i] += h;
                xpp[j] += h;
                xpm[i] += h;
                xpm[j] -= h;
                xmp[i] -= h;
                xmp[j] += h;
                xmm[i] -= h;
                xmm[j] -= h;
                (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

fn rel_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

fn rel_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

/// Penalty construction must accept exactly the positive finite levels and
/// the penalty value must be positively homogeneous.
fn penalty_invariants(corrupt: bool) -> std::result::Result<String, String> {
    let groups = contiguous_groups(&[2, 1, 3, 1]);
    let mut levels = vec![0.8, 1.2, 0.5, 1.0];
    if corrupt {
        levels[2] = -levels[2];
    }
    let penalty = match Penalty::new(levels.clone(), &groups) {
        Ok(p) => p,
        Err(e) => return Err(format!("construction failed: {e}")),
    };
    for (g, &lam) in levels.iter().enumerate() {
        if penalty.level(g) != lam {
            return Err(format!(
                "level for group {g} changed to {} during construction",
                penalty.level(g)
            ));
        }
    }
    for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        if Penalty::constant(bad, &groups).is_ok() {
            return Err(format!("invalid level {bad} was accepted"));
        }
    }
    if Penalty::new(vec![1.0; 3], &groups).is_ok() {
        return Err("level count mismatch was accepted".into());
    }
    let beta = DVector::from_row_slice(&[0.3, -0.4, 0.0, 1.0, 0.2, -0.1, 0.5]);
    let v1 = penalty.value(&beta, &groups);
    let v2 = penalty.value(&(2.0 * &beta), &groups);
    if (v2 - 2.0 * v1).abs() > 1e-12 * v1.max(1.0) {
        return Err(format!("value is not homogeneous: {v1} doubles to {v2}"));
    }
    if penalty.value(&DVector::zeros(7), &groups) != 0.0 {
        return Err("value at zero is not zero".into());
    }
    Ok(format!(
        "{} groups, nonpositive and nonfinite levels rejected",
        levels.len()
    ))
}

/// The reported solution must satisfy the KKT conditions and, plugged into
/// the stationarity map, reproduce the realized randomization draw.
fn kkt_and_reconstruction() -> std::result::Result<String, String> {
    let insts = find_instances(
        60,
        &[2, 2, 1, 1],
        &[0.9, -0.6, 0.7, 0.0, 0.5, 0.0],
        0.05,
        100,
        30,
        |_| true,
    )?;
    let mut worst_kkt = 0.0f64;
    let mut worst_recon = 0.0f64;
    for inst in &insts {
        if inst.sol.kkt_residual > 1e-6 {
            return Err(format!(
                "KKT residual {:.3e} exceeds 1e-6",
                inst.sol.kkt_residual
            ));
        }
        if inst.sol.max_z_norm > 1.0 + 1e-8 {
            return Err(format!(
                "inactive subgradient norm {} exceeds 1",
                inst.sol.max_z_norm
            ));
        }
        let recon =
            reconstruct_randomization(&inst.problem, &inst.beta_scaled(), &inst.gamma_scaled());
        let target = omega_in_layout(inst);
        let err = (&recon - &target).norm() / target.norm().max(1.0);
        if err > 1e-8 {
            return Err(format!("randomization reconstruction error {err:.3e}"));
        }
        worst_kkt = worst_kkt.max(inst.sol.kkt_residual);
        worst_recon = worst_recon.max(err);
    }
    Ok(format!(
        "{} problems, max KKT residual {worst_kkt:.1e}, max draw error {worst_recon:.1e}",
        insts.len()
    ))
}

/// Analytic gradient and Hessian of the log Jacobian must match central
/// finite differences away from the observed point.
fn jacobian_derivatives() -> std::result::Result<String, String> {
    let insts = find_instances(
        80,
        &[3, 2, 2],
        &[0.8, -0.6, 0.5, 0.7, -0.4, 0.6, 0.0],
        0.05,
        500,
        8,
        |b| b.problem.layout.e_size() > b.problem.n_active_groups(),
    )?;
    let mut worst = 0.0f64;
    for inst in &insts {
        let problem = &inst.problem;
        let g0 = inst.gamma_scaled().add_scalar(0.3);
        let f = |g: &DVector<f64>| log_jacobian(problem, g).expect("Jacobian in domain");
        let grad = grad_log_jacobian(problem, &g0).map_err(|e| e.to_string())?;
        let gerr = (&grad - fd_gradient(&f, &g0, 1e-5)).amax() / grad.amax().max(1.0);
        if gerr > 1e-5 {
            return Err(format!("gradient differs from finite differences by {gerr:.3e}"));
        }
        let hess = hess_log_jacobian(problem, &g0).map_err(|e| e.to_string())?;
        let herr = (&hess - fd_hessian(&f, &g0, 1e-4)).amax() / hess.amax().max(1.0);
        if herr > 1e-4 {
            return Err(format!("Hessian differs from finite differences by {herr:.3e}"));
        }
        worst = worst.max(gerr).max(herr);
    }
    Ok(format!(
        "{} problems, max relative derivative error {worst:.1e}",
        insts.len()
    ))
}

/// The specialized conditional parameters for a scaled randomization
/// covariance must agree with the general formulas.
fn parameter_paths() -> std::result::Result<String, String> {
    let insts = find_instances(
        70,
        &[2, 2, 1, 1],
        &[0.9, -0.6, 0.7, 0.0, 0.5, 0.0],
        0.05,
        900,
        8,
        |_| true,
    )?;
    let mut worst = 0.0f64;
    for inst in &insts {
        let general_rand = RandomizationSpec {
            scaled_h: None,
            ..inst.rand.clone()
        };
        let general = build_problem(
            &inst.sol,
            &inst.fit,
            &inst.groups,
            &inst.penalty,
            &general_rand,
            0.0,
        )
        .map_err(|e| format!("general parameter path failed: {e}"))?;
        let diff = rel_diff_mat(&inst.problem.omega_bar, &general.omega_bar)
            .max(rel_diff_mat(&inst.problem.a_bar, &general.a_bar))
            .max(rel_diff_vec(&inst.problem.b_bar, &general.b_bar));
        if diff > 1e-10 {
            return Err(format!("parameter paths disagree by {diff:.3e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!(
        "{} problems, max disagreement {worst:.1e}",
        insts.len()
    ))
}

/// Entries of the inverse observed information must respect the theoretical
/// bound derived from the smallest penalized singular value.
fn information_bound() -> std::result::Result<String, String> {
    let insts = find_instances(
        90,
        &[2, 2, 1, 1, 2],
        &[0.8, -0.5, 0.6, 0.4, 0.7, 0.0, 0.0, 0.5],
        0.05,
        1500,
        15,
        |_| true,
    )?;
    let mut worst_ratio = 0.0f64;
    for inst in &insts {
        let beta_scaled = inst.beta_scaled();
        let gstar = solve_gstar(&inst.problem, &beta_scaled).map_err(|e| e.to_string())?;
        let mle = selective_mle(&inst.problem, &beta_scaled, &gstar);
        let fisher = observed_fisher(&inst.problem, &gstar).map_err(|e| e.to_string())?;
        let sfit =
            wald_inference(&inst.problem, &mle, &gstar, &fisher, 0.1).map_err(|e| e.to_string())?;
        if sfit.inv_max_entry > sfit.inv_entry_bound * (1.0 + 1e-10) {
            return Err(format!(
                "inverse information entry {:.3e} exceeds bound {:.3e}",
                sfit.inv_max_entry, sfit.inv_entry_bound
            ));
        }
        worst_ratio = worst_ratio.max(sfit.inv_max_entry / sfit.inv_entry_bound);
    }
    Ok(format!(
        "{} problems, worst entry at {:.0}% of the bound",
        insts.len(),
        100.0 * worst_ratio
    ))
}

/// With one active singleton group the log Jacobian vanishes, so the
/// profiled stationarity condition reduces to a strictly increasing scalar
/// equation that bisection can solve independently of the Newton code.
fn scalar_profile_solve() -> std::result::Result<String, String> {
    let insts = find_instances(
        50,
        &[1, 1, 1, 1],
        &[1.2, 0.0, 0.0, 0.0],
        0.12,
        3000,
        10,
        |b| b.problem.n_active_groups() == 1,
    )?;
    let mut worst = 0.0f64;
    for inst in &insts {
        let beta_scaled = inst.beta_scaled();
        let gstar = solve_gstar(&inst.problem, &beta_scaled).map_err(|e| e.to_string())?;
        let w = inst.problem.omega_bar_inv[(0, 0)];
        let m = (&inst.problem.a_bar * &beta_scaled + &inst.problem.b_bar)[0];
        let c = inst.problem.barrier_c;
        let root = bisect_stationarity(w, m, c)
            .ok_or_else(|| "bisection failed to bracket the root".to_string())?;
        let err = (gstar.g[0] - root).abs();
        if err > 1e-10 {
            return Err(format!(
                "Newton optimum {:.15} but bisection root {root:.15}",
                gstar.g[0]
            ));
        }
        worst = worst.max(err);
    }
    Ok(format!(
        "{} problems, max |Newton - bisection| {worst:.1e}",
        insts.len()
    ))
}

/// Root of w (g - m) - 1 / ((g - c)(g - c + 1)) = 0 over g > c. The left
/// side is strictly increasing from -inf to +inf, so the root is unique.
fn bisect_stationarity(w: f64, m: f64, c: f64) -> Option<f64> {
    let f = |g: f64| {
        let t = g - c;
        w * (g - m) - 1.0 / (t * (t + 1.0))
    };
    let mut lo = c + 1e-12;
    if f(lo) >= 0.0 {
        return None;
    }
    let mut hi = c + (m - c).max(1.0) * 2.0;
    for _ in 0..200 {
        if f(hi) > 0.0 {
            break;
        }
        hi = c + (hi - c) * 2.0;
    }
    if f(hi) <= 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}
