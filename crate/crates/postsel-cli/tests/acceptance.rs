//! Acceptance battery for the full pipeline: end-to-end study behavior,
//! solver and conditional-algebra properties against independent oracles,
//! and CLI determinism. Each test prints one summary line when it passes;
//! failures carry the measured quantities in the panic message.
//!
//! The two study tests additionally assert that the recorded
//! inverse-information bound violations are zero for every replication, so
//! the entrywise bound is checked across all suites in this file.

mod common;

use std::time::Instant;

use common::{
    fd_gradient, fd_hessian, find_instance_where, gaussian_event_suite, jacobian_instance_suite,
    nelder_mead, small_support_suite,
};
use nalgebra::DVector;
use postsel::model::LossKind;
use postsel::report::Method;
use postsel::selective::{
    brute_force_loglik, build_problem_with, grad_log_jacobian, hess_log_jacobian, log_jacobian,
    observed_fisher, reconstruct_randomization, selective_mle, solve_gstar, wald_inference,
    ParamPath,
};
use postsel::sim::{run_study, MethodSummary, ResponseKind, SimConfig, StudyResult};

/// Toy study base point at n = 200; the other sample sizes scale the signal
/// and penalty so the selection geometry stays comparable across n.
const TOY_TAU: f64 = 0.01;
const TOY_BASE_LAMBDA: f64 = 0.05;

fn toy_config(n: usize, master_seed: u64) -> SimConfig {
    let scale = 200.0 / n as f64;
    SimConfig {
        name: format!("toy-{n}"),
        n,
        p: 20,
        n_continuous: 0,
        continuous_group_size: 1,
        n_discrete_groups: 5,
        levels: 5,
        full_one_hot: false,
        response: ResponseKind::Logistic,
        sigma: 1.0,
        phi: 1.5,
        tau: TOY_TAU * scale,
        s_c: 0,
        s_d: 2,
        rho: 0.0,
        base_lambda: TOY_BASE_LAMBDA * scale.sqrt(),
        f: 3.0 / 7.0,
        r: 0.7,
        reps: 500,
        alpha: 0.1,
        master_seed,
        oracle_multiplier: 50,
    }
}

fn study_config(response: ResponseKind, s_d: usize, master_seed: u64) -> SimConfig {
    let r = 0.67;
    SimConfig {
        name: format!("study-{response:?}-{s_d}"),
        n: 500,
        p: 200,
        n_continuous: 120,
        continuous_group_size: 4,
        n_discrete_groups: 20,
        levels: 5,
        full_one_hot: false,
        response,
        sigma: 5.0,
        phi: 1.5,
        tau: 0.1,
        s_c: 3,
        s_d,
        rho: 0.3,
        base_lambda: 0.05,
        f: if response == ResponseKind::NegativeBinomial {
            1.0
        } else {
            (1.0 - r) / r
        },
        r,
        reps: 200,
        alpha: 0.1,
        master_seed,
        oracle_multiplier: 50,
    }
}

fn summary<'a>(result: &'a StudyResult, method: Method) -> &'a MethodSummary {
    result
        .summaries
        .iter()
        .find(|s| s.method == method)
        .expect("summary present for every method")
}

#[test]
fn acceptance_01_toy_coverage_lengths_f1() {
    for n in [200usize, 350, 500] {
        let cfg = toy_config(n, 11);
        let result = run_study(&cfg).expect("toy study runs");
        let sel = summary(&result, Method::Selective);
        let split = summary(&result, Method::Split);
        let naive = summary(&result, Method::Naive);

        println!(
            "toy n={n}: selective cov {:.3} len {:.2} f1 {:.3} | split cov {:.3} len {:.2} f1 {:.3} | naive cov {:.3}",
            sel.mean_coverage, sel.mean_length, sel.mean_f1,
            split.mean_coverage, split.mean_length, split.mean_f1,
            naive.mean_coverage,
        );

        assert!(
            (sel.mean_coverage - 0.90).abs() <= 0.03,
            "n={n}: selective coverage {:.4} outside 0.90 +/- 0.03",
            sel.mean_coverage
        );
        assert!(
            naive.mean_coverage <= 0.82,
            "n={n}: naive coverage {:.4} above 0.82",
            naive.mean_coverage
        );
        assert!(
            sel.mean_length < split.mean_length,
            "n={n}: selective length {:.3} not below splitting length {:.3}",
            sel.mean_length,
            split.mean_length
        );
        if n == 200 {
            assert!(
                split.mean_length >= 2.0 * sel.mean_length,
                "n=200: splitting/selective length ratio {:.2} below 2",
                split.mean_length / sel.mean_length
            );
        }
        assert!(
            (sel.mean_f1 - split.mean_f1).abs() <= 0.05,
            "n={n}: selective f1 {:.3} vs splitting f1 {:.3} differ by more than 0.05",
            sel.mean_f1,
            split.mean_f1
        );
        assert_eq!(
            sel.bound_violations, 0,
            "n={n}: inverse-information bound violated in the toy study"
        );
    }
    println!("acceptance 01: PASS");
}

#[test]
fn acceptance_02_study_coverage_and_lengths() {
    let families = [
        ResponseKind::Gaussian,
        ResponseKind::Logistic,
        ResponseKind::Poisson,
        ResponseKind::NegativeBinomial,
    ];
    let mut cells = 0usize;
    let mut length_ok = 0usize;
    for (fi, &response) in families.iter().enumerate() {
        for (si, s_d) in [2usize, 5, 7].into_iter().enumerate() {
            let cfg = study_config(response, s_d, 6200 + (fi * 3 + si) as u64);
            let result = run_study(&cfg).expect("study cell runs");
            let sel = summary(&result, Method::Selective);
            let split = summary(&result, Method::Split);
            let naive = summary(&result, Method::Naive);
            cells += 1;
            if sel.mean_length <= split.mean_length {
                length_ok += 1;
            }

            println!(
                "study {response:?} s_d={s_d}: selective cov {:.3} len {:.2} | split len {:.2} | naive median cov {:.3}",
                sel.mean_coverage, sel.mean_length, split.mean_length, naive.median_coverage,
            );

            assert!(
                (sel.mean_coverage - 0.90).abs() <= 0.04,
                "{response:?} s_d={s_d}: selective coverage {:.4} outside 0.90 +/- 0.04",
                sel.mean_coverage
            );
            assert!(
                naive.median_coverage < 0.88,
                "{response:?} s_d={s_d}: naive median coverage {:.4} not below 0.88",
                naive.median_coverage
            );
            assert_eq!(
                sel.bound_violations, 0,
                "{response:?} s_d={s_d}: inverse-information bound violated"
            );
        }
    }
    assert!(
        length_ok * 10 >= cells * 9,
        "selective mean length beat splitting in only {length_ok}/{cells} cells"
    );
    println!("acceptance 02: PASS ({length_ok}/{cells} cells with shorter selective intervals)");
}

#[test]
fn acceptance_03_solution_properties_and_timing() {
    let start = Instant::now();
    let mut built = 0usize;
    let mut worst_kkt = 0.0f64;
    let mut worst_recon = 0.0f64;
    gaussian_event_suite(1000, |ev| {
        assert!(
            ev.sol.kkt_residual < 1e-6,
            "KKT residual {:.3e} at or above 1e-6",
            ev.sol.kkt_residual
        );
        assert!(
            ev.sol.max_z_norm <= 1.0 + 1e-8,
            "inactive subgradient norm {} above 1 + 1e-8",
            ev.sol.max_z_norm
        );
        worst_kkt = worst_kkt.max(ev.sol.kkt_residual);
        if let Some((fit, problem)) = &ev.built {
            let n = ev.ds.n() as f64;
            let beta_scaled = &fit.beta_e * n.sqrt();
            let gamma_scaled = &ev.sol.gamma * n.sqrt();
            let recon = reconstruct_randomization(problem, &beta_scaled, &gamma_scaled);
            let mut cols = ev.sol.layout.e_cols.clone();
            cols.extend_from_slice(&ev.sol.layout.ep_cols);
            let omega =
                DVector::from_fn(cols.len(), |i, _| ev.rand.omega[cols[i]] * n.sqrt());
            let err = (&recon - &omega).amax() / omega.amax().max(1.0);
            assert!(
                err <= 1e-8,
                "randomization reconstruction error {err:.3e} above 1e-8"
            );
            worst_recon = worst_recon.max(err);
            built += 1;
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        built >= 600,
        "only {built}/1000 events had a nonempty selection; the reconstruction check needs more"
    );
    assert!(
        elapsed < 60.0,
        "solution property suite took {elapsed:.1}s, expected under a minute"
    );
    println!(
        "acceptance 03: PASS (1000 events, {built} reconstructions, max KKT {worst_kkt:.1e}, max draw error {worst_recon:.1e}, {elapsed:.1}s)"
    );
}

#[test]
fn acceptance_04_jacobian_derivative_chain() {
    let mut worst = 0.0f64;
    jacobian_instance_suite(200, |inst| {
        let problem = &inst.problem;
        let g0 = inst.gamma_scaled().add_scalar(0.3);
        let f = |g: &DVector<f64>| log_jacobian(problem, g).expect("Jacobian in domain");
        let grad = grad_log_jacobian(problem, &g0).unwrap();
        let gerr = (&grad - fd_gradient(&f, &g0, 1e-5)).amax() / grad.amax().max(1.0);
        assert!(
            gerr < 1e-5,
            "log-Jacobian gradient differs from finite differences by {gerr:.3e}"
        );
        let hess = hess_log_jacobian(problem, &g0).unwrap();
        let herr = (&hess - fd_hessian(&f, &g0, 1e-4)).amax() / hess.amax().max(1.0);
        assert!(
            herr < 1e-5,
            "log-Jacobian Hessian differs from finite differences by {herr:.3e}"
        );
        worst = worst.max(gerr).max(herr);
    });

    // Singleton-only groups carry no direction set, so the Jacobian factor
    // is identically one.
    let beta = DVector::from_vec(vec![1.0, -0.8, 0.0, 0.0]);
    for i in 0..20u64 {
        let inst = find_instance_where(
            LossKind::Gaussian,
            70,
            &[1, 1, 1, 1],
            &beta,
            0.08,
            1.0,
            9000 + 13 * i,
            |_| true,
        );
        let g0 = inst.gamma_scaled().add_scalar(0.2);
        assert_eq!(log_jacobian(&inst.problem, &g0).unwrap(), 0.0);
        assert_eq!(grad_log_jacobian(&inst.problem, &g0).unwrap().amax(), 0.0);
        assert_eq!(hess_log_jacobian(&inst.problem, &g0).unwrap().amax(), 0.0);
    }
    println!("acceptance 04: PASS (200 mixed instances, max relative error {worst:.1e}; 20 singleton instances exactly zero)");
}

#[test]
fn acceptance_05_likelihood_oracles() {
    let mut checked = 0usize;
    small_support_suite(50, |inst| {
        let problem = &inst.problem;
        let beta_scaled = inst.beta_scaled();
        let gstar = solve_gstar(problem, &beta_scaled).unwrap();
        let mle = selective_mle(problem, &beta_scaled, &gstar);

        let neg = |b: &DVector<f64>| -brute_force_loglik(problem, &beta_scaled, b).unwrap();
        let found = nelder_mead(&neg, &inst.fit.beta_e, 0.05, 1200);
        for j in 0..mle.len() {
            assert!(
                (mle[j] - found[j]).abs() < 1e-4,
                "{}: MLE coordinate {j} {} vs derivative-free search {}",
                inst.kind.name(),
                mle[j],
                found[j]
            );
        }

        let fisher = observed_fisher(problem, &gstar).unwrap();
        let loglik = |b: &DVector<f64>| brute_force_loglik(problem, &beta_scaled, b).unwrap();
        let hess = fd_hessian(&loglik, &mle, 2e-4);
        let scale = fisher.amax().max(1.0);
        for i in 0..mle.len() {
            for j in 0..mle.len() {
                assert!(
                    (fisher[(i, j)] + hess[(i, j)]).abs() <= 1e-3 * scale,
                    "{}: information entry ({i},{j}) {} vs likelihood curvature {}",
                    inst.kind.name(),
                    fisher[(i, j)],
                    -hess[(i, j)]
                );
            }
        }
        checked += 1;
    });
    assert_eq!(checked, 50);

    // Scalar selections reduce the profiled optimization to one dimension,
    // where bisection of the stationarity condition is an exact oracle.
    let beta = DVector::from_vec(vec![1.2, 0.0, 0.0, 0.0]);
    let mut scalar_checked = 0usize;
    for i in 0..12u64 {
        let inst = find_instance_where(
            LossKind::Gaussian,
            50,
            &[1, 1, 1, 1],
            &beta,
            0.12,
            1.0,
            4000 + 17 * i,
            |sol| sol.layout.active_groups.len() == 1,
        );
        let problem = &inst.problem;
        let beta_scaled = inst.beta_scaled();
        let gstar = solve_gstar(problem, &beta_scaled).unwrap();

        let m = (&problem.a_bar * &beta_scaled + &problem.b_bar)[0];
        let w = problem.omega_bar_inv[(0, 0)];
        let c = problem.barrier_c;
        let phi = |g: f64| w * (g - m) - 1.0 / ((g - c) * (g - c + 1.0));
        let mut lo = c + 1e-12;
        let mut hi = c + 1.0;
        while phi(hi) < 0.0 {
            hi = c + (hi - c) * 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!(
            (gstar.g[0] - root).abs() < 1e-10,
            "scalar profiled solution {} vs bisection {root}",
            gstar.g[0]
        );
        scalar_checked += 1;
    }
    assert_eq!(scalar_checked, 12);
    println!("acceptance 05: PASS (50 small-support instances, 12 scalar bisection checks)");
}

#[test]
fn acceptance_06_information_bound() {
    let mut checked = 0usize;
    let mut worst_ratio = 0.0f64;
    {
        let mut check = |problem: &postsel::selective::SelectiveProblem,
                         beta_scaled: &DVector<f64>| {
            let gstar = solve_gstar(problem, beta_scaled).unwrap();
            let mle = selective_mle(problem, beta_scaled, &gstar);
            let fisher = observed_fisher(problem, &gstar).unwrap();
            let sfit = wald_inference(problem, &mle, &gstar, &fisher, 0.1).unwrap();
            assert!(
                sfit.inv_max_entry <= sfit.inv_entry_bound * (1.0 + 1e-10),
                "inverse information entry {:.3e} above the bound {:.3e}",
                sfit.inv_max_entry,
                sfit.inv_entry_bound
            );
            checked += 1;
            worst_ratio = worst_ratio.max(sfit.inv_max_entry / sfit.inv_entry_bound);
        };

        gaussian_event_suite(1000, |ev| {
            if let Some((fit, problem)) = &ev.built {
                let beta_scaled = &fit.beta_e * (ev.ds.n() as f64).sqrt();
                check(problem, &beta_scaled);
            }
        });
        jacobian_instance_suite(200, |inst| check(&inst.problem, &inst.beta_scaled()));
        small_support_suite(50, |inst| check(&inst.problem, &inst.beta_scaled()));
    }

    assert!(checked > 800, "only {checked} instances reached the bound check");
    println!(
        "acceptance 06: PASS ({checked} instances, worst entry/bound ratio {worst_ratio:.3})"
    );
}

#[test]
fn acceptance_07_parameter_path_equivalence() {
    let beta = DVector::from_vec(vec![0.9, -0.6, 0.7, 0.0, 0.5, 0.0]);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let inst = find_instance_where(
            LossKind::Gaussian,
            70,
            &[2, 2, 1, 1],
            &beta,
            0.05,
            1.0,
            20_000 + 23 * i,
            |_| true,
        );
        let shortcut = build_problem_with(
            &inst.sol,
            &inst.fit,
            &inst.groups,
            &inst.penalty,
            &inst.rand,
            0.0,
            ParamPath::Shortcut,
        )
        .expect("scaled-curvature formulas apply to a gaussian pilot draw");
        let general = build_problem_with(
            &inst.sol,
            &inst.fit,
            &inst.groups,
            &inst.penalty,
            &inst.rand,
            0.0,
            ParamPath::General,
        )
        .unwrap();

        let rel_mat = |a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>| {
            (a - b).amax() / a.amax().max(1.0)
        };
        let diff = rel_mat(&shortcut.omega_bar, &general.omega_bar)
            .max(rel_mat(&shortcut.a_bar, &general.a_bar))
            .max((&shortcut.b_bar - &general.b_bar).amax() / shortcut.b_bar.amax().max(1.0));
        assert!(
            diff <= 1e-10,
            "instance {i}: parameter paths disagree by {diff:.3e}"
        );
        worst = worst.max(diff);
    }
    println!("acceptance 07: PASS (100 instances, max disagreement {worst:.1e})");
}

#[test]
fn acceptance_08_simulate_determinism() {
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.json");
    let mut cfg = toy_config(120, 424242);
    cfg.reps = 25;
    cfg.name = "determinism".into();
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("out{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_postsel"))
            .args([
                "simulate",
                "--config",
                config.to_str().unwrap(),
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "simulate run {run} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        outputs.push(std::fs::read(out_dir.join("records.csv")).unwrap());
    }
    assert_eq!(
        outputs[0], outputs[1],
        "identical configs produced different record files"
    );
    println!(
        "acceptance 08: PASS (two runs, byte-identical records of {} bytes)",
        outputs[0].len()
    );
}
