//! Shared helpers for the acceptance battery: finite differences, random
//! problem generators, a small derivative-free minimizer, and the
//! deterministic instance suites that several checks share.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use postsel::fit::{restricted_fit, RestrictedFit};
use postsel::model::{Dataset, GroupStructure, LossKind, LossModel};
use postsel::selective::{build_problem, SelectiveProblem};
use postsel::solver::{
    check_selection_event, default_lambda, draw_randomization_scaled, solve_group_lasso,
    GroupLassoSolution, Penalty, RandomizationSpec, SolveOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
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

/// Central finite-difference Hessian from function values.
pub fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
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

/// Standard-normal design matrix.
pub fn random_design(n: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

/// Random dataset for a loss family with a given coefficient vector.
pub fn random_dataset(
    kind: LossKind,
    n: usize,
    beta: &DVector<f64>,
    rng: &mut impl Rng,
) -> Dataset {
    let p = beta.len();
    let x = random_design(n, p, rng);
    let theta = &x * beta;
    let y = DVector::from_fn(n, |i, _| match kind {
        LossKind::Gaussian => theta[i] + {
            let e: f64 = StandardNormal.sample(rng);
            e
        },
        LossKind::Logistic => {
            let pr = 1.0 / (1.0 + (-theta[i]).exp());
            if rng.random::<f64>() < pr {
                1.0
            } else {
                0.0
            }
        }
        LossKind::Poisson | LossKind::QuasiPoisson => {
            let lam = theta[i].clamp(-20.0, 3.0).exp();
            let mut k = 0.0;
            let mut acc = (-lam).exp();
            let mut cum = acc;
            let u: f64 = rng.random();
            while cum < u && k < 1e4 {
                k += 1.0;
                acc *= lam / k;
                cum += acc;
            }
            k
        }
    });
    Dataset::new(x, y).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Partitions 0..p into contiguous groups with the given sizes.
pub fn contiguous_groups(sizes: &[usize]) -> GroupStructure {
    let p: usize = sizes.iter().sum();
    let mut groups = Vec::new();
    let mut c = 0;
    for &s in sizes {
        groups.push((c..c + s).collect());
        c += s;
    }
    GroupStructure::new(groups, p).unwrap()
}

/// Nelder-Mead minimizer for low-dimensional smooth functions. Returns the
/// best point found.
pub fn nelder_mead(
    f: impl Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    scale: f64,
    max_iter: usize,
) -> DVector<f64> {
    let d = x0.len();
    let mut simplex: Vec<DVector<f64>> = Vec::with_capacity(d + 1);
    simplex.push(x0.clone());
    for i in 0..d {
        let mut v = x0.clone();
        v[i] += scale;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let best = order[0];
        let worst = order[d];
        let second_worst = order[d - 1];

        let mut centroid = DVector::zeros(d);
        for &i in order.iter().take(d) {
            centroid += &simplex[i];
        }
        centroid /= d as f64;

        let reflected = &centroid * 2.0 - &simplex[worst];
        let fr = f(&reflected);
        if fr < values[best] {
            let expanded = &centroid * 3.0 - &simplex[worst] * 2.0;
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = (&centroid + &simplex[worst]) * 0.5;
            let fc = f(&contracted);
            if fc < values[worst] {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                let best_point = simplex[best].clone();
                for i in 0..=d {
                    if i != best {
                        simplex[i] = (&simplex[i] + &best_point) * 0.5;
                        values[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let spread = values
            .iter()
            .fold(f64::NEG_INFINITY, |a, &v| a.max(v))
            - values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if spread < 1e-14 {
            break;
        }
    }
    let mut best = 0;
    for i in 1..=d {
        if values[i] < values[best] {
            best = i;
        }
    }
    simplex[best].clone()
}

/// A fully built conditional inference instance.
pub struct Instance {
    pub kind: LossKind,
    pub ds: Dataset,
    pub groups: GroupStructure,
    pub penalty: Penalty,
    pub rand: RandomizationSpec,
    pub sol: GroupLassoSolution,
    pub fit: RestrictedFit,
    pub problem: SelectiveProblem,
}

impl Instance {
    /// sqrt(n) times the restricted coefficients, the scale the conditional
    /// problem works on.
    pub fn beta_scaled(&self) -> DVector<f64> {
        &self.fit.beta_e * (self.ds.n() as f64).sqrt()
    }

    /// sqrt(n) times the observed active group norms.
    pub fn gamma_scaled(&self) -> DVector<f64> {
        &self.sol.gamma * (self.ds.n() as f64).sqrt()
    }

    /// The realized randomization on the sqrt(n) scale, permuted into the
    /// layout order (active columns first, then inactive).
    pub fn omega_in_layout(&self) -> DVector<f64> {
        let sqn = (self.ds.n() as f64).sqrt();
        let mut cols = self.sol.layout.e_cols.clone();
        cols.extend_from_slice(&self.sol.layout.ep_cols);
        DVector::from_fn(cols.len(), |i, _| self.rand.omega[cols[i]] * sqn)
    }
}

/// A solved group-lasso event, kept even when the selection is empty so that
/// solution-level properties can be checked on every draw.
pub struct SolvedEvent {
    pub kind: LossKind,
    pub ds: Dataset,
    pub groups: GroupStructure,
    pub penalty: Penalty,
    pub rand: RandomizationSpec,
    pub sol: GroupLassoSolution,
    /// Present exactly when the selection is nonempty and the conditional
    /// problem was assembled.
    pub built: Option<(RestrictedFit, SelectiveProblem)>,
}

/// Generates one solved selection event from a seed. Returns None when the
/// penalty calibration or the solve itself fails, which the suites treat as
/// a skipped seed.
pub fn solve_event(
    kind: LossKind,
    n: usize,
    sizes: &[usize],
    beta_true: &DVector<f64>,
    base: f64,
    f: f64,
    seed: u64,
) -> Option<SolvedEvent> {
    let mut rng = seeded(seed);
    let ds = random_dataset(kind, n, beta_true, &mut rng);
    let groups = contiguous_groups(sizes);
    let penalty = default_lambda(&ds, &groups, base).ok()?;
    let model = LossModel::new(kind);
    let pilot = postsel::model::estimate_moments(&model, &ds, &DVector::zeros(0), &[]).ok()?;
    let rand = draw_randomization_scaled(&pilot.h, f, seed.wrapping_mul(31) + 7, n).ok()?;
    let sol = solve_group_lasso(
        &model,
        &ds,
        &groups,
        &penalty,
        Some(&rand),
        &SolveOptions::default(),
    )
    .ok()?;
    let built = if !sol.is_empty() && check_selection_event(&sol) {
        let fit = restricted_fit(&model, &ds, &sol.layout, Some(&sol.beta)).ok()?;
        let problem = build_problem(&sol, &fit, &groups, &penalty, &rand, 0.0).ok()?;
        Some((fit, problem))
    } else {
        None
    };
    Some(SolvedEvent {
        kind,
        ds,
        groups,
        penalty,
        rand,
        sol,
        built,
    })
}

/// Scans consecutive seeds until one yields a nonempty selection passing the
/// acceptance predicate, then returns it as a full Instance.
pub fn find_instance_where(
    kind: LossKind,
    n: usize,
    sizes: &[usize],
    beta_true: &DVector<f64>,
    base: f64,
    f: f64,
    seed0: u64,
    accept: impl Fn(&GroupLassoSolution) -> bool,
) -> Instance {
    for seed in seed0..seed0 + 2000 {
        let Some(ev) = solve_event(kind, n, sizes, beta_true, base, f, seed) else {
            continue;
        };
        if !accept(&ev.sol) {
            continue;
        }
        if let Some((fit, problem)) = ev.built {
            return Instance {
                kind,
                ds: ev.ds,
                groups: ev.groups,
                penalty: ev.penalty,
                rand: ev.rand,
                sol: ev.sol,
                fit,
                problem,
            };
        }
    }
    panic!("no usable selection instance found starting from seed {seed0}");
}

/// Deterministic gaussian solution-property suite: `count` solved events on
/// moderately sized mixed-group designs. Every event reaches the visitor,
/// including empty selections.
pub fn gaussian_event_suite(count: usize, mut visit: impl FnMut(&SolvedEvent)) {
    let sizes: &[usize] = &[2, 2, 1, 1];
    let beta = DVector::from_vec(vec![0.9, -0.6, 0.7, 0.0, 0.5, 0.0]);
    let mut produced = 0;
    let mut seed = 100u64;
    while produced < count {
        if let Some(ev) = solve_event(LossKind::Gaussian, 60, sizes, &beta, 0.05, 1.0, seed) {
            visit(&ev);
            produced += 1;
        }
        seed += 1;
    }
}

/// Deterministic mixed-group suite for the Jacobian derivative checks:
/// `count` built instances cycling over group shapes and loss families whose
/// active set keeps at least one non-singleton group.
pub fn jacobian_instance_suite(count: usize, mut visit: impl FnMut(&Instance)) {
    let shapes: &[&[usize]] = &[&[3, 2, 2], &[2, 2, 1, 1], &[4, 3, 1]];
    let kinds = [LossKind::Gaussian, LossKind::Logistic, LossKind::Gaussian];
    let mut seed0 = 500u64;
    for i in 0..count {
        let sizes = shapes[i % shapes.len()];
        let kind = kinds[i % kinds.len()];
        let p: usize = sizes.iter().sum();
        let amp = if kind == LossKind::Logistic { 0.6 } else { 0.8 };
        let beta = DVector::from_fn(p, |j, _| if j < 3 { amp } else { 0.0 });
        let inst = find_instance_where(kind, 80, sizes, &beta, 0.05, 1.0, seed0, |sol| {
            sol.layout.e_size() > sol.layout.active_groups.len()
        });
        visit(&inst);
        seed0 += 37;
    }
}

/// Deterministic small-support suite for the likelihood oracle checks:
/// `count` built instances with at most three selected columns, cycling over
/// the loss families.
pub fn small_support_suite(count: usize, mut visit: impl FnMut(&Instance)) {
    let kinds = [
        LossKind::Gaussian,
        LossKind::Logistic,
        LossKind::Poisson,
        LossKind::QuasiPoisson,
    ];
    let sizes: &[usize] = &[1, 1, 1, 1];
    let mut seed0 = 3000u64;
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let amp = match kind {
            LossKind::Poisson | LossKind::QuasiPoisson => 0.35,
            _ => 0.8,
        };
        let beta = DVector::from_vec(vec![amp, 0.0, 0.0, 0.0]);
        let inst = find_instance_where(kind, 100, sizes, &beta, 0.06, 1.0, seed0, |sol| {
            let e = sol.layout.e_size();
            e >= 1 && e <= 3
        });
        visit(&inst);
        seed0 += 41;
    }
}
