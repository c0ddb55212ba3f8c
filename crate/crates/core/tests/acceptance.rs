//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (written directly so it shows even under output capture); the test
//! fails if any criterion fails.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use latefuse::federation::{
    local_initial_fit, pipeline_plans, run_pipeline, AuditLog, Method, PipelineConfig,
};
use latefuse::fusion::{
    check_certificate, default_weights, fusion_objective, prox_group, solve_fusion, tune_lambda, FusionProblem,
    CERTIFICATE_TOL,
};
use latefuse::kernel::{KernelFit, KernelKind};
use latefuse::moments::{build_fold_surrogates, combine_fold_surrogates, BandwidthPolicy, QuadraticSurrogate, Regressor};
use latefuse::nuisance_fusion::{
    build_grid, covariate_scale, default_nuisance_bandwidths, default_nuisance_lambda_grid, fit_fused_nuisance,
    DomainBox, GridKind, TaskTarget,
};
use latefuse::sim::{
    generate_scenario, pipeline_config, run_experiment, scenario3_exposure,
    ExperimentResult, ScenarioConfig,
};
use latefuse::{ModelKind, TaskDataset};

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String, started: Instant) {
        let line = format!(
            "acceptance criterion {id:>2}: {} — {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        let _ = writeln!(std::io::stderr(), "{line}");
        self.lines.push((id, pass, line));
    }
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.2
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Minimizes a convex function on R^d (d ≤ 2) by repeated 7^d grid
/// search, halving the box around the incumbent at every level.
fn grid_refine(d: usize, center: &DVector<f64>, radius: f64, f: &dyn Fn(&DVector<f64>) -> f64) -> (DVector<f64>, f64) {
    let mut c = center.clone();
    let mut best = f(&c);
    let mut r = radius;
    let ticks: Vec<f64> = (0..=6).map(|i| -1.0 + i as f64 / 3.0).collect();
    while r > 1e-9 {
        let mut next = c.clone();
        let mut try_point = |p: DVector<f64>| {
            let v = f(&p);
            if v < best {
                best = v;
                next = p;
            }
        };
        if d == 1 {
            for a in &ticks {
                try_point(DVector::from_vec(vec![c[0] + a * r]));
            }
        } else {
            for a in &ticks {
                for b in &ticks {
                    try_point(DVector::from_vec(vec![c[0] + a * r, c[1] + b * r]));
                }
            }
        }
        c = next;
        r *= 0.5;
    }
    (c, best)
}

/// Brute-force fusion optimum: outer grid search over the center, inner
/// grid search over each task's parameter.
fn fusion_oracle(surrogates: &[QuadraticSurrogate], lambda: f64) -> f64 {
    let d = surrogates[0].dim();
    let mins: Vec<DVector<f64>> = surrogates.iter().map(|s| s.minimizer().unwrap()).collect();
    let mean = mins.iter().fold(DVector::zeros(d), |a, m| a + m) / mins.len() as f64;
    let spread = mins.iter().map(|m| (m - &mean).norm()).fold(0.0, f64::max) + 1.0;
    let inner = |u0: &DVector<f64>| -> f64 {
        surrogates
            .iter()
            .zip(&mins)
            .map(|(s, m)| {
                let f = |u: &DVector<f64>| s.value(u) + lambda * (u - u0).norm();
                let start = (m + u0) * 0.5;
                s.weight * grid_refine(d, &start, 2.0 * spread, &f).1
            })
            .sum()
    };
    grid_refine(d, &mean, 2.0 * spread, &inner).1
}

fn random_surrogates(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<QuadraticSurrogate> {
    (0..k)
        .map(|i| {
            let w = random_spd(rng, d);
            let g = random_vec(rng, d, 1.0);
            QuadraticSurrogate::new(i, g, w, rng.random_range(0.5..2.0)).unwrap()
        })
        .collect()
}

fn criterion_1(report: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_gap: f64 = 0.0;
    let mut certified = 0;
    for _ in 0..25 {
        let k = rng.random_range(2..=4);
        let d = rng.random_range(1..=2);
        let surrogates = random_surrogates(&mut rng, k, d);
        let lambda = rng.random_range(0.05..2.0);
        let sol = solve_fusion(&FusionProblem { surrogates: surrogates.clone(), lambda }).unwrap();
        let u: Vec<DVector<f64>> = (0..k).map(|i| sol.task(i)).collect();
        let value = fusion_objective(&surrogates, lambda, &sol.center(), &u);
        let oracle = fusion_oracle(&surrogates, lambda);
        worst_gap = worst_gap.max((value - oracle).abs());
        if check_certificate(&surrogates, lambda, &sol, CERTIFICATE_TOL) {
            certified += 1;
        }
    }
    let pass = worst_gap <= 1e-5 && certified == 25 && started.elapsed().as_secs() < 60;
    report.record(1, pass, format!("max |objective − oracle| = {worst_gap:.2e}, certificates {certified}/25"), started);
}

fn criterion_2(report: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut free_err, mut pooled_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let d = rng.random_range(1..=3);
        let surrogates = random_surrogates(&mut rng, k, d);
        let sol = solve_fusion(&FusionProblem { surrogates: surrogates.clone(), lambda: 0.0 }).unwrap();
        for (i, s) in surrogates.iter().enumerate() {
            free_err = free_err.max((sol.task(i) - s.minimizer().unwrap()).amax());
        }
        let sol = solve_fusion(&FusionProblem { surrogates: surrogates.clone(), lambda: 1e9 }).unwrap();
        let w_sum = surrogates.iter().fold(DMatrix::zeros(d, d), |a, s| a + &s.w * s.weight);
        let g_sum = surrogates.iter().fold(DVector::zeros(d), |a, s| a + &s.g * s.weight);
        let pooled = w_sum.lu().solve(&(-g_sum)).unwrap();
        for i in 0..k {
            pooled_err = pooled_err.max((sol.task(i) - &pooled).amax());
        }
    }
    let pass = free_err <= 1e-10 && pooled_err <= 1e-6;
    report.record(2, pass, format!("λ=0 gap {free_err:.2e} (≤1e-10), λ=1e9 gap {pooled_err:.2e} (≤1e-6)"), started);
}

fn criterion_3(report: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut threshold_ok = true;
    for _ in 0..50 {
        let w = random_spd(&mut rng, 2);
        let c = random_vec(&mut rng, 2, 2.0);
        let lambda = rng.random_range(0.05..1.5) * c.norm();
        let v = prox_group(&w, &c, lambda).unwrap();
        let f = |u: &DVector<f64>| 0.5 * u.dot(&(&w * u)) + c.dot(u) + lambda * u.norm();
        // dense 401² scan, then refinement around the scan's best point
        let radius = c.norm() / w.symmetric_eigenvalues().min() + 0.1;
        let mut best = (DVector::zeros(2), f(&DVector::zeros(2)));
        for a in 0..=400 {
            for b in 0..=400 {
                let u = DVector::from_vec(vec![radius * (a as f64 / 200.0 - 1.0), radius * (b as f64 / 200.0 - 1.0)]);
                let val = f(&u);
                if val < best.1 {
                    best = (u, val);
                }
            }
        }
        let (oracle, _) = grid_refine(2, &best.0, radius / 100.0, &f);
        worst = worst.max((v - oracle).norm());
        // ‖c‖ ≤ λ must give exactly zero
        let inside = &c * (lambda / c.norm()) * rng.random_range(0.0..=1.0);
        if prox_group(&w, &inside, lambda).unwrap().iter().any(|x| *x != 0.0) {
            threshold_ok = false;
        }
        let edge = &c * (lambda / c.norm());
        if prox_group(&w, &edge, lambda * (1.0 + 1e-15)).unwrap().iter().any(|x| *x != 0.0) {
            threshold_ok = false;
        }
    }
    let pass = worst <= 2e-4 && threshold_ok && started.elapsed().as_secs() < 60;
    report.record(3, pass, format!("max ‖prox − grid‖ = {worst:.2e} (≤2e-4), zero threshold exact: {threshold_ok}"), started);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_4(report: &mut Report, audits: &mut Vec<(String, Vec<usize>, AuditLog)>) {
    let started = Instant::now();
    let mut medians = Vec::new();
    for n in [200, 1600] {
        let mut cfg = ScenarioConfig::new(3, n, 1.0);
        cfg.tasks = 1;
        cfg.seed = 4;
        let mut errs = Vec::new();
        for r in 0..50 {
            let scen = generate_scenario(&cfg, r).unwrap();
            let out = run_pipeline(&scen.datasets, &pipeline_config(&cfg, Method::Itl, r).unwrap()).unwrap();
            errs.push((out.estimates[0].theta[0] - scen.truths[0].theta[0]).abs());
            audits.push((format!("crit4 n={n} r={r}"), vec![n], out.audit));
        }
        medians.push(median(errs));
    }
    let pass = medians[1] < 0.5 * medians[0] && started.elapsed().as_secs() < 300;
    report.record(
        4,
        pass,
        format!("median |θ̃−θ|: n=200 {:.4}, n=1600 {:.4}, ratio {:.3} (<0.5)", medians[0], medians[1], medians[1] / medians[0]),
        started,
    );
}

fn per_repeat(result: &ExperimentResult, method: Method, f: &dyn Fn(&[f64]) -> f64) -> Vec<Option<f64>> {
    (0..result.config.repeats)
        .map(|r| {
            let errs: Vec<f64> = result
                .rows
                .iter()
                .filter(|row| row.repeat == r && row.method == method)
                .map(|row| row.squared_error)
                .collect();
            (errs.len() == result.config.tasks).then(|| f(&errs))
        })
        .collect()
}

/// One-sided sign-test p-value for `wins` successes out of `trials`.
fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut log_c = 0.0; // ln C(trials, 0)
    let mut tail = 0.0;
    for i in 0..=trials {
        if i > 0 {
            log_c += ((trials - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= wins {
            tail += (log_c - trials as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail
}

fn scenario3_experiment(eta: f64, methods: Vec<Method>, seed: u64) -> ExperimentResult {
    let mut cfg = ScenarioConfig::new(3, 100, eta);
    cfg.repeats = 100;
    cfg.seed = seed;
    cfg.methods = methods;
    run_experiment(&cfg).unwrap()
}

fn push_audits(audits: &mut Vec<(String, Vec<usize>, AuditLog)>, tag: &str, result: &ExperimentResult) {
    for (r, m, log) in &result.audits {
        audits.push((format!("{tag} r={r} {m}"), vec![result.config.n], log.clone()));
    }
}

fn criterion_5(report: &mut Report, audits: &mut Vec<(String, Vec<usize>, AuditLog)>) {
    let started = Instant::now();
    let result = scenario3_experiment(1.0, vec![Method::Itl, Method::Mtl, Method::MtlNuis], 5);
    push_audits(audits, "crit5", &result);
    let avg = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
    let itl = per_repeat(&result, Method::Itl, &avg);
    let mtl = per_repeat(&result, Method::Mtl, &avg);
    let nuis = per_repeat(&result, Method::MtlNuis, &avg);
    let (mut wins, mut trials) = (0, 0);
    for (a, b) in itl.iter().zip(&mtl) {
        if let (Some(a), Some(b)) = (a, b) {
            if a != b {
                trials += 1;
                if b < a {
                    wins += 1;
                }
            }
        }
    }
    let mean = |v: &[Option<f64>]| {
        let x: Vec<f64> = v.iter().flatten().copied().collect();
        x.iter().sum::<f64>() / x.len() as f64
    };
    let (m_itl, m_mtl, m_nuis) = (mean(&itl), mean(&mtl), mean(&nuis));
    let p = sign_test_p(wins, trials);
    let pass = m_mtl < m_itl && p < 0.05 && m_nuis <= m_mtl && result.failures.is_empty();
    report.record(
        5,
        pass,
        format!(
            "avg MSE ITL {m_itl:.4}, MTL {m_mtl:.4}, MTL_NUIS {m_nuis:.4}; MTL wins {wins}/{trials}, sign-test p = {p:.2e}; failures {}",
            result.failures.len()
        ),
        started,
    );
}

fn criterion_6(report: &mut Report, audits: &mut Vec<(String, Vec<usize>, AuditLog)>) {
    let started = Instant::now();
    let result = scenario3_experiment(0.0, vec![Method::Itl, Method::Mtl], 6);
    push_audits(audits, "crit6", &result);
    let task5 = |e: &[f64]| e[4];
    let itl = per_repeat(&result, Method::Itl, &task5);
    let mtl = per_repeat(&result, Method::Mtl, &task5);
    let ratios: Vec<f64> = itl
        .iter()
        .zip(&mtl)
        .filter_map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if *a > 0.0 => Some(b / a),
            _ => None,
        })
        .collect();
    let count = ratios.len();
    let med = median(ratios);
    report.record(6, med <= 2.0 && count == 100, format!("median task-5 MSE ratio MTL/ITL = {med:.3} over {count} repeats (≤2)"), started);
}

fn identical_mean(x: &[f64]) -> f64 {
    (std::f64::consts::PI * x[0]).sin() + x[1] * x[1]
}

/// Partially linear tasks on [−1,1]² whose outcome regressions coincide.
fn shared_mean_tasks(seed: u64, n: usize) -> Vec<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|k| {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = rows
                .iter()
                .zip(&t)
                .map(|(x, tv)| 0.5 * tv + identical_mean(x) + rng.sample::<f64, _>(StandardNormal))
                .collect();
            TaskDataset::from_rows(k, &rows, Some(t), y).unwrap()
        })
        .collect()
}

fn criterion_7(report: &mut Report, audits: &mut Vec<(String, Vec<usize>, AuditLog)>) {
    let started = Instant::now();
    let n = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let test: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]).collect();
    let truth: Vec<f64> = test.iter().map(|x| identical_mean(x)).collect();
    let rmse = |pred: &dyn Fn(&[f64]) -> f64| {
        (test.iter().zip(&truth).map(|(x, t)| (pred(x) - t).powi(2)).sum::<f64>() / test.len() as f64).sqrt()
    };
    let mut wins = 0;
    let (mut fused_total, mut local_total) = (0.0, 0.0);
    for r in 0..100u64 {
        let data = shared_mean_tasks(1000 + r, n);
        let mut config = PipelineConfig::new(ModelKind::Plm, Method::MtlNuis);
        config.seed = r;
        config.domain = Some(DomainBox::cube(2, -1.0, 1.0).unwrap());
        let plans = pipeline_plans(&data, config.folds, config.seed).unwrap();
        let weights = default_weights(&[n; 5]);
        let targets: Vec<TaskTarget> = data.iter().map(TaskTarget::outcome).collect();
        let half = plans[0].halves(0)[0].len() as f64;
        let scale = targets.iter().map(covariate_scale).sum::<f64>() / 5.0;
        let hbars = default_nuisance_bandwidths(half, 2, scale);
        let grid = Arc::new(build_grid(config.domain.as_ref().unwrap(), hbars[0], GridKind::Lattice, 512).unwrap());
        let sd = targets
            .iter()
            .map(|t| {
                let m = t.y.iter().sum::<f64>() / t.y.len() as f64;
                (t.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t.y.len() - 1) as f64).sqrt()
            })
            .sum::<f64>()
            / 5.0;
        let lambdas = default_nuisance_lambda_grid(sd, grid.len());
        config.nuisance_bandwidths = Some(hbars.clone());
        config.nuisance_lambdas = Some(lambdas.clone());
        config.grid_budget = Some(512);
        let out = run_pipeline(&data, &config).unwrap();
        audits.push((format!("crit7 r={r}"), vec![n], out.audit));
        let fused = fit_fused_nuisance(&targets, &plans, &weights, grid, &hbars, &lambdas).unwrap();
        let mu_report = out.nuisance.iter().find(|rep| rep.name == "mu").unwrap();
        assert_eq!(fused.selection.hbar, mu_report.hbar);
        assert_eq!(fused.selection.lambda, mu_report.lambda);

        let (mut f_sum, mut l_sum) = (0.0, 0.0);
        for (k, d) in data.iter().enumerate() {
            let fits = &fused.fits[k];
            let pairs = (fits.len() * 2) as f64;
            let local: Vec<KernelFit> = (0..fits.len())
                .flat_map(|j| plans[k].halves(j).clone())
                .map(|idx| {
                    let rows = d.rows_flat(&idx);
                    let y: Vec<f64> = idx.iter().map(|&i| d.y()[i]).collect();
                    let h = BandwidthPolicy::default().select(&rows, 2, &y).unwrap();
                    KernelFit::from_flat(rows, 2, y, h, KernelKind::NadarayaWatson).unwrap()
                })
                .collect();
            f_sum += rmse(&|x| fits.iter().flat_map(|pair| pair.iter()).map(|f| f.predict(x)).sum::<f64>() / pairs);
            l_sum += rmse(&|x| local.iter().map(|f| f.nw_at(x).0).sum::<f64>() / pairs);
        }
        fused_total += f_sum / 5.0;
        local_total += l_sum / 5.0;
        if f_sum <= l_sum {
            wins += 1;
        }
    }
    report.record(
        7,
        wins >= 80,
        format!(
            "fused RMSE ≤ per-task kernel RMSE in {wins}/100 repeats (≥80); mean RMSE fused {:.4}, per-task {:.4}",
            fused_total / 100.0,
            local_total / 100.0
        ),
        started,
    );
}

fn criterion_8(report: &mut Report, audits: &[(String, Vec<usize>, AuditLog)]) {
    let started = Instant::now();
    let mut violations = Vec::new();
    let mut messages = 0;
    for (tag, sizes, log) in audits {
        messages += log.len();
        for e in log.size_scaling_entries(sizes, &[]) {
            violations.push(format!("{tag}: {} {:?}", e.kind, e.dims));
        }
    }
    let detail = format!("{} runs, {messages} messages, {} violations {:?}", audits.len(), violations.len(), violations.first());
    report.record(8, violations.is_empty() && !audits.is_empty(), detail, started);
}

fn criterion_9(report: &mut Report) {
    let started = Instant::now();
    let mut cfg = ScenarioConfig::new(3, 90, 0.5);
    cfg.tasks = 3;
    cfg.seed = 9;
    let data = generate_scenario(&cfg, 0).unwrap().datasets;
    let mut c = PipelineConfig::new(ModelKind::Plm, Method::Mtl);
    c.seed = 9;
    let out = run_pipeline(&data, &c).unwrap();

    let plans = pipeline_plans(&data, c.folds, c.seed).unwrap();
    let weights = default_weights(&data.iter().map(TaskDataset::n).collect::<Vec<_>>());
    let folds: Vec<_> = data
        .iter()
        .zip(&plans)
        .map(|(d, p)| {
            let init = local_initial_fit(d, p, ModelKind::Plm, None, &c.bandwidth, c.max_outer).unwrap();
            build_fold_surrogates(d, p, &init, ModelKind::Plm).unwrap()
        })
        .collect();
    let grid = out.lambda_selection.as_ref().unwrap().grid.clone();
    let sel = tune_lambda(&folds, &weights, &grid).unwrap();
    let surrogates = folds.iter().enumerate().map(|(k, f)| combine_fold_surrogates(k, f, None, weights[k]).unwrap()).collect();
    let sol = solve_fusion(&FusionProblem { surrogates, lambda: sel.lambda }).unwrap();
    let gap = (0..3).map(|k| (sol.u[k][0] - out.estimates[k].theta[0]).abs()).fold(0.0, f64::max);
    let pass = gap <= 1e-12 && sel.lambda == out.lambda;
    report.record(9, pass, format!("max |pipeline − library| = {gap:.1e} (≤1e-12), λ {} vs {}", out.lambda, sel.lambda), started);
}

fn criterion_10(report: &mut Report) {
    let started = Instant::now();
    // Scenario 2 noise variance
    let mut cfg = ScenarioConfig::new(2, 100_000, 0.5);
    cfg.tasks = 1;
    cfg.seed = 10;
    let scen = generate_scenario(&cfg, 0).unwrap();
    let d = &scen.datasets[0];
    let theta = &scen.raw_thetas[0];
    let eps: Vec<f64> = (0..d.n())
        .map(|i| {
            let s: f64 = d.row(i).iter().zip(theta).map(|(a, b)| a * b).sum();
            d.y()[i] - 0.2 * s * s
        })
        .collect();
    let m = eps.iter().sum::<f64>() / eps.len() as f64;
    let var = eps.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (eps.len() - 1) as f64;
    let var_ok = (var / 0.04 - 1.0).abs() <= 0.02;

    // Scenario 3 exposure residual mean, on a task with a shifted exposure
    let mut cfg = ScenarioConfig::new(3, 100_000, 0.3);
    cfg.tasks = 4;
    cfg.seed = 10;
    let scen = generate_scenario(&cfg, 0).unwrap();
    let d = &scen.datasets[3];
    let t = d.t().unwrap();
    let resid = (0..d.n()).map(|i| t[i] - scenario3_exposure(3, &d.row(i), scen.draws.g[3], 0.3)).sum::<f64>() / d.n() as f64;
    let resid_ok = resid.abs() <= 0.01;

    // Scenario 1 treatment rate against the quadrature value of E[expit(4X₁ − 1)]
    const QUADRATURE: f64 = 0.380234000385578;
    let mut cfg = ScenarioConfig::new(1, 1_000_000, 0.5);
    cfg.tasks = 1;
    cfg.seed = 10;
    let scen = generate_scenario(&cfg, 0).unwrap();
    let t = scen.datasets[0].t().unwrap();
    let rate = t.iter().filter(|v| **v > 0.0).count() as f64 / t.len() as f64;
    let rate_ok = (rate - QUADRATURE).abs() < 1e-3;

    let pass = var_ok && resid_ok && rate_ok && started.elapsed().as_secs() < 120;
    report.record(
        10,
        pass,
        format!("S2 Var(ε) {var:.5} (0.04 ±2%), S3 mean(T−g) {resid:+.4} (±0.01), S1 P(T=1) {rate:.5} vs {QUADRATURE:.5} (±1e-3)"),
        started,
    );
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };
    let mut audits = Vec::new();
    // ACCEPTANCE_ONLY=1,5 runs a subset (criterion 8 needs 4–7 for its audits)
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let on = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    if on(1) {
        criterion_1(&mut report);
    }
    if on(2) {
        criterion_2(&mut report);
    }
    if on(3) {
        criterion_3(&mut report);
    }
    if on(4) {
        criterion_4(&mut report, &mut audits);
    }
    if on(5) {
        criterion_5(&mut report, &mut audits);
    }
    if on(6) {
        criterion_6(&mut report, &mut audits);
    }
    if on(7) {
        criterion_7(&mut report, &mut audits);
    }
    if on(8) {
        criterion_8(&mut report, &audits);
    }
    if on(9) {
        criterion_9(&mut report);
    }
    if on(10) {
        criterion_10(&mut report);
    }
    report.lines.sort_by_key(|l| l.0);
    let failed: Vec<&str> = report.lines.iter().filter(|l| !l.1).map(|l| l.2.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

#[test]
fn sign_test_tail_matches_direct_sum() {
    // P(X ≥ 8 | n = 10) = (45 + 10 + 1) / 1024
    assert!((sign_test_p(8, 10) - 56.0 / 1024.0).abs() < 1e-12);
}
