//! Acceptance gate: one pass/fail line per criterion, then a single assert.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use cogfactor::data_model::{load_cohort, Cohort};
use cogfactor::gibbs::{run_gibbs, GibbsConfig, LoadingStructure};
use cogfactor::risk_model::{fit_logistic, gradient, log_likelihood};
use cogfactor::rng::substream;
use cogfactor::state_space::{ffbs_sample, joint_gaussian_oracle, kalman_filter, kalman_smoother};
use cogfactor::synthetic::{generate_with_truth, GenConfig};
use cogfactor::trial_sim::{
    apply_treatment, derive_true_outcomes, fit_cox, median, required_events, run_trial_grid,
    select_participants, SelectionMethod, SelectionPools, SurvivalRecord, TrialConfig,
};
use cogfactor_cli::commands::TrialReport;
use common::{grid_max, grid_search, random_instance, simulate, small_instance, truncated};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kalman_oracle() -> Outcome {
    let mut rng = substream(9001, &[]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (series, params) = random_instance(&mut rng);
        let filter = kalman_filter(&series, &params).map_err(|e| e.to_string())?;
        let smoothed = kalman_smoother(&filter, &params).map_err(|e| e.to_string())?;
        let oracle = joint_gaussian_oracle(&series, &params).map_err(|e| e.to_string())?;
        worst = worst.max((filter.log_likelihood - oracle.log_likelihood).abs());
        for (j, (m, p)) in smoothed.iter().enumerate() {
            worst = worst
                .max((m - oracle.visit_mean(j)).amax())
                .max((p - oracle.visit_cov(j)).amax());
            let partial = joint_gaussian_oracle(&truncated(&series, j + 1), &params)
                .map_err(|e| e.to_string())?;
            let step = &filter.steps[j];
            worst = worst
                .max((&step.updated_mean - partial.visit_mean(j)).amax())
                .max((&step.updated_cov - partial.visit_cov(j)).amax());
        }
    }
    check(
        worst < 1e-8,
        format!("max deviation {worst:.2e} over 100 instances (tol 1e-8)"),
    )
}

fn ffbs_distribution() -> Outcome {
    let mut rng = substream(9002, &[]);
    let (series, params) = loop {
        let inst = random_instance(&mut rng);
        if inst.0.n_visits() == 4 && inst.1.n_factors() == 3 {
            break inst;
        }
    };
    let filter = kalman_filter(&series, &params).map_err(|e| e.to_string())?;
    let oracle = joint_gaussian_oracle(&series, &params).map_err(|e| e.to_string())?;
    let n = 20_000;
    let q = params.n_factors();
    let mut draw_rng = substream(9003, &[]);
    let draws: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| ffbs_sample(&filter, &params, &mut draw_rng).map(|d| d.states))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mut worst_z, mut worst_rel) = (0.0f64, 0.0f64);
    for j in 0..series.n_visits() {
        let mean = draws.iter().fold(DVector::zeros(q), |a, d| a + &d[j]) / n as f64;
        let cov = draws.iter().fold(DMatrix::zeros(q, q), |a, d| {
            let c = &d[j] - &mean;
            a + &c * c.transpose()
        }) / (n - 1) as f64;
        let target = oracle.visit_cov(j);
        for a in 0..q {
            let se = (target[(a, a)] / n as f64).sqrt();
            worst_z = worst_z.max((mean[a] - oracle.visit_mean(j)[a]).abs() / se);
        }
        worst_rel = worst_rel.max((&cov - &target).norm() / target.norm());
    }
    check(
        worst_z < 3.0 && worst_rel < 0.05,
        format!(
            "max mean error {worst_z:.2} SE (tol 3), max covariance error {:.2}% (tol 5%)",
            worst_rel * 100.0
        ),
    )
}

fn gibbs_recovery() -> Outcome {
    let mut gen = GenConfig {
        n_subjects: 300,
        raw_polarity: false,
        initial_state_var: 10.0,
        seed: 100,
        ..GenConfig::default()
    };
    gen.covariate_score_effects.clear();
    let (cohort, _) = generate_with_truth(&gen).map_err(|e| e.to_string())?;
    let config = GibbsConfig::desk(LoadingStructure::four_factor(), 101);
    let fit = run_gibbs(&cohort, &config).map_err(|e| e.to_string())?;
    let g = fit.loadings_matrix();
    let truth = gen.loadings().map_err(|e| e.to_string())?;
    let mask = &config.structure;
    let mut load_err = 0.0f64;
    for k in 0..mask.n_tests() {
        for q in 0..mask.n_factors() {
            if truth[(k, q)] != 0.0 {
                load_err = load_err.max((g[(k, q)] - truth[(k, q)]).abs());
            }
        }
    }
    let eta = fit.innovation_matrix();
    let eta_truth = gen.innovation_cov().map_err(|e| e.to_string())?;
    let mut eta_err = 0.0f64;
    for a in 0..eta.nrows() {
        for b in 0..a {
            eta_err = eta_err.max((eta[(a, b)] - eta_truth[(a, b)]).abs());
        }
    }
    let eps_err = fit
        .measurement_var
        .iter()
        .zip(&gen.true_sigma_eps)
        .map(|(s, t)| (s - t).abs() / t)
        .fold(0.0, f64::max);
    check(
        load_err <= 0.15 && eta_err <= 0.10 && eps_err <= 0.20,
        format!(
            "max loading error {load_err:.3} (tol 0.15), Σ_η off-diagonal {eta_err:.3} (tol 0.10), Σ_ε relative {:.1}% (tol 20%)",
            eps_err * 100.0
        ),
    )
}

fn logistic_oracle() -> Outcome {
    let mut grid_err = 0.0f64;
    for (seed, b0, b1) in [(9011, -0.5, 0.8), (9012, 0.3, -1.2), (9013, -1.5, 0.4)] {
        let data = simulate(400, b0, &[b1], seed);
        let fit = fit_logistic(&data, &["x0".to_string()]).map_err(|e| e.to_string())?;
        let x: Vec<f64> = data.predictors.column(0).iter().copied().collect();
        let (g0, g1) = grid_search(&x, &data.outcome);
        grid_err = grid_err
            .max((fit.coefficients[0] - g0).abs())
            .max((fit.coefficients[1] - g1).abs());
    }

    let data = simulate(300, -0.4, &[0.7, -0.3, 0.2], 9014);
    let x = DMatrix::from_fn(300, 4, |i, j| {
        if j == 0 {
            1.0
        } else {
            data.predictors[(i, j - 1)]
        }
    });
    let mut rng = substream(9015, &[]);
    let mut fd_err = 0.0f64;
    for _ in 0..20 {
        let beta = DVector::from_fn(4, |_, _| rng.random_range(-1.5..1.5));
        let g = gradient(&x, &data.outcome, &beta);
        let h = 1e-5;
        let fd = DVector::from_fn(4, |j, _| {
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[j] += h;
            down[j] -= h;
            (log_likelihood(&x, &data.outcome, &up) - log_likelihood(&x, &data.outcome, &down))
                / (2.0 * h)
        });
        fd_err = fd_err.max((&g - &fd).norm() / g.norm());
    }

    let data = simulate(777, -1.0, &[0.0], 9016);
    let fit = fit_logistic(&data, &[]).map_err(|e| e.to_string())?;
    let r = data.event_rate();
    let closed_err = (fit.coefficients[0] - (r / (1.0 - r)).ln()).abs();
    check(
        grid_err < 1e-3 && fd_err < 1e-6 && closed_err < 1e-12,
        format!("grid {grid_err:.1e} (tol 1e-3), gradient {fd_err:.1e} relative (tol 1e-6), intercept-only {closed_err:.1e}"),
    )
}

fn cox_oracle(records: &[SurvivalRecord]) -> Outcome {
    let mut grid_err = 0.0f64;
    let mut worst_score = 0.0f64;
    for seed in 0..10u64 {
        let recs = small_instance(9100 + seed, seed % 2 == 1);
        let fit = fit_cox(&recs).map_err(|e| e.to_string())?;
        let dims = fit.coefficients.len();
        let grid = grid_max(&recs, dims);
        for (b, g) in fit.coefficients.iter().zip(&grid) {
            grid_err = grid_err.max((b - g).abs());
        }
        if fit.converged {
            worst_score = worst_score.max(fit.score_norm);
        }
    }
    let pools = SelectionPools {
        all: (0..records.len()).collect(),
        factor: vec![],
        covariate: vec![],
    };
    let mut hrs = Vec::with_capacity(1_000);
    for rep in 0..1_000u64 {
        let mut rng = substream(9200, &[rep]);
        let idx = select_participants(SelectionMethod::Random, &pools, 1_000, &mut rng)
            .map_err(|e| e.to_string())?;
        let enrolled: Vec<SurvivalRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let fit = fit_cox(&apply_treatment(&enrolled, 0.0, &mut rng).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if fit.converged {
            worst_score = worst_score.max(fit.score_norm);
        }
        hrs.push(fit.hazard_ratio);
    }
    let null_hr = median(&hrs);
    check(
        grid_err < 1e-3 && worst_score < 1e-8 && (null_hr - 1.0).abs() <= 0.05,
        format!(
            "grid {grid_err:.1e} (tol 1e-3), max converged score norm {worst_score:.1e} (tol 1e-8), null median HR {null_hr:.3} (1.00 ± 0.05)"
        ),
    )
}

fn schoenfeld() -> Outcome {
    // z quantiles 1.959963984540054 (0.975) and 0.8416212335729143 (0.8)
    let z: f64 = 1.959963984540054 + 0.8416212335729143;
    let expected = (z * z / (0.25 * 0.8f64.ln().powi(2))).ceil();
    let d = required_events(0.8, 0.05, 0.8, 0.5).map_err(|e| e.to_string())?;
    let null = required_events(1.0, 0.05, 0.8, 0.5).map_err(|e| e.to_string())?;
    check(
        d == 631.0 && expected == 631.0 && null.is_infinite(),
        format!("required_events(0.8, 0.05, 0.8, 0.5) = {d} (expected 631), at HR 1: {null}"),
    )
}

fn trial_unbiasedness(report: &TrialReport) -> Outcome {
    let s = &report.summary;
    let mut parts = Vec::new();
    let mut ok = true;
    let mut var = Vec::new();
    for m in SelectionMethod::ALL {
        let c = s.cell(m, 0.2).ok_or("no cell at effect 0.2")?;
        let hr = c.median_hr.unwrap_or(f64::NAN);
        ok &= (hr - 0.8).abs() <= 0.03;
        var.push(c.hr_variance.unwrap_or(f64::NAN));
        parts.push(format!("{m} {hr:.3}"));
    }
    // ALL is random, factor, covariate
    ok &= var[0] > var[2] && var[2] > var[1];
    check(
        ok && s.config.n_replicates >= 2_000,
        format!(
            "median HR {} (0.80 ± 0.03); variance random {:.4} > covariate {:.4} > factor {:.4}",
            parts.join(", "),
            var[0],
            var[2],
            var[1]
        ),
    )
}

fn power_ordering(report: &TrialReport) -> Outcome {
    let s = &report.summary;
    let effects: Vec<f64> = s.config.effects.clone();
    let mut failures = Vec::new();
    for &e in effects.iter().filter(|&&e| e >= 0.15 - 1e-9) {
        let cell = |m| s.cell(m, e).expect("cell");
        let (r, f, c) = (
            cell(SelectionMethod::Random),
            cell(SelectionMethod::Factor),
            cell(SelectionMethod::Covariate),
        );
        if !(f.median_power >= c.median_power && c.median_power >= r.median_power) {
            failures.push(format!("power order at {e}"));
        }
        if !(f.required_n() <= c.required_n() && c.required_n() <= r.required_n()) {
            failures.push(format!("required N order at {e}"));
        }
        if (e - 0.25).abs() < 1e-9
            && !(f.median_power > c.median_power && c.median_power > r.median_power)
        {
            failures.push("strict power order at 0.25".into());
        }
    }
    for m in SelectionMethod::ALL {
        let p: Vec<f64> = effects
            .iter()
            .map(|&e| s.cell(m, e).expect("cell").median_power)
            .collect();
        if p.windows(2).any(|w| w[1] < w[0]) {
            failures.push(format!("{m} power not monotone"));
        }
    }
    let at = |m| s.cell(m, 0.25).map_or(f64::NAN, |c| c.median_power);
    let detail = format!(
        "power at 0.25: factor {:.3}, covariate {:.3}, random {:.3}",
        at(SelectionMethod::Factor),
        at(SelectionMethod::Covariate),
        at(SelectionMethod::Random)
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join(", ")))
    }
}

fn type_one_error(records: &[SurvivalRecord]) -> Outcome {
    let pools = SelectionPools {
        all: (0..records.len()).collect(),
        factor: vec![],
        covariate: vec![],
    };
    let config = TrialConfig {
        methods: vec![SelectionMethod::Random],
        effects: vec![0.0],
        n_replicates: 10_000,
        seed: 9300,
        ..TrialConfig::default()
    };
    let result = run_trial_grid(&config, records, &pools).map_err(|e| e.to_string())?;
    let rate = result.cells[0].rejection_rate(config.alpha);
    check(
        (rate - 0.05).abs() <= 0.01,
        format!("rejection rate {rate:.4} over 10000 replicates (0.05 ± 0.01)"),
    )
}

/// Every CSV and JSON artifact under `dir` with its bytes, sorted by path.
fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "json")) {
                let bytes = std::fs::read(&p).unwrap_or_default();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (x, y) = (artifacts(a), artifacts(b));
    let differing: Vec<String> = x
        .iter()
        .zip(&y)
        .filter(|(p, q)| p != q)
        .map(|(p, _)| p.0.display().to_string())
        .collect();
    check(
        !x.is_empty() && x.len() == y.len() && differing.is_empty(),
        format!(
            "{} artifacts compared, {} differ {:?}",
            x.len(),
            differing.len(),
            differing
        ),
    )
}

fn desk_run(out: &Path) -> Child {
    Command::new(env!("CARGO_BIN_EXE_cogfactor"))
        .args(["run-all", "--profile", "desk", "--seed", "1", "--out"])
        .arg(out)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .spawn()
        .expect("spawn cogfactor")
}

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(
        std::io::stdout(),
        "[{tag}] {n:>2} {name}: {detail} ({:.1} s)",
        started.elapsed().as_secs_f64()
    );
    outcome.is_ok()
}

fn test_records(out: &Path) -> Result<Vec<SurvivalRecord>, String> {
    let schema = GenConfig::default().schema();
    let (test, _): (Cohort, _) =
        load_cohort(&out.join("test.csv"), &schema).map_err(|e| e.to_string())?;
    Ok(derive_true_outcomes(&test).map_err(|e| e.to_string())?.0)
}

#[test]
fn primary_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let desk_started = Instant::now();
    let mut runs = [desk_run(&a), desk_run(&b)];

    let _ = writeln!(std::io::stdout(), "\nacceptance criteria");
    let mut passed = Vec::new();
    let t = Instant::now();
    passed.push(report(
        1,
        "Kalman filter and smoother vs dense oracle",
        t,
        &kalman_oracle(),
    ));
    let t = Instant::now();
    passed.push(report(
        2,
        "FFBS draws vs oracle marginals",
        t,
        &ffbs_distribution(),
    ));
    let t = Instant::now();
    passed.push(report(3, "Gibbs parameter recovery", t, &gibbs_recovery()));
    let t = Instant::now();
    passed.push(report(4, "logistic IRLS oracle", t, &logistic_oracle()));

    let statuses: Vec<bool> = runs
        .iter_mut()
        .map(|c| c.wait().map(|s| s.success()).unwrap_or(false))
        .collect();
    let desk_ok = statuses.iter().all(|&s| s);
    let _ = writeln!(
        std::io::stdout(),
        "       desk pipeline x2 finished ok={desk_ok} after {:.1} s",
        desk_started.elapsed().as_secs_f64()
    );
    let records = test_records(&a);

    let t = Instant::now();
    let o = records.clone().and_then(|r| cox_oracle(&r));
    passed.push(report(5, "Cox partial-likelihood oracle", t, &o));
    let t = Instant::now();
    passed.push(report(6, "Schoenfeld events", t, &schoenfeld()));

    let trial: Result<TrialReport, String> = std::fs::read(a.join("trial_summary.json"))
        .map_err(|e| e.to_string())
        .and_then(|bytes| serde_json::from_slice(&bytes).map_err(|e| e.to_string()));
    let t = Instant::now();
    passed.push(report(
        7,
        "trial hazard-ratio bias and variance",
        t,
        &trial.clone().and_then(|r| trial_unbiasedness(&r)),
    ));
    let t = Instant::now();
    passed.push(report(
        8,
        "power and sample-size ordering",
        t,
        &trial.and_then(|r| power_ordering(&r)),
    ));
    let t = Instant::now();
    passed.push(report(
        9,
        "type-I error at effect 0",
        t,
        &records.and_then(|r| type_one_error(&r)),
    ));
    let t = Instant::now();
    let o = if desk_ok {
        determinism(&a, &b)
    } else {
        Err("desk pipeline failed".into())
    };
    passed.push(report(10, "desk pipeline determinism", t, &o));

    let n_pass = passed.iter().filter(|&&p| p).count();
    let _ = writeln!(
        std::io::stdout(),
        "{n_pass}/{} criteria passed",
        passed.len()
    );
    assert_eq!(n_pass, passed.len(), "acceptance criteria failed");
}
