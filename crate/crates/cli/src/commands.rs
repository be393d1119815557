//! The pipeline stages. Each stage reads its inputs from, and writes its
//! artifacts to, the output directory:
//!
//! | stage        | writes                                                      |
//! |--------------|-------------------------------------------------------------|
//! | generate     | `train.csv`, `test.csv`                                     |
//! | fit-factors  | `preprocessing.json`, `posterior.json`, `factor_scores.csv` |
//! | fit-risk     | `model_table.csv`, `risk_models.json`                       |
//! | run-trial    | `trial_summary.json`, `trial/…`                             |
//! | report       | `report.md`                                                 |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cogfactor::data_model::{
    apply_residualization, apply_standardization, load_cohort, residualize_covariates,
    standardize_tests, write_cohort, Cohort, CohortSchema, Residualization, Standardization,
};
use cogfactor::gibbs::{
    read_factor_scores, run_gibbs, score_cohort, write_factor_scores, GibbsConfig,
    LoadingStructure, PosteriorSummary, Priors, SubjectScores,
};
use cogfactor::risk_model::{
    balanced_threshold, baseline_visits, build_dataset, classification_metrics, fit_logistic,
    high_risk_subset, retained_factors, select_final_model, training_visits, write_model_table,
    BalancedThreshold, LogisticFit, Metrics, ModelRow, RiskDataset,
};
use cogfactor::rng::{derive_seed, substream};
use cogfactor::synthetic::generate_cohort;
use cogfactor::trial_sim::{
    derive_true_outcomes, run_trial_grid, write_trial_outputs, SelectionMethod, SelectionPools,
    TrialSummary,
};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::{CliError, CliResult};

pub const STREAM_SPLIT: u64 = 11;
pub const STREAM_GIBBS: u64 = 12;
pub const STREAM_TRIAL: u64 = 13;

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let f = File::create(path).map_err(|e| cogfactor::Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::Usage(format!("serializing {}: {e}", path.display())))?;
    use std::io::Write;
    writeln!(w).map_err(|e| cogfactor::Error::io(path, e))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| cogfactor::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Library(cogfactor::Error::Parse {
            line: e.line() as u64,
            message: format!("{}: {e}", path.display()),
        })
    })
}

fn create_out(r: &Resolved) -> CliResult<()> {
    std::fs::create_dir_all(&r.out).map_err(|e| cogfactor::Error::io(&r.out, e))?;
    Ok(())
}

fn schema(r: &Resolved) -> CohortSchema {
    r.gen_config().schema()
}

fn load(path: &Path, schema: &CohortSchema) -> CliResult<Cohort> {
    require(path)?;
    let (cohort, report) = load_cohort(path, schema)?;
    for w in &report.warnings {
        log::warn!("{}: {w}", path.display());
    }
    if report.rows_dropped > 0 {
        info!(
            "{}: dropped {} incomplete rows and {} subjects",
            path.display(),
            report.rows_dropped,
            report.subjects_dropped
        );
    }
    Ok(cohort)
}

fn train_path(r: &Resolved, over: &Option<PathBuf>) -> PathBuf {
    over.clone().unwrap_or_else(|| r.path("train.csv"))
}

/// Loading structure implied by the non-zero pattern of the generating
/// loadings.
pub fn loading_structure(r: &Resolved) -> CliResult<LoadingStructure> {
    let g = r.gen_config();
    let q = g.n_factors();
    let mask: Vec<Vec<bool>> = g
        .true_g
        .iter()
        .map(|row| row.iter().map(|v| *v != 0.0).collect())
        .collect();
    let default = LoadingStructure::four_factor();
    if q == 4 && mask == default.mask {
        return Ok(default);
    }
    Ok(LoadingStructure::new(
        mask,
        (1..=q).map(|i| format!("factor_{i}")).collect(),
    )?)
}

/// Splits the generated cohort into train/test with probability
/// `train_fraction` per subject.
pub fn cmd_generate(r: &Resolved) -> CliResult<(usize, usize)> {
    create_out(r)?;
    let frac = r.config.generate.train_fraction;
    if !(0.0..=1.0).contains(&frac) {
        return Err(CliError::Usage(
            "generate.train_fraction must lie in [0, 1]".into(),
        ));
    }
    let cohort = generate_cohort(&r.gen_config())?;
    let mut rng = substream(r.seed, &[STREAM_SPLIT]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..cohort.subjects.len() {
        if rng.random::<f64>() < frac {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    write_cohort(&cohort.subset(&train), &r.path("train.csv"))?;
    write_cohort(&cohort.subset(&test), &r.path("test.csv"))?;
    info!(
        "generated {} subjects: {} train, {} test",
        cohort.subjects.len(),
        train.len(),
        test.len()
    );
    Ok((train.len(), test.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub standardization: Standardization,
    pub residualization: Residualization,
}

impl Preprocessing {
    pub fn standardize(&self, raw: &Cohort) -> CliResult<Cohort> {
        Ok(apply_standardization(raw, &self.standardization)?)
    }

    pub fn adjust(&self, raw: &Cohort) -> CliResult<Cohort> {
        Ok(apply_residualization(
            &self.standardize(raw)?,
            &self.residualization,
        )?)
    }
}

/// Standardizes and residualizes the training split, runs the sampler on up
/// to `max_subjects` of it, and scores every train and test subject.
pub fn cmd_fit_factors(r: &Resolved) -> CliResult<PosteriorSummary> {
    create_out(r)?;
    let schema = schema(r);
    let train = load(&train_path(r, &r.config.fit_factors.train), &schema)?;
    let std = standardize_tests(&train)?;
    let (adjusted, residualization) = residualize_covariates(&std)?;
    let pre = Preprocessing {
        standardization: std.standardization.clone().expect("standardized"),
        residualization,
    };
    write_json(&r.path("preprocessing.json"), &pre)?;

    let n_fit = r
        .max_fit_subjects()
        .unwrap_or(usize::MAX)
        .min(adjusted.subjects.len());
    let fit_set = adjusted.subset(&(0..n_fit).collect::<Vec<_>>());
    let rest = adjusted.subset(&(n_fit..adjusted.subjects.len()).collect::<Vec<_>>());
    let structure = loading_structure(r)?;
    let (n_iter, burn_in) = r.gibbs_iterations();
    let priors = Priors::weakly_informative(structure.n_tests(), structure.n_factors());
    let config = GibbsConfig {
        n_iter,
        burn_in,
        thin: r.config.fit_factors.thin,
        priors: priors.clone(),
        structure,
        seed: derive_seed(r.seed, &[STREAM_GIBBS]),
    };
    info!("sampling {n_iter} iterations ({burn_in} burn-in) on {n_fit} subjects");
    let summary = run_gibbs(&fit_set, &config)?;
    write_json(&r.path("posterior.json"), &summary)?;

    let params = summary.to_params(&priors);
    let mut scores = summary.factor_scores.clone();
    scores.extend(score_cohort(&rest, &params)?);
    let test_path = r
        .config
        .run_trial
        .test
        .clone()
        .unwrap_or_else(|| r.path("test.csv"));
    if test_path.is_file() {
        let test = pre.adjust(&load(&test_path, &schema)?)?;
        scores.extend(score_cohort(&test, &params)?);
    }
    let path = r.path("factor_scores.csv");
    write_factor_scores(
        &scores,
        summary.factor_names.len(),
        File::create(&path).map_err(|e| cogfactor::Error::io(&path, e))?,
    )?;

    println!(
        "{:<48} {:>9} {:>9} {:>8}",
        "parameter", "mean", "sd", "split_R"
    );
    for d in &summary.diagnostics {
        let rhat = d
            .split_rhat
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        println!("{:<48} {:>9.4} {:>9.4} {:>8}", d.name, d.mean, d.sd, rhat);
    }
    Ok(summary)
}

fn load_scores(r: &Resolved) -> CliResult<BTreeMap<String, SubjectScores>> {
    let path = r.path("factor_scores.csv");
    require(&path)?;
    let scores =
        read_factor_scores(File::open(&path).map_err(|e| cogfactor::Error::io(&path, e))?)?;
    Ok(scores
        .into_iter()
        .map(|s| (s.subject_id.clone(), s))
        .collect())
}

fn aligned_scores(
    cohort: &Cohort,
    scores: &BTreeMap<String, SubjectScores>,
) -> CliResult<Vec<SubjectScores>> {
    cohort
        .subjects
        .iter()
        .map(|s| {
            scores.get(&s.subject_id).cloned().ok_or_else(|| {
                CliError::Library(cogfactor::Error::Dimension(format!(
                    "no factor scores for subject `{}`",
                    s.subject_id
                )))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModels {
    pub factor_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub n_rows: usize,
    pub n_events: usize,
    pub full_model: LogisticFit,
    pub final_model: LogisticFit,
    pub retained_factors: Vec<String>,
    pub covariate_model: LogisticFit,
    /// Balanced threshold of the final model, used for both high-risk sets.
    pub threshold: BalancedThreshold,
    pub covariate_metrics: Metrics,
}

fn model_row(name: &str, data: &RiskDataset, terms: &[String], reported: &[String]) -> ModelRow {
    match fit_logistic(data, terms).and_then(|f| ModelRow::from_fit(name, &f, reported, data)) {
        Ok(row) => row,
        Err(e) => ModelRow::failed(name, reported, &e.to_string()),
    }
}

/// Single-test, single-factor, all-factor and pruned models on the
/// training rows, plus the covariate-only comparison model.
pub fn cmd_fit_risk(r: &Resolved) -> CliResult<RiskModels> {
    create_out(r)?;
    let pre: Preprocessing = read_json(&r.path("preprocessing.json"))?;
    let posterior: PosteriorSummary = read_json(&r.path("posterior.json"))?;
    let train = pre.standardize(&load(&train_path(r, &r.config.fit_risk.train), &schema(r))?)?;
    let scores = aligned_scores(&train, &load_scores(r)?)?;
    let factors = posterior.factor_names.clone();
    let data = build_dataset(&train, Some((&scores, &factors)), &training_visits(&train))?;
    let covs = train.covariate_names.clone();
    let with_covs = |terms: &[String]| terms.iter().chain(&covs).cloned().collect::<Vec<_>>();
    info!(
        "risk training rows: {} ({} events)",
        data.n(),
        data.outcome.iter().filter(|&&y| y).count()
    );

    let structure = loading_structure(r)?;
    let mut rows = Vec::new();
    for (q, fname) in factors.iter().enumerate() {
        for (k, test) in train.tests.iter().enumerate() {
            if structure.mask[k][q] && structure.mask[k].iter().position(|&b| b) == Some(q) {
                let t = [test.name.clone()];
                rows.push(model_row(&test.name, &data, &with_covs(&t), &t));
            }
        }
        let f = [fname.clone()];
        rows.push(model_row(
            &format!("{fname}_factor"),
            &data,
            &with_covs(&f),
            &f,
        ));
    }

    let full = fit_logistic(&data, &with_covs(&factors))?;
    let final_model = select_final_model(&full, &data, &factors)?;
    let kept = retained_factors(&final_model, &factors);
    rows.push(ModelRow::from_fit("final", &final_model, &kept, &data)?);
    let threshold = balanced_threshold(&final_model, &data)?;
    let mut covariate_model = fit_logistic(&data, &covs)?;
    covariate_model.threshold = Some(threshold.threshold);
    let covariate_metrics = classification_metrics(&covariate_model, &data, threshold.threshold)?;
    let mut final_model = final_model;
    final_model.threshold = Some(threshold.threshold);

    let path = r.path("model_table.csv");
    write_model_table(
        &rows,
        File::create(&path).map_err(|e| cogfactor::Error::io(&path, e))?,
    )?;
    let models = RiskModels {
        factor_names: factors,
        covariate_names: covs,
        n_rows: data.n(),
        n_events: data.outcome.iter().filter(|&&y| y).count(),
        full_model: full,
        final_model,
        retained_factors: kept,
        covariate_model,
        threshold,
        covariate_metrics,
    };
    write_json(&r.path("risk_models.json"), &models)?;
    println!(
        "final model factors: [{}]; threshold {:.3} (sensitivity {:.2}, specificity {:.2})",
        models.retained_factors.join(", "),
        threshold.threshold,
        threshold.sensitivity,
        threshold.specificity
    );
    for w in &models.final_model.warnings {
        println!("warning: {w}");
    }
    Ok(models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub threshold: f64,
    pub factor_subset_size: usize,
    pub covariate_subset_size: usize,
    pub subset_overlap: usize,
    pub summary: TrialSummary,
}

/// Derives untreated outcomes for the test split, builds the high-risk
/// pools at the trial baseline and runs the effect × method grid.
pub fn cmd_run_trial(r: &Resolved) -> CliResult<TrialReport> {
    create_out(r)?;
    let pre: Preprocessing = read_json(&r.path("preprocessing.json"))?;
    let models: RiskModels = read_json(&r.path("risk_models.json"))?;
    let test_path = r
        .config
        .run_trial
        .test
        .clone()
        .unwrap_or_else(|| r.path("test.csv"));
    let raw = load(&test_path, &schema(r))?;
    let test = pre.standardize(&raw)?;
    let scores = aligned_scores(&test, &load_scores(r)?)?;
    let data = build_dataset(
        &test,
        Some((&scores, &models.factor_names)),
        &baseline_visits(&test),
    )?;

    let threshold = r
        .config
        .run_trial
        .threshold
        .unwrap_or(models.threshold.threshold);
    let factor_set: BTreeSet<String> = high_risk_subset(&models.final_model, &data, threshold)?;
    let covariate_set: BTreeSet<String> =
        high_risk_subset(&models.covariate_model, &data, threshold)?;
    let (records, counts) = derive_true_outcomes(&raw)?;
    let pools = SelectionPools::new(&records, &factor_set, &covariate_set);
    let config = r.trial_config();
    info!(
        "trial: {} replicates; pools random {}, factor {}, covariate {}",
        config.n_replicates,
        pools.all.len(),
        pools.factor.len(),
        pools.covariate.len()
    );
    let result = run_trial_grid(&config, &records, &pools)?;
    write_trial_outputs(&result, &r.path("trial"))?;
    let report = TrialReport {
        threshold,
        factor_subset_size: factor_set.len(),
        covariate_subset_size: covariate_set.len(),
        subset_overlap: factor_set.intersection(&covariate_set).count(),
        summary: TrialSummary::new(&result, counts),
    };
    write_json(&r.path("trial_summary.json"), &report)?;
    println!(
        "{:<10} {:>6} {:>12} {:>16} {:>9}",
        "method", "effect", "median_power", "median_required_n", "median_hr"
    );
    for c in &report.summary.cells {
        println!(
            "{:<10} {:>6.2} {:>12.4} {:>16} {:>9.4}",
            c.method.to_string(),
            c.effect,
            c.median_power,
            c.median_required_n,
            c.median_hr.unwrap_or(f64::NAN)
        );
    }
    Ok(report)
}

/// Collects the stage outputs into `report.md`.
pub fn cmd_report(r: &Resolved) -> CliResult<String> {
    let posterior: PosteriorSummary = read_json(&r.path("posterior.json"))?;
    let models: RiskModels = read_json(&r.path("risk_models.json"))?;
    let trial: TrialReport = read_json(&r.path("trial_summary.json"))?;
    let mut s = String::new();
    use std::fmt::Write;
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(s, "seed {}, profile {:?}\n", r.seed, r.profile);
    let _ = writeln!(s, "## Factor model\n");
    let _ = writeln!(
        s,
        "{} iterations, {} burn-in. Posterior mean loadings:\n",
        posterior.n_iter, posterior.burn_in
    );
    let _ = writeln!(
        s,
        "| test | {} | sigma2_eps |",
        posterior.factor_names.join(" | ")
    );
    let _ = writeln!(
        s,
        "|---|{}---|",
        "---|".repeat(posterior.factor_names.len())
    );
    for (k, name) in posterior.test_names.iter().enumerate() {
        let row: Vec<String> = posterior.loadings[k]
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect();
        let _ = writeln!(
            s,
            "| {name} | {} | {:.3} |",
            row.join(" | "),
            posterior.measurement_var[k]
        );
    }
    let _ = writeln!(s, "\n## Risk model\n");
    let _ = writeln!(
        s,
        "{} training rows, {} events. Retained factors: {}. Threshold {:.3} (sensitivity {:.2}, specificity {:.2}).\n",
        models.n_rows,
        models.n_events,
        if models.retained_factors.is_empty() {
            "none".to_string()
        } else {
            models.retained_factors.join(", ")
        },
        models.threshold.threshold,
        models.threshold.sensitivity,
        models.threshold.specificity
    );
    let _ = writeln!(s, "## Trial simulation\n");
    let _ = writeln!(
        s,
        "High-risk subsets: factor {}, covariate {}, overlap {}.\n",
        trial.factor_subset_size, trial.covariate_subset_size, trial.subset_overlap
    );
    let _ = writeln!(
        s,
        "| method | effect | median power | median required N | median HR |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|");
    for c in &trial.summary.cells {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.3} | {} | {} |",
            c.method,
            c.effect,
            c.median_power,
            c.median_required_n,
            c.median_hr.map(|h| format!("{h:.3}")).unwrap_or_default()
        );
    }
    let path = r.path("report.md");
    std::fs::write(&path, &s).map_err(|e| cogfactor::Error::io(&path, e))?;
    print!("{s}");
    Ok(s)
}

pub fn cmd_run_all(r: &Resolved) -> CliResult<()> {
    cmd_generate(r)?;
    cmd_fit_factors(r)?;
    cmd_fit_risk(r)?;
    cmd_run_trial(r)?;
    cmd_report(r)?;
    Ok(())
}

/// Method names in the order used by every table.
pub fn methods() -> [SelectionMethod; 3] {
    SelectionMethod::ALL
}
