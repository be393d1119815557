//! Logistic risk models: IRLS fitting, Wald inference, factor pruning,
//! classification metrics and high-risk subsets.
//!
//! Fits run on internally standardized predictor columns (for stability and
//! for the separation check) and are reported on the original scale.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::{collinear_columns, Cohort, SubjectSeries, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::gibbs::SubjectScores;
use crate::linalg::{cholesky_jittered, spd_inverse};

pub const INTERCEPT: &str = "(intercept)";
const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;
/// Standardized coefficients beyond this signal (quasi-)separation.
pub const SEPARATION_BOUND: f64 = 15.0;
/// Wald p-value cut used when pruning factors.
pub const PRUNING_ALPHA: f64 = 0.05;

/// One row per subject: named predictors and a binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskDataset {
    pub subject_ids: Vec<String>,
    pub term_names: Vec<String>,
    /// `n × p`
    pub predictors: DMatrix<f64>,
    pub outcome: Vec<bool>,
}

impl RiskDataset {
    pub fn new(
        subject_ids: Vec<String>,
        term_names: Vec<String>,
        predictors: DMatrix<f64>,
        outcome: Vec<bool>,
    ) -> Result<Self> {
        let (n, p) = predictors.shape();
        if subject_ids.len() != n || outcome.len() != n || term_names.len() != p {
            return Err(Error::Dimension(
                "risk dataset parts disagree in size".into(),
            ));
        }
        if predictors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "risk dataset has missing or non-finite predictors".into(),
            ));
        }
        Ok(RiskDataset {
            subject_ids,
            term_names,
            predictors,
            outcome,
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.term_names.iter().position(|t| t == name)
    }

    pub fn event_rate(&self) -> f64 {
        self.outcome.iter().filter(|&&y| y).count() as f64 / self.n().max(1) as f64
    }

    /// Columns for `terms`, in that order.
    pub fn columns(&self, terms: &[String]) -> Result<DMatrix<f64>> {
        let idx = terms
            .iter()
            .map(|t| {
                self.column_index(t)
                    .ok_or_else(|| Error::Dimension(format!("dataset has no predictor `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.n(), idx.len(), |i, j| {
            self.predictors[(i, idx[j])]
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first.
    pub term_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub wald_p: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub n_events: usize,
    /// Classification threshold, once chosen.
    pub threshold: Option<f64>,
    pub warnings: Vec<String>,
    /// Log-likelihood after every accepted step, starting value first.
    #[serde(skip)]
    pub log_likelihood_trace: Vec<f64>,
}

impl LogisticFit {
    /// Predictor names without the intercept.
    pub fn predictors(&self) -> &[String] {
        &self.term_names[1..]
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.term_names.iter().position(|t| t == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.term_index(name).map(|i| self.coefficients[i])
    }

    pub fn p_value(&self, name: &str) -> Option<f64> {
        self.term_index(name).map(|i| self.wald_p[i])
    }

    /// Odds ratio with its 95% Wald interval.
    pub fn odds_ratio(&self, name: &str) -> Option<(f64, f64, f64)> {
        let i = self.term_index(name)?;
        let (b, se) = (self.coefficients[i], self.std_errors[i]);
        let z = Normal::standard().inverse_cdf(0.975);
        Some((b.exp(), (b - z * se).exp(), (b + z * se).exp()))
    }

    /// Probability for one row whose values follow [`Self::predictors`].
    pub fn predict_row(&self, values: &[f64]) -> f64 {
        let eta = self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(values)
                .map(|(b, x)| b * x)
                .sum::<f64>();
        sigmoid(eta)
    }

    /// Probabilities for every row of `data`, matching predictors by name.
    pub fn predict(&self, data: &RiskDataset) -> Result<Vec<f64>> {
        let x = data.columns(self.predictors())?;
        Ok(x.row_iter()
            .map(|r| self.predict_row(&r.iter().copied().collect::<Vec<_>>()))
            .collect())
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of `beta` for design `x` (intercept column
/// included by the caller).
pub fn log_likelihood(x: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| if yi { e } else { 0.0 } - softplus(e))
        .sum()
}

/// Score vector `Xᵀ(y − p)`.
pub fn gradient(x: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let r = DVector::from_fn(y.len(), |i, _| f64::from(u8::from(y[i])) - sigmoid(eta[i]));
    x.transpose() * r
}

fn fisher_information(x: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * beta;
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        let p = sigmoid(eta[i]);
        row *= p * (1.0 - p);
    }
    x.transpose() * xw
}

fn two_sided_p(z: f64) -> f64 {
    (2.0 * (1.0 - Normal::standard().cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Maximum-likelihood logistic regression of `data.outcome` on the named
/// predictor columns plus an intercept.
pub fn fit_logistic(data: &RiskDataset, terms: &[String]) -> Result<LogisticFit> {
    let n = data.n();
    let n_events = data.outcome.iter().filter(|&&y| y).count();
    if n_events == 0 || n_events == n {
        return Err(Error::SingleClass);
    }
    let raw = data.columns(terms)?;
    let p = terms.len();
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(terms.iter().cloned());

    // standardize predictor columns
    let mut means = vec![0.0; p];
    let mut sds = vec![1.0; p];
    let mut x = DMatrix::from_element(n, p + 1, 1.0);
    for j in 0..p {
        let col = raw.column(j);
        let m = col.mean();
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 1e-12 * m.abs().max(1.0)) {
            return Err(Error::RankDeficient(vec![terms[j].clone()]));
        }
        means[j] = m;
        sds[j] = sd;
        for i in 0..n {
            x[(i, j + 1)] = (raw[(i, j)] - m) / sd;
        }
    }
    let collinear = collinear_columns(&x, &names);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }

    let y = &data.outcome;
    let rate = n_events as f64 / n as f64;
    let mut beta = DVector::zeros(p + 1);
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut ll = log_likelihood(&x, y, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITERATIONS {
        let g = gradient(&x, y, &beta);
        if g.norm() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        iterations = it + 1;
        let info = fisher_information(&x, &beta);
        let step = cholesky_jittered(&info, "logistic information")?.solve(&g);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &step * scale;
            let cand_ll = log_likelihood(&x, y, &candidate);
            if crate::trial_sim::accepts(cand_ll, ll) {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        trace.push(ll);
        if let Some(j) = (1..=p).find(|&j| beta[j].abs() > SEPARATION_BOUND) {
            return Err(Error::Separation(format!(
                "standardized coefficient of `{}` reached {:.1}",
                names[j], beta[j]
            )));
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let g = gradient(&x, y, &beta);
        converged = g.norm() < GRADIENT_TOLERANCE
            || crate::trial_sim::at_rounding_floor(&g, &fisher_information(&x, &beta));
    }

    let cov_std = spd_inverse(&fisher_information(&x, &beta), "logistic information")?;
    // back to the original scale: β = T β_std
    let mut t = DMatrix::identity(p + 1, p + 1);
    for j in 0..p {
        t[(0, j + 1)] = -means[j] / sds[j];
        t[(j + 1, j + 1)] = 1.0 / sds[j];
    }
    let coef = &t * &beta;
    let mut cov = &t * cov_std * t.transpose();
    crate::linalg::symmetrize(&mut cov);
    let se: Vec<f64> = (0..=p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let wald_p = (0..=p).map(|i| two_sided_p(coef[i] / se[i])).collect();

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "IRLS stopped after {iterations} iterations without converging"
        ));
    }
    Ok(LogisticFit {
        term_names: names,
        coefficients: coef.iter().copied().collect(),
        covariance: cov
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        std_errors: se,
        wald_p,
        log_likelihood: ll,
        converged,
        iterations,
        n,
        n_events,
        threshold: None,
        warnings,
        log_likelihood_trace: trace,
    })
}

/// Drops factor terms with Wald p ≥ 0.05 from `full_fit` and refits once.
/// Non-factor terms (covariates) are always kept.
pub fn select_final_model(
    full_fit: &LogisticFit,
    data: &RiskDataset,
    factor_names: &[String],
) -> Result<LogisticFit> {
    let mut kept = Vec::new();
    let mut dropped_all = true;
    for (name, p) in full_fit.term_names.iter().zip(&full_fit.wald_p).skip(1) {
        if factor_names.contains(name) {
            if *p < PRUNING_ALPHA {
                kept.push(name.clone());
                dropped_all = false;
            }
        } else {
            kept.push(name.clone());
        }
    }
    let mut fit = fit_logistic(data, &kept)?;
    if dropped_all {
        fit.warnings
            .push("no factor reached p < 0.05; final model is covariate-only".into());
    }
    Ok(fit)
}

/// Factor terms retained in a fit.
pub fn retained_factors(fit: &LogisticFit, factor_names: &[String]) -> Vec<String> {
    fit.predictors()
        .iter()
        .filter(|t| factor_names.contains(t))
        .cloned()
        .collect()
}

/// Sensitivity and specificity; `None` when the class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Positive call when `probability >= threshold`.
pub fn metrics_from_probabilities(probs: &[f64], outcome: &[bool], threshold: f64) -> Metrics {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(outcome) {
        match (y, p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| {
        if a + b == 0 {
            None
        } else {
            Some(a as f64 / (a + b) as f64)
        }
    };
    Metrics {
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
    }
}

pub fn classification_metrics(
    fit: &LogisticFit,
    data: &RiskDataset,
    threshold: f64,
) -> Result<Metrics> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(metrics_from_probabilities(
        &fit.predict(data)?,
        &data.outcome,
        threshold,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedThreshold {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Set when sensitivity + specificity ≤ 1, i.e. the model does no better
    /// than chance at the chosen point.
    pub uninformative: bool,
}

/// Grid point in {0.001, 0.002, …, 0.999} minimizing |sensitivity −
/// specificity|; ties go to the lower threshold.
pub fn balanced_threshold_from_probabilities(
    probs: &[f64],
    outcome: &[bool],
) -> Result<BalancedThreshold> {
    let n_pos = outcome.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == outcome.len() {
        return Err(Error::SingleClass);
    }
    let mut best: Option<(f64, BalancedThreshold)> = None;
    for step in 1..1000 {
        let t = step as f64 / 1000.0;
        let m = metrics_from_probabilities(probs, outcome, t);
        let (se, sp) = (m.sensitivity.unwrap(), m.specificity.unwrap());
        let gap = (se - sp).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((
                gap,
                BalancedThreshold {
                    threshold: t,
                    sensitivity: se,
                    specificity: sp,
                    uninformative: se + sp <= 1.0,
                },
            ));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

pub fn balanced_threshold(fit: &LogisticFit, data: &RiskDataset) -> Result<BalancedThreshold> {
    balanced_threshold_from_probabilities(&fit.predict(data)?, &data.outcome)
}

/// Subjects whose predicted probability is strictly above `threshold`.
pub fn high_risk_subset(
    fit: &LogisticFit,
    data: &RiskDataset,
    threshold: f64,
) -> Result<BTreeSet<String>> {
    let probs = fit.predict(data)?;
    Ok(data
        .subject_ids
        .iter()
        .zip(probs)
        .filter(|(_, p)| *p > threshold)
        .map(|(id, _)| id.clone())
        .collect())
}

/// The cognitively normal visit 2.5–3.5 years before the endpoint that is
/// closest to 3 years before it (earlier visit on ties).
pub fn training_visit(subject: &SubjectSeries) -> Option<usize> {
    let (lo, hi, target) = (
        2.5 * DAYS_PER_YEAR,
        3.5 * DAYS_PER_YEAR,
        3.0 * DAYS_PER_YEAR,
    );
    let end = subject.endpoint.endpoint_days;
    let mut best: Option<(f64, usize)> = None;
    for (j, &d) in subject.visit_days.iter().enumerate() {
        let lead = end - d;
        if lead >= lo && lead <= hi {
            let dist = (lead - target).abs();
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
    }
    best.map(|(_, j)| j)
}

/// Second visit of every subject, the trial baseline.
pub fn baseline_visits(cohort: &Cohort) -> Vec<Option<usize>> {
    cohort
        .subjects
        .iter()
        .map(|s| if s.n_visits() >= 2 { Some(1) } else { None })
        .collect()
}

pub fn training_visits(cohort: &Cohort) -> Vec<Option<usize>> {
    cohort.subjects.iter().map(training_visit).collect()
}

/// Builds a dataset with one row per subject that has a chosen visit.
///
/// Columns are the factor scores at that visit (when given), the test
/// scores at that visit and the covariates; the outcome is the subject's
/// conversion flag. `factor_scores` must be aligned with `cohort.subjects`.
pub fn build_dataset(
    cohort: &Cohort,
    factor_scores: Option<(&[SubjectScores], &[String])>,
    visits: &[Option<usize>],
) -> Result<RiskDataset> {
    if visits.len() != cohort.subjects.len() {
        return Err(Error::Dimension(
            "one visit choice per subject required".into(),
        ));
    }
    let mut names = Vec::new();
    if let Some((scores, fnames)) = factor_scores {
        if scores.len() != cohort.subjects.len() {
            return Err(Error::Dimension(
                "factor scores are not aligned with the cohort".into(),
            ));
        }
        names.extend(fnames.iter().cloned());
    }
    names.extend(cohort.tests.iter().map(|t| t.name.clone()));
    names.extend(cohort.covariate_names.iter().cloned());

    let mut ids = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut outcome = Vec::new();
    for (i, (s, v)) in cohort.subjects.iter().zip(visits).enumerate() {
        let Some(j) = *v else { continue };
        if let Some((scores, fnames)) = factor_scores {
            let sc = &scores[i];
            if sc.subject_id != s.subject_id
                || j >= sc.scores.len()
                || sc.scores[j].len() != fnames.len()
            {
                return Err(Error::Dimension(format!(
                    "factor scores for `{}` do not match its visits",
                    s.subject_id
                )));
            }
            rows.extend_from_slice(&sc.scores[j]);
        }
        rows.extend(s.scores.row(j).iter());
        rows.extend_from_slice(&s.covariates);
        ids.push(s.subject_id.clone());
        outcome.push(s.endpoint.converted);
    }
    let x = DMatrix::from_row_slice(ids.len(), names.len(), &rows);
    RiskDataset::new(ids, names, x, outcome)
}

/// One row of the model-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    /// Terms whose odds ratios are reported.
    pub predictors: Vec<String>,
    pub odds_ratios: Vec<(f64, f64, f64)>,
    pub p_values: Vec<f64>,
    pub threshold: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Empty, or why the row is incomplete.
    pub flag: String,
}

impl ModelRow {
    /// Row for `fit`, reporting `reported` terms and metrics at its
    /// balanced threshold.
    pub fn from_fit(
        model: &str,
        fit: &LogisticFit,
        reported: &[String],
        data: &RiskDataset,
    ) -> Result<Self> {
        let bt = balanced_threshold(fit, data)?;
        let mut flag = fit.warnings.join("; ");
        if bt.uninformative {
            if !flag.is_empty() {
                flag.push_str("; ");
            }
            flag.push_str("uninformative threshold");
        }
        Ok(ModelRow {
            model: model.to_string(),
            predictors: reported.to_vec(),
            odds_ratios: reported.iter().filter_map(|t| fit.odds_ratio(t)).collect(),
            p_values: reported.iter().filter_map(|t| fit.p_value(t)).collect(),
            threshold: Some(bt.threshold),
            sensitivity: Some(bt.sensitivity),
            specificity: Some(bt.specificity),
            flag,
        })
    }

    /// Placeholder for a model that could not be fitted.
    pub fn failed(model: &str, predictors: &[String], reason: &str) -> Self {
        ModelRow {
            model: model.to_string(),
            predictors: predictors.to_vec(),
            odds_ratios: vec![],
            p_values: vec![],
            threshold: None,
            sensitivity: None,
            specificity: None,
            flag: reason.to_string(),
        }
    }
}

/// Writes `model,predictor,odds_ratio,ci_low,ci_high,p_value,threshold,
/// sensitivity,specificity,flag`. Multi-term rows join values with `;`.
pub fn write_model_table<W: Write>(rows: &[ModelRow], sink: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    let join = |v: Vec<f64>| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join(";")
    };
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "model",
        "predictor",
        "odds_ratio",
        "ci_low",
        "ci_high",
        "p_value",
        "threshold",
        "sensitivity",
        "specificity",
        "flag",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.predictors.join(";"),
            join(r.odds_ratios.iter().map(|o| o.0).collect()),
            join(r.odds_ratios.iter().map(|o| o.1).collect()),
            join(r.odds_ratios.iter().map(|o| o.2).collect()),
            r.p_values
                .iter()
                .map(|p| format!("{p:.3e}"))
                .collect::<Vec<_>>()
                .join(";"),
            opt(r.threshold),
            opt(r.sensitivity),
            opt(r.specificity),
            r.flag.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<model table sink>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Endpoint;

    fn dataset(x: &[f64], y: &[bool]) -> RiskDataset {
        RiskDataset::new(
            (0..y.len()).map(|i| format!("s{i}")).collect(),
            vec!["x".into()],
            DMatrix::from_column_slice(y.len(), 1, x),
            y.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_is_logit_of_rate() {
        let y = [
            true, false, false, false, true, false, false, false, false, false,
        ];
        let d = dataset(&[0.0; 10], &y);
        let fit = fit_logistic(&d, &[]).unwrap();
        assert!((fit.coefficients[0] - (0.2f64 / 0.8).ln()).abs() < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn single_class_is_rejected() {
        let d = dataset(&[1.0, 2.0, 3.0], &[false; 3]);
        assert!(matches!(
            fit_logistic(&d, &["x".into()]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn perfect_separation_is_detected() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let d = dataset(&x, &y);
        assert!(matches!(
            fit_logistic(&d, &["x".into()]),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let y: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let mut m = DMatrix::zeros(20, 2);
        for i in 0..20 {
            m[(i, 0)] = x[i];
            m[(i, 1)] = 2.0 * x[i] + 1.0;
        }
        let d = RiskDataset::new(
            (0..20).map(|i| format!("s{i}")).collect(),
            vec!["a".into(), "b".into()],
            m,
            y,
        )
        .unwrap();
        match fit_logistic(&d, &["a".into(), "b".into()]) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metric_boundaries() {
        let probs = [0.1, 0.4, 0.6, 0.9];
        let y = [false, true, false, true];
        let m0 = metrics_from_probabilities(&probs, &y, 0.0);
        assert_eq!((m0.sensitivity, m0.specificity), (Some(1.0), Some(0.0)));
        let m1 = metrics_from_probabilities(&probs, &y, 1.0);
        assert_eq!((m1.sensitivity, m1.specificity), (Some(0.0), Some(1.0)));
        let none = metrics_from_probabilities(&probs, &[false; 4], 0.5);
        assert_eq!(none.sensitivity, None);
    }

    #[test]
    fn perfect_predictor_scores_one_one() {
        let probs = [0.05, 0.1, 0.8, 0.95];
        let y = [false, false, true, true];
        for t in [0.2, 0.5, 0.7] {
            let m = metrics_from_probabilities(&probs, &y, t);
            assert_eq!((m.sensitivity, m.specificity), (Some(1.0), Some(1.0)));
        }
    }

    #[test]
    fn constant_predictor_gives_lowest_threshold_and_flag() {
        let probs = [0.3; 6];
        let y = [true, false, false, true, false, false];
        let bt = balanced_threshold_from_probabilities(&probs, &y).unwrap();
        assert_eq!(bt.threshold, 0.001);
        assert!(bt.uninformative);
    }

    #[test]
    fn high_risk_is_strict() {
        let d = dataset(
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            &[false, false, true, false, true, true],
        );
        let fit = fit_logistic(&d, &["x".into()]).unwrap();
        assert!(high_risk_subset(&fit, &d, 1.0).unwrap().is_empty());
        assert_eq!(high_risk_subset(&fit, &d, 0.0).unwrap().len(), 6);
        let p = fit.predict(&d).unwrap();
        let at = high_risk_subset(&fit, &d, p[2]).unwrap();
        assert!(!at.contains("s2"));
    }

    #[test]
    fn training_visit_picks_closest_to_three_years() {
        let mut s =
            SubjectSeries::from_scores("a", vec![0.0, 300.0, 500.0, 700.0], DMatrix::zeros(4, 1));
        s.endpoint = Endpoint {
            converted: true,
            endpoint_days: 1500.0,
            death_days: None,
        };
        // leads: 1500, 1200, 1000, 800 -> in window: 1200 and 1000; 1000 is closer
        assert_eq!(training_visit(&s), Some(2));
        s.endpoint.endpoint_days = 800.0;
        assert_eq!(training_visit(&s), None);
    }
}
