//! Generative simulator for cohorts following the longitudinal factor model.
//!
//! Per subject:
//!
//! * scheduled visits with gaps drawn uniformly from `visit_gap_years`;
//! * an initial factor state `α₀ ~ N(0, s² I)` followed by the δ-scaled
//!   random walk `α_j = α_{j−1} + η`, `η ~ N(0, δ_j Σ_η)`;
//! * test scores `y = G α + ε` (plus optional covariate shifts);
//! * three-year conversion drawn from a logistic model on the factors at the
//!   reference visit and the covariates. Converters get a conversion day
//!   after the reference visit; only the visits before it are kept, since
//!   the cohort holds cognitively normal visits only;
//! * optional loss to follow-up (only the first two visits kept) and death.
//!
//! Tests flagged `sign_flip` are written negated when `raw_polarity` is set,
//! so that the data-model flip restores "higher is better".

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    default_test_battery, CognitiveTest, Cohort, CohortSchema, Endpoint, SubjectSeries,
    DAYS_PER_YEAR,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, min_eigenvalue, sample_mvn};
use crate::rng::substream;

pub use crate::data_model::write_cohort;

/// How one covariate (or a block of dummy columns) is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSpec {
    Bernoulli {
        name: String,
        p: f64,
    },
    /// Truncated by clamping to `[min, max]`.
    Normal {
        name: String,
        mean: f64,
        sd: f64,
        min: f64,
        max: f64,
    },
    /// Value `i` with probability `probs[i]`.
    Count {
        name: String,
        probs: Vec<f64>,
    },
    /// One-hot dummies; `probs[0]` is the reference level (all zeros) and
    /// `probs[i + 1]` belongs to `names[i]`.
    Categorical {
        names: Vec<String>,
        probs: Vec<f64>,
    },
    /// Zero with probability `p_zero`, otherwise exponential, clamped at `max`.
    ZeroInflatedExponential {
        name: String,
        p_zero: f64,
        mean: f64,
        max: f64,
    },
}

impl CovariateSpec {
    pub fn column_names(&self) -> Vec<String> {
        match self {
            CovariateSpec::Bernoulli { name, .. }
            | CovariateSpec::Normal { name, .. }
            | CovariateSpec::Count { name, .. }
            | CovariateSpec::ZeroInflatedExponential { name, .. } => vec![name.clone()],
            CovariateSpec::Categorical { names, .. } => names.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let probs_ok = |p: &[f64]| {
            p.iter().all(|v| (0.0..=1.0).contains(v))
                && ((p.iter().sum::<f64>() - 1.0).abs() < 1e-9)
        };
        let ok = match self {
            CovariateSpec::Bernoulli { p, .. } => (0.0..=1.0).contains(p),
            CovariateSpec::Normal { sd, min, max, .. } => *sd >= 0.0 && min <= max,
            CovariateSpec::Count { probs, .. } => !probs.is_empty() && probs_ok(probs),
            CovariateSpec::Categorical { names, probs } => {
                probs.len() == names.len() + 1 && probs_ok(probs)
            }
            CovariateSpec::ZeroInflatedExponential {
                p_zero, mean, max, ..
            } => (0.0..=1.0).contains(p_zero) && *mean > 0.0 && *max >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid covariate spec for {:?}",
                self.column_names()
            )))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let pick = |probs: &[f64], u: f64| {
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        };
        match self {
            CovariateSpec::Bernoulli { p, .. } => {
                out.push(if rng.random::<f64>() < *p { 1.0 } else { 0.0 })
            }
            CovariateSpec::Normal {
                mean, sd, min, max, ..
            } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                out.push((mean + sd * z).clamp(*min, *max));
            }
            CovariateSpec::Count { probs, .. } => out.push(pick(probs, rng.random()) as f64),
            CovariateSpec::Categorical { names, probs } => {
                let level = pick(probs, rng.random());
                out.extend((0..names.len()).map(|i| if level == i + 1 { 1.0 } else { 0.0 }));
            }
            CovariateSpec::ZeroInflatedExponential {
                p_zero, mean, max, ..
            } => {
                let zero = rng.random::<f64>() < *p_zero;
                let v = if zero {
                    0.0
                } else {
                    Exp::new(1.0 / mean).expect("validated").sample(rng)
                };
                out.push(v.min(*max));
            }
        }
    }
}

/// Loose marginals of a memory-clinic cohort: 34.5% male, education
/// 15.8 (2.86) years, age 70.7 (10.1), mostly white, 30% APOE4 carriers.
pub fn default_covariate_specs() -> Vec<CovariateSpec> {
    let s = |x: &str| x.to_string();
    vec![
        CovariateSpec::Bernoulli {
            name: s("male"),
            p: 0.345,
        },
        CovariateSpec::Normal {
            name: s("education_years"),
            mean: 15.8,
            sd: 2.86,
            min: 2.0,
            max: 28.0,
        },
        CovariateSpec::Normal {
            name: s("age_baseline"),
            mean: 70.7,
            sd: 10.1,
            min: 21.0,
            max: 99.0,
        },
        CovariateSpec::Categorical {
            names: vec![s("race_black"), s("race_asian"), s("race_other")],
            probs: vec![0.841, 0.136, 0.020, 0.003],
        },
        CovariateSpec::Count {
            name: s("apoe4"),
            probs: vec![0.699, 0.276, 0.025],
        },
        CovariateSpec::Bernoulli {
            name: s("hypertension"),
            p: 0.522,
        },
        CovariateSpec::Bernoulli {
            name: s("diabetes"),
            p: 0.113,
        },
        CovariateSpec::ZeroInflatedExponential {
            name: s("smoking_years"),
            p_zero: 0.55,
            mean: 22.0,
            max: 75.0,
        },
        CovariateSpec::Bernoulli {
            name: s("obese"),
            p: 0.251,
        },
        CovariateSpec::Bernoulli {
            name: s("tbi"),
            p: 0.108,
        },
        CovariateSpec::Bernoulli {
            name: s("depression"),
            p: 0.283,
        },
    ]
}

/// Logistic model for three-year conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeModel {
    pub intercept: f64,
    /// One coefficient per factor, applied to the true state at
    /// `reference_visit`.
    pub factor_coefficients: Vec<f64>,
    /// Applied to raw covariate values; unnamed covariates have no effect.
    pub covariate_coefficients: BTreeMap<String, f64>,
    pub reference_visit: usize,
}

impl Default for OutcomeModel {
    /// Risk driven by the memory and language factors plus age, APOE4,
    /// education and sex; about 5% convert.
    fn default() -> Self {
        OutcomeModel {
            intercept: -6.8,
            factor_coefficients: vec![-0.55, 0.0, -0.55, 0.0],
            covariate_coefficients: [
                ("age_baseline", 0.045),
                ("apoe4", 0.6),
                ("education_years", -0.05),
                ("male", 0.2),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
            reference_visit: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Censoring {
    /// Probability that follow-up stops after the second visit.
    pub lost_to_follow_up: f64,
    /// Constant death hazard per year, starting at the reference visit.
    pub death_hazard_per_year: f64,
}

impl Default for Censoring {
    fn default() -> Self {
        Censoring {
            lost_to_follow_up: 0.05,
            death_hazard_per_year: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_subjects: usize,
    /// Inclusive range of scheduled visits.
    pub visits_per_subject: [usize; 2],
    pub visit_gap_years: [f64; 2],
    /// `K × Q` loadings.
    pub true_g: Vec<Vec<f64>>,
    pub true_sigma_eps: Vec<f64>,
    /// `Q × Q` innovation correlation.
    pub true_sigma_eta: Vec<Vec<f64>>,
    /// Variance of each component of the initial state.
    pub initial_state_var: f64,
    /// Write sign-flipped tests negated.
    pub raw_polarity: bool,
    pub covariates: Vec<CovariateSpec>,
    /// Shift added to every test score per unit of the named covariate.
    pub covariate_score_effects: BTreeMap<String, f64>,
    pub outcome: OutcomeModel,
    /// Conversion happens this many years after the reference visit.
    pub conversion_window_years: [f64; 2],
    pub censoring: Censoring,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let groups = [0usize, 0, 1, 1, 2, 2, 2, 3, 3, 3];
        let load = [0.9, 1.1, 0.7, 0.6, 0.8, 0.75, 0.55, 0.65, 1.0, 1.2];
        let true_g = groups
            .iter()
            .zip(load)
            .map(|(&g, l)| (0..4).map(|q| if q == g { l } else { 0.0 }).collect())
            .collect();
        GenConfig {
            n_subjects: 1000,
            visits_per_subject: [4, 8],
            visit_gap_years: [0.75, 1.25],
            true_g,
            true_sigma_eps: vec![0.25, 0.2, 0.4, 0.45, 0.35, 0.4, 0.5, 0.45, 0.3, 0.25],
            true_sigma_eta: vec![
                vec![1.0, 0.3, 0.4, 0.2],
                vec![0.3, 1.0, 0.3, 0.25],
                vec![0.4, 0.3, 1.0, 0.3],
                vec![0.2, 0.25, 0.3, 1.0],
            ],
            initial_state_var: 4.0,
            raw_polarity: true,
            covariates: default_covariate_specs(),
            covariate_score_effects: [("age_baseline", -0.02), ("education_years", 0.05)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            outcome: OutcomeModel::default(),
            conversion_window_years: [0.25, 3.0],
            censoring: Censoring::default(),
            seed: 1,
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!(
            "{what} must be a non-empty rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl GenConfig {
    pub fn n_tests(&self) -> usize {
        self.true_g.len()
    }

    pub fn n_factors(&self) -> usize {
        self.true_g.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn loadings(&self) -> Result<DMatrix<f64>> {
        matrix(&self.true_g, "true_g")
    }

    pub fn innovation_cov(&self) -> Result<DMatrix<f64>> {
        matrix(&self.true_sigma_eta, "true_sigma_eta")
    }

    /// The default ten-test battery when `K = 10`, otherwise generic
    /// unflipped tests `test_1..test_K`.
    pub fn tests(&self) -> Vec<CognitiveTest> {
        let k = self.n_tests();
        if k == 10 {
            return default_test_battery();
        }
        (0..k)
            .map(|i| CognitiveTest {
                index: i,
                name: format!("test_{}", i + 1),
                sign_flip: false,
            })
            .collect()
    }

    pub fn schema(&self) -> CohortSchema {
        CohortSchema {
            tests: self.tests(),
            covariates: self
                .covariates
                .iter()
                .flat_map(|c| c.column_names())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.loadings()?;
        let (k, q) = g.shape();
        let eta = self.innovation_cov()?;
        if eta.shape() != (q, q) {
            return Err(Error::Config(format!("true_sigma_eta must be {q}x{q}")));
        }
        if (0..q).any(|i| (eta[(i, i)] - 1.0).abs() > 1e-12)
            || (0..q).any(|i| (0..q).any(|j| (eta[(i, j)] - eta[(j, i)]).abs() > 1e-12))
            || min_eigenvalue(&eta) <= 0.0
        {
            return Err(Error::Config(
                "true_sigma_eta must be a positive-definite correlation matrix".into(),
            ));
        }
        if self.true_sigma_eps.len() != k || self.true_sigma_eps.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!(
                "true_sigma_eps must hold {k} non-negative variances"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("true_g must be finite".into()));
        }
        let [lo, hi] = self.visits_per_subject;
        if lo < 2 || lo > hi {
            return Err(Error::Config(
                "visits_per_subject must be a range with minimum >= 2".into(),
            ));
        }
        let [glo, ghi] = self.visit_gap_years;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Config(
                "visit_gap_years must be a positive range".into(),
            ));
        }
        let [clo, chi] = self.conversion_window_years;
        if !(clo > 0.0 && clo <= chi) {
            return Err(Error::Config(
                "conversion_window_years must be a positive range".into(),
            ));
        }
        if !(self.initial_state_var > 0.0) {
            return Err(Error::Config("initial_state_var must be positive".into()));
        }
        for c in &self.covariates {
            c.validate()?;
        }
        let names = self.schema().covariates;
        let o = &self.outcome;
        if o.factor_coefficients.len() != q {
            return Err(Error::Config(format!(
                "outcome.factor_coefficients must hold {q} values"
            )));
        }
        if o.reference_visit >= lo {
            return Err(Error::Config(
                "outcome.reference_visit must exist for every subject".into(),
            ));
        }
        let coef_names = o
            .covariate_coefficients
            .keys()
            .chain(self.covariate_score_effects.keys());
        for name in coef_names {
            if !names.contains(name) {
                return Err(Error::Config(format!(
                    "unknown covariate `{name}` in coefficients"
                )));
            }
        }
        if !o.intercept.is_finite()
            || o.factor_coefficients.iter().any(|v| !v.is_finite())
            || o.covariate_coefficients.values().any(|v| !v.is_finite())
        {
            return Err(Error::Config("outcome coefficients must be finite".into()));
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.censoring.lost_to_follow_up) || !(self.censoring.death_hazard_per_year >= 0.0)
        {
            return Err(Error::Config("invalid censoring settings".into()));
        }
        Ok(())
    }
}

/// Latent quantities behind a generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTruth {
    /// True factor states at the kept visits.
    pub states: Vec<DVector<f64>>,
    /// Model probability of three-year conversion.
    pub conversion_probability: f64,
}

/// Generates a cohort; deterministic given `config.seed`.
pub fn generate_cohort(config: &GenConfig) -> Result<Cohort> {
    Ok(generate_with_truth(config)?.0)
}

/// Like [`generate_cohort`] but also returns the latent truth per subject.
pub fn generate_with_truth(config: &GenConfig) -> Result<(Cohort, Vec<SubjectTruth>)> {
    config.validate()?;
    let schema = config.schema();
    let g = config.loadings()?;
    let (k, q) = g.shape();
    let eta_chol = cholesky_jittered(&config.innovation_cov()?, "true_sigma_eta")?;
    let noise_sd: Vec<f64> = config.true_sigma_eps.iter().map(|v| v.sqrt()).collect();
    let init_sd = config.initial_state_var.sqrt();
    let flips: Vec<bool> = schema
        .tests
        .iter()
        .map(|t| t.sign_flip && config.raw_polarity)
        .collect();
    let score_shift: Vec<(usize, f64)> = config
        .covariate_score_effects
        .iter()
        .map(|(n, v)| {
            (
                schema
                    .covariates
                    .iter()
                    .position(|c| c == n)
                    .expect("validated"),
                *v,
            )
        })
        .collect();
    let outcome_cov: Vec<(usize, f64)> = config
        .outcome
        .covariate_coefficients
        .iter()
        .map(|(n, v)| {
            (
                schema
                    .covariates
                    .iter()
                    .position(|c| c == n)
                    .expect("validated"),
                *v,
            )
        })
        .collect();
    let death = if config.censoring.death_hazard_per_year > 0.0 {
        Some(Exp::new(config.censoring.death_hazard_per_year).expect("validated"))
    } else {
        None
    };
    let zero_q = DVector::zeros(q);
    let ref_visit = config.outcome.reference_visit;
    let width = (config.n_subjects.max(1) - 1).to_string().len();

    let mut cohort = Cohort::new(&schema);
    let mut truth = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let mut rng = substream(config.seed, &[i as u64]);
        let n_sched = rng.random_range(config.visits_per_subject[0]..=config.visits_per_subject[1]);
        let mut days = vec![0.0];
        for _ in 1..n_sched {
            let gap = rng.random_range(config.visit_gap_years[0]..=config.visit_gap_years[1]);
            // whole days keep the CSV short and exact
            let next = (days.last().unwrap() + gap * DAYS_PER_YEAR).round();
            days.push(next);
        }

        let mut states = Vec::with_capacity(n_sched);
        let mut state = DVector::from_fn(q, |_, _| {
            init_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        states.push(state.clone());
        for j in 1..n_sched {
            let delta = (days[j] - days[j - 1]) / DAYS_PER_YEAR;
            state += sample_mvn(&zero_q, &eta_chol, &mut rng) * delta.sqrt();
            states.push(state.clone());
        }

        let mut covariates = Vec::with_capacity(schema.covariates.len());
        for spec in &config.covariates {
            spec.draw(&mut rng, &mut covariates);
        }
        let shift: f64 = score_shift.iter().map(|(c, b)| b * covariates[*c]).sum();

        let mut scores = DMatrix::zeros(n_sched, k);
        for j in 0..n_sched {
            let mean = &g * &states[j];
            for t in 0..k {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let y = mean[t] + shift + noise_sd[t] * z;
                scores[(j, t)] = if flips[t] { -y } else { y };
            }
        }

        let lin = config.outcome.intercept
            + config
                .outcome
                .factor_coefficients
                .iter()
                .zip(states[ref_visit].iter())
                .map(|(b, a)| b * a)
                .sum::<f64>()
            + outcome_cov
                .iter()
                .map(|(c, b)| b * covariates[*c])
                .sum::<f64>();
        let p_convert = 1.0 / (1.0 + (-lin).exp());
        let converts = rng.random::<f64>() < p_convert;
        let [clo, chi] = config.conversion_window_years;
        let conversion_day =
            (days[ref_visit] + rng.random_range(clo..=chi) * DAYS_PER_YEAR).round();
        let lost = rng.random::<f64>() < config.censoring.lost_to_follow_up;
        let death_day = death.as_ref().map(|d| {
            (days[ref_visit] + d.sample(&mut rng) * DAYS_PER_YEAR)
                .round()
                .max(days[ref_visit] + 1.0)
        });

        // follow-up ends at the last scheduled visit, or the second when lost
        let mut last = if lost { ref_visit.max(1) } else { n_sched - 1 };
        let mut converted = false;
        let mut endpoint_day = days[last];
        if converts && !lost && conversion_day > days[ref_visit] {
            let before = days.iter().take_while(|&&d| d < conversion_day).count();
            if before >= 2 {
                last = before - 1;
                converted = true;
                endpoint_day = conversion_day;
            }
        }
        let mut death_days = None;
        if let Some(dd) = death_day {
            if dd <= endpoint_day {
                // visits after death never happen; conversion after death is moot
                let keep = days.iter().take_while(|&&d| d < dd).count().max(2);
                last = last.min(keep - 1);
                converted = converted && conversion_day < dd;
                endpoint_day = if converted {
                    conversion_day
                } else {
                    days[last]
                };
                death_days = Some(dd);
            }
        }

        let n_keep = last + 1;
        cohort.subjects.push(SubjectSeries {
            subject_id: format!("S{:0width$}", i, width = width),
            visit_days: days[..n_keep].to_vec(),
            scores: scores.rows(0, n_keep).into_owned(),
            covariates,
            endpoint: Endpoint {
                converted,
                endpoint_days: endpoint_day,
                death_days,
            },
        });
        states.truncate(n_keep);
        truth.push(SubjectTruth {
            states,
            conversion_probability: p_convert,
        });
    }
    Ok((cohort, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GenConfig {
        GenConfig {
            n_subjects: n,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_matches_battery() {
        let c = GenConfig::default();
        c.validate().unwrap();
        assert_eq!(c.schema(), CohortSchema::default());
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(30)).unwrap();
        let b = generate_cohort(&small(30)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&GenConfig {
            seed: 2,
            ..small(30)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_subject_has_two_visits_and_consistent_endpoint() {
        let (c, t) = generate_with_truth(&small(400)).unwrap();
        assert_eq!(c.subjects.len(), 400);
        for (s, tr) in c.subjects.iter().zip(&t) {
            assert!(s.n_visits() >= 2);
            assert_eq!(tr.states.len(), s.n_visits());
            assert!(s.visit_days.windows(2).all(|w| w[1] > w[0]));
            assert!(s.endpoint.endpoint_days >= *s.visit_days.last().unwrap());
            if s.endpoint.converted {
                assert!(s.endpoint.endpoint_days > s.visit_days[1]);
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = GenConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: GenConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: GenConfig = toml::from_str("n_subjects = 12\nseed = 9\n").unwrap();
        assert_eq!(partial.n_subjects, 12);
        assert_eq!(partial.true_g, c.true_g);
    }

    #[test]
    fn rejects_non_correlation_innovation() {
        let mut c = small(5);
        c.true_sigma_eta[0][0] = 2.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_outcome_covariate() {
        let mut c = small(5);
        c.outcome
            .covariate_coefficients
            .insert("shoe_size".into(), 1.0);
        assert!(c.validate().is_err());
    }
}
