//! Randomized-trial simulation on a test cohort.
//!
//! Each subject's untreated ("true") outcome is derived forward from the
//! trial baseline (second cognitively normal visit). A replicate enrolls
//! `n` subjects with replacement from a selection pool, randomizes arms,
//! removes a fraction `effect` of the treated conversions, and fits a Cox
//! model adjusted for APOE4, education and sex. Power and required sample
//! size follow from the observed hazard ratio and event count.
//!
//! Replicate `r` of a method draws its enrollment, arms and treatment
//! uniforms from a stream keyed by `(seed, method, r)` only. Every effect
//! therefore sees the same trial up to the treatment cut-off
//! `u < effect`, which makes outcomes monotone in the effect.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::{Cohort, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, spd_inverse};
use crate::rng::substream;

/// Visits more than 3.5 years after baseline are ignored.
pub const TRIAL_WINDOW_DAYS: f64 = 3.5 * DAYS_PER_YEAR;
/// Target follow-up, and the censoring time of treated would-be converters.
pub const THREE_YEARS_DAYS: f64 = 3.0 * DAYS_PER_YEAR;
/// Covariates the Cox model adjusts for.
pub const COX_ADJUSTERS: [&str; 3] = ["apoe4", "education_years", "male"];
/// A Cox coefficient beyond this magnitude is taken as a monotone likelihood.
pub const MONOTONE_BOUND: f64 = 10.0;
const SCORE_TOLERANCE: f64 = 1e-8;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Converted,
    Censored,
    DeathCensored,
    LostToFollowUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject_id: String,
    /// Days from trial baseline.
    pub time: f64,
    pub disposition: Disposition,
    pub arm: Arm,
    /// APOE4, education, sex, in [`COX_ADJUSTERS`] order.
    pub adjusters: [f64; 3],
}

impl SurvivalRecord {
    pub fn is_event(&self) -> bool {
        self.disposition == Disposition::Converted
    }

    pub fn is_analyzable(&self) -> bool {
        self.disposition != Disposition::LostToFollowUp
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub converted: usize,
    pub censored: usize,
    pub death_censored: usize,
    pub lost_to_follow_up: usize,
}

/// Untreated outcomes for every subject; all records start in the control arm.
pub fn derive_true_outcomes(cohort: &Cohort) -> Result<(Vec<SurvivalRecord>, DispositionCounts)> {
    let idx = COX_ADJUSTERS
        .iter()
        .map(|n| {
            cohort
                .covariate_index(n)
                .ok_or_else(|| Error::Config(format!("cohort lacks Cox adjuster `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = DispositionCounts::default();
    let mut out = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        if s.n_visits() < 2 {
            return Err(Error::Config(format!(
                "subject `{}` has fewer than two visits",
                s.subject_id
            )));
        }
        let base = s.visit_days[1];
        let end = base + TRIAL_WINDOW_DAYS;
        let e = &s.endpoint;
        let death = e.death_days.filter(|&d| d > base && d <= end);
        let conversion = if e.converted && e.endpoint_days > base && e.endpoint_days <= end {
            Some(e.endpoint_days)
        } else {
            None
        };
        let (time, disposition) = match (conversion, death) {
            (Some(c), d) if d.is_none_or(|d| c <= d) => (c - base, Disposition::Converted),
            (_, Some(d)) => (d - base, Disposition::DeathCensored),
            _ => {
                let closest = s.visit_days[2..]
                    .iter()
                    .filter(|&&v| v <= end)
                    .map(|&v| v - base)
                    .min_by(|a, b| {
                        (a - THREE_YEARS_DAYS)
                            .abs()
                            .total_cmp(&(b - THREE_YEARS_DAYS).abs())
                    });
                match closest {
                    Some(t) => (t, Disposition::Censored),
                    None => (0.0, Disposition::LostToFollowUp),
                }
            }
        };
        match disposition {
            Disposition::Converted => counts.converted += 1,
            Disposition::Censored => counts.censored += 1,
            Disposition::DeathCensored => counts.death_censored += 1,
            Disposition::LostToFollowUp => counts.lost_to_follow_up += 1,
        }
        out.push(SurvivalRecord {
            subject_id: s.subject_id.clone(),
            time,
            disposition,
            arm: Arm::Control,
            adjusters: [
                s.covariates[idx[0]],
                s.covariates[idx[1]],
                s.covariates[idx[2]],
            ],
        });
    }
    Ok((out, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Factor,
    Covariate,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 3] = [
        SelectionMethod::Random,
        SelectionMethod::Factor,
        SelectionMethod::Covariate,
    ];

    fn tag(self) -> u64 {
        match self {
            SelectionMethod::Random => 0,
            SelectionMethod::Factor => 1,
            SelectionMethod::Covariate => 2,
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Factor => "factor",
            SelectionMethod::Covariate => "covariate",
        })
    }
}

/// Record indices each method samples from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPools {
    pub all: Vec<usize>,
    pub factor: Vec<usize>,
    pub covariate: Vec<usize>,
}

impl SelectionPools {
    pub fn new(
        records: &[SurvivalRecord],
        factor_subset: &BTreeSet<String>,
        covariate_subset: &BTreeSet<String>,
    ) -> Self {
        let pick = |set: &BTreeSet<String>| {
            records
                .iter()
                .enumerate()
                .filter(|(_, r)| set.contains(&r.subject_id))
                .map(|(i, _)| i)
                .collect()
        };
        SelectionPools {
            all: (0..records.len()).collect(),
            factor: pick(factor_subset),
            covariate: pick(covariate_subset),
        }
    }

    pub fn pool(&self, method: SelectionMethod) -> &[usize] {
        match method {
            SelectionMethod::Random => &self.all,
            SelectionMethod::Factor => &self.factor,
            SelectionMethod::Covariate => &self.covariate,
        }
    }
}

/// `n` draws with replacement from the method's pool.
pub fn select_participants<R: Rng + ?Sized>(
    method: SelectionMethod,
    pools: &SelectionPools,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool = pools.pool(method);
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::EmptySubset(format!(
            "{method} selection pool is empty"
        )));
    }
    Ok((0..n)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}

/// Uniforms deciding arm and drug response for each enrollee.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentDraws {
    pub arm: Vec<f64>,
    pub response: Vec<f64>,
}

impl TreatmentDraws {
    pub fn draw<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut arm = Vec::with_capacity(n);
        let mut response = Vec::with_capacity(n);
        for _ in 0..n {
            arm.push(rng.random::<f64>());
            response.push(rng.random::<f64>());
        }
        TreatmentDraws { arm, response }
    }
}

/// Trial outcomes for enrolled records given pre-drawn uniforms: treatment
/// when `arm < 0.5`; a treated converter is censored at exactly three
/// years when `response < effect`.
pub fn apply_treatment_with(
    records: &[SurvivalRecord],
    effect: f64,
    draws: &TreatmentDraws,
) -> Result<Vec<SurvivalRecord>> {
    if !(0.0..1.0).contains(&effect) {
        return Err(Error::Config(format!(
            "treatment effect {effect} outside [0, 1)"
        )));
    }
    if draws.arm.len() != records.len() || draws.response.len() != records.len() {
        return Err(Error::Dimension(
            "one treatment draw per record required".into(),
        ));
    }
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = r.clone();
            if draws.arm[i] < 0.5 {
                out.arm = Arm::Treatment;
                if r.is_event() && draws.response[i] < effect {
                    out.disposition = Disposition::Censored;
                    out.time = THREE_YEARS_DAYS;
                }
            } else {
                out.arm = Arm::Control;
            }
            out
        })
        .collect())
}

pub fn apply_treatment<R: Rng + ?Sized>(
    records: &[SurvivalRecord],
    effect: f64,
    rng: &mut R,
) -> Result<Vec<SurvivalRecord>> {
    let draws = TreatmentDraws::draw(records.len(), rng);
    apply_treatment_with(records, effect, &draws)
}

/// Breslow partial log-likelihood. `x` rows align with `times`/`events`.
pub fn cox_partial_log_likelihood(
    times: &[f64],
    events: &[bool],
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> f64 {
    cox_derivatives(&sorted_order(times), times, events, x, beta, false).0
}

/// Score vector of the Breslow partial likelihood.
pub fn cox_score(
    times: &[f64],
    events: &[bool],
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> DVector<f64> {
    cox_derivatives(&sorted_order(times), times, events, x, beta, false).1
}

fn sorted_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    order
}

/// Log-likelihood, score and (optionally) observed information, walking
/// subjects by decreasing time so risk sets accumulate.
fn cox_derivatives(
    order: &[usize],
    times: &[f64],
    events: &[bool],
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    with_information: bool,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let eta = x * beta;
    // shifting by the largest linear predictor keeps the weights in range
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut row = vec![0.0; p];
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut ll = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    let mut g = 0;
    while g < order.len() {
        let t = times[order[g]];
        let mut end = g;
        while end < order.len() && times[order[end]] == t {
            let i = order[end];
            let w = (eta[i] - shift).exp();
            s0 += w;
            for a in 0..p {
                row[a] = x[(i, a)];
                s1[a] += w * row[a];
            }
            if with_information {
                for a in 0..p {
                    for b in 0..=a {
                        s2[a * p + b] += w * row[a] * row[b];
                    }
                }
            }
            end += 1;
        }
        let d = order[g..end].iter().filter(|&&i| events[i]).count();
        if d > 0 {
            let df = d as f64;
            let log_s0 = s0.ln() + shift;
            for &i in &order[g..end] {
                if events[i] {
                    ll += eta[i] - log_s0;
                    for a in 0..p {
                        score[a] += x[(i, a)];
                    }
                }
            }
            for a in 0..p {
                score[a] -= df * s1[a] / s0;
            }
            if with_information {
                for a in 0..p {
                    for b in 0..=a {
                        info[a * p + b] += df * (s2[a * p + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                    }
                }
            }
        }
        g = end;
    }
    let info = DMatrix::from_fn(p, p, |a, b| {
        if a >= b {
            info[a * p + b]
        } else {
            info[b * p + a]
        }
    });
    (ll, DVector::from_vec(score), info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    /// `treatment` first, then the adjusters that vary.
    pub term_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub hazard_ratio: f64,
    pub log_hr_se: f64,
    pub p_value: f64,
    pub log_likelihood: f64,
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coefficient ran off towards infinity.
    pub monotone: bool,
    pub n_events: usize,
    pub n_analyzable: usize,
}

impl CoxFit {
    /// Replicates that count as "power 0, N ∞" beyond `hr > 1`.
    pub fn flagged(&self) -> bool {
        self.monotone || !self.converged
    }
}

/// Cox model of trial outcomes on treatment plus [`COX_ADJUSTERS`]; lost
/// to follow-up records are excluded and constant adjusters dropped.
pub fn fit_cox(records: &[SurvivalRecord]) -> Result<CoxFit> {
    let kept: Vec<&SurvivalRecord> = records.iter().filter(|r| r.is_analyzable()).collect();
    let n = kept.len();
    let n_events = kept.iter().filter(|r| r.is_event()).count();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let treat: Vec<f64> = kept
        .iter()
        .map(|r| f64::from(u8::from(r.arm == Arm::Treatment)))
        .collect();
    let varies = |v: &[f64]| v.iter().any(|&a| a != v[0]);
    if !varies(&treat) {
        return Err(Error::Config("treatment indicator does not vary".into()));
    }
    let mut names = vec!["treatment".to_string()];
    let mut cols = vec![treat];
    for (a, name) in COX_ADJUSTERS.iter().enumerate() {
        let c: Vec<f64> = kept.iter().map(|r| r.adjusters[a]).collect();
        if varies(&c) {
            names.push(name.to_string());
            cols.push(c);
        }
    }
    let p = cols.len();
    // centering leaves the partial likelihood unchanged
    let means: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| cols[j][i] - means[j]);
    let times: Vec<f64> = kept.iter().map(|r| r.time).collect();
    let events: Vec<bool> = kept.iter().map(|r| r.is_event()).collect();
    let order = sorted_order(&times);

    let mut beta = DVector::zeros(p);
    let (mut ll, mut score, mut info) = cox_derivatives(&order, &times, &events, &x, &beta, true);
    // iterate past the reporting tolerance so converged fits clear it comfortably
    let target = SCORE_TOLERANCE * 1e-2;
    let mut iterations = 0;
    let mut monotone = false;
    while score.norm() >= target && iterations < MAX_NEWTON {
        if at_rounding_floor(&score, &info) {
            break;
        }
        iterations += 1;
        let step = match cholesky_jittered(&info, "Cox information") {
            Ok(c) => c.solve(&score),
            Err(_) => {
                monotone = true;
                break;
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let (cl, cs, ci) = cox_derivatives(&order, &times, &events, &x, &cand, true);
            if accepts(cl, ll) {
                beta = cand;
                ll = cl;
                score = cs;
                info = ci;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if beta.iter().any(|b| b.abs() > MONOTONE_BOUND) {
            monotone = true;
            break;
        }
        if !accepted {
            break;
        }
    }
    let converged = !monotone && score.norm() < SCORE_TOLERANCE;
    let se: Vec<f64> = match spd_inverse(&info, "Cox information") {
        Ok(cov) => (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        Err(_) => {
            monotone = true;
            vec![f64::INFINITY; p]
        }
    };
    let z = beta[0] / se[0];
    let p_value = if z.is_finite() {
        2.0 * (1.0 - Normal::standard().cdf(z.abs()))
    } else {
        1.0
    };
    Ok(CoxFit {
        term_names: names,
        coefficients: beta.iter().copied().collect(),
        std_errors: se.clone(),
        hazard_ratio: beta[0].exp(),
        log_hr_se: se[0],
        p_value,
        log_likelihood: ll,
        score_norm: score.norm(),
        iterations,
        converged,
        monotone,
        n_events,
        n_analyzable: n,
    })
}

/// Step acceptance for the damped Newton iterations. Near the optimum
/// the gain is below the rounding error of the log-likelihood, so a
/// decrease of that size is not a reason to halve.
pub(crate) fn accepts(candidate: f64, current: f64) -> bool {
    candidate >= current - 1e-12 * current.abs().max(1.0)
}

/// True when the Newton decrement is below what `f64` can resolve, so the
/// remaining score is rounding noise rather than distance to the optimum.
pub(crate) fn at_rounding_floor(score: &DVector<f64>, info: &DMatrix<f64>) -> bool {
    match cholesky_jittered(info, "Newton decrement") {
        Ok(c) => score.dot(&c.solve(score)) < 1e-20,
        Err(_) => false,
    }
}

fn z_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Events needed to detect `hr` with a two-sided level-`alpha` test at the
/// given power and allocation fraction, rounded up; infinite at `hr = 1`.
pub fn required_events(hr: f64, alpha: f64, power: f64, allocation: f64) -> Result<f64> {
    if !(hr > 0.0) || !hr.is_finite() {
        return Err(Error::Config(format!(
            "hazard ratio {hr} must be positive and finite"
        )));
    }
    if !(alpha > 0.0
        && alpha < 1.0
        && power > 0.0
        && power < 1.0
        && allocation > 0.0
        && allocation < 1.0)
    {
        return Err(Error::Config(
            "alpha, power and allocation must lie in (0, 1)".into(),
        ));
    }
    let log_hr = hr.ln();
    if log_hr == 0.0 {
        return Ok(f64::INFINITY);
    }
    let z = z_quantile(1.0 - alpha / 2.0) + z_quantile(power);
    let d = z * z / (allocation * (1.0 - allocation) * log_hr * log_hr);
    // guard against 631.0000000001-style round-off
    Ok((d - 1e-9).ceil())
}

/// Power of a two-sided level-`alpha` test with `events` events at hazard
/// ratio `hr` and 1:1 allocation.
pub fn posthoc_power(hr: f64, events: usize, alpha: f64) -> f64 {
    let z = z_quantile(1.0 - alpha / 2.0);
    Normal::standard().cdf((events as f64 * 0.25).sqrt() * hr.ln().abs() - z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReplicate {
    /// NaN when the replicate could not be fitted.
    pub hr_hat: f64,
    pub log_hr_se: f64,
    pub p_value: f64,
    pub n_events: usize,
    pub n_analyzable: usize,
    pub event_probability: f64,
    pub power: f64,
    /// Enrollment needed for the required events at the observed event
    /// rate, rounded up; may be infinite.
    pub required_n: f64,
    /// Power forced to 0 (hr > 1, monotone or unconverged fit).
    pub forced_zero: bool,
    pub failed: bool,
}

/// Post-hoc power and required sample size of one fitted replicate.
pub fn replicate_summary(fit: &CoxFit, alpha: f64, target_power: f64) -> Result<TrialReplicate> {
    if fit.n_analyzable == 0 {
        return Err(Error::Empty("replicate has no analyzable subjects".into()));
    }
    let event_probability = fit.n_events as f64 / fit.n_analyzable as f64;
    let forced_zero = fit.flagged() || fit.hazard_ratio > 1.0;
    let (power, required_n) = if forced_zero {
        (0.0, f64::INFINITY)
    } else {
        let d = required_events(fit.hazard_ratio, alpha, target_power, 0.5)?;
        (
            posthoc_power(fit.hazard_ratio, fit.n_events, alpha),
            (d / event_probability - 1e-9).ceil(),
        )
    };
    Ok(TrialReplicate {
        hr_hat: fit.hazard_ratio,
        log_hr_se: fit.log_hr_se,
        p_value: fit.p_value,
        n_events: fit.n_events,
        n_analyzable: fit.n_analyzable,
        event_probability,
        power,
        required_n,
        forced_zero,
        failed: false,
    })
}

fn failed_replicate() -> TrialReplicate {
    TrialReplicate {
        hr_hat: f64::NAN,
        log_hr_se: f64::NAN,
        p_value: 1.0,
        n_events: 0,
        n_analyzable: 0,
        event_probability: 0.0,
        power: 0.0,
        required_n: f64::INFINITY,
        forced_zero: true,
        failed: true,
    }
}

pub fn default_effects() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i * 5) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub n_enrolled: usize,
    pub methods: Vec<SelectionMethod>,
    pub effects: Vec<f64>,
    pub n_replicates: usize,
    pub alpha: f64,
    pub target_power: f64,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_enrolled: 1000,
            methods: SelectionMethod::ALL.to_vec(),
            effects: default_effects(),
            n_replicates: 10_000,
            alpha: 0.05,
            target_power: 0.8,
            seed: 1,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_enrolled < 2 {
            return Err(Error::Config("n_enrolled must be at least 2".into()));
        }
        if self.effects.is_empty() || self.effects.iter().any(|e| !(0.0..1.0).contains(e)) {
            return Err(Error::Config(
                "effects must be a non-empty list in [0, 1)".into(),
            ));
        }
        if self.n_replicates == 0 || self.methods.is_empty() {
            return Err(Error::Config(
                "need at least one replicate and one method".into(),
            ));
        }
        if !(self.alpha > 0.0
            && self.alpha < 1.0
            && self.target_power > 0.0
            && self.target_power < 1.0)
        {
            return Err(Error::Config(
                "alpha and target_power must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Median with infinities allowed; NaNs are skipped.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else if v[m - 1].is_infinite() || v[m].is_infinite() {
        if v[m - 1] == v[m] {
            v[m]
        } else {
            f64::INFINITY
        }
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn variance(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Aggregates for one (method, effect) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub method: SelectionMethod,
    pub effect: f64,
    pub replicates: Vec<TrialReplicate>,
}

impl GridCell {
    pub fn median_power(&self) -> f64 {
        median(&self.replicates.iter().map(|r| r.power).collect::<Vec<_>>())
    }

    /// Median over replicates whose power was not forced to 0.
    pub fn median_power_unforced(&self) -> f64 {
        median(
            &self
                .replicates
                .iter()
                .filter(|r| !r.forced_zero)
                .map(|r| r.power)
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_required_n(&self) -> f64 {
        median(
            &self
                .replicates
                .iter()
                .map(|r| r.required_n)
                .collect::<Vec<_>>(),
        )
    }

    pub fn hr_hats(&self) -> Vec<f64> {
        self.replicates
            .iter()
            .map(|r| r.hr_hat)
            .filter(|h| h.is_finite())
            .collect()
    }

    pub fn median_hr(&self) -> f64 {
        median(&self.hr_hats())
    }

    pub fn hr_variance(&self) -> f64 {
        variance(&self.hr_hats())
    }

    pub fn n_failed(&self) -> usize {
        self.replicates.iter().filter(|r| r.failed).count()
    }

    pub fn n_forced_zero(&self) -> usize {
        self.replicates.iter().filter(|r| r.forced_zero).count()
    }

    /// Share of replicates with two-sided Wald p below `alpha`.
    pub fn rejection_rate(&self, alpha: f64) -> f64 {
        let n = self.replicates.len().max(1) as f64;
        self.replicates
            .iter()
            .filter(|r| !r.failed && r.p_value < alpha)
            .count() as f64
            / n
    }

    pub fn mean_event_probability(&self) -> f64 {
        let ok: Vec<f64> = self
            .replicates
            .iter()
            .filter(|r| !r.failed)
            .map(|r| r.event_probability)
            .collect();
        ok.iter().sum::<f64>() / ok.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialGridResult {
    pub config: TrialConfig,
    pub cells: Vec<GridCell>,
    pub pool_sizes: Vec<(SelectionMethod, usize)>,
}

impl TrialGridResult {
    pub fn cell(&self, method: SelectionMethod, effect: f64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && (c.effect - effect).abs() < 1e-12)
    }
}

fn run_replicate(
    config: &TrialConfig,
    records: &[SurvivalRecord],
    pools: &SelectionPools,
    method: SelectionMethod,
    replicate: usize,
) -> Result<Vec<TrialReplicate>> {
    let mut rng = substream(config.seed, &[method.tag(), replicate as u64]);
    let chosen = select_participants(method, pools, config.n_enrolled, &mut rng)?;
    let enrolled: Vec<SurvivalRecord> = chosen.iter().map(|&i| records[i].clone()).collect();
    let draws = TreatmentDraws::draw(enrolled.len(), &mut rng);
    config
        .effects
        .iter()
        .map(|&effect| {
            let trial = apply_treatment_with(&enrolled, effect, &draws)?;
            Ok(match fit_cox(&trial) {
                Ok(fit) => replicate_summary(&fit, config.alpha, config.target_power)?,
                Err(Error::NoEvents) | Err(Error::Config(_)) => failed_replicate(),
                Err(e) => return Err(e),
            })
        })
        .collect()
}

/// Runs every (method, effect) pair for `config.n_replicates` replicates.
/// Replicates that cannot be fitted are kept as failures with power 0.
pub fn run_trial_grid(
    config: &TrialConfig,
    records: &[SurvivalRecord],
    pools: &SelectionPools,
) -> Result<TrialGridResult> {
    config.validate()?;
    let mut cells = Vec::new();
    let mut pool_sizes = Vec::new();
    for &method in &config.methods {
        pool_sizes.push((method, pools.pool(method).len()));
        if pools.pool(method).is_empty() {
            return Err(Error::EmptySubset(format!(
                "{method} selection pool is empty"
            )));
        }
        let mut per_effect: Vec<Vec<TrialReplicate>> =
            vec![Vec::with_capacity(config.n_replicates); config.effects.len()];
        for r in 0..config.n_replicates {
            for (slot, rep) in per_effect
                .iter_mut()
                .zip(run_replicate(config, records, pools, method, r)?)
            {
                slot.push(rep);
            }
        }
        for (effect, replicates) in config.effects.iter().zip(per_effect) {
            cells.push(GridCell {
                method,
                effect: *effect,
                replicates,
            });
        }
    }
    Ok(TrialGridResult {
        config: config.clone(),
        cells,
        pool_sizes,
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn fmt_effect(e: f64) -> String {
    format!("{e:.2}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: 0,
        message: e.to_string(),
    }
}

fn csv_file(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Grid CSV: `method,effect,median_power,median_required_n,n_failed_replicates`.
pub fn write_grid_csv<W: Write>(result: &TrialGridResult, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "method",
        "effect",
        "median_power",
        "median_required_n",
        "n_failed_replicates",
    ])
    .map_err(csv_err)?;
    for c in &result.cells {
        w.write_record([
            c.method.to_string(),
            fmt_effect(c.effect),
            fmt_num(c.median_power()),
            fmt_num(c.median_required_n()),
            c.n_failed().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<grid sink>", e))?;
    Ok(())
}

/// Writes the grid CSV, per-cell HR distributions under `hr/`, and the
/// plot-data files for power, required N and the HR histogram at effect 0.2.
pub fn write_trial_outputs(result: &TrialGridResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("hr")).map_err(|e| Error::io(dir, e))?;
    let grid = dir.join("trial_grid.csv");
    write_grid_csv(
        result,
        std::fs::File::create(&grid).map_err(|e| Error::io(&grid, e))?,
    )?;

    for c in &result.cells {
        let path = dir
            .join("hr")
            .join(format!("hr_{}_{}.csv", c.method, fmt_effect(c.effect)));
        let mut w = csv_file(&path)?;
        w.write_record([
            "replicate",
            "hr_hat",
            "p_value",
            "n_events",
            "power",
            "required_n",
        ])
        .map_err(csv_err)?;
        for (i, r) in c.replicates.iter().enumerate() {
            w.write_record([
                i.to_string(),
                fmt_num(r.hr_hat),
                fmt_num(r.p_value),
                r.n_events.to_string(),
                fmt_num(r.power),
                fmt_num(r.required_n),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    for (file, value) in [
        ("power_vs_effect.csv", "median_power"),
        ("required_n_vs_effect.csv", "median_required_n"),
    ] {
        let path = dir.join(file);
        let mut w = csv_file(&path)?;
        w.write_record(["method", "effect", value])
            .map_err(csv_err)?;
        for c in &result.cells {
            let v = if value == "median_power" {
                c.median_power()
            } else {
                c.median_required_n()
            };
            w.write_record([c.method.to_string(), fmt_effect(c.effect), fmt_num(v)])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let path = dir.join("hr_histogram_effect_0.20.csv");
    let mut w = csv_file(&path)?;
    w.write_record(["method", "bin_low", "bin_high", "count"])
        .map_err(csv_err)?;
    let (lo, width, bins) = (0.4, 0.02, 60usize);
    for c in result
        .cells
        .iter()
        .filter(|c| (c.effect - 0.2).abs() < 1e-12)
    {
        let mut counts = vec![0usize; bins];
        for h in c.hr_hats() {
            let b = ((h - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        for (b, n) in counts.iter().enumerate() {
            w.write_record([
                c.method.to_string(),
                format!("{:.2}", lo + b as f64 * width),
                format!("{:.2}", lo + (b + 1) as f64 * width),
                n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// JSON-friendly digest of one cell; infinite values are written as "inf".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: SelectionMethod,
    pub effect: f64,
    pub median_power: f64,
    pub median_power_excluding_forced_zero: Option<f64>,
    pub median_required_n: String,
    pub median_hr: Option<f64>,
    pub hr_variance: Option<f64>,
    pub rejection_rate: f64,
    pub mean_event_probability: f64,
    pub n_replicates: usize,
    pub n_forced_zero: usize,
    pub n_failed_replicates: usize,
}

impl CellSummary {
    pub fn from_cell(c: &GridCell, alpha: f64) -> Self {
        let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
        CellSummary {
            method: c.method,
            effect: c.effect,
            median_power: c.median_power(),
            median_power_excluding_forced_zero: finite(c.median_power_unforced()),
            median_required_n: fmt_num(c.median_required_n()),
            median_hr: finite(c.median_hr()),
            hr_variance: finite(c.hr_variance()),
            rejection_rate: c.rejection_rate(alpha),
            mean_event_probability: c.mean_event_probability(),
            n_replicates: c.replicates.len(),
            n_forced_zero: c.n_forced_zero(),
            n_failed_replicates: c.n_failed(),
        }
    }

    pub fn required_n(&self) -> f64 {
        if self.median_required_n == "inf" {
            f64::INFINITY
        } else {
            self.median_required_n.parse().unwrap_or(f64::NAN)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub config: TrialConfig,
    pub pool_sizes: Vec<(SelectionMethod, usize)>,
    pub disposition_counts: DispositionCounts,
    pub cells: Vec<CellSummary>,
}

impl TrialSummary {
    pub fn new(result: &TrialGridResult, counts: DispositionCounts) -> Self {
        TrialSummary {
            config: result.config.clone(),
            pool_sizes: result.pool_sizes.clone(),
            disposition_counts: counts,
            cells: result
                .cells
                .iter()
                .map(|c| CellSummary::from_cell(c, result.config.alpha))
                .collect(),
        }
    }

    pub fn cell(&self, method: SelectionMethod, effect: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.method == method && (c.effect - effect).abs() < 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{CohortSchema, Endpoint, SubjectSeries};

    fn cohort_with(subjects: Vec<(Vec<f64>, Endpoint)>) -> Cohort {
        let schema = CohortSchema {
            tests: crate::data_model::default_test_battery()[..1].to_vec(),
            covariates: COX_ADJUSTERS.iter().map(|s| s.to_string()).collect(),
        };
        let mut c = Cohort::new(&schema);
        for (i, (days, endpoint)) in subjects.into_iter().enumerate() {
            let mut s = SubjectSeries::from_scores(
                format!("s{i}"),
                days.clone(),
                DMatrix::zeros(days.len(), 1),
            );
            s.covariates = vec![0.0, 16.0, 1.0];
            s.endpoint = endpoint;
            c.subjects.push(s);
        }
        c
    }

    fn ep(converted: bool, endpoint_days: f64, death_days: Option<f64>) -> Endpoint {
        Endpoint {
            converted,
            endpoint_days,
            death_days,
        }
    }

    fn record(time: f64, event: bool, arm: Arm) -> SurvivalRecord {
        SurvivalRecord {
            subject_id: "x".into(),
            time,
            disposition: if event {
                Disposition::Converted
            } else {
                Disposition::Censored
            },
            arm,
            adjusters: [0.0, 16.0, 1.0],
        }
    }

    #[test]
    fn outcome_rules() {
        let c = cohort_with(vec![
            // converts 400 days after baseline
            (vec![-365.0, 0.0, 300.0], ep(true, 400.0, None)),
            // censored at the visit closest to three years
            (vec![-365.0, 0.0, 300.0, 1150.0], ep(false, 1150.0, None)),
            // dies before converting
            (vec![-365.0, 0.0, 300.0], ep(false, 300.0, Some(500.0))),
            // no visit after baseline
            (vec![-365.0, 0.0], ep(false, 0.0, None)),
            // conversion beyond the window
            (vec![-365.0, 0.0, 1000.0], ep(true, 1400.0, None)),
        ]);
        let (r, counts) = derive_true_outcomes(&c).unwrap();
        assert_eq!(
            (r[0].time, r[0].disposition),
            (400.0, Disposition::Converted)
        );
        assert_eq!(
            (r[1].time, r[1].disposition),
            (1150.0, Disposition::Censored)
        );
        assert_eq!(
            (r[2].time, r[2].disposition),
            (500.0, Disposition::DeathCensored)
        );
        assert_eq!(r[3].disposition, Disposition::LostToFollowUp);
        assert_eq!(
            (r[4].time, r[4].disposition),
            (1000.0, Disposition::Censored)
        );
        assert_eq!(
            counts,
            DispositionCounts {
                converted: 1,
                censored: 2,
                death_censored: 1,
                lost_to_follow_up: 1
            }
        );
    }

    #[test]
    fn schoenfeld_events() {
        assert_eq!(required_events(0.8, 0.05, 0.8, 0.5).unwrap(), 631.0);
        assert!(required_events(1.0, 0.05, 0.8, 0.5).unwrap().is_infinite());
        assert_eq!(
            required_events(0.7, 0.05, 0.8, 0.5).unwrap(),
            required_events(1.0 / 0.7, 0.05, 0.8, 0.5).unwrap()
        );
    }

    #[test]
    fn power_at_schoenfeld_events_is_target() {
        assert!((posthoc_power(0.8, 631, 0.05) - 0.8).abs() < 0.002);
    }

    #[test]
    fn empty_enrollment_and_empty_pool() {
        let pools = SelectionPools {
            all: vec![0, 1],
            factor: vec![],
            covariate: vec![1],
        };
        let mut rng = substream(1, &[]);
        assert!(
            select_participants(SelectionMethod::Random, &pools, 0, &mut rng)
                .unwrap()
                .is_empty()
        );
        assert!(matches!(
            select_participants(SelectionMethod::Factor, &pools, 5, &mut rng),
            Err(Error::EmptySubset(_))
        ));
    }

    #[test]
    fn control_arm_is_untouched() {
        let recs: Vec<SurvivalRecord> = (0..200)
            .map(|i| record(100.0 + i as f64, i % 3 == 0, Arm::Control))
            .collect();
        let out = apply_treatment(&recs, 0.999, &mut substream(4, &[])).unwrap();
        for (a, b) in recs.iter().zip(&out) {
            match b.arm {
                Arm::Control => {
                    assert_eq!((a.time, a.disposition), (b.time, b.disposition));
                }
                Arm::Treatment if a.is_event() => assert!(!b.is_event() || b.time == a.time),
                Arm::Treatment => assert_eq!(a.disposition, b.disposition),
            }
        }
    }

    #[test]
    fn monotone_two_subject_fit_is_flagged() {
        let recs = vec![
            record(200.0, false, Arm::Treatment),
            record(100.0, true, Arm::Control),
        ];
        let fit = fit_cox(&recs).unwrap();
        assert!(fit.flagged());
        let rep = replicate_summary(&fit, 0.05, 0.8).unwrap();
        assert_eq!(rep.power, 0.0);
        assert!(rep.required_n.is_infinite());
    }

    #[test]
    fn no_events_is_an_error() {
        let recs = vec![
            record(200.0, false, Arm::Treatment),
            record(100.0, false, Arm::Control),
        ];
        assert!(matches!(fit_cox(&recs), Err(Error::NoEvents)));
    }

    #[test]
    fn replicate_rules() {
        let mut fit = CoxFit {
            term_names: vec!["treatment".into()],
            coefficients: vec![1.2f64.ln()],
            std_errors: vec![0.1],
            hazard_ratio: 1.2,
            log_hr_se: 0.1,
            p_value: 0.07,
            log_likelihood: 0.0,
            score_norm: 0.0,
            iterations: 3,
            converged: true,
            monotone: false,
            n_events: 100,
            n_analyzable: 1000,
        };
        let r = replicate_summary(&fit, 0.05, 0.8).unwrap();
        assert_eq!(r.power, 0.0);
        assert!(r.required_n.is_infinite());
        fit.hazard_ratio = 0.8;
        fit.n_events = 631;
        fit.n_analyzable = 6310;
        let r = replicate_summary(&fit, 0.05, 0.8).unwrap();
        assert!((r.power - 0.8).abs() < 0.002);
        assert_eq!(r.required_n, 6310.0);
    }

    #[test]
    fn median_handles_infinity() {
        assert_eq!(median(&[1.0, f64::INFINITY, 3.0]), 3.0);
        assert!(median(&[1.0, f64::INFINITY]).is_infinite());
        assert_eq!(median(&[1.0, 2.0, 4.0, 5.0]), 3.0);
    }
}
