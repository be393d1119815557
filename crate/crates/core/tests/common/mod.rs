#![allow(dead_code)]

use cogfactor::data_model::SubjectSeries;
use cogfactor::risk_model::RiskDataset;
use cogfactor::rng::substream;
use cogfactor::state_space::StateSpaceParams;
use cogfactor::trial_sim::{Arm, Disposition, SurvivalRecord};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random parameters and series with `J ≤ 4`, `Q ≤ 3`, `K ≤ 4`, `Q ≤ K`.
pub fn random_instance<R: Rng>(rng: &mut R) -> (SubjectSeries, StateSpaceParams) {
    let q = rng.random_range(1..=3);
    let k = rng.random_range(q..=4);
    let j = rng.random_range(1..=4);
    let params = StateSpaceParams {
        loadings: DMatrix::from_fn(k, q, |_, _| rng.random_range(-1.5..1.5)),
        measurement_var: DVector::from_fn(k, |_, _| rng.random_range(0.1..1.0)),
        innovation_cov: random_spd(q, rng),
        prior_mean: DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0)),
        prior_cov: random_spd(q, rng),
    };
    let mut day = 0.0;
    let days: Vec<f64> = (0..j)
        .map(|i| {
            if i > 0 {
                day += rng.random_range(100.0..800.0_f64).round();
            }
            day
        })
        .collect();
    let scores = DMatrix::from_fn(j, k, |_, _| rng.random_range(-2.0..2.0));
    (SubjectSeries::from_scores("s", days, scores), params)
}

pub fn truncated(series: &SubjectSeries, visits: usize) -> SubjectSeries {
    SubjectSeries::from_scores(
        series.subject_id.clone(),
        series.visit_days[..visits].to_vec(),
        series.scores.rows(0, visits).into_owned(),
    )
}

pub fn record(id: usize, time: f64, event: bool, arm: Arm, education: f64) -> SurvivalRecord {
    SurvivalRecord {
        subject_id: format!("s{id}"),
        time,
        disposition: if event {
            Disposition::Converted
        } else {
            Disposition::Censored
        },
        arm,
        adjusters: [0.0, education, 1.0],
    }
}

/// Breslow partial log-likelihood, evaluated by brute force over risk sets.
pub fn oracle_pll(recs: &[SurvivalRecord], beta: &[f64]) -> f64 {
    let lin = |r: &SurvivalRecord| {
        let t = if r.arm == Arm::Treatment { 1.0 } else { 0.0 };
        beta[0] * t + beta.get(1).map_or(0.0, |b| b * r.adjusters[1])
    };
    recs.iter()
        .filter(|r| r.disposition == Disposition::Converted)
        .map(|r| {
            let denom: f64 = recs
                .iter()
                .filter(|o| o.time >= r.time)
                .map(|o| lin(o).exp())
                .sum();
            lin(r) - denom.ln()
        })
        .sum()
}

pub fn grid_max(recs: &[SurvivalRecord], dims: usize) -> Vec<f64> {
    let mut center = vec![0.0; dims];
    let mut half = 4.0;
    while half > 1e-6 {
        let step = half / 8.0;
        let mut best = (f64::NEG_INFINITY, center.clone());
        let n = 17i32.pow(dims as u32);
        for code in 0..n {
            let mut c = code;
            let b: Vec<f64> = (0..dims)
                .map(|d| {
                    let i = c % 17 - 8;
                    c /= 17;
                    center[d] + f64::from(i) * step
                })
                .collect();
            let ll = oracle_pll(recs, &b);
            if ll > best.0 {
                best = (ll, b);
            }
        }
        center = best.1;
        half = step * 2.0;
    }
    center
}

pub fn small_instance(seed: u64, with_education: bool) -> Vec<SurvivalRecord> {
    let mut rng = substream(seed, &[]);
    loop {
        let recs: Vec<SurvivalRecord> = (0..20)
            .map(|i| {
                let arm = if i % 2 == 0 {
                    Arm::Treatment
                } else {
                    Arm::Control
                };
                let edu = if with_education {
                    rng.random_range(8..=20) as f64
                } else {
                    16.0
                };
                record(
                    i,
                    rng.random_range(30..1100) as f64,
                    rng.random::<f64>() < 0.5,
                    arm,
                    edu,
                )
            })
            .collect();
        // both arms need events and censorings for a finite optimum
        let has = |arm: Arm, ev: bool| recs.iter().any(|r| r.arm == arm && r.is_event() == ev);
        if has(Arm::Treatment, true)
            && has(Arm::Control, true)
            && has(Arm::Treatment, false)
            && has(Arm::Control, false)
        {
            return recs;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rows of standard normal predictors with outcomes drawn from the
/// logistic model `intercept + Σ coef_j x_j`.
pub fn simulate(n: usize, intercept: f64, coef: &[f64], seed: u64) -> RiskDataset {
    let mut rng = substream(seed, &[]);
    let p = coef.len();
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = (0..n)
        .map(|i| {
            let eta = intercept + (0..p).map(|j| coef[j] * x[(i, j)]).sum::<f64>();
            rng.random::<f64>() < sigmoid(eta)
        })
        .collect();
    RiskDataset::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..p).map(|j| format!("x{j}")).collect(),
        x,
        y,
    )
    .unwrap()
}

/// Plain Bernoulli log-likelihood, written independently of the library.
pub fn oracle_ll(x: &[f64], y: &[bool], b0: f64, b1: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let p = sigmoid(b0 + b1 * xi);
            if yi {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn grid_search(x: &[f64], y: &[bool]) -> (f64, f64) {
    let (mut c0, mut c1, mut half) = (0.0, 0.0, 4.0);
    while half > 1e-6 {
        let step = half / 10.0;
        let mut best = (f64::NEG_INFINITY, c0, c1);
        for i in -10..=10 {
            for j in -10..=10 {
                let (b0, b1) = (c0 + f64::from(i) * step, c1 + f64::from(j) * step);
                let ll = oracle_ll(x, y, b0, b1);
                if ll > best.0 {
                    best = (ll, b0, b1);
                }
            }
        }
        (c0, c1) = (best.1, best.2);
        half = step * 2.0;
    }
    (c0, c1)
}
