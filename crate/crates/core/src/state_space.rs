//! Kalman filter, smoother and forward-filtering backward-sampling for the
//! random-walk factor model
//!
//! ```text
//! y_j = G α_j + ε_j,          ε_j ~ N(0, diag(σ²_ε))
//! α_j = α_{j-1} + η_j,        η_j ~ N(0, δ_j Σ_η)
//! α_1 ~ N(m₀, P₀)
//! ```
//!
//! where `δ_j` is the gap between visits `j - 1` and `j` in years. The first
//! visit takes the prior as its predicted state; no innovation is added
//! before the first update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;

use crate::data_model::SubjectSeries;
use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, cholesky_jittered, sample_mvn, spd_inverse, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceParams {
    /// `K × Q` loading matrix.
    pub loadings: DMatrix<f64>,
    /// Diagonal of the measurement covariance, length `K`.
    pub measurement_var: DVector<f64>,
    /// Per-year state innovation covariance, `Q × Q`.
    pub innovation_cov: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl StateSpaceParams {
    pub fn n_tests(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// Checks shapes and positivity. Unit diagonal of the innovation
    /// covariance is a property of the fitted model, not of the recursions,
    /// so it is not enforced here.
    pub fn validate(&self) -> Result<()> {
        let (k, q) = self.loadings.shape();
        if self.measurement_var.len() != k {
            return Err(Error::Dimension(format!(
                "measurement_var has length {}, expected {k}",
                self.measurement_var.len()
            )));
        }
        if self.innovation_cov.shape() != (q, q) || self.prior_cov.shape() != (q, q) {
            return Err(Error::Dimension(format!(
                "state covariances must be {q}×{q}"
            )));
        }
        if self.prior_mean.len() != q {
            return Err(Error::Dimension(format!("prior_mean must have length {q}")));
        }
        if self.measurement_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "measurement variances must be positive".into(),
            ));
        }
        Ok(())
    }

    fn check_series(&self, series: &SubjectSeries) -> Result<()> {
        if series.n_visits() == 0 {
            return Err(Error::Empty(format!(
                "subject `{}` has no visits",
                series.subject_id
            )));
        }
        if series.scores.shape() != (series.n_visits(), self.n_tests()) {
            return Err(Error::Dimension(format!(
                "subject `{}` scores are {:?}, expected ({}, {})",
                series.subject_id,
                series.scores.shape(),
                series.n_visits(),
                self.n_tests()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    /// Gap to the previous visit in years (0 for the first visit).
    pub gap_years: f64,
    pub predicted_mean: DVector<f64>,
    pub predicted_cov: DMatrix<f64>,
    pub updated_mean: DVector<f64>,
    pub updated_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub steps: Vec<FilterStep>,
    /// Exact Gaussian log-likelihood of the subject's observations.
    pub log_likelihood: f64,
}

impl FilterResult {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    SmoothedMean,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorTrajectory {
    pub kind: TrajectoryKind,
    pub states: Vec<DVector<f64>>,
}

/// Forward predict/update pass with Joseph-form covariance updates.
pub fn kalman_filter(series: &SubjectSeries, params: &StateSpaceParams) -> Result<FilterResult> {
    params.validate()?;
    params.check_series(series)?;
    let g = &params.loadings;
    let k = params.n_tests();
    let q = params.n_factors();
    let r = DMatrix::from_diagonal(&params.measurement_var);
    let eye = DMatrix::<f64>::identity(q, q);

    let mut steps: Vec<FilterStep> = Vec::with_capacity(series.n_visits());
    let mut log_likelihood = 0.0;
    for j in 0..series.n_visits() {
        let (gap_years, a, p) = match steps.last() {
            None => (0.0, params.prior_mean.clone(), params.prior_cov.clone()),
            Some(prev) => {
                let gap = series.gap_years(j);
                let mut p = &prev.updated_cov + &params.innovation_cov * gap;
                symmetrize(&mut p);
                (gap, prev.updated_mean.clone(), p)
            }
        };
        let y = series.observation(j);
        let innovation = &y - g * &a;
        let pgt = &p * g.transpose();
        let mut s = g * &pgt + &r;
        symmetrize(&mut s);
        let chol = cholesky_jittered(&s, &format!("innovation covariance at visit {j}"))?;
        // K = P Gᵀ S⁻¹
        let gain = chol.solve(&pgt.transpose()).transpose();
        let updated_mean = &a + &gain * &innovation;
        let ikg = &eye - &gain * g;
        let mut updated_cov = &ikg * &p * ikg.transpose() + &gain * &r * gain.transpose();
        symmetrize(&mut updated_cov);

        let quad = innovation.dot(&chol.solve(&innovation));
        log_likelihood -= 0.5 * (k as f64 * (2.0 * PI).ln() + chol_log_det(&chol) + quad);

        steps.push(FilterStep {
            gap_years,
            predicted_mean: a,
            predicted_cov: p,
            updated_mean,
            updated_cov,
        });
    }
    Ok(FilterResult {
        steps,
        log_likelihood,
    })
}

fn check_filter(filter: &FilterResult, params: &StateSpaceParams) -> Result<()> {
    let q = params.n_factors();
    if filter.is_empty() {
        return Err(Error::Empty("filter result has no visits".into()));
    }
    if filter
        .steps
        .iter()
        .any(|s| s.updated_mean.len() != q || s.updated_cov.shape() != (q, q))
    {
        return Err(Error::Dimension(format!(
            "filter states do not have {q} factors"
        )));
    }
    Ok(())
}

/// Backward gain `C_j P_{j+1}⁻¹`.
fn smoother_gain(filter: &FilterResult, j: usize) -> Result<DMatrix<f64>> {
    let next = &filter.steps[j + 1];
    let p_inv = spd_inverse(
        &next.predicted_cov,
        &format!("predicted covariance at visit {}", j + 1),
    )?;
    Ok(&filter.steps[j].updated_cov * p_inv)
}

/// Rauch–Tung–Striebel smoother: marginal posterior mean and covariance of
/// every state given all of the subject's observations.
pub fn kalman_smoother(
    filter: &FilterResult,
    params: &StateSpaceParams,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    check_filter(filter, params)?;
    let n = filter.len();
    let mut out = vec![(DVector::zeros(0), DMatrix::zeros(0, 0)); n];
    let last = &filter.steps[n - 1];
    out[n - 1] = (last.updated_mean.clone(), last.updated_cov.clone());
    for j in (0..n - 1).rev() {
        let gain = smoother_gain(filter, j)?;
        let next = &filter.steps[j + 1];
        let (ms_next, ps_next) = &out[j + 1];
        let mean = &filter.steps[j].updated_mean + &gain * (ms_next - &next.predicted_mean);
        let mut cov = &filter.steps[j].updated_cov
            + &gain * (ps_next - &next.predicted_cov) * gain.transpose();
        symmetrize(&mut cov);
        out[j] = (mean, cov);
    }
    Ok(out)
}

/// Smoothed means packaged as a trajectory.
pub fn smoothed_trajectory(
    filter: &FilterResult,
    params: &StateSpaceParams,
) -> Result<FactorTrajectory> {
    Ok(FactorTrajectory {
        kind: TrajectoryKind::SmoothedMean,
        states: kalman_smoother(filter, params)?
            .into_iter()
            .map(|(m, _)| m)
            .collect(),
    })
}

/// Conditional moments of `α_j` given `α_{j+1}` and `y_{1:j}`.
pub fn backward_conditional(
    filter: &FilterResult,
    j: usize,
    next_state: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let gain = smoother_gain(filter, j)?;
    let step = &filter.steps[j];
    let next = &filter.steps[j + 1];
    let mean = &step.updated_mean + &gain * (next_state - &next.predicted_mean);
    let mut cov = &step.updated_cov - &gain * &next.predicted_cov * gain.transpose();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Draws a full state trajectory from its joint posterior: the last state
/// from the filtered distribution, then each earlier state conditionally on
/// the one drawn after it.
pub fn ffbs_sample<R: Rng + ?Sized>(
    filter: &FilterResult,
    params: &StateSpaceParams,
    rng: &mut R,
) -> Result<FactorTrajectory> {
    check_filter(filter, params)?;
    let n = filter.len();
    let mut states = vec![DVector::zeros(0); n];
    let last = &filter.steps[n - 1];
    let chol = cholesky_jittered(
        &last.updated_cov,
        &format!("filtered covariance at visit {}", n - 1),
    )?;
    states[n - 1] = sample_mvn(&last.updated_mean, &chol, rng);
    for j in (0..n - 1).rev() {
        let (mean, cov) = backward_conditional(filter, j, &states[j + 1])?;
        let chol = cholesky_jittered(&cov, &format!("backward covariance at visit {j}"))?;
        states[j] = sample_mvn(&mean, &chol, rng);
    }
    Ok(FactorTrajectory {
        kind: TrajectoryKind::Sampled,
        states,
    })
}

/// Largest stacked dimension `J (K + Q)` the dense oracle accepts.
pub const ORACLE_DIMENSION_CAP: usize = 50;

/// Exact posterior over stacked states from dense joint-Gaussian
/// conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    /// Stacked `J Q` posterior mean of `(α_1, …, α_J)`.
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    /// Log-density of the stacked observations under the model.
    pub log_likelihood: f64,
    pub n_factors: usize,
}

impl JointGaussian {
    pub fn visit_mean(&self, j: usize) -> DVector<f64> {
        let q = self.n_factors;
        self.state_mean.rows(j * q, q).into_owned()
    }

    pub fn visit_cov(&self, j: usize) -> DMatrix<f64> {
        let q = self.n_factors;
        self.state_cov.view((j * q, j * q), (q, q)).into_owned()
    }
}

/// Builds the joint Gaussian of stacked states and observations and
/// conditions on the observations with dense linear algebra. Only intended
/// as a reference for small problems.
pub fn joint_gaussian_oracle(
    series: &SubjectSeries,
    params: &StateSpaceParams,
) -> Result<JointGaussian> {
    params.validate()?;
    params.check_series(series)?;
    let j_n = series.n_visits();
    let k = params.n_tests();
    let q = params.n_factors();
    let requested = j_n * (k + q);
    if requested > ORACLE_DIMENSION_CAP {
        return Err(Error::OracleTooLarge {
            requested,
            cap: ORACLE_DIMENSION_CAP,
        });
    }

    // Cov(α_a, α_b) = P₀ + Σ_η · (elapsed years up to min(a, b)).
    let mut elapsed = vec![0.0; j_n];
    for j in 1..j_n {
        elapsed[j] = elapsed[j - 1] + series.gap_years(j);
    }
    let mut state_cov = DMatrix::zeros(j_n * q, j_n * q);
    for a in 0..j_n {
        for b in 0..j_n {
            let block = &params.prior_cov + &params.innovation_cov * elapsed[a.min(b)];
            state_cov.view_mut((a * q, b * q), (q, q)).copy_from(&block);
        }
    }
    let mut state_mean = DVector::zeros(j_n * q);
    for a in 0..j_n {
        state_mean.rows_mut(a * q, q).copy_from(&params.prior_mean);
    }

    let mut h = DMatrix::zeros(j_n * k, j_n * q);
    for a in 0..j_n {
        h.view_mut((a * k, a * q), (k, q))
            .copy_from(&params.loadings);
    }
    let mut noise = DMatrix::zeros(j_n * k, j_n * k);
    for a in 0..j_n {
        for i in 0..k {
            noise[(a * k + i, a * k + i)] = params.measurement_var[i];
        }
    }
    let mut y = DVector::zeros(j_n * k);
    for a in 0..j_n {
        y.rows_mut(a * k, k).copy_from(&series.observation(a));
    }

    let obs_mean = &h * &state_mean;
    let obs_cov = &h * &state_cov * h.transpose() + noise;
    let cross = &state_cov * h.transpose();
    let obs_inv = obs_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("oracle observation covariance".into()))?;
    let resid = &y - &obs_mean;
    let post_mean = &state_mean + &cross * &obs_inv * &resid;
    let mut post_cov = &state_cov - &cross * &obs_inv * cross.transpose();
    symmetrize(&mut post_cov);

    let det = obs_cov.determinant();
    if !(det > 0.0) {
        return Err(Error::NotPositiveDefinite(
            "oracle observation covariance".into(),
        ));
    }
    let n = (j_n * k) as f64;
    let log_likelihood = -0.5 * (n * (2.0 * PI).ln() + det.ln() + resid.dot(&(&obs_inv * &resid)));

    Ok(JointGaussian {
        state_mean: post_mean,
        state_cov: post_cov,
        log_likelihood,
        n_factors: q,
    })
}
