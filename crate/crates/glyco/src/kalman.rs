//! Linear-Gaussian Kalman filtering and Rauch-Tung-Striebel smoothing.
//!
//! The forward pass runs the standard time/measure update recursions;
//! missing slots apply the time update only, which interpolates gaps.
//! The backward RTS pass refines every estimate with future data and
//! produces per-slot mean and variance for the CGM channel.
//!
//! Two equations in the source material are printed incorrectly and are
//! implemented in their standard forms: the measure update includes the
//! additive prior mean (x_hat = x_bar + K(y - H x_bar)), and the smoother
//! gain uses the transposed transition matrix (C = P_hat phi^T P_bar^-1).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ingest::GriddedSeries;

#[derive(Debug, Error)]
pub enum KalmanError {
    #[error("non-finite arithmetic at step {step}")]
    NonFinite { step: usize },
    #[error("innovation variance not positive at step {step}")]
    BadInnovation { step: usize },
    #[error("singular prior covariance in smoother at step {step}")]
    SingularPrior { step: usize },
}

/// Discrete-time linear-Gaussian state-space model, one step per grid slot.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    /// State transition (n x n).
    pub phi: DMatrix<f64>,
    /// Input matrix (n x m); zero-width when there is no exogenous input.
    pub b: DMatrix<f64>,
    /// Measurement matrix (1 x n).
    pub h: DMatrix<f64>,
    /// Process-noise covariance (n x n).
    pub q: DMatrix<f64>,
    /// Measurement-noise variance.
    pub r: f64,
    /// Initial state mean.
    pub x0: DVector<f64>,
    /// Initial state covariance.
    pub p0: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn state_dim(&self) -> usize {
        self.phi.nrows()
    }
}

/// Per-step output of the forward filter pass.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
    pub measured: bool,
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub steps: Vec<FilterStep>,
}

/// Per-slot smoothed mean and variance in measurement space.
#[derive(Debug, Clone)]
pub struct SmoothedSeries {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl SmoothedSeries {
    /// CSV export `slot_ts,mean,variance,raw_value,measured` against the
    /// raw gridded series the smoother ran on.
    pub fn to_csv(&self, raw: &GriddedSeries) -> String {
        use std::fmt::Write as _;
        assert_eq!(self.mean.len(), raw.len());
        let mut out = String::from("slot_ts,mean,variance,raw_value,measured\n");
        for slot in 0..raw.len() {
            let raw_v = raw.values[slot];
            let _ = writeln!(
                out,
                "{},{:?},{:?},{},{}",
                raw.slot_ts(slot).0,
                self.mean[slot],
                self.variance[slot],
                raw_v.map(|v| format!("{v:?}")).unwrap_or_default(),
                raw_v.is_some(),
            );
        }
        out
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Time update: x_bar = phi x_hat + B u; P_bar = phi P_hat phi^T + Q.
pub fn time_update(
    model: &LinearGaussianModel,
    x_prev: &DVector<f64>,
    p_prev: &DMatrix<f64>,
    u: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>), KalmanError> {
    let mut x_bar = &model.phi * x_prev;
    if let Some(u) = u {
        x_bar += &model.b * u;
    }
    let mut p_bar = &model.phi * p_prev * model.phi.transpose() + &model.q;
    symmetrize(&mut p_bar);
    if !all_finite_vec(&x_bar) || !all_finite_mat(&p_bar) {
        return Err(KalmanError::NonFinite { step: 0 });
    }
    Ok((x_bar, p_bar))
}

/// Measure update: K = P_bar H^T / (H P_bar H^T + R);
/// x_hat = x_bar + K (y - H x_bar); P_hat = (I - K H) P_bar.
pub fn measure_update(
    model: &LinearGaussianModel,
    x_bar: &DVector<f64>,
    p_bar: &DMatrix<f64>,
    y: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), KalmanError> {
    let n = model.state_dim();
    let s = (&model.h * p_bar * model.h.transpose())[(0, 0)] + model.r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(KalmanError::BadInnovation { step: 0 });
    }
    let k = p_bar * model.h.transpose() / s;
    let innovation = y - (&model.h * x_bar)[(0, 0)];
    let x_hat = x_bar + &k * innovation;
    let mut p_hat = (DMatrix::identity(n, n) - &k * &model.h) * p_bar;
    symmetrize(&mut p_hat);
    if !all_finite_vec(&x_hat) || !all_finite_mat(&p_hat) {
        return Err(KalmanError::NonFinite { step: 0 });
    }
    Ok((x_hat, p_hat))
}

fn at_step(e: KalmanError, step: usize) -> KalmanError {
    match e {
        KalmanError::NonFinite { .. } => KalmanError::NonFinite { step },
        KalmanError::BadInnovation { .. } => KalmanError::BadInnovation { step },
        other => other,
    }
}

/// Forward filter pass over a gridded series. Missing slots get the time
/// update only, so the posteriori trajectory interpolates through gaps.
pub fn run_filter(
    model: &LinearGaussianModel,
    g: &GriddedSeries,
    inputs: Option<&[DVector<f64>]>,
) -> Result<FilterResult, KalmanError> {
    assert!(!g.is_empty(), "run_filter precondition: series non-empty");
    let mut steps = Vec::with_capacity(g.len());
    let mut x_hat = model.x0.clone();
    let mut p_hat = model.p0.clone();
    for (k, slot) in g.values.iter().enumerate() {
        let (x_bar, p_bar) = if k == 0 {
            // Slot 0 is estimated directly from the initial prior.
            (model.x0.clone(), model.p0.clone())
        } else {
            let u = inputs.map(|us| &us[k - 1]);
            time_update(model, &x_hat, &p_hat, u).map_err(|e| at_step(e, k))?
        };
        let measured = slot.is_some();
        let (post_mean, post_cov) = match slot {
            Some(y) => measure_update(model, &x_bar, &p_bar, *y).map_err(|e| at_step(e, k))?,
            None => (x_bar.clone(), p_bar.clone()),
        };
        x_hat = post_mean.clone();
        p_hat = post_cov.clone();
        steps.push(FilterStep {
            prior_mean: x_bar,
            prior_cov: p_bar,
            post_mean,
            post_cov,
            measured,
        });
    }
    Ok(FilterResult { steps })
}

/// Backward RTS pass. The smoother gain solves against the next step's
/// prior covariance via pseudo-inverse (singular-value cutoff 1e-10).
pub fn rts_smooth(
    model: &LinearGaussianModel,
    fr: &FilterResult,
) -> Result<SmoothedSeries, KalmanError> {
    assert!(!fr.steps.is_empty(), "rts_smooth precondition: non-empty");
    let t = fr.steps.len();
    let mut sm_mean: Vec<DVector<f64>> = vec![DVector::zeros(0); t];
    let mut sm_cov: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); t];
    sm_mean[t - 1] = fr.steps[t - 1].post_mean.clone();
    sm_cov[t - 1] = fr.steps[t - 1].post_cov.clone();

    for k in (0..t - 1).rev() {
        let next = &fr.steps[k + 1];
        let prior_inv = next
            .prior_cov
            .clone()
            .pseudo_inverse(1e-10)
            .map_err(|_| KalmanError::SingularPrior { step: k })?;
        let c = &fr.steps[k].post_cov * model.phi.transpose() * prior_inv;
        let mean = &fr.steps[k].post_mean + &c * (&sm_mean[k + 1] - &next.prior_mean);
        let mut cov =
            &fr.steps[k].post_cov + &c * (&sm_cov[k + 1] - &next.prior_cov) * c.transpose();
        symmetrize(&mut cov);
        if !all_finite_vec(&mean) || !all_finite_mat(&cov) {
            return Err(KalmanError::NonFinite { step: k });
        }
        sm_mean[k] = mean;
        sm_cov[k] = cov;
    }

    let mut mean = Vec::with_capacity(t);
    let mut variance = Vec::with_capacity(t);
    for k in 0..t {
        mean.push((&model.h * &sm_mean[k])[(0, 0)]);
        let v = (&model.h * &sm_cov[k] * model.h.transpose())[(0, 0)];
        variance.push(v.max(0.0));
    }
    Ok(SmoothedSeries { mean, variance })
}

/// Fallback initial glucose level when a series has no present slot.
const DEFAULT_INITIAL_GLUCOSE: f64 = 120.0;

/// Two-state constant-velocity glucose model: state = (level mg/dl,
/// trend mg/dl per slot), discrete white-noise-acceleration process noise.
pub fn default_glucose_model(q_scale: f64, r: f64, g: &GriddedSeries) -> LinearGaussianModel {
    assert!(q_scale > 0.0 && r > 0.0);
    let first = g
        .values
        .iter()
        .flatten()
        .next()
        .copied()
        .unwrap_or(DEFAULT_INITIAL_GLUCOSE);
    LinearGaussianModel {
        phi: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        b: DMatrix::zeros(2, 0),
        h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        q: DMatrix::from_row_slice(2, 2, &[q_scale / 4.0, q_scale / 2.0, q_scale / 2.0, q_scale]),
        r,
        x0: DVector::from_column_slice(&[first, 0.0]),
        p0: DMatrix::from_diagonal(&DVector::from_column_slice(&[r, 1.0])),
    }
}

/// Smooths a gridded CGM series with the default glucose model.
pub fn smooth_cgm(g: &GriddedSeries, q_scale: f64, r: f64) -> Result<SmoothedSeries, KalmanError> {
    let model = default_glucose_model(q_scale, r, g);
    let fr = run_filter(&model, g, None)?;
    rts_smooth(&model, &fr)
}
