//! Disturbance estimation from the one-step prediction error of the nominal
//! discrete model, smoothed by a first-order low-pass filter.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sdc::{discretize_affine, SdcModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObserverError {
    #[error("disturbance map is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("filter gain {0} outside [0, 1)")]
    InvalidGain(f64),
}

pub const DEFAULT_FILTER_GAIN: f64 = 0.9;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceEstimate {
    pub d_hat: DVector<f64>,
    pub d_hat_prev: DVector<f64>,
    pub alpha: f64,
    pub last_prediction: Option<DVector<f64>>,
}

impl DisturbanceEstimate {
    pub fn new(dim: usize, alpha: f64) -> Result<Self, ObserverError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(ObserverError::InvalidGain(alpha));
        }
        Ok(Self {
            d_hat: DVector::zeros(dim),
            d_hat_prev: DVector::zeros(dim),
            alpha,
            last_prediction: None,
        })
    }
}

/// One step of the sampled nominal model with zero disturbance.
pub fn predict_nominal(x_prev: &DVector<f64>, u_prev: &DVector<f64>, model_prev: &SdcModel, ts: f64) -> DVector<f64> {
    discretize_affine(model_prev, ts).step(x_prev, u_prev)
}

/// Least-squares disturbance explaining the prediction error `e_k` through
/// the discrete disturbance map.
pub fn infer_disturbance(e_k: &DVector<f64>, e_dd: &DMatrix<f64>) -> Result<DVector<f64>, ObserverError> {
    if e_k.len() != e_dd.nrows() {
        return Err(ObserverError::Dimension(format!(
            "error has {} entries, map has {} rows",
            e_k.len(),
            e_dd.nrows()
        )));
    }
    let svd = e_dd.clone().svd(true, true);
    let sigma_min = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if e_dd.ncols() > e_dd.nrows() || sigma_min < RANK_TOL {
        return Err(ObserverError::RankDeficient(sigma_min));
    }
    svd.solve(e_k, 0.0).map_err(|_| ObserverError::RankDeficient(sigma_min))
}

/// `d_hat = alpha d_hat_prev + (1 - alpha) d_meas`.
pub fn update_estimate(state: &DisturbanceEstimate, d_meas: &DVector<f64>) -> DisturbanceEstimate {
    DisturbanceEstimate {
        d_hat: &state.d_hat * state.alpha + d_meas * (1.0 - state.alpha),
        d_hat_prev: state.d_hat.clone(),
        alpha: state.alpha,
        last_prediction: state.last_prediction.clone(),
    }
}

/// Stateful observer used once per control step: call [`update`] with the new
/// measurement before solving, then [`record`] with what was applied.
///
/// [`update`]: DisturbanceObserver::update
/// [`record`]: DisturbanceObserver::record
#[derive(Debug, Clone)]
pub struct DisturbanceObserver {
    pub estimate: DisturbanceEstimate,
    pub ts: f64,
    /// Optional symmetric clamp on each estimate entry.
    pub saturation: Option<DVector<f64>>,
    previous: Option<(DVector<f64>, DVector<f64>, SdcModel)>,
    pub last_measurement: Option<DVector<f64>>,
}

impl DisturbanceObserver {
    pub fn new(dim: usize, alpha: f64, ts: f64) -> Result<Self, ObserverError> {
        Ok(Self {
            estimate: DisturbanceEstimate::new(dim, alpha)?,
            ts,
            saturation: None,
            previous: None,
            last_measurement: None,
        })
    }

    /// Saturation of +-10 N on forces and +-2 N m on torques.
    pub fn with_default_saturation(mut self) -> Self {
        self.saturation = Some(DVector::from_vec(vec![10.0, 10.0, 10.0, 2.0, 2.0, 2.0]));
        self
    }

    pub fn d_hat(&self) -> &DVector<f64> {
        &self.estimate.d_hat
    }

    /// Updates the estimate from `x_meas`; no-op before the first [`record`](Self::record).
    pub fn update(&mut self, x_meas: &DVector<f64>) -> Result<&DVector<f64>, ObserverError> {
        let Some((x_prev, u_prev, model)) = &self.previous else {
            return Ok(&self.estimate.d_hat);
        };
        let disc = discretize_affine(model, self.ts);
        let prediction = disc.step(x_prev, u_prev);
        let d_meas = infer_disturbance(&(x_meas - &prediction), &disc.e)?;
        let mut next = update_estimate(&self.estimate, &d_meas);
        if let Some(limit) = &self.saturation {
            next.d_hat.zip_apply(limit, |v, l| *v = v.clamp(-l, l));
        }
        next.last_prediction = Some(prediction);
        self.estimate = next;
        self.last_measurement = Some(d_meas);
        Ok(&self.estimate.d_hat)
    }

    pub fn record(&mut self, x: &DVector<f64>, u: &DVector<f64>, model: &SdcModel) {
        self.previous = Some((x.clone(), u.clone(), model.clone()));
    }

    pub fn reset(&mut self) {
        let dim = self.estimate.d_hat.len();
        self.estimate.d_hat = DVector::zeros(dim);
        self.estimate.d_hat_prev = DVector::zeros(dim);
        self.estimate.last_prediction = None;
        self.previous = None;
        self.last_measurement = None;
    }
}
