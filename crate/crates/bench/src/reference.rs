use nalgebra::{DVector, Vector3};
use sdc_mpc::mpc::ReferenceProvider;

use crate::config::ReferenceConfig;

/// Hover then circle. Attitude, yaw and body-rate references are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MissionReference {
    cfg: ReferenceConfig,
}

impl MissionReference {
    pub fn new(cfg: ReferenceConfig) -> Self {
        Self { cfg }
    }

    /// Position and velocity at time `t`.
    pub fn position_velocity(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let c = &self.cfg;
        if t < c.step_time {
            return (Vector3::from(c.hover_point), Vector3::zeros());
        }
        let theta = c.circle_rate * (t - c.step_time);
        let (s, co) = theta.sin_cos();
        let center = Vector3::from(c.circle_center);
        let p = center + Vector3::new(co, s, 0.0) * c.circle_radius;
        let v = Vector3::new(-s, co, 0.0) * (c.circle_radius * c.circle_rate);
        (p, v)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.position_velocity(t).0
    }
}

impl ReferenceProvider for MissionReference {
    fn state(&self, t: f64) -> DVector<f64> {
        let (p, v) = self.position_velocity(t);
        let mut x = DVector::zeros(12);
        x.rows_mut(0, 3).copy_from(&p);
        x.rows_mut(3, 3).copy_from(&v);
        x
    }
}
