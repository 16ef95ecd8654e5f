use nalgebra::{DVector, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{DisturbanceMode, ScenarioConfig};
use crate::BenchError;

/// One disturbance vector per control step, held constant over the step.
pub fn generate_disturbances(cfg: &ScenarioConfig) -> Result<Vec<Vector6<f64>>, BenchError> {
    let steps = cfg.steps();
    Ok(match cfg.disturbance_mode {
        DisturbanceMode::None => vec![Vector6::zeros(); steps],
        DisturbanceMode::ConstantBias => vec![Vector6::from(cfg.constant_bias); steps],
        DisturbanceMode::Gaussian => {
            let force = Normal::new(0.0, cfg.noise_std_force).map_err(|e| BenchError::Config(e.to_string()))?;
            let torque = Normal::new(0.0, cfg.noise_std_torque).map_err(|e| BenchError::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..steps)
                .map(|_| {
                    Vector6::from_fn(|i, _| {
                        if i < 3 {
                            force.sample(&mut rng)
                        } else {
                            torque.sample(&mut rng)
                        }
                    })
                })
                .collect()
        }
    })
}

/// SHA-256 over the little-endian bytes of the sequence.
pub fn sequence_digest(seq: &[Vector6<f64>]) -> String {
    let mut hasher = Sha256::new();
    for d in seq {
        for v in d.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn as_dvector(d: &Vector6<f64>) -> DVector<f64> {
    DVector::from_column_slice(d.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: DisturbanceMode) -> ScenarioConfig {
        ScenarioConfig {
            disturbance_mode: mode,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn none_is_zero() {
        let seq = generate_disturbances(&cfg(DisturbanceMode::None)).unwrap();
        assert_eq!(seq.len(), 200);
        assert!(seq.iter().all(|d| d.amax() == 0.0));
    }

    #[test]
    fn constant_bias_repeats_the_configured_vector() {
        let seq = generate_disturbances(&cfg(DisturbanceMode::ConstantBias)).unwrap();
        assert!(seq.iter().all(|d| *d == Vector6::new(0.3, 0.3, 0.0, 0.0, 0.0, 0.0)));
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = generate_disturbances(&cfg(DisturbanceMode::Gaussian)).unwrap();
        let b = generate_disturbances(&cfg(DisturbanceMode::Gaussian)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sequence_digest(&a), sequence_digest(&b));
        let other = ScenarioConfig {
            seed: 43,
            ..cfg(DisturbanceMode::Gaussian)
        };
        let c = generate_disturbances(&other).unwrap();
        assert_ne!(sequence_digest(&a), sequence_digest(&c));
    }

    #[test]
    fn sample_standard_deviations() {
        let long = ScenarioConfig {
            duration: 1e3,
            ..cfg(DisturbanceMode::Gaussian)
        };
        let seq = generate_disturbances(&long).unwrap();
        assert_eq!(seq.len(), 10_000);
        for (axis, expected) in [(0, 0.3), (1, 0.3), (2, 0.3), (3, 0.1), (4, 0.1), (5, 0.1)] {
            let n = seq.len() as f64;
            let mean = seq.iter().map(|d| d[axis]).sum::<f64>() / n;
            let var = seq.iter().map(|d| (d[axis] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let std = var.sqrt();
            assert!((std - expected).abs() <= 0.05 * expected, "axis {axis}: {std}");
        }
    }
}
