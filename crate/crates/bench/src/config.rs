//! Scenario configuration. Every field has a default, so an empty TOML file
//! describes the standard obstacle-avoidance tracking mission.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sdc_mpc::dynamics::QuadrotorParams;
use sdc_mpc::model::{ControlModel, LinearSurrogate, QuadrotorModel};
use sdc_mpc::mpc::{MpcConfig, ObstacleSpec, TerminalMode};
use sdc_mpc::observer::{DisturbanceObserver, DEFAULT_FILTER_GAIN};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Nmpc,
    Sdc,
    RobustSdc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Nmpc, ControllerKind::Sdc, ControllerKind::RobustSdc];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::Sdc => "sdc",
            ControllerKind::RobustSdc => "robust-sdc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceMode {
    Gaussian,
    ConstantBias,
    None,
}

/// Simulated plant; the controllers use the same model for prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    /// Nonlinear rigid body integrated with RK4.
    Quadrotor,
    /// Hover linearization, sampled exactly with a zero-order hold.
    HoverLinearization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalModeConfig {
    CostOnly,
    CostPlusPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrotorConfig {
    pub mass: f64,
    pub inertia_diag: [f64; 3],
    pub gravity: f64,
}

impl Default for QuadrotorConfig {
    fn default() -> Self {
        let p = QuadrotorParams::default();
        Self {
            mass: p.mass,
            inertia_diag: p.inertia_diag.into(),
            gravity: p.gravity,
        }
    }
}

/// MPC tuning; `q` and `r` are the diagonals of the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub ts: f64,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub terminal_mode: TerminalModeConfig,
    pub terminal_penalty_weight: f64,
    pub sqp_max_iters: usize,
    pub sqp_tol: f64,
    pub kappa: f64,
    pub soft_penalty: f64,
    pub margin_ramp_steps: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        let c = MpcConfig::default();
        Self {
            horizon: c.horizon,
            ts: c.ts,
            q: c.q.diagonal().iter().copied().collect(),
            r: c.r.diagonal().iter().copied().collect(),
            u_min: c.u_min.iter().copied().collect(),
            u_max: c.u_max.iter().copied().collect(),
            terminal_mode: TerminalModeConfig::CostOnly,
            terminal_penalty_weight: c.terminal_penalty_weight,
            sqp_max_iters: c.sqp_max_iters,
            sqp_tol: c.sqp_tol,
            kappa: c.kappa,
            soft_penalty: c.soft_penalty,
            margin_ramp_steps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleConfig {
    pub enabled: bool,
    pub center: [f64; 2],
    pub radius: f64,
    pub inflation_margin: f64,
}

impl Default for ObstacleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            center: [-1.0, -1.0],
            radius: 0.5,
            inflation_margin: 0.12,
        }
    }
}

/// Hover until `step_time`, then a constant-rate circle starting at angle 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub hover_point: [f64; 3],
    pub step_time: f64,
    pub circle_center: [f64; 3],
    pub circle_radius: f64,
    pub circle_rate: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            hover_point: [1.5, 0.0, 1.0],
            step_time: 4.0,
            circle_center: [0.0, 0.0, 1.0],
            circle_radius: 1.5,
            circle_rate: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub filter_gain: f64,
    pub saturate: bool,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            filter_gain: DEFAULT_FILTER_GAIN,
            saturate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub seed: u64,
    pub noise_std_force: f64,
    pub noise_std_torque: f64,
    pub disturbance_mode: DisturbanceMode,
    /// Force then torque components used in constant-bias mode.
    pub constant_bias: [f64; 6],
    pub controllers: Vec<ControllerKind>,
    pub plant: PlantKind,
    /// Initial hover position; the reference at `t = 0` when absent.
    pub initial_position: Option<[f64; 3]>,
    pub quadrotor: QuadrotorConfig,
    pub mpc: MpcSection,
    pub obstacle: ObstacleConfig,
    pub reference: ReferenceConfig,
    pub observer: ObserverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: 20.0,
            seed: 42,
            noise_std_force: 0.3,
            noise_std_torque: 0.1,
            disturbance_mode: DisturbanceMode::Gaussian,
            constant_bias: [0.3, 0.3, 0.0, 0.0, 0.0, 0.0],
            controllers: ControllerKind::ALL.to_vec(),
            plant: PlantKind::Quadrotor,
            initial_position: None,
            quadrotor: QuadrotorConfig::default(),
            mpc: MpcSection::default(),
            obstacle: ObstacleConfig::default(),
            reference: ReferenceConfig::default(),
            observer: ObserverConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, BenchError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |msg: &str| Err(BenchError::Config(msg.to_string()));
        if !(self.duration > 0.0) {
            return fail("duration must be positive");
        }
        if !(self.noise_std_force >= 0.0 && self.noise_std_torque >= 0.0) {
            return fail("noise standard deviations must be nonnegative");
        }
        if self.obstacle.enabled && !(self.obstacle.radius > 0.0 && self.obstacle.inflation_margin >= 0.0) {
            return fail("obstacle radius must be positive and its margin nonnegative");
        }
        if !(self.reference.circle_radius >= 0.0) {
            return fail("circle radius must be nonnegative");
        }
        self.params().validate().map_err(|e| BenchError::Config(e.to_string()))?;
        let model = self.model()?;
        self.mpc_config()
            .validate(model.state_dim(), model.input_dim())
            .map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Number of control steps, `duration / ts` rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.duration / self.mpc.ts).round().max(1.0) as usize
    }

    pub fn params(&self) -> QuadrotorParams {
        QuadrotorParams {
            mass: self.quadrotor.mass,
            inertia_diag: Vector3::from(self.quadrotor.inertia_diag),
            gravity: self.quadrotor.gravity,
        }
    }

    pub fn model(&self) -> Result<Arc<dyn ControlModel>, BenchError> {
        Ok(match self.plant {
            PlantKind::Quadrotor => Arc::new(QuadrotorModel::new(self.params())),
            PlantKind::HoverLinearization => Arc::new(LinearSurrogate::hover_linearization(&self.params())?),
        })
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let m = &self.mpc;
        MpcConfig {
            horizon: m.horizon,
            ts: m.ts,
            q: DMatrix::from_diagonal(&DVector::from_column_slice(&m.q)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(&m.r)),
            u_min: DVector::from_column_slice(&m.u_min),
            u_max: DVector::from_column_slice(&m.u_max),
            terminal_mode: match m.terminal_mode {
                TerminalModeConfig::CostOnly => TerminalMode::CostOnly,
                TerminalModeConfig::CostPlusPenalty => TerminalMode::CostPlusPenalty,
            },
            terminal_penalty_weight: m.terminal_penalty_weight,
            sqp_max_iters: m.sqp_max_iters,
            sqp_tol: m.sqp_tol,
            kappa: m.kappa,
            soft_penalty: m.soft_penalty,
            margin_ramp_steps: m.margin_ramp_steps,
        }
    }

    pub fn obstacle_spec(&self) -> Option<ObstacleSpec> {
        self.obstacle.enabled.then(|| ObstacleSpec {
            center: Vector2::from(self.obstacle.center),
            radius: self.obstacle.radius,
            inflation_margin: self.obstacle.inflation_margin,
        })
    }

    pub fn disturbance_observer(&self) -> Result<DisturbanceObserver, BenchError> {
        let obs = DisturbanceObserver::new(6, self.observer.filter_gain, self.mpc.ts)?;
        Ok(if self.observer.saturate {
            obs.with_default_saturation()
        } else {
            obs
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.steps(), 200);
        assert_eq!(cfg.mpc_config().q, MpcConfig::default().q);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = 7;
        cfg.controllers = vec![ControllerKind::RobustSdc];
        cfg.initial_position = Some([0.0, 1.0, 2.0]);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ScenarioConfig::from_toml_str(
            "disturbance_mode = \"constant-bias\"\n[mpc]\nhorizon = 10\n[obstacle]\nenabled = false\n",
        )
        .unwrap();
        assert_eq!(cfg.disturbance_mode, DisturbanceMode::ConstantBias);
        assert_eq!(cfg.mpc.horizon, 10);
        assert_eq!(cfg.mpc.ts, 0.1);
        assert!(cfg.obstacle_spec().is_none());
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(matches!(ScenarioConfig::from_toml_str("duration = 0.0"), Err(BenchError::Config(_))));
        assert!(matches!(ScenarioConfig::from_toml_str("noise_std_force = -1.0"), Err(BenchError::Config(_))));
        assert!(matches!(ScenarioConfig::from_toml_str("[mpc]\nr = [1.0]"), Err(BenchError::Config(_))));
        assert!(matches!(ScenarioConfig::from_toml_str("unknown = 1"), Err(BenchError::Toml(_))));
    }
}
