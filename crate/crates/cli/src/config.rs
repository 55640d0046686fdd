//! The TOML run-configuration schema.
//!
//! Every key has a default, unknown keys are rejected, and the fully
//! resolved document is echoed into each output directory so every artifact
//! records exactly what produced it.

use serde::{Deserialize, Serialize};

use satflow::dynamics::{rpm_to_rad_s, Disturbance, SpacecraftParams};
use satflow::evaluation::NoiseKind;
use satflow::flow::ModelConfig;
use satflow::math::{Matrix3, Quaternion, Vec3};
use satflow::mpc::{ClosedLoopConfig, MpcConfig};
use satflow::sim::{FeedbackGains, SimConfig};
use satflow::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; subcommands derive their streams from it.
    pub seed: u64,
    pub spacecraft: SpacecraftSection,
    pub sim: SimSection,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub mpc: MpcConfig,
    pub maneuver: ManeuverSection,
    pub evaluation: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            spacecraft: SpacecraftSection::default(),
            sim: SimSection::default(),
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            mpc: MpcConfig::default(),
            maneuver: ManeuverSection::default(),
            evaluation: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacecraftSection {
    pub inertia_body: [[f64; 3]; 3],
    pub inertia_wheels_diag: [f64; 3],
    pub mass: f64,
    pub max_wheel_torque: f64,
    pub max_wheel_speed_rpm: f64,
    pub control_dt: f64,
}

impl Default for SpacecraftSection {
    fn default() -> Self {
        Self {
            inertia_body: [
                [5.700, 0.045, 0.002],
                [0.045, 3.300, 0.012],
                [0.002, 0.012, 6.100],
            ],
            inertia_wheels_diag: [0.001, 0.001, 0.001],
            mass: 58.0,
            max_wheel_torque: 0.05,
            max_wheel_speed_rpm: 6000.0,
            control_dt: 0.1,
        }
    }
}

impl SpacecraftSection {
    pub fn to_params(&self) -> satflow::Result<SpacecraftParams> {
        SpacecraftParams::new(
            Matrix3::from_rows(
                self.inertia_body[0],
                self.inertia_body[1],
                self.inertia_body[2],
            ),
            Matrix3::diagonal(
                self.inertia_wheels_diag[0],
                self.inertia_wheels_diag[1],
                self.inertia_wheels_diag[2],
            ),
            self.mass,
            self.max_wheel_torque,
            rpm_to_rad_s(self.max_wheel_speed_rpm),
            self.control_dt,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub duration: f64,
    pub sim_dt: f64,
    pub initial_wheel_speed_rpm: (f64, f64),
    pub disturbance: Disturbance,
    pub gain_attitude: f64,
    pub gain_rate: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration: 180.0,
            sim_dt: 0.001,
            initial_wheel_speed_rpm: (-300.0, 300.0),
            disturbance: Disturbance::None,
            gain_attitude: 0.36,
            gain_rate: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_runs: usize,
    pub test_runs: usize,
    /// Body-inertia and mass multiplier of the test-set spacecraft.
    pub test_inertia_scale: f64,
    /// Window length `S`.
    pub steps: usize,
    /// Also write the samples as CSV next to the binary file.
    pub export_csv: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_runs: 300,
            test_runs: 50,
            test_inertia_scale: 1.1,
            steps: 10,
            export_csv: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverSection {
    /// Rest-to-rest rotation axis (normalized before use).
    pub axis: [f64; 3],
    pub angle_deg: f64,
    pub duration: f64,
    pub sim_dt: f64,
    pub disturbance: Disturbance,
}

impl Default for ManeuverSection {
    fn default() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle_deg: 90.0,
            duration: 360.0,
            sim_dt: 0.001,
            disturbance: Disturbance::None,
        }
    }
}

impl ManeuverSection {
    pub fn reference_attitude(&self) -> Quaternion {
        let axis = Vec3::from_array(self.axis);
        let axis = axis * (1.0 / axis.norm());
        Quaternion::from_axis_angle(axis, self.angle_deg.to_radians())
    }

    pub fn closed_loop_config(&self) -> ClosedLoopConfig {
        ClosedLoopConfig {
            duration: self.duration,
            sim_dt: self.sim_dt,
            disturbance: self.disturbance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub noise_runs: usize,
    pub noise_level: f64,
    pub noise_kind: NoiseKind,
    /// Lag of the stability error, seconds.
    pub spe_delta_s: f64,
    /// Post-settling boundary for the stability error, seconds.
    pub spe_settle_s: f64,
    /// Interpret the lag as control steps instead of seconds.
    pub spe_lag_in_steps: bool,
    /// Self-loop horizon.
    pub self_loop_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            noise_runs: 10,
            noise_level: 0.10,
            noise_kind: NoiseKind::Multiplicative,
            spe_delta_s: 10.0,
            spe_settle_s: 120.0,
            spe_lag_in_steps: false,
            self_loop_steps: 10,
        }
    }
}

impl RunConfig {
    pub fn sim_config(&self, seed: u64) -> satflow::Result<SimConfig> {
        let params = self.spacecraft.to_params()?;
        let mut cfg = SimConfig::new(params, seed);
        cfg.duration = self.sim.duration;
        cfg.sim_dt = self.sim.sim_dt;
        cfg.control_dt = self.spacecraft.control_dt;
        cfg.initial_wheel_speed_range_rpm = self.sim.initial_wheel_speed_rpm;
        cfg.disturbance = self.sim.disturbance;
        cfg.gains = FeedbackGains {
            attitude: self.sim.gain_attitude,
            rate: self.sim.gain_rate,
        };
        Ok(cfg)
    }
}
