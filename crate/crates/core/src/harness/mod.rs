//! Scenario configuration, calibration, Monte Carlo rollouts, baselines,
//! sweeps and output files.

pub mod baselines;
pub mod calibrate;
pub mod checks;
pub mod config;
pub mod episode;
pub mod io;
pub mod sweep;
pub mod trace;

use thiserror::Error;

pub use baselines::{baseline_policy, PolicyKind};
pub use calibrate::Calibration;
pub use config::{ConfigError, Duplex, ScenarioConfig};
pub use episode::{monte_carlo, run_episode, RunResult, Trajectory};
pub use sweep::{sweep_antennas, sweep_power};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("policy was built for scenario {policy}, not {scenario}")]
    HashMismatch { policy: String, scenario: String },
    #[error("{0}")]
    Incompatible(String),
    #[error("unknown policy kind `{0}`")]
    UnknownPolicy(String),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
    #[error(transparent)]
    System(#[from] crate::system::SystemError),
    #[error("{0}")]
    Io(String),
}
