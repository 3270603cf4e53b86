//! Scenario files.
//!
//! A scenario is one TOML document. Every field except `name` has a default;
//! `preset = "desk"` swaps in the small solver-scale defaults before the
//! file's own values are applied. The `[run]` section (seed, episodes,
//! horizon) and the `[solver]` section are excluded from the scenario hash
//! so a policy solved once can be evaluated under any run settings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::Dims;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Duplex {
    Full,
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub dims: DimsSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub phy: PhySection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub power: PowerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub constraints: ConstraintSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsSection {
    pub n_r: usize,
    pub n_u: usize,
    pub k: usize,
}

impl Default for DimsSection {
    fn default() -> Self {
        Self { n_r: 16, n_u: 2, k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    /// Mean packet arrivals per second per user.
    pub arrival_rate: f64,
    pub packet_bits: f64,
    pub q_max: u32,
}

impl Default for TrafficSection {
    fn default() -> Self {
        Self { arrival_rate: 10.0, packet_bits: 20_000.0, q_max: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhySection {
    pub bandwidth_hz: f64,
    pub slot_s: f64,
    pub alpha: f64,
    /// Share of received power sent to information detection.
    pub rho: f64,
    pub eta: f64,
    /// Uplink noise power at the AGG (W, path loss folded in).
    pub noise_up_w: f64,
    /// Antenna noise at the users.
    pub noise_down_w: f64,
    /// Conversion noise on the ID branch.
    pub noise_conv_w: f64,
    /// Residual self-interference gain at the AGG after cancellation.
    pub self_interference_db: f64,
    /// SU-to-SU leakage between distinct users.
    pub cross_gain_db: f64,
    /// A user's own uplink leaking into its downlink receiver.
    pub loop_gain_db: f64,
    /// Per-active-antenna circuit power used by the effective-power metric.
    pub circuit_power_w: f64,
    pub duplex: Duplex,
}

impl Default for PhySection {
    fn default() -> Self {
        Self {
            bandwidth_hz: 10e6,
            slot_s: 0.005,
            alpha: 0.2,
            rho: 0.5,
            eta: 0.4,
            noise_up_w: 1e-3,
            noise_down_w: 1e-3,
            noise_conv_w: 1e-3,
            self_interference_db: -110.0,
            cross_gain_db: -30.0,
            loop_gain_db: -40.0,
            circuit_power_w: 0.05,
            duplex: Duplex::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub e_max: u32,
    /// Joules per energy unit; derived from the largest power in use when absent.
    pub unit_j: Option<f64>,
    /// Physical battery capacity (J). Informational: the solver works in units.
    pub battery_j: f64,
    pub initial_units: u32,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self { e_max: 10, unit_j: None, battery_j: 3.2 * 20.0 * 3600.0, initial_units: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSection {
    /// Per-user uplink power cap; the grid is `fractions * up_max_w`.
    pub up_max_w: f64,
    pub fractions: Vec<f64>,
    /// Per-user downlink power at the AGG.
    pub down_w: f64,
}

impl Default for PowerSection {
    fn default() -> Self {
        Self { up_max_w: 0.2, fractions: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], down_w: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub levels: usize,
    /// Level edges on the reference uplink SINR (dB); equiprobable when absent.
    pub level_edges_db: Option<Vec<f64>>,
    /// Active-antenna counts the controller may choose from; all antennas when absent.
    pub masks: Option<Vec<usize>>,
    pub mask_shortlist: usize,
    pub calibration_slots: usize,
    pub calibration_seed: u64,
    pub discount: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            levels: 3,
            level_edges_db: None,
            masks: None,
            mask_shortlist: 16,
            calibration_slots: 4000,
            calibration_seed: 7,
            discount: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub eps: f64,
    pub max_iterations: usize,
    /// Wall-clock cap; makes results timing dependent, so off by default.
    pub time_budget_s: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { eps: 0.05, max_iterations: 2000, time_budget_s: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSection {
    pub p_max_up_w: f64,
    pub p_max_down_w: f64,
    /// Average delay cap in slots.
    pub tau_slots: f64,
    /// Packets per slot; the arrival mean when absent.
    pub r_min_up: Option<f64>,
    pub r_min_down: f64,
    pub step0: f64,
    pub rounds: usize,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            p_max_up_w: 1e9,
            p_max_down_w: 1e9,
            tau_slots: 1e9,
            r_min_up: None,
            r_min_down: 0.0,
            step0: 1.0,
            rounds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Per-user uplink power caps.
    pub budgets_w: Vec<f64>,
    pub policies: Vec<String>,
    pub antennas: Vec<usize>,
    /// Slots per episode in the antenna sweep.
    pub antenna_horizon: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            budgets_w: vec![0.025, 0.05, 0.1, 0.2, 0.4],
            policies: vec!["d-opt".into(), "j-opt".into(), "p-opt".into(), "hd".into()],
            antennas: vec![6, 8, 12, 16, 24, 32],
            antenna_horizon: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, episodes: 30, horizon: 1000 }
    }
}

/// Overrides applied by `preset = "desk"`: two users, short buffers and two
/// channel levels so the POMDP stays small.
const DESK_PRESET: &str = r#"
[dims]
k = 2
[traffic]
arrival_rate = 200.0
q_max = 6
[energy]
e_max = 6
initial_units = 6
[model]
levels = 2
[phy]
noise_up_w = 0.2
[power]
down_w = 0.08
"#;

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ScenarioConfig {
    /// Parses a scenario document. Type errors, unknown keys and a missing
    /// `name` are reported with their line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let direct: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let cfg = match direct.preset.as_deref() {
            None | Some("full") => direct,
            Some("desk") => {
                let mut base: toml::Value = toml::from_str(DESK_PRESET).expect("preset parses");
                let user: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                merge(&mut base, user);
                base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
            }
            Some(other) => return Err(ConfigError::Invalid(format!("unknown preset `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// The desk preset with the given name.
    pub fn desk(name: &str) -> Self {
        Self::from_toml(&format!("name = \"{name}\"\npreset = \"desk\"\n")).expect("desk preset is valid")
    }

    pub fn full(name: &str) -> Self {
        Self::from_toml(&format!("name = \"{name}\"\n")).expect("full-size defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.dims().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let positive = [
            ("traffic.arrival_rate", self.traffic.arrival_rate),
            ("traffic.packet_bits", self.traffic.packet_bits),
            ("phy.bandwidth_hz", self.phy.bandwidth_hz),
            ("phy.slot_s", self.phy.slot_s),
            ("phy.eta", self.phy.eta),
            ("phy.noise_up_w", self.phy.noise_up_w),
            ("phy.noise_down_w", self.phy.noise_down_w),
            ("phy.noise_conv_w", self.phy.noise_conv_w),
            ("power.up_max_w", self.power.up_max_w),
            ("power.down_w", self.power.down_w),
            ("energy.battery_j", self.energy.battery_j),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.phy.alpha) {
            return bad(format!("phy.alpha must lie in [0, 1), got {}", self.phy.alpha));
        }
        if !(self.phy.rho > 0.0 && self.phy.rho < 1.0) {
            return bad(format!("phy.rho must lie in (0, 1), got {}", self.phy.rho));
        }
        if self.phy.eta > 1.0 || self.phy.circuit_power_w < 0.0 {
            return bad("phy.eta must be at most 1 and circuit power nonnegative".into());
        }
        if self.traffic.q_max == 0 || self.energy.e_max == 0 {
            return bad("q_max and e_max must be positive".into());
        }
        if self.energy.initial_units > self.energy.e_max {
            return bad("energy.initial_units exceeds e_max".into());
        }
        if self.power.fractions.is_empty() || self.power.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("power.fractions must be nonempty and within [0, 1]".into());
        }
        if self.power.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("power.fractions must be strictly increasing".into());
        }
        if self.model.levels == 0 {
            return bad("model.levels must be positive".into());
        }
        if let Some(e) = &self.model.level_edges_db {
            if e.len() + 1 != self.model.levels || e.windows(2).any(|w| w[0] >= w[1]) {
                return bad("model.level_edges_db needs levels - 1 increasing edges".into());
            }
        }
        if let Some(m) = &self.model.masks {
            if m.is_empty() || m.iter().any(|&n| n < self.dims.k * self.dims.n_u || n > self.dims.n_r) {
                return bad("model.masks entries must lie in [k * n_u, n_r]".into());
            }
        }
        if !(self.model.discount > 0.0 && self.model.discount < 1.0) {
            return bad("model.discount must lie in (0, 1)".into());
        }
        if self.model.calibration_slots < 10 {
            return bad("model.calibration_slots must be at least 10".into());
        }
        if !(self.solver.eps > 0.0) {
            return bad("solver.eps must be positive".into());
        }
        if let Some(u) = self.energy.unit_j {
            if !(u > 0.0) {
                return bad("energy.unit_j must be positive".into());
            }
        }
        if self.sweep.budgets_w.windows(2).any(|w| w[0] >= w[1]) || self.sweep.budgets_w.iter().any(|b| !(*b > 0.0)) {
            return bad("sweep.budgets_w must be positive and increasing".into());
        }
        let top = self.power_reference();
        if top * self.phy.slot_s / self.unit_j() > self.energy.e_max as f64 + 1e-9 {
            return bad("energy.unit_j too small: the largest power level needs more than e_max units".into());
        }
        if self.run.episodes < 2 || self.run.horizon == 0 {
            return bad("run.episodes must be >= 2 and run.horizon >= 1".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> crate::channel::Result<Dims> {
        Dims::new(self.dims.n_r, self.dims.n_u, self.dims.k)
    }

    /// Largest uplink power the scenario can use, sweeps included.
    pub fn power_reference(&self) -> f64 {
        self.sweep.budgets_w.iter().cloned().fold(self.power.up_max_w, f64::max)
    }

    /// Joules per energy unit.
    pub fn unit_j(&self) -> f64 {
        self.energy.unit_j.unwrap_or(self.power_reference() * self.phy.slot_s / self.energy.e_max as f64)
    }

    /// Mean arrivals per slot.
    pub fn arrival_mean(&self) -> f64 {
        self.traffic.arrival_rate * self.phy.slot_s
    }

    pub fn r_min_up(&self) -> f64 {
        self.constraints.r_min_up.unwrap_or(self.arrival_mean())
    }

    /// Active-antenna options, ascending.
    pub fn masks(&self) -> Vec<usize> {
        let mut m = self.model.masks.clone().unwrap_or_else(|| vec![self.dims.n_r]);
        m.sort_unstable();
        m.dedup();
        m
    }

    /// Same scenario with a different per-user uplink cap.
    pub fn with_budget(&self, budget: f64) -> Self {
        let mut c = self.clone();
        c.power.up_max_w = budget;
        // pin the unit so every budget shares one energy scale
        c.energy.unit_j = Some(self.unit_j());
        c
    }

    pub fn with_duplex(&self, duplex: Duplex) -> Self {
        let mut c = self.clone();
        c.phy.duplex = duplex;
        c
    }

    /// SHA-256 over everything except the `[run]` and `[solver]` sections,
    /// which change how a scenario is run but not the scenario.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run = RunSection::default();
        c.solver = SolverSection::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
