//! Policies compared in the sweeps. All of them are observation tables over
//! the scenario's POMDP so the same rollout code runs every one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::{two_layer, Objective, Policy};
use crate::pomdp::{HsviConfig, HsviResult, UpperInit};
use crate::system::{JointAction, SystemModel, SystemSpec};

use super::calibrate::Calibration;
use super::config::{Duplex, ScenarioConfig};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Delay-optimal two-layer solve.
    DOpt,
    /// Equal weights on delay (slots) and uplink power (fraction of budget).
    JOpt,
    /// Least power meeting the rate floor, blind to the queue.
    POpt,
    /// The delay-optimal solve in half-duplex mode.
    Hd,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DOpt => "d-opt",
            PolicyKind::JOpt => "j-opt",
            PolicyKind::POpt => "p-opt",
            PolicyKind::Hd => "hd",
        }
    }

    /// The scenario a policy of this kind is built for and run in.
    pub fn scenario(self, cfg: &ScenarioConfig) -> ScenarioConfig {
        match self {
            PolicyKind::Hd => cfg.with_duplex(Duplex::Half),
            _ => cfg.clone(),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "d-opt" => Ok(PolicyKind::DOpt),
            "j-opt" => Ok(PolicyKind::JOpt),
            "p-opt" => Ok(PolicyKind::POpt),
            "hd" => Ok(PolicyKind::Hd),
            other => Err(HarnessError::UnknownPolicy(other.to_string())),
        }
    }
}

pub fn hsvi_config(cfg: &ScenarioConfig) -> HsviConfig {
    HsviConfig {
        eps: cfg.solver.eps,
        max_iterations: cfg.solver.max_iterations,
        time_budget: cfg.solver.time_budget_s.map(std::time::Duration::from_secs_f64),
        upper_init: UpperInit::FastInformed,
        ..Default::default()
    }
}

pub fn system_spec(cfg: &ScenarioConfig, cal: &Calibration) -> SystemSpec {
    SystemSpec {
        users: cfg.dims.k,
        q_max: cfg.traffic.q_max,
        e_max: cfg.energy.e_max,
        arrival_mean: cfg.arrival_mean(),
        discount: cfg.model.discount,
        link: cal.link_table(cfg),
        initial_units: cfg.energy.initial_units,
    }
}

/// A built policy and the solver runs behind it.
#[derive(Debug, Clone)]
pub struct Built {
    pub policy: Policy,
    pub solves: Vec<HsviResult>,
    pub converged: bool,
}

/// Builds `kind` for `cfg` (the half-duplex variant for [`PolicyKind::Hd`]).
pub fn baseline_policy(kind: PolicyKind, cfg: &ScenarioConfig, cal: &Calibration) -> Result<Built, HarnessError> {
    let run_cfg = kind.scenario(cfg);
    let spec = system_spec(&run_cfg, cal);
    let built = match kind {
        PolicyKind::DOpt | PolicyKind::Hd => solve_with(spec, Objective::delay(cfg.dims.k), &run_cfg, kind)?,
        PolicyKind::JOpt => {
            // delay in slots, power as a fraction of the budget, weight one each
            let objective = Objective::Joint { delay_scale: 1.0, power_scale: cfg.power.up_max_w };
            solve_with(spec, objective, &run_cfg, kind)?
        }
        PolicyKind::POpt => {
            let model = SystemModel::new(spec, Objective::delay(cfg.dims.k))?;
            Built { policy: least_power_policy(&model, run_cfg.r_min_up()), solves: Vec::new(), converged: true }
        }
    };
    Ok(Built { policy: Policy { scenario_hash: run_cfg.hash(), ..built.policy }, ..built })
}

fn solve_with(spec: SystemSpec, objective: Objective, cfg: &ScenarioConfig, kind: PolicyKind) -> Result<Built, HarnessError> {
    let model = SystemModel::new(spec, objective)?;
    let (inner, outer) = two_layer(&model, &hsvi_config(cfg), kind.name())?;
    let mut solves = inner.results.clone();
    let mut converged = inner.converged;
    if let Some(r) = outer.result {
        converged &= r.converged;
        solves.push(r);
    }
    Ok(Built { policy: outer.policy, solves, converged })
}

/// Per user: the smallest affordable power level whose posterior-expected
/// service meets `r_min`, else the largest affordable one. The full array
/// is always used and the queue is ignored.
pub fn least_power_policy(model: &SystemModel, r_min: f64) -> Policy {
    let link = &model.spec.link;
    let mask = link.masks.len() - 1;
    let served = &link.masks[mask].served;
    let table = (0..model.space.size())
        .map(|o| {
            let powers = model
                .space
                .decode(o)
                .iter()
                .map(|u| {
                    let post = model.level_posterior(u.level);
                    let expected = |l: usize| post.iter().enumerate().map(|(t, p)| p * served[t][l] as f64).sum::<f64>();
                    let affordable: Vec<usize> = (0..link.power_levels()).filter(|&l| link.units[l] <= u.e).collect();
                    affordable.iter().copied().find(|&l| expected(l) >= r_min).unwrap_or(*affordable.last().expect("level 0 is free"))
                })
                .collect();
            JointAction { mask, powers }
        })
        .collect();
    Policy::from_table(model, PolicyKind::POpt.name(), table)
}
