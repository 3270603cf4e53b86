//! Invariant suite run by the `validate` subcommand.

use crate::control::Objective;
use crate::pomdp::{Hsvi, Pomdp, PROB_TOL};
use crate::system::SystemModel;

use super::baselines::{hsvi_config, least_power_policy, system_spec};
use super::calibrate::Calibration;
use super::config::ScenarioConfig;
use super::episode::{episode_trace, run_episode};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn check(name: &'static str, ok: bool, detail: impl Into<String>) -> Check {
    Check { name, ok, detail: detail.into() }
}

fn rows_stochastic(m: &SystemModel) -> Result<(), String> {
    let mut row = Vec::new();
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            m.transitions(s, a, &mut row);
            let t: f64 = row.iter().map(|x| x.1).sum();
            if (t - 1.0).abs() > PROB_TOL {
                return Err(format!("transition row ({s}, {a}) sums to {t}"));
            }
            m.observations(s, a, &mut row);
            let t: f64 = row.iter().map(|x| x.1).sum();
            if (t - 1.0).abs() > PROB_TOL {
                return Err(format!("observation row ({s}, {a}) sums to {t}"));
            }
        }
    }
    Ok(())
}

/// Checks the calibrated model, one per-user solve and a short rollout.
pub fn invariant_suite(cfg: &ScenarioConfig) -> Vec<Check> {
    let mut out = Vec::new();
    let cal = Calibration::run(cfg);
    let spec = system_spec(cfg, &cal);
    let valid = spec.link.validate();
    out.push(check("link table", valid.is_ok(), valid.err().map(|e| e.to_string()).unwrap_or_default()));
    let joint = match SystemModel::new(spec, Objective::delay(cfg.dims.k)) {
        Ok(m) => m,
        Err(e) => {
            out.push(check("system model", false, e.to_string()));
            return out;
        }
    };
    out.push(check("system model", true, format!("{} joint states", joint.n_states())));
    for mask in 0..joint.n_masks() {
        let single = joint.single_user(mask).expect("joint model is valid");
        let r = rows_stochastic(&single);
        out.push(check("stochastic rows", r.is_ok(), r.err().unwrap_or_else(|| format!("mask {mask}"))));
    }
    let single = joint.single_user(joint.n_masks() - 1).expect("joint model is valid");
    let b0 = single.initial_belief();
    match Hsvi::new(&single, hsvi_config(cfg), None, &b0).and_then(|mut h| h.solve(&b0)) {
        Ok(r) => {
            let monotone = r.log.windows(2).all(|w| w[1].root_upper - w[1].root_lower <= w[0].root_upper - w[0].root_lower + 1e-12);
            let ordered = r.root_lower <= r.root_upper + 1e-8;
            out.push(check("bound order and monotone gap", monotone && ordered, format!("root [{:.6}, {:.6}]", r.root_lower, r.root_upper)));
        }
        Err(e) => out.push(check("bound order and monotone gap", false, e.to_string())),
    }
    let mut policy = least_power_policy(&joint, cfg.r_min_up());
    policy.scenario_hash = cfg.hash();
    let horizon = cfg.run.horizon.min(500);
    match run_episode(cfg, &cal, &policy, &episode_trace(cfg, cfg.run.seed, 0, horizon)) {
        Ok(t) => out.push(check("energy conservation", t.energy_balanced(), format!("{horizon} slots"))),
        Err(e) => out.push(check("energy conservation", false, e.to_string())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scenario_passes() {
        let mut c = ScenarioConfig::desk("v");
        c.model.calibration_slots = 200;
        c.traffic.q_max = 3;
        c.energy.e_max = 3;
        c.energy.initial_units = 3;
        let checks = invariant_suite(&c);
        assert!(checks.iter().all(|c| c.ok), "{checks:?}");
        assert!(checks.len() >= 5);
    }
}
