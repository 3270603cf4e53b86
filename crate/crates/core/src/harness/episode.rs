//! Seeded episode rollouts and Monte Carlo aggregation.
//!
//! Slot `t` of episode `e` draws every random quantity from streams keyed by
//! `(seed, e * 2^20 + t)`, so any policy, budget or duplex mode replayed on
//! the same episode sees the same channels and arrivals.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{stream_rng, Link};
use crate::control::{trajectory_metrics, ConstraintSpec, Metrics, Policy, Residuals, StageTerms};
use crate::dynamics::{energy_overflow, step_energy, step_queue, StateSpace, UserState};
use crate::system::JointAction;

use super::calibrate::{energy_units, power_grid, Calibration};
use super::config::{Duplex, ScenarioConfig};
use super::trace::{slot_gains, PhyConsts, SlotGains};
use super::HarnessError;

/// Slots per episode addressable by the stream key.
pub const MAX_HORIZON: usize = 1 << 20;

pub fn slot_key(episode: usize, t: usize) -> u64 {
    ((episode as u64) << 20) | t as u64
}

/// Channel gains and arrivals of one episode.
pub fn episode_trace(cfg: &ScenarioConfig, seed: u64, episode: usize, horizon: usize) -> Vec<SlotGains> {
    let dims = cfg.dims().expect("validated config");
    let consts = PhyConsts::from_config(cfg);
    let masks = cfg.masks();
    let pois = Poisson::new(cfg.arrival_mean()).expect("validated rate");
    (0..horizon)
        .map(|t| {
            let key = slot_key(episode, t);
            let mut g = slot_gains(&dims, cfg.phy.alpha, &masks, cfg.power_reference(), &consts, seed, key);
            g.arrivals = (0..dims.k).map(|k| pois.sample(&mut stream_rng(seed, key, k, Link::Auxiliary)) as u32).collect();
            g
        })
        .collect()
}

pub fn traces(cfg: &ScenarioConfig, seed: u64, episodes: usize, horizon: usize) -> Vec<Vec<SlotGains>> {
    (0..episodes).into_par_iter().map(|e| episode_trace(cfg, seed, e, horizon)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    /// True states at the start of the slot.
    pub states: Vec<UserState>,
    pub observation: usize,
    pub action: JointAction,
    pub terms: Vec<StageTerms>,
    pub arrivals: Vec<u32>,
    pub served: Vec<u32>,
    pub harvested: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub slots: Vec<SlotRecord>,
    pub final_states: Vec<UserState>,
    /// Units lost to a full battery, per user.
    pub overflow: Vec<u64>,
}

impl Trajectory {
    /// Harvested minus spent equals the battery change plus the overflow,
    /// per user, as an exact integer identity.
    pub fn energy_balanced(&self) -> bool {
        let Some(first) = self.slots.first() else { return true };
        (0..first.states.len()).all(|k| {
            let harvested: i64 = self.slots.iter().map(|s| s.harvested[k] as i64).sum();
            let spent: i64 = self.slots.iter().map(|s| s.terms[k].used as i64).sum();
            harvested - spent == self.final_states[k].e as i64 - first.states[k].e as i64 + self.overflow[k] as i64
        })
    }

    pub fn stage_terms(&self) -> Vec<Vec<StageTerms>> {
        self.slots.iter().map(|s| s.terms.clone()).collect()
    }
}

/// Rejects a policy built for a different scenario.
pub fn check_policy(policy: &Policy, cfg: &ScenarioConfig) -> Result<(), HarnessError> {
    let hash = cfg.hash();
    if policy.scenario_hash != hash {
        return Err(HarnessError::HashMismatch { policy: policy.scenario_hash.clone(), scenario: hash });
    }
    Ok(())
}

/// Replays `policy` on one episode trace. The controller sees queues and
/// batteries exactly and the channel level only through the estimate.
pub fn run_episode(cfg: &ScenarioConfig, cal: &Calibration, policy: &Policy, trace: &[SlotGains]) -> Result<Trajectory, HarnessError> {
    check_policy(policy, cfg)?;
    let consts = PhyConsts::from_config(cfg);
    let k = cfg.dims.k;
    let (q_max, e_max) = (cfg.traffic.q_max, cfg.energy.e_max);
    let space = StateSpace { users: k, q_max, e_max, levels: cal.levels() };
    if policy.table.len() != space.size() || policy.users != k {
        return Err(HarnessError::Incompatible("policy table does not match the scenario's observation space".into()));
    }
    let powers = power_grid(cfg);
    let units = energy_units(cfg, &powers);
    let unit_j = cfg.unit_j();
    let lambda = cfg.arrival_mean();
    let mut q = vec![0u32; k];
    let mut e = vec![cfg.energy.initial_units; k];
    let mut overflow = vec![0u64; k];
    let mut slots = Vec::with_capacity(trace.len());
    for g in trace {
        let states: Vec<UserState> = (0..k).map(|u| UserState { q: q[u], e: e[u], level: cal.level(g.ref_true_db[u]) }).collect();
        let seen: Vec<UserState> = (0..k).map(|u| UserState { level: cal.est_level(g.ref_est_db[u]), ..states[u] }).collect();
        let observation = space.encode(&seen);
        let action = policy.table[observation].clone();
        let p: Vec<f64> = action.powers.iter().map(|&l| powers[l]).collect();
        let mg = &g.masks[action.mask];
        let mut terms = Vec::with_capacity(k);
        let mut served = Vec::with_capacity(k);
        let mut harvested = Vec::with_capacity(k);
        for u in 0..k {
            let used = units[action.powers[u]];
            let s = consts.packets(&consts.uplink_sinr(mg, u, &p));
            let h = consts.harvest_units(mg, u, unit_j, e_max);
            let r_down = consts.packets(&[consts.downlink_sinr(mg, u, &p)]) as f64;
            terms.push(StageTerms { delay: q[u] as f64 / lambda, p_up: p[u], p_down: consts.p_down, r_up: s as f64, r_down, used, energy: e[u] });
            overflow[u] += energy_overflow(e[u], used, h, e_max) as u64;
            e[u] = step_energy(e[u], used, h, e_max).map_err(|err| HarnessError::Incompatible(format!("inadmissible policy action: {err}")))?;
            q[u] = step_queue(q[u], s, g.arrivals[u], q_max);
            served.push(s);
            harvested.push(h);
        }
        slots.push(SlotRecord { states, observation, action, terms, arrivals: g.arrivals.clone(), served, harvested });
    }
    let final_states = (0..k).map(|u| UserState { q: q[u], e: e[u], level: 0 }).collect();
    Ok(Trajectory { slots, final_states, overflow })
}

/// Limits of the scenario's constraint section, per user.
pub fn constraint_spec(cfg: &ScenarioConfig) -> ConstraintSpec {
    let k = cfg.dims.k;
    let c = &cfg.constraints;
    ConstraintSpec {
        p_max_up: vec![c.p_max_up_w; k],
        p_max_down: vec![c.p_max_down_w; k],
        tau_up: vec![c.tau_slots; k],
        r_min_up: vec![cfg.r_min_up(); k],
        r_min_down: vec![c.r_min_down; k],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario_hash: String,
    pub policy: String,
    pub duplex: Duplex,
    pub budget_w: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Per-user average delay in slots.
    pub delay_slots: Vec<f64>,
    /// Sum over users.
    pub delay_slots_total: f64,
    pub delay_ms_mean: f64,
    /// 95% normal-approximation half-width over episodes.
    pub delay_ms_ci: f64,
    /// Per-user averages.
    pub p_up_w: Vec<f64>,
    pub p_up_w_mean: f64,
    pub p_up_w_ci: f64,
    pub p_down_w: Vec<f64>,
    pub rate_up: Vec<f64>,
    pub rate_down: Vec<f64>,
    pub residuals: Residuals,
    pub solver_log: Option<String>,
}

impl RunResult {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            delay: self.delay_slots.clone(),
            weighted_delay: self.delay_slots_total,
            p_up: self.p_up_w.clone(),
            p_down: self.p_down_w.clone(),
            r_up: self.rate_up.clone(),
            r_down: self.rate_down.clone(),
        }
    }
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, 1.959_963_984_540_054 * (var / n).sqrt())
}

fn mean_over(ms: &[Metrics], f: impl Fn(&Metrics) -> &Vec<f64>) -> Vec<f64> {
    let k = f(&ms[0]).len();
    (0..k).map(|u| ms.iter().map(|m| f(m)[u]).sum::<f64>() / ms.len() as f64).collect()
}

/// Monte Carlo over precomputed episode traces, aggregated in episode order.
pub fn monte_carlo_on(cfg: &ScenarioConfig, cal: &Calibration, policy: &Policy, traces: &[Vec<SlotGains>], seed: u64) -> Result<RunResult, HarnessError> {
    if traces.len() < 2 {
        return Err(HarnessError::Incompatible("monte carlo needs at least two episodes".into()));
    }
    let varrho = vec![1.0; cfg.dims.k];
    let per: Vec<Metrics> = traces
        .par_iter()
        .map(|t| {
            let traj = run_episode(cfg, cal, policy, t)?;
            Ok(trajectory_metrics(&traj.stage_terms(), &varrho)?)
        })
        .collect::<Result<_, HarnessError>>()?;
    let slot_ms = cfg.phy.slot_s * 1e3;
    let totals: Vec<f64> = per.iter().map(|m| m.delay.iter().sum::<f64>() * slot_ms).collect();
    let (delay_ms_mean, delay_ms_ci) = mean_ci(&totals);
    let p_means: Vec<f64> = per.iter().map(|m| m.p_up.iter().sum::<f64>() / m.p_up.len() as f64).collect();
    let (p_up_w_mean, p_up_w_ci) = mean_ci(&p_means);
    let delay_slots = mean_over(&per, |m| &m.delay);
    let agg = Metrics {
        weighted_delay: delay_slots.iter().sum(),
        delay: delay_slots,
        p_up: mean_over(&per, |m| &m.p_up),
        p_down: mean_over(&per, |m| &m.p_down),
        r_up: mean_over(&per, |m| &m.r_up),
        r_down: mean_over(&per, |m| &m.r_down),
    };
    Ok(RunResult {
        scenario_hash: cfg.hash(),
        policy: policy.kind.clone(),
        duplex: cfg.phy.duplex,
        budget_w: cfg.power.up_max_w,
        episodes: traces.len(),
        horizon: traces[0].len(),
        seed,
        residuals: constraint_spec(cfg).residuals(&agg),
        delay_slots_total: agg.weighted_delay,
        delay_ms_mean,
        delay_ms_ci,
        p_up_w_mean,
        p_up_w_ci,
        delay_slots: agg.delay,
        p_up_w: agg.p_up,
        p_down_w: agg.p_down,
        rate_up: agg.r_up,
        rate_down: agg.r_down,
        solver_log: None,
    })
}

pub fn monte_carlo(cfg: &ScenarioConfig, cal: &Calibration, policy: &Policy, episodes: usize, horizon: usize, seed: u64) -> Result<RunResult, HarnessError> {
    if episodes < 2 {
        return Err(HarnessError::Incompatible("monte carlo needs at least two episodes".into()));
    }
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(HarnessError::Incompatible(format!("horizon must lie in 1..={MAX_HORIZON}")));
    }
    check_policy(policy, cfg)?;
    monte_carlo_on(cfg, cal, policy, &traces(cfg, seed, episodes, horizon), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Objective;
    use crate::harness::baselines::system_spec;
    use crate::system::SystemModel;

    fn setup() -> (ScenarioConfig, Calibration, SystemModel) {
        let mut c = ScenarioConfig::desk("ep");
        c.model.calibration_slots = 200;
        let cal = Calibration::run(&c);
        let m = SystemModel::new(system_spec(&c, &cal), Objective::delay(2)).unwrap();
        (c, cal, m)
    }

    fn constant(c: &ScenarioConfig, m: &SystemModel, f: impl Fn(&[UserState]) -> Vec<usize>) -> Policy {
        let table = (0..m.space.size()).map(|o| JointAction { mask: 0, powers: f(&m.space.decode(o)) }).collect();
        Policy { scenario_hash: c.hash(), ..Policy::from_table(m, "test", table) }
    }

    /// Highest affordable level per user.
    fn greedy(c: &ScenarioConfig, m: &SystemModel) -> Policy {
        let units = m.spec.link.units.clone();
        constant(c, m, |us| us.iter().map(|u| (0..units.len()).rev().find(|&l| units[l] <= u.e).unwrap()).collect())
    }

    #[test]
    fn queues_drain_once_arrivals_stop() {
        let (c, cal, m) = setup();
        let mut tr = episode_trace(&c, 3, 0, 200);
        for (t, g) in tr.iter_mut().enumerate() {
            g.arrivals = if t < 5 { vec![3, 3] } else { vec![0, 0] };
        }
        let traj = run_episode(&c, &cal, &greedy(&c, &m), &tr).unwrap();
        let q: Vec<u32> = traj.slots.iter().map(|s| s.states[0].q).collect();
        assert!(q[6..].windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(traj.final_states[0].q, 0);
        assert!(traj.energy_balanced());
    }

    #[test]
    fn zero_power_saturates_the_queue() {
        let (c, cal, m) = setup();
        let tr = episode_trace(&c, 3, 0, 300);
        let traj = run_episode(&c, &cal, &constant(&c, &m, |_| vec![0, 0]), &tr).unwrap();
        assert!(traj.slots.iter().all(|s| s.served == vec![0, 0]));
        assert_eq!(traj.final_states[0].q, c.traffic.q_max);
        assert!(traj.energy_balanced());
    }

    #[test]
    fn replay_is_bit_identical() {
        let (c, cal, m) = setup();
        let p = greedy(&c, &m);
        let a = run_episode(&c, &cal, &p, &episode_trace(&c, 9, 2, 100)).unwrap();
        let b = run_episode(&c, &cal, &p, &episode_trace(&c, 9, 2, 100)).unwrap();
        assert_eq!(a, b);
        let other = run_episode(&c, &cal, &p, &episode_trace(&c, 9, 3, 100)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn foreign_policy_is_rejected() {
        let (c, cal, m) = setup();
        let mut p = greedy(&c, &m);
        p.scenario_hash = "0".repeat(64);
        let tr = episode_trace(&c, 1, 0, 3);
        assert!(matches!(run_episode(&c, &cal, &p, &tr), Err(HarnessError::HashMismatch { .. })));
    }

    #[test]
    fn degenerate_metric_has_zero_width() {
        let (c, cal, m) = setup();
        let r = monte_carlo(&c, &cal, &constant(&c, &m, |_| vec![0, 0]), 4, 50, 5).unwrap();
        assert_eq!((r.p_up_w_mean, r.p_up_w_ci), (0.0, 0.0));
        assert_eq!(mean_ci(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        assert!(monte_carlo(&c, &cal, &constant(&c, &m, |_| vec![0, 0]), 1, 50, 5).is_err());
    }

    #[test]
    fn delay_in_ms_is_slots_times_slot_length() {
        let (c, cal, m) = setup();
        let r = monte_carlo(&c, &cal, &greedy(&c, &m), 3, 80, 2).unwrap();
        assert!((r.delay_ms_mean - r.delay_slots_total * 5.0).abs() < 1e-9 * (1.0 + r.delay_ms_mean));
    }
}
