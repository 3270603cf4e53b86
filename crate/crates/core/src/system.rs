//! Controlled queue/energy/channel-level system as a POMDP.
//!
//! State: per user `(q, e, level)` with the true channel level hidden.
//! Observation: per user `(q, e, estimated level)`. Action: an antenna-mask
//! option plus one uplink power level per user. Channel levels are i.i.d.
//! across slots, so the belief after any history depends only on the last
//! observation ([`SystemModel::observation_belief`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{stage_cost, Objective, StageTerms};
use crate::dynamics::{arrival_pmf, ArrivalModel, DynamicsError, KernelModel, LevelProcess, StateSpace, UserDynamics, UserState, UserTransition};
use crate::pomdp::{Belief, Pomdp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error("state space of {size} states exceeds the budget of {budget}")]
    OverBudget { size: usize, budget: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub type Result<T> = std::result::Result<T, SystemError>;

/// Largest joint state space the system model will enumerate.
pub const STATE_BUDGET: usize = 200_000;

/// Link abstraction of one antenna-mask option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLink {
    pub active: usize,
    /// `served[level][power level]`: packets per slot.
    pub served: Vec<Vec<u32>>,
    /// Harvested-unit pmf per slot.
    pub harvest: Vec<(u32, f64)>,
    /// Downlink packets per slot.
    pub rate_down: f64,
}

/// Per-user link abstraction shared by all (statistically identical) users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTable {
    pub level_pmf: Vec<f64>,
    /// `confusion[true][estimated]`.
    pub confusion: Vec<Vec<f64>>,
    /// Uplink power per level (W).
    pub power_up: Vec<f64>,
    /// Energy units spent per power level.
    pub units: Vec<u32>,
    /// Downlink power per user (W).
    pub p_down: f64,
    pub masks: Vec<MaskLink>,
}

impl LinkTable {
    pub fn levels(&self) -> usize {
        self.level_pmf.len()
    }

    pub fn power_levels(&self) -> usize {
        self.power_up.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        let stochastic = |r: &[f64]| r.iter().all(|p| *p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
        if l == 0 || !stochastic(&self.level_pmf) {
            return Err(SystemError::Invalid("level pmf is not stochastic".into()));
        }
        if self.confusion.len() != l || self.confusion.iter().any(|r| r.len() != l || !stochastic(r)) {
            return Err(SystemError::Invalid("confusion matrix must be square and row-stochastic".into()));
        }
        if self.power_up.is_empty() || self.units.len() != self.power_up.len() {
            return Err(SystemError::Invalid("power grid and unit costs disagree".into()));
        }
        if self.masks.is_empty() {
            return Err(SystemError::Invalid("no antenna-mask option".into()));
        }
        for m in &self.masks {
            if m.served.len() != l || m.served.iter().any(|r| r.len() != self.power_up.len()) {
                return Err(SystemError::Invalid("served table shape".into()));
            }
            let h: Vec<f64> = m.harvest.iter().map(|x| x.1).collect();
            if !stochastic(&h) {
                return Err(SystemError::Invalid("harvest pmf is not stochastic".into()));
            }
        }
        Ok(())
    }
}

/// Everything that defines a system model apart from the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub users: usize,
    pub q_max: u32,
    pub e_max: u32,
    pub arrival_mean: f64,
    pub discount: f64,
    pub link: LinkTable,
    /// Energy units at the start of an episode.
    pub initial_units: u32,
}

/// Decoded joint action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub mask: usize,
    pub powers: Vec<usize>,
}

/// The system POMDP under a fixed objective, in reward orientation.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub spec: SystemSpec,
    pub objective: Objective,
    pub space: StateSpace,
    arrivals: Vec<f64>,
    levels: LevelProcess,
    /// `user_rows[(mask * P + power) * per_user + user_state]`.
    user_rows: Vec<Vec<(usize, f64)>>,
    /// Observation rows per true level.
    obs_rows: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
}

struct OneUser<'a> {
    link: &'a LinkTable,
    mask: usize,
}

impl UserDynamics for OneUser<'_> {
    fn n_actions(&self) -> usize {
        self.link.power_levels()
    }

    fn user_transition(&self, state: &[UserState], action: usize, user: usize) -> UserTransition {
        let m = &self.link.masks[self.mask];
        let u = state[user];
        UserTransition {
            served: m.served[u.level][action],
            // inadmissible pairs are never taken; clamp so expansion stays total
            used: self.link.units[action].min(u.e),
            harvest: m.harvest.clone(),
        }
    }
}

impl SystemModel {
    pub fn new(spec: SystemSpec, objective: Objective) -> Result<Self> {
        spec.link.validate()?;
        if spec.users == 0 || !(spec.discount > 0.0 && spec.discount < 1.0) || !(spec.arrival_mean > 0.0) {
            return Err(SystemError::Invalid("users, discount or arrival mean out of range".into()));
        }
        if spec.link.units.iter().any(|&u| u > spec.e_max) {
            return Err(SystemError::Invalid("a power level costs more than e_max units".into()));
        }
        let space = StateSpace { users: spec.users, q_max: spec.q_max, e_max: spec.e_max, levels: spec.link.levels() };
        let size = space.per_user().checked_pow(spec.users as u32).unwrap_or(usize::MAX);
        if size > STATE_BUDGET {
            return Err(SystemError::OverBudget { size, budget: STATE_BUDGET });
        }
        let arrivals = arrival_pmf(&ArrivalModel::from_rate(spec.arrival_mean, 1.0)?);
        let levels = LevelProcess::Iid(spec.link.level_pmf.clone());
        let single = StateSpace { users: 1, ..space };
        let mut user_rows = Vec::new();
        for mask in 0..spec.link.masks.len() {
            let dynamics = OneUser { link: &spec.link, mask };
            let km = KernelModel { space: single, arrivals: vec![arrivals.clone()], levels: &levels, dynamics: &dynamics };
            for p in 0..spec.link.power_levels() {
                for s in 0..space.per_user() {
                    let st = single.decode_user(s);
                    user_rows.push(km.user_successors(&[st], p, 0)?);
                }
            }
        }
        let l = spec.link.levels();
        let obs_rows = (0..l)
            .map(|lv| spec.link.confusion[lv].iter().enumerate().filter(|x| *x.1 > 0.0).map(|(o, &p)| (o, p)).collect())
            .collect();
        let mut model = Self { spec, objective, space, arrivals, levels, user_rows, obs_rows, reward: Vec::new() };
        model.reward = model.reward_table();
        Ok(model)
    }

    fn reward_table(&self) -> Vec<f64> {
        let n = self.n_states();
        let na = self.n_actions();
        let mut r = vec![0.0; n * na];
        for s in 0..n {
            for a in 0..na {
                if self.admissible(s, a) {
                    r[s * na + a] = -stage_cost(&self.objective, &self.stage_terms(s, a));
                }
            }
        }
        // Inadmissible pairs still carry the clamped transition, so they must
        // never pay off: one such step loses more than any future gain.
        let adm = |i: usize| self.admissible(i / na, i % na);
        let lo = (0..n * na).filter(|&i| adm(i)).map(|i| r[i]).fold(f64::INFINITY, f64::min);
        let hi = (0..n * na).filter(|&i| adm(i)).map(|i| r[i]).fold(f64::NEG_INFINITY, f64::max);
        let worst = lo - (hi - lo) / (1.0 - self.spec.discount) - 1.0;
        for s in 0..n {
            for a in 0..na {
                if !self.admissible(s, a) {
                    r[s * na + a] = worst;
                }
            }
        }
        r
    }

    /// Same spec and objective restricted to one user and one mask.
    pub fn single_user(&self, mask: usize) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.users = 1;
        spec.link.masks = vec![spec.link.masks[mask].clone()];
        Self::new(spec, self.objective.single_user())
    }

    pub fn with_objective(&self, objective: Objective) -> Result<Self> {
        Self::new(self.spec.clone(), objective)
    }

    pub fn power_levels(&self) -> usize {
        self.spec.link.power_levels()
    }

    pub fn n_masks(&self) -> usize {
        self.spec.link.masks.len()
    }

    pub fn encode_action(&self, a: &JointAction) -> usize {
        let p = self.power_levels();
        a.powers.iter().fold(a.mask, |acc, &l| acc * p + l)
    }

    pub fn decode_action(&self, mut a: usize) -> JointAction {
        let p = self.power_levels();
        let mut powers = vec![0; self.spec.users];
        for k in (0..self.spec.users).rev() {
            powers[k] = a % p;
            a /= p;
        }
        JointAction { mask: a, powers }
    }

    /// Per-user terms of the Lagrangian at `(s, a)`.
    pub fn stage_terms(&self, s: usize, a: usize) -> Vec<StageTerms> {
        let act = self.decode_action(a);
        let link = &self.spec.link;
        let m = &link.masks[act.mask];
        self.space
            .decode(s)
            .iter()
            .zip(&act.powers)
            .map(|(u, &l)| StageTerms {
                delay: u.q as f64 / self.spec.arrival_mean,
                p_up: link.power_up[l],
                p_down: link.p_down,
                r_up: m.served[u.level][l] as f64,
                r_down: m.rate_down,
                used: link.units[l],
                energy: u.e,
            })
            .collect()
    }

    pub fn arrivals(&self) -> &[f64] {
        &self.arrivals
    }

    pub fn level_process(&self) -> &LevelProcess {
        &self.levels
    }

    fn user_row(&self, mask: usize, power: usize, user_state: usize) -> &[(usize, f64)] {
        let per_user = self.space.per_user();
        &self.user_rows[(mask * self.power_levels() + power) * per_user + user_state]
    }

    /// Posterior over true levels after observing estimated level `obs`.
    pub fn level_posterior(&self, obs: usize) -> Vec<f64> {
        let link = &self.spec.link;
        let w: Vec<f64> = (0..link.levels()).map(|l| link.level_pmf[l] * link.confusion[l][obs]).collect();
        let t: f64 = w.iter().sum();
        if t > 0.0 {
            w.iter().map(|x| x / t).collect()
        } else {
            link.level_pmf.clone()
        }
    }

    /// The belief held after receiving observation `o`.
    pub fn observation_belief(&self, o: usize) -> Belief {
        let users = self.space.decode(o);
        let mut entries = vec![(0usize, 1.0)];
        let per_user = self.space.per_user();
        for u in &users {
            let post = self.level_posterior(u.level);
            let mut next = Vec::new();
            for &(idx, p) in &entries {
                for (l, &pl) in post.iter().enumerate() {
                    if pl > 0.0 {
                        let us = self.space.encode_user(&UserState { q: u.q, e: u.e, level: l });
                        next.push((idx * per_user + us, p * pl));
                    }
                }
            }
            entries = next;
        }
        Belief::normalized(entries).expect("posterior has mass")
    }

    /// Belief at the start of an episode: empty queues, initial energy,
    /// levels at their prior.
    pub fn initial_belief(&self) -> Belief {
        let per_user = self.space.per_user();
        let mut entries = vec![(0usize, 1.0)];
        for _ in 0..self.spec.users {
            let mut next = Vec::new();
            for &(idx, p) in &entries {
                for (l, &pl) in self.spec.link.level_pmf.iter().enumerate() {
                    if pl > 0.0 {
                        let us = self.space.encode_user(&UserState { q: 0, e: self.spec.initial_units, level: l });
                        next.push((idx * per_user + us, p * pl));
                    }
                }
            }
            entries = next;
        }
        Belief::normalized(entries).expect("prior has mass")
    }

    /// Per-user marginal of a joint belief.
    pub fn marginal(&self, b: &Belief, user: usize) -> Belief {
        let per_user = self.space.per_user();
        let shift = per_user.pow((self.spec.users - 1 - user) as u32);
        let entries = b.entries().iter().map(|&(s, p)| ((s / shift) % per_user, p)).collect();
        Belief::normalized(entries).expect("marginal of a belief")
    }

    /// Observation index of a state seen with the given estimated levels.
    pub fn observation_index(&self, users: &[UserState]) -> usize {
        self.space.encode(users)
    }

    /// Admissible actions at an observation (energy is observed exactly).
    pub fn admissible_at_observation(&self, o: usize) -> Vec<usize> {
        let users = self.space.decode(o);
        (0..self.n_actions())
            .filter(|&a| self.decode_action(a).powers.iter().zip(&users).all(|(&l, u)| self.spec.link.units[l] <= u.e))
            .collect()
    }
}

impl Pomdp for SystemModel {
    fn n_states(&self) -> usize {
        self.space.size()
    }

    fn n_actions(&self) -> usize {
        self.n_masks() * self.power_levels().pow(self.spec.users as u32)
    }

    fn n_observations(&self) -> usize {
        self.space.size()
    }

    fn discount(&self) -> f64 {
        self.spec.discount
    }

    fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions() + a]
    }

    fn transitions(&self, s: usize, a: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let act = self.decode_action(a);
        let per_user = self.space.per_user();
        let mut rest = s;
        let mut digits = vec![0; self.spec.users];
        for k in (0..self.spec.users).rev() {
            digits[k] = rest % per_user;
            rest /= per_user;
        }
        out.push((0, 1.0));
        for k in 0..self.spec.users {
            let row = self.user_row(act.mask, act.powers[k], digits[k]);
            let mut next = Vec::with_capacity(out.len() * row.len());
            for &(idx, p) in out.iter() {
                for &(f, pf) in row {
                    next.push((idx * per_user + f, p * pf));
                }
            }
            *out = next;
        }
    }

    fn observations(&self, next: usize, _a: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let per_user = self.space.per_user();
        let levels = self.space.levels;
        let users = self.space.decode(next);
        out.push((0, 1.0));
        for u in &users {
            let base = self.space.encode_user(u) - u.level;
            let mut nxt = Vec::with_capacity(out.len() * levels);
            for &(idx, p) in out.iter() {
                for &(o, po) in &self.obs_rows[u.level] {
                    nxt.push((idx * per_user + base + o, p * po));
                }
            }
            *out = nxt;
        }
    }

    fn admissible(&self, s: usize, a: usize) -> bool {
        let act = self.decode_action(a);
        let per_user = self.space.per_user();
        let mut rest = s;
        for k in (0..self.spec.users).rev() {
            let e = self.space.decode_user(rest % per_user).e;
            if self.spec.link.units[act.powers[k]] > e {
                return false;
            }
            rest /= per_user;
        }
        true
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dynamics::build_kernel;
    use crate::pomdp::{successors, PROB_TOL};

    pub(crate) fn toy_link(levels: usize) -> LinkTable {
        let l = levels;
        LinkTable {
            level_pmf: vec![1.0 / l as f64; l],
            confusion: (0..l).map(|i| (0..l).map(|j| if i == j { 0.8 } else { 0.2 / (l - 1).max(1) as f64 }).collect()).collect(),
            power_up: vec![0.0, 0.1, 0.2],
            units: vec![0, 1, 2],
            p_down: 0.5,
            masks: vec![MaskLink {
                active: 4,
                served: (0..l).map(|lv| vec![0, 1 + lv as u32, 2 + lv as u32]).collect(),
                harvest: vec![(0, 0.5), (1, 0.5)],
                rate_down: 3.0,
            }],
        }
    }

    pub(crate) fn toy_spec(users: usize) -> SystemSpec {
        SystemSpec { users, q_max: 2, e_max: 2, arrival_mean: 0.6, discount: 0.9, link: toy_link(2), initial_units: 2 }
    }

    fn delay_model(users: usize) -> SystemModel {
        SystemModel::new(toy_spec(users), Objective::delay(users)).unwrap()
    }

    #[test]
    fn action_codec_round_trips_examples() {
        let m = delay_model(2);
        assert_eq!(m.n_actions(), 9);
        let a = JointAction { mask: 0, powers: vec![2, 1] };
        assert_eq!(m.encode_action(&a), 7);
        assert_eq!(m.decode_action(7), a);
    }

    #[test]
    fn transitions_match_kernel_builder() {
        // the joint product must equal the dynamics module's own expansion
        struct Joint<'a>(&'a SystemModel);
        impl UserDynamics for Joint<'_> {
            fn n_actions(&self) -> usize {
                self.0.n_actions()
            }
            fn user_transition(&self, state: &[UserState], action: usize, user: usize) -> UserTransition {
                let act = self.0.decode_action(action);
                OneUser { link: &self.0.spec.link, mask: act.mask }.user_transition(state, act.powers[user], user)
            }
        }
        let m = delay_model(2);
        let km = KernelModel { space: m.space, arrivals: vec![m.arrivals().to_vec(); 2], levels: m.level_process(), dynamics: &Joint(&m) };
        let kernel = build_kernel(&km, 10_000).unwrap();
        let mut row = Vec::new();
        for a in 0..m.n_actions() {
            for s in 0..m.n_states() {
                m.transitions(s, a, &mut row);
                crate::dynamics::merge_sparse(&mut row);
                let k = kernel.row(s, a);
                assert_eq!(row.len(), k.len());
                for (x, y) in row.iter().zip(k) {
                    assert_eq!(x.0, y.0);
                    assert!((x.1 - y.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn observations_keep_queue_and_energy() {
        let m = delay_model(2);
        let mut out = Vec::new();
        for s in 0..m.n_states() {
            m.observations(s, 0, &mut out);
            assert!((out.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < PROB_TOL);
            let st = m.space.decode(s);
            for &(o, _) in &out {
                let ob = m.space.decode(o);
                for (a, b) in st.iter().zip(&ob) {
                    assert_eq!((a.q, a.e), (b.q, b.e));
                }
            }
        }
    }

    #[test]
    fn belief_after_observation_depends_only_on_it() {
        let m = delay_model(1);
        let b0 = m.initial_belief();
        for a in [0, 1, 2] {
            if !crate::pomdp::admissible_actions(&m, &b0).contains(&a) {
                continue;
            }
            for x in successors(&m, &b0, a) {
                let canon = m.observation_belief(x.obs);
                assert!(x.belief.l1_distance(&canon) < 1e-12);
            }
        }
    }

    #[test]
    fn marginals_of_product_beliefs() {
        let m = delay_model(2);
        let o = m.space.encode(&[UserState { q: 1, e: 2, level: 0 }, UserState { q: 2, e: 0, level: 1 }]);
        let b = m.observation_belief(o);
        let single = m.single_user(0).unwrap();
        let o0 = single.space.encode(&[UserState { q: 1, e: 2, level: 0 }]);
        assert!(m.marginal(&b, 0).l1_distance(&single.observation_belief(o0)) < 1e-12);
    }

    #[test]
    fn admissibility_is_energy_feasibility() {
        let m = delay_model(1);
        let s = m.space.encode(&[UserState { q: 0, e: 1, level: 0 }]);
        assert!(m.admissible(s, 1) && !m.admissible(s, 2));
        assert_eq!(m.admissible_at_observation(s), vec![0, 1]);
    }

    #[test]
    fn over_budget_is_reported() {
        let mut spec = toy_spec(2);
        spec.q_max = 300;
        spec.e_max = 300;
        assert!(matches!(SystemModel::new(spec, Objective::delay(2)), Err(SystemError::OverBudget { .. })));
    }
}
