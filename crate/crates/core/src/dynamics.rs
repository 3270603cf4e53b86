//! Data-queue and energy-buffer dynamics and the controlled transition kernel.
//!
//! The global state is the per-user triple `(q, e, level)`: queued packets,
//! stored energy units, and the quantized channel-quality level. One slot
//! evolves each user independently given the joint action:
//!
//! ```text
//! q' = min([q - served]^+ + arrivals, q_max)
//! e' = min(max(e - used, 0) + harvested, e_max)
//! level' ~ channel level process
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Discrete, DiscreteCDF, Poisson};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("inadmissible action: uses {used} energy units with only {stored} stored")]
    Inadmissible { used: u32, stored: u32 },
    #[error("state space of {size} entries exceeds the budget of {budget}")]
    OverBudget { size: usize, budget: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Default buffer size in packets.
pub const DEFAULT_Q_MAX: u32 = 30;

pub fn step_queue(q: u32, served: u32, arrived: u32, q_max: u32) -> u32 {
    (q.saturating_sub(served) + arrived).min(q_max)
}

pub fn step_energy(e: u32, used: u32, harvested: u32, e_max: u32) -> Result<u32> {
    if used > e {
        return Err(DynamicsError::Inadmissible { used, stored: e });
    }
    Ok((e - used + harvested).min(e_max))
}

/// Harvested units discarded because the buffer was full.
pub fn energy_overflow(e: u32, used: u32, harvested: u32, e_max: u32) -> u32 {
    (e.saturating_sub(used) + harvested).saturating_sub(e_max)
}

/// Poisson packet arrivals per slot, truncated at `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    pub mean_per_slot: f64,
    pub cap: u32,
}

/// Tail mass below which the arrival alphabet is truncated.
pub const ARRIVAL_TAIL: f64 = 1e-9;

impl ArrivalModel {
    /// `rate` packets per second over slots of `slot` seconds, with the
    /// smallest cap whose tail mass is below [`ARRIVAL_TAIL`].
    pub fn from_rate(rate: f64, slot: f64) -> Result<Self> {
        let mean = rate * slot;
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(DynamicsError::InvalidModel(format!("arrival mean {mean} must be positive")));
        }
        let pois = Poisson::new(mean).map_err(|e| DynamicsError::InvalidModel(e.to_string()))?;
        let mut cap = 0u64;
        while pois.sf(cap) >= ARRIVAL_TAIL {
            cap += 1;
        }
        Ok(Self { mean_per_slot: mean, cap: cap as u32 })
    }

    pub fn with_cap(mean_per_slot: f64, cap: u32) -> Result<Self> {
        if !(mean_per_slot > 0.0) || !mean_per_slot.is_finite() {
            return Err(DynamicsError::InvalidModel(format!("arrival mean {mean_per_slot} must be positive")));
        }
        Ok(Self { mean_per_slot, cap })
    }
}

/// Truncated, renormalized Poisson pmf over `0..=cap`.
pub fn arrival_pmf(model: &ArrivalModel) -> Vec<f64> {
    let pois = Poisson::new(model.mean_per_slot).expect("validated mean");
    let mut pmf: Vec<f64> = (0..=model.cap as u64).map(|n| pois.pmf(n)).collect();
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }
    pmf
}

/// Channel-quality level process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LevelProcess {
    /// Block fading: a fresh level every slot.
    Iid(Vec<f64>),
    /// Row-stochastic level-to-level matrix.
    Markov(Vec<Vec<f64>>),
}

impl LevelProcess {
    pub fn levels(&self) -> usize {
        match self {
            LevelProcess::Iid(p) => p.len(),
            LevelProcess::Markov(m) => m.len(),
        }
    }

    pub fn next(&self, level: usize) -> &[f64] {
        match self {
            LevelProcess::Iid(p) => p,
            LevelProcess::Markov(m) => &m[level],
        }
    }

    fn validate(&self) -> Result<()> {
        let rows: Vec<&[f64]> = match self {
            LevelProcess::Iid(p) => vec![p.as_slice()],
            LevelProcess::Markov(m) => m.iter().map(|r| r.as_slice()).collect(),
        };
        for r in rows {
            if r.len() != self.levels() && matches!(self, LevelProcess::Markov(_)) {
                return Err(DynamicsError::InvalidModel("level matrix must be square".into()));
            }
            if r.iter().any(|p| *p < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(DynamicsError::InvalidModel("level pmf is not stochastic".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserState {
    pub q: u32,
    pub e: u32,
    pub level: usize,
}

/// Enumeration of the joint `(q, e, level)` space of all users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub users: usize,
    pub q_max: u32,
    pub e_max: u32,
    pub levels: usize,
}

impl StateSpace {
    pub fn per_user(&self) -> usize {
        (self.q_max as usize + 1) * (self.e_max as usize + 1) * self.levels
    }

    pub fn size(&self) -> usize {
        self.per_user().pow(self.users as u32)
    }

    pub fn encode_user(&self, u: &UserState) -> usize {
        (u.q as usize * (self.e_max as usize + 1) + u.e as usize) * self.levels + u.level
    }

    pub fn decode_user(&self, idx: usize) -> UserState {
        let level = idx % self.levels;
        let rest = idx / self.levels;
        let e = (rest % (self.e_max as usize + 1)) as u32;
        let q = (rest / (self.e_max as usize + 1)) as u32;
        UserState { q, e, level }
    }

    /// User 0 is the most significant digit.
    pub fn encode(&self, users: &[UserState]) -> usize {
        users.iter().fold(0, |acc, u| acc * self.per_user() + self.encode_user(u))
    }

    pub fn decode(&self, mut idx: usize) -> Vec<UserState> {
        let mut out = vec![UserState { q: 0, e: 0, level: 0 }; self.users];
        for k in (0..self.users).rev() {
            out[k] = self.decode_user(idx % self.per_user());
            idx /= self.per_user();
        }
        out
    }
}

/// What one user's slot looks like under a joint action.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTransition {
    pub served: u32,
    pub used: u32,
    /// Harvested-unit pmf.
    pub harvest: Vec<(u32, f64)>,
}

/// Maps a joint state and action to each user's service, energy use and
/// harvest. Implementations must only return `used <= e`.
pub trait UserDynamics {
    fn n_actions(&self) -> usize;
    fn user_transition(&self, state: &[UserState], action: usize, user: usize) -> UserTransition;
}

/// Everything needed to expand transitions of the joint state.
pub struct KernelModel<'a, D: UserDynamics + ?Sized> {
    pub space: StateSpace,
    pub arrivals: Vec<Vec<f64>>,
    pub levels: &'a LevelProcess,
    pub dynamics: &'a D,
}

impl<D: UserDynamics + ?Sized> KernelModel<'_, D> {
    /// Per-user next-state distribution `(user index, prob)`.
    pub fn user_successors(&self, state: &[UserState], action: usize, user: usize) -> Result<Vec<(usize, f64)>> {
        let u = state[user];
        let tr = self.dynamics.user_transition(state, action, user);
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (lvl, &pl) in self.levels.next(u.level).iter().enumerate() {
            if pl == 0.0 {
                continue;
            }
            for &(h, ph) in &tr.harvest {
                if ph == 0.0 {
                    continue;
                }
                let e_next = step_energy(u.e, tr.used, h, self.space.e_max)?;
                for (a, &pa) in self.arrivals[user].iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    let q_next = step_queue(u.q, tr.served, a as u32, self.space.q_max);
                    let idx = self.space.encode_user(&UserState { q: q_next, e: e_next, level: lvl });
                    out.push((idx, pl * ph * pa));
                }
            }
        }
        merge_sparse(&mut out);
        Ok(out)
    }

    /// Joint next-state distribution as the product of per-user factors.
    pub fn successors(&self, s: usize, action: usize, out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        let state = self.space.decode(s);
        out.push((0, 1.0));
        let per_user = self.space.per_user();
        for k in 0..self.space.users {
            let factor = self.user_successors(&state, action, k)?;
            let mut next = Vec::with_capacity(out.len() * factor.len());
            for &(idx, p) in out.iter() {
                for &(f, pf) in &factor {
                    next.push((idx * per_user + f, p * pf));
                }
            }
            *out = next;
        }
        out.sort_unstable_by_key(|x| x.0);
        Ok(())
    }
}

/// Sorts by index and sums duplicates.
pub fn merge_sparse(v: &mut Vec<(usize, f64)>) {
    v.sort_unstable_by_key(|x| x.0);
    let mut w = 0;
    for r in 0..v.len() {
        if w > 0 && v[w - 1].0 == v[r].0 {
            v[w - 1].1 += v[r].1;
        } else {
            v[w] = v[r];
            w += 1;
        }
    }
    v.truncate(w);
}

/// Materialized sparse kernel, rows indexed by `action * n_states + state`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    pub n_states: usize,
    pub n_actions: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionKernel {
    pub fn from_rows(n_states: usize, n_actions: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n_states * n_actions {
            return Err(DynamicsError::InvalidModel("row count mismatch".into()));
        }
        let k = Self { n_states, n_actions, rows };
        k.validate()?;
        Ok(k)
    }

    pub fn row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.rows[a * self.n_states + s]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            let sum: f64 = r.iter().map(|x| x.1).sum();
            if r.iter().any(|x| x.1 < 0.0 || x.0 >= self.n_states) || (sum - 1.0).abs() > 1e-10 {
                return Err(DynamicsError::InvalidModel(format!("row {i} is not stochastic (sum {sum})")));
            }
        }
        Ok(())
    }

    /// Sparse triplets `state next prob`, one per line, grouped by action.
    pub fn to_triplets(&self) -> String {
        let mut out = String::new();
        for a in 0..self.n_actions {
            let _ = writeln!(out, "# action {a}");
            for s in 0..self.n_states {
                for &(n, p) in self.row(s, a) {
                    let _ = writeln!(out, "{s} {n} {p:.17e}");
                }
            }
        }
        out
    }
}

/// Materializes the full kernel; refuses spaces larger than `budget` states.
pub fn build_kernel<D: UserDynamics + ?Sized>(model: &KernelModel<'_, D>, budget: usize) -> Result<TransitionKernel> {
    let size = model.space.size();
    if size > budget {
        return Err(DynamicsError::OverBudget { size, budget });
    }
    model.levels.validate()?;
    if model.levels.levels() != model.space.levels {
        return Err(DynamicsError::InvalidModel("level process and state space disagree".into()));
    }
    let n_actions = model.dynamics.n_actions();
    let mut rows = Vec::with_capacity(size * n_actions);
    let mut buf = Vec::new();
    for a in 0..n_actions {
        for s in 0..size {
            model.successors(s, a, &mut buf)?;
            rows.push(buf.clone());
        }
    }
    TransitionKernel::from_rows(size, n_actions, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        served: u32,
        used: u32,
        harvest: Vec<(u32, f64)>,
        actions: usize,
    }

    impl UserDynamics for Fixed {
        fn n_actions(&self) -> usize {
            self.actions
        }
        fn user_transition(&self, state: &[UserState], _a: usize, user: usize) -> UserTransition {
            UserTransition {
                served: self.served,
                used: self.used.min(state[user].e),
                harvest: self.harvest.clone(),
            }
        }
    }

    #[test]
    fn queue_examples() {
        assert_eq!(step_queue(5, 2, 3, 30), 6);
        assert_eq!(step_queue(1, 4, 0, 30), 0);
        assert_eq!(step_queue(29, 0, 5, 30), 30);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(step_energy(4, 4, 2, 10).unwrap(), 2);
        assert_eq!(step_energy(9, 0, 5, 10).unwrap(), 10);
        assert_eq!(step_energy(2, 3, 0, 10), Err(DynamicsError::Inadmissible { used: 3, stored: 2 }));
        assert_eq!(energy_overflow(9, 0, 5, 10), 4);
        assert_eq!(energy_overflow(4, 4, 2, 10), 0);
    }

    #[test]
    fn arrival_examples() {
        let m = ArrivalModel::from_rate(10.0, 0.005).unwrap();
        assert!((m.mean_per_slot - 0.05).abs() < 1e-15);
        let pmf = arrival_pmf(&m);
        assert!((pmf[0] - (-0.05f64).exp()).abs() < 1e-9);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let deg = arrival_pmf(&ArrivalModel::with_cap(0.05, 0).unwrap());
        assert_eq!(deg, vec![1.0]);
        assert!(ArrivalModel::from_rate(0.0, 0.005).is_err());
    }

    #[test]
    fn arrival_cap_is_smallest_with_small_tail() {
        let m = ArrivalModel::from_rate(10.0, 0.005).unwrap();
        let pois = Poisson::new(0.05).unwrap();
        assert!(pois.sf(m.cap as u64) < ARRIVAL_TAIL);
        assert!(pois.sf(m.cap as u64 - 1) >= ARRIVAL_TAIL);
    }

    #[test]
    fn state_codec_roundtrip() {
        let sp = StateSpace { users: 2, q_max: 3, e_max: 2, levels: 2 };
        for s in 0..sp.size() {
            assert_eq!(sp.encode(&sp.decode(s)), s);
        }
    }

    #[test]
    fn tiny_kernel_matches_enumeration() {
        // one user, q_max = e_max = 1, one level, one action:
        // serve 1, use 1 if stored, harvest 1 w.p. 0.3, arrival 1 w.p. 0.4
        let sp = StateSpace { users: 1, q_max: 1, e_max: 1, levels: 1 };
        let lp = LevelProcess::Iid(vec![1.0]);
        let dynm = Fixed { served: 1, used: 1, harvest: vec![(0, 0.7), (1, 0.3)], actions: 1 };
        let model = KernelModel { space: sp, arrivals: vec![vec![0.6, 0.4]], levels: &lp, dynamics: &dynm };
        let k = build_kernel(&model, 100).unwrap();
        // brute force over (q, e) with index q * 2 + e
        for q in 0..2u32 {
            for e in 0..2u32 {
                let s = (q * 2 + e) as usize;
                let mut expect = [0.0; 4];
                for (h, ph) in [(0u32, 0.7), (1, 0.3)] {
                    for (a, pa) in [(0u32, 0.6), (1, 0.4)] {
                        let used = e.min(1);
                        let q2 = (q.saturating_sub(1) + a).min(1);
                        let e2 = (e - used + h).min(1);
                        expect[(q2 * 2 + e2) as usize] += ph * pa;
                    }
                }
                let mut got = [0.0; 4];
                for &(n, p) in k.row(s, 0) {
                    got[n] += p;
                }
                for i in 0..4 {
                    assert!((got[i] - expect[i]).abs() < 1e-15);
                }
            }
        }
        assert!(k.to_triplets().starts_with("# action 0\n0 "));
    }

    #[test]
    fn deterministic_rows_are_unit_vectors() {
        let sp = StateSpace { users: 2, q_max: 3, e_max: 3, levels: 1 };
        let lp = LevelProcess::Iid(vec![1.0]);
        let dynm = Fixed { served: 1, used: 1, harvest: vec![(1, 1.0)], actions: 2 };
        let model = KernelModel { space: sp, arrivals: vec![vec![0.0, 1.0], vec![1.0]], levels: &lp, dynamics: &dynm };
        let k = build_kernel(&model, 1000).unwrap();
        for a in 0..2 {
            for s in 0..sp.size() {
                assert_eq!(k.row(s, a).len(), 1);
                assert_eq!(k.row(s, a)[0].1, 1.0);
            }
        }
    }

    #[test]
    fn budget_enforced() {
        let sp = StateSpace { users: 2, q_max: 30, e_max: 10, levels: 3 };
        let lp = LevelProcess::Iid(vec![0.2, 0.3, 0.5]);
        let dynm = Fixed { served: 0, used: 0, harvest: vec![(0, 1.0)], actions: 1 };
        let model = KernelModel { space: sp, arrivals: vec![vec![1.0]; 2], levels: &lp, dynamics: &dynm };
        match build_kernel(&model, 10_000) {
            Err(DynamicsError::OverBudget { size, .. }) => assert_eq!(size, (31 * 11 * 3usize).pow(2)),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn markov_level_hook() {
        let sp = StateSpace { users: 1, q_max: 0, e_max: 0, levels: 2 };
        let lp = LevelProcess::Markov(vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        let dynm = Fixed { served: 0, used: 0, harvest: vec![(0, 1.0)], actions: 1 };
        let model = KernelModel { space: sp, arrivals: vec![vec![1.0]], levels: &lp, dynamics: &dynm };
        let k = build_kernel(&model, 10).unwrap();
        assert_eq!(k.row(1, 0), &[(0, 0.2), (1, 0.8)]);
    }
}
