//! Finite POMDP machinery.
//!
//! Values are stored in reward orientation (reward = -cost) so the value
//! function is the upper envelope of alpha-vectors and every bound uses
//! `max`. Callers that think in costs negate at the boundary.

pub mod bounds;
pub mod exact;
pub mod hsvi;
pub mod lp;
pub mod ssea;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bounds::{AlphaVector, BoundPair, Interpolation, LowerBound, UpperBound};
pub use hsvi::{bellman_value, excess_uncertainty, BoundKind, Hsvi, HsviConfig, HsviResult, LogRecord, UpperInit};

use crate::dynamics::merge_sparse;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PomdpError {
    #[error("observation {obs} has zero probability under action {action}")]
    ImpossibleObservation { obs: usize, action: usize },
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("empty alpha-vector set")]
    EmptyAlphaSet,
    #[error("upper bound needs {expected} corner values, got {got}")]
    MissingCorners { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("oracle limits exceeded: {0}")]
    OracleScale(String),
    #[error("no admissible action at belief")]
    NoAdmissibleAction,
}

pub type Result<T> = std::result::Result<T, PomdpError>;

/// Tolerance on belief normalization and stochastic rows.
pub const PROB_TOL: f64 = 1e-10;

/// A discrete POMDP in reward orientation.
pub trait Pomdp: Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn n_observations(&self) -> usize;
    fn discount(&self) -> f64;
    fn reward(&self, s: usize, a: usize) -> f64;
    /// Writes `(next_state, prob)` pairs, sorted by state, into `out`.
    fn transitions(&self, s: usize, a: usize, out: &mut Vec<(usize, f64)>);
    /// Writes `(observation, prob)` pairs for arriving in `next` into `out`.
    fn observations(&self, next: usize, a: usize, out: &mut Vec<(usize, f64)>);
    fn admissible(&self, _s: usize, _a: usize) -> bool {
        true
    }
}

/// Probability vector over states, stored sparsely and sorted by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    entries: Vec<(usize, f64)>,
}

impl Belief {
    pub fn from_sparse(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.iter().any(|e| !(e.1 >= 0.0) || !e.1.is_finite()) {
            return Err(PomdpError::InvalidBelief("negative or non-finite entry".into()));
        }
        entries.retain(|e| e.1 > 0.0);
        merge_sparse(&mut entries);
        let sum: f64 = entries.iter().map(|e| e.1).sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(PomdpError::InvalidBelief(format!("entries sum to {sum}")));
        }
        Ok(Self { entries })
    }

    pub fn from_dense(p: &[f64]) -> Result<Self> {
        Self::from_sparse(p.iter().cloned().enumerate().collect())
    }

    /// Normalizes nonnegative weights into a belief.
    pub fn normalized(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.retain(|e| e.1 > 0.0);
        merge_sparse(&mut entries);
        let sum: f64 = entries.iter().map(|e| e.1).sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(PomdpError::InvalidBelief("no probability mass".into()));
        }
        for e in &mut entries {
            e.1 /= sum;
        }
        Ok(Self { entries })
    }

    pub fn unit(s: usize) -> Self {
        Self { entries: vec![(s, 1.0)] }
    }

    pub fn uniform(n: usize) -> Self {
        Self { entries: (0..n).map(|s| (s, 1.0 / n as f64)).collect() }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn prob(&self, s: usize) -> f64 {
        match self.entries.binary_search_by_key(&s, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn as_corner(&self) -> Option<usize> {
        (self.entries.len() == 1).then(|| self.entries[0].0)
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.entries.iter().map(|&(s, p)| p * v[s]).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        for &(s, p) in &self.entries {
            d[s] = p;
        }
        d
    }

    pub fn l1_distance(&self, other: &Belief) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut d) = (0, 0, 0.0);
        while i < a.len() || j < b.len() {
            if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
                d += a[i].1;
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                d += b[j].1;
                j += 1;
            } else {
                d += (a[i].1 - b[j].1).abs();
                i += 1;
                j += 1;
            }
        }
        d
    }

    /// `min_s self(s) / base(s)` over the support of `base`.
    pub fn min_ratio(&self, base: &Belief) -> f64 {
        let mut r = f64::INFINITY;
        let mut i = 0;
        for &(s, p) in &base.entries {
            while i < self.entries.len() && self.entries[i].0 < s {
                i += 1;
            }
            if i == self.entries.len() || self.entries[i].0 != s {
                return 0.0;
            }
            r = r.min(self.entries[i].1 / p);
        }
        r
    }
}

/// One observation branch from a belief under an action.
#[derive(Debug, Clone, PartialEq)]
pub struct Successor {
    pub obs: usize,
    pub prob: f64,
    pub belief: Belief,
}

/// Expected reward of `a` under `b`.
pub fn belief_reward<M: Pomdp + ?Sized>(model: &M, b: &Belief, a: usize) -> f64 {
    b.entries().iter().map(|&(s, p)| p * model.reward(s, a)).sum()
}

/// All observation branches of `b` under `a`, sorted by observation.
pub fn successors<M: Pomdp + ?Sized>(model: &M, b: &Belief, a: usize) -> Vec<Successor> {
    let mut next: Vec<(usize, f64)> = Vec::new();
    let mut buf = Vec::new();
    for &(s, p) in b.entries() {
        model.transitions(s, a, &mut buf);
        next.extend(buf.iter().map(|&(n, q)| (n, p * q)));
    }
    merge_sparse(&mut next);
    let mut joint: Vec<(usize, usize, f64)> = Vec::new();
    for &(n, m) in &next {
        if m == 0.0 {
            continue;
        }
        model.observations(n, a, &mut buf);
        joint.extend(buf.iter().filter(|x| x.1 > 0.0).map(|&(o, q)| (o, n, m * q)));
    }
    joint.sort_unstable_by_key(|x| (x.0, x.1));
    let mut out = Vec::new();
    let mut i = 0;
    while i < joint.len() {
        let o = joint[i].0;
        let mut j = i;
        let mut entries = Vec::new();
        while j < joint.len() && joint[j].0 == o {
            entries.push((joint[j].1, joint[j].2));
            j += 1;
        }
        let prob: f64 = entries.iter().map(|e| e.1).sum();
        if prob > 0.0 {
            if let Ok(belief) = Belief::normalized(entries) {
                out.push(Successor { obs: o, prob, belief });
            }
        }
        i = j;
    }
    out
}

/// `Pr(o | a, b)`.
pub fn observation_prob<M: Pomdp + ?Sized>(model: &M, o: usize, a: usize, b: &Belief) -> f64 {
    successors(model, b, a).iter().find(|x| x.obs == o).map_or(0.0, |x| x.prob)
}

/// Bayes update of `b` after taking `a` and observing `o`.
pub fn update_belief<M: Pomdp + ?Sized>(model: &M, b: &Belief, a: usize, o: usize) -> Result<Belief> {
    successors(model, b, a)
        .into_iter()
        .find(|x| x.obs == o)
        .map(|x| x.belief)
        .ok_or(PomdpError::ImpossibleObservation { obs: o, action: a })
}

/// Actions admissible in every state of the belief's support.
pub fn admissible_actions<M: Pomdp + ?Sized>(model: &M, b: &Belief) -> Vec<usize> {
    (0..model.n_actions())
        .filter(|&a| b.entries().iter().all(|&(s, _)| model.admissible(s, a)))
        .collect()
}

/// Dense-table POMDP used by tests and small studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPomdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_obs: usize,
    pub discount: f64,
    /// `transition[a][s]`: sparse next-state row.
    pub transition: Vec<Vec<Vec<(usize, f64)>>>,
    /// `observation[a][s']`: sparse observation row.
    pub observation: Vec<Vec<Vec<(usize, f64)>>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
}

impl TabularPomdp {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return Err(PomdpError::InvalidModel(format!("discount {} outside [0, 1)", self.discount)));
        }
        let check_rows = |rows: &Vec<Vec<Vec<(usize, f64)>>>, width: usize, what: &str| -> Result<()> {
            for (a, per_a) in rows.iter().enumerate() {
                for (s, row) in per_a.iter().enumerate() {
                    let sum: f64 = row.iter().map(|x| x.1).sum();
                    if row.iter().any(|x| x.1 < 0.0 || x.0 >= width) || (sum - 1.0).abs() > PROB_TOL {
                        return Err(PomdpError::InvalidModel(format!("{what} row ({a}, {s}) sums to {sum}")));
                    }
                }
            }
            Ok(())
        };
        if self.transition.len() != self.n_actions || self.observation.len() != self.n_actions {
            return Err(PomdpError::InvalidModel("per-action tables missing".into()));
        }
        check_rows(&self.transition, self.n_states, "transition")?;
        check_rows(&self.observation, self.n_obs, "observation")?;
        if self.reward.iter().flatten().any(|r| !r.is_finite()) {
            return Err(PomdpError::InvalidModel("non-finite reward".into()));
        }
        Ok(())
    }

    /// Dense random model: rows drawn uniformly then normalized, rewards in
    /// `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, n_obs: usize, discount: f64, rng: &mut R) -> Self {
        let row = |n: usize, rng: &mut R| -> Vec<(usize, f64)> {
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().enumerate().map(|(i, x)| (i, x / s)).collect()
        };
        let transition = (0..n_actions).map(|_| (0..n_states).map(|_| row(n_states, rng)).collect()).collect();
        let observation = (0..n_actions).map(|_| (0..n_states).map(|_| row(n_obs, rng)).collect()).collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self { n_states, n_actions, n_obs, discount, transition, observation, reward }
    }

    /// Classic two-door tiger problem (listen, open-left, open-right).
    pub fn tiger(discount: f64) -> Self {
        let reset = vec![(0, 0.5), (1, 0.5)];
        let stay = vec![vec![(0, 1.0)], vec![(1, 1.0)]];
        let transition = vec![stay, vec![reset.clone(), reset.clone()], vec![reset.clone(), reset]];
        let hear = vec![vec![(0, 0.85), (1, 0.15)], vec![(0, 0.15), (1, 0.85)]];
        let blank = vec![vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]];
        let observation = vec![hear, blank.clone(), blank];
        // state 0: tiger left
        let reward = vec![vec![-1.0, -100.0, 10.0], vec![-1.0, 10.0, -100.0]];
        Self { n_states: 2, n_actions: 3, n_obs: 2, discount, transition, observation, reward }
    }

    /// Fully observed MDP wrapper: observation equals next state.
    pub fn fully_observed(n_states: usize, transition: Vec<Vec<Vec<(usize, f64)>>>, reward: Vec<Vec<f64>>, discount: f64) -> Self {
        let n_actions = transition.len();
        let observation = (0..n_actions).map(|_| (0..n_states).map(|s| vec![(s, 1.0)]).collect()).collect();
        Self { n_states, n_actions, n_obs: n_states, discount, transition, observation, reward }
    }
}

impl Pomdp for TabularPomdp {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn n_observations(&self) -> usize {
        self.n_obs
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }
    fn transitions(&self, s: usize, a: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.extend_from_slice(&self.transition[a][s]);
    }
    fn observations(&self, next: usize, a: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.extend_from_slice(&self.observation[a][next]);
    }
}
