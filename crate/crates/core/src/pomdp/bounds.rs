//! Alpha-vector lower bound and sawtooth upper bound.

use serde::{Deserialize, Serialize};

use super::lp::{maximize, LpOutcome};
use super::{Belief, PomdpError, Result};

/// Slack used when comparing bound values.
const DOMINANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub values: Vec<f64>,
    pub action: usize,
}

impl AlphaVector {
    pub fn dominated_by(&self, other: &AlphaVector) -> bool {
        self.values.iter().zip(&other.values).all(|(a, b)| *a <= *b + DOMINANCE_TOL)
    }
}

/// Upper envelope of alpha-vectors; a lower bound on the optimal reward-value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    alphas: Vec<AlphaVector>,
}

impl LowerBound {
    pub fn new(alphas: Vec<AlphaVector>) -> Self {
        let mut lb = Self::default();
        for a in alphas {
            lb.insert(a);
        }
        lb
    }

    /// Constant vector of the best worst-case stationary action.
    pub fn blind(n_states: usize, n_actions: usize, discount: f64, reward: impl Fn(usize, usize) -> f64) -> Self {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..n_actions {
            let worst = (0..n_states).map(|s| reward(s, a)).fold(f64::INFINITY, f64::min);
            if worst > best.0 {
                best = (worst, a);
            }
        }
        let v = best.0 / (1.0 - discount);
        Self::new(vec![AlphaVector { values: vec![v; n_states], action: best.1 }])
    }

    pub fn alphas(&self) -> &[AlphaVector] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Best value at `b` and the index of the maximizing vector (lowest on
    /// ties).
    pub fn value(&self, b: &Belief) -> Result<(f64, usize)> {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, a) in self.alphas.iter().enumerate() {
            let v = b.dot(&a.values);
            if v > best.0 {
                best = (v, i);
            }
        }
        if best.1 == usize::MAX {
            return Err(PomdpError::EmptyAlphaSet);
        }
        Ok(best)
    }

    /// Adds `alpha` unless it is pointwise dominated; drops vectors it
    /// dominates. Returns whether it was kept.
    pub fn insert(&mut self, alpha: AlphaVector) -> bool {
        if self.alphas.iter().any(|a| alpha.dominated_by(a)) {
            return false;
        }
        self.alphas.retain(|a| !a.dominated_by(&alpha));
        self.alphas.push(alpha);
        true
    }

    /// Keeps only vectors that are maximal at some corner or at some witness
    /// belief. Values at every witness and corner are unchanged.
    pub fn prune(&mut self, witnesses: &[Belief]) {
        let n = match self.alphas.first() {
            Some(a) => a.values.len(),
            None => return,
        };
        let mut keep = vec![false; self.alphas.len()];
        for s in 0..n {
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, a) in self.alphas.iter().enumerate() {
                if a.values[s] > best.0 {
                    best = (a.values[s], i);
                }
            }
            keep[best.1] = true;
        }
        for b in witnesses {
            if let Ok((_, i)) = self.value(b) {
                keep[i] = true;
            }
        }
        let mut k = keep.into_iter();
        self.alphas.retain(|_| k.next().unwrap());
    }

    /// One line per vector: the action, then the values in state order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for a in &self.alphas {
            out.push_str(&a.action.to_string());
            for v in &a.values {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// How interior points are combined with the corner baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Best single-point improvement.
    Sawtooth,
    /// Best nonnegative combination of points that fits under the belief,
    /// found by a small LP over the belief's support.
    Lp,
}

/// Upper bound from corner values plus interior belief points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    corners: Vec<f64>,
    points: Vec<(Belief, f64)>,
    /// Per point: corner baseline at the point minus its value.
    drops: Vec<f64>,
    mode: Interpolation,
}

impl UpperBound {
    pub fn new(corners: Vec<f64>, n_states: usize) -> Result<Self> {
        if corners.len() != n_states {
            return Err(PomdpError::MissingCorners { expected: n_states, got: corners.len() });
        }
        Ok(Self { corners, points: Vec::new(), drops: Vec::new(), mode: Interpolation::Sawtooth })
    }

    pub fn with_mode(mut self, mode: Interpolation) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> Interpolation {
        self.mode
    }

    pub fn corners(&self) -> &[f64] {
        &self.corners
    }

    pub fn points(&self) -> &[(Belief, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn value(&self, b: &Belief) -> f64 {
        self.value_without(b, usize::MAX)
    }

    fn value_without(&self, b: &Belief, skip: usize) -> f64 {
        match self.mode {
            Interpolation::Sawtooth => self.sawtooth_without(b, skip),
            Interpolation::Lp => self.lp_without(b, skip),
        }
    }

    /// Corner baseline minus the best single-point improvement.
    pub fn sawtooth_value(&self, b: &Belief) -> f64 {
        self.sawtooth_without(b, usize::MAX)
    }

    fn sawtooth_without(&self, b: &Belief, skip: usize) -> f64 {
        let base = b.dot(&self.corners);
        let mut drop = 0.0f64;
        for (i, (p, _)) in self.points.iter().enumerate() {
            if i == skip || self.drops[i] <= 0.0 {
                continue;
            }
            let gain = b.min_ratio(p) * self.drops[i];
            if gain > drop {
                drop = gain;
            }
        }
        base - drop
    }

    /// Corner baseline minus `max sum_i l_i drop_i` over `l >= 0` with
    /// `sum_i l_i p_i <= b` entrywise.
    pub fn lp_value(&self, b: &Belief) -> f64 {
        self.lp_without(b, usize::MAX)
    }

    fn lp_without(&self, b: &Belief, skip: usize) -> f64 {
        let base = b.dot(&self.corners);
        // (point index, single-point improvement)
        let mut cands: Vec<(usize, f64)> = Vec::new();
        for (i, (p, _)) in self.points.iter().enumerate() {
            if i == skip || self.drops[i] <= 0.0 {
                continue;
            }
            let r = b.min_ratio(p);
            if r > 0.0 {
                cands.push((i, r * self.drops[i]));
            }
        }
        match cands.len() {
            0 => return base,
            1 => return base - cands[0].1,
            _ => {}
        }
        let best_single = cands.iter().map(|c| c.1).fold(0.0, f64::max);
        let m = b.support_len();
        let mut rows = vec![vec![0.0; cands.len()]; m];
        for (j, &(i, _)) in cands.iter().enumerate() {
            // support of the point lies inside the support of b
            let mut k = 0;
            for &(s, v) in self.points[i].0.entries() {
                while b.entries()[k].0 != s {
                    k += 1;
                }
                rows[k][j] = v;
            }
        }
        let rhs: Vec<f64> = b.entries().iter().map(|e| e.1).collect();
        let obj: Vec<f64> = cands.iter().map(|&(i, _)| self.drops[i]).collect();
        match maximize(&rows, &rhs, &obj) {
            // a stalled but feasible combination is still a valid bound
            LpOutcome::Optimal { value, .. } | LpOutcome::Stalled { value, .. } => base - value.max(best_single),
            LpOutcome::Unbounded => base - best_single,
        }
    }

    /// Records value `v` at `b` if it tightens the bound there.
    pub fn insert(&mut self, b: Belief, v: f64) -> bool {
        if let Some(s) = b.as_corner() {
            if v < self.corners[s] - DOMINANCE_TOL {
                self.corners[s] = v;
                for (d, (p, pv)) in self.drops.iter_mut().zip(&self.points) {
                    *d = p.dot(&self.corners) - pv;
                }
                return true;
            }
            return false;
        }
        if v >= self.value(&b) - DOMINANCE_TOL {
            return false;
        }
        // A stored point whose own drop is matched by the new point's drop at
        // its location contributes nothing anywhere and is removed.
        let new_drop = b.dot(&self.corners) - v;
        let mut keep = self.points.iter().zip(&self.drops).map(|((p, _), d)| p.min_ratio(&b) * new_drop < d - DOMINANCE_TOL).collect::<Vec<_>>().into_iter();
        let mut keep2 = keep.clone();
        self.points.retain(|_| keep.next().unwrap());
        self.drops.retain(|_| keep2.next().unwrap());
        self.points.push((b, v));
        self.drops.push(new_drop);
        true
    }

    /// Drops points the others already imply at their location; the bound
    /// is unchanged everywhere. Returns how many were removed.
    pub fn prune(&mut self) -> usize {
        let before = self.points.len();
        let mut i = 0;
        while i < self.points.len() {
            if self.value_without(&self.points[i].0, i) <= self.points[i].1 + DOMINANCE_TOL {
                self.points.remove(i);
                self.drops.remove(i);
            } else {
                i += 1;
            }
        }
        before - self.points.len()
    }
}

/// Lower and upper bounds on the optimal reward-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub lower: LowerBound,
    pub upper: UpperBound,
}

impl BoundPair {
    pub fn gap(&self, b: &Belief) -> Result<f64> {
        Ok(self.upper.value(b) - self.lower.value(b)?.0)
    }
}
