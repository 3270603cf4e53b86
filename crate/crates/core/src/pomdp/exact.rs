//! Exact finite-horizon value iteration by incremental pruning.
//!
//! Only meant for tiny models; it is the ground truth the point-based
//! solver is checked against.

use super::lp::{maximize, LpOutcome};
use super::{Belief, Pomdp, PomdpError, Result};

pub const ORACLE_MAX_STATES: usize = 12;
pub const ORACLE_MAX_HORIZON: usize = 100;

/// Witness margin below which a vector counts as redundant. Each backup
/// prunes `|O| + 1` times, so the value error stays below
/// `(|O| + 1) * WITNESS_TOL / (1 - discount)`; tighter margins let
/// round-off twins survive and the sets explode.
const WITNESS_TOL: f64 = 1e-6;

/// Optimal `horizon`-step value function as a pruned vector set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub horizon: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl ExactSolution {
    pub fn value(&self, b: &Belief) -> f64 {
        self.vectors.iter().map(|v| b.dot(v)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn value_table(&self, grid: &[Belief]) -> Vec<f64> {
        grid.iter().map(|b| self.value(b)).collect()
    }
}

/// All beliefs whose entries are multiples of `1/resolution`.
pub fn belief_grid(n_states: usize, resolution: usize) -> Vec<Belief> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut counts = Vec::new();
    rec(resolution, n_states, &mut Vec::new(), &mut counts);
    counts
        .into_iter()
        .map(|c| Belief::normalized(c.into_iter().enumerate().map(|(s, k)| (s, k as f64)).collect()).unwrap())
        .collect()
}

pub fn exact_value_iteration<M: Pomdp + ?Sized>(model: &M, horizon: usize) -> Result<ExactSolution> {
    check_scale(model, horizon)?;
    let mut vectors = vec![vec![0.0; model.n_states()]];
    for _ in 0..horizon {
        vectors = exact_backup(model, &vectors)?;
    }
    Ok(ExactSolution { horizon, vectors })
}

fn check_scale<M: Pomdp + ?Sized>(model: &M, horizon: usize) -> Result<()> {
    if model.n_states() > ORACLE_MAX_STATES || horizon > ORACLE_MAX_HORIZON {
        return Err(PomdpError::OracleScale(format!(
            "{} states, horizon {horizon} (limits {ORACLE_MAX_STATES}, {ORACLE_MAX_HORIZON})",
            model.n_states()
        )));
    }
    Ok(())
}

/// One synchronous exact Bellman backup of a vector set.
pub fn exact_backup<M: Pomdp + ?Sized>(model: &M, prev: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_scale(model, 0)?;
    let n = model.n_states();
    let n_obs = model.n_observations();
    let g = model.discount();
    let mut all = Vec::new();
    let mut trans = Vec::new();
    let mut obs = Vec::new();
    for a in 0..model.n_actions() {
        // projected[o][k][s] = r(s,a)/|O| + g * sum_s' T(s'|s,a) O(o|s',a) prev_k(s')
        let mut projected = vec![vec![vec![0.0; n]; prev.len()]; n_obs];
        for s in 0..n {
            let r = model.reward(s, a) / n_obs as f64;
            for per_o in projected.iter_mut() {
                for v in per_o.iter_mut() {
                    v[s] = r;
                }
            }
            model.transitions(s, a, &mut trans);
            for &(s2, pt) in &trans {
                model.observations(s2, a, &mut obs);
                for &(o, po) in &obs {
                    for (k, alpha) in prev.iter().enumerate() {
                        projected[o][k][s] += g * pt * po * alpha[s2];
                    }
                }
            }
        }
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for per_o in projected {
            let per_o = prune(per_o);
            acc = Some(match acc {
                None => per_o,
                Some(cur) => {
                    let mut sums = Vec::with_capacity(cur.len() * per_o.len());
                    for x in &cur {
                        for y in &per_o {
                            sums.push(x.iter().zip(y).map(|(p, q)| p + q).collect());
                        }
                    }
                    prune(sums)
                }
            });
        }
        all.extend(acc.unwrap_or_default());
    }
    Ok(prune(all))
}

fn lex_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x > y;
        }
    }
    false
}

/// Removes pointwise-dominated vectors, then filters the rest with
/// witness LPs against the growing kept set.
pub fn prune(cands: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(cands.len());
    for c in cands {
        if pool.iter().any(|p| c.iter().zip(p).all(|(x, y)| x <= y)) {
            continue;
        }
        pool.retain(|p| !p.iter().zip(&c).all(|(x, y)| x <= y));
        pool.push(c);
    }
    let Some(n) = pool.first().map(Vec::len) else { return pool };
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for s in 0..n {
        let mut best: Option<usize> = None;
        for (i, v) in pool.iter().enumerate() {
            if best.is_none_or(|k| v[s] > pool[k][s] || (v[s] == pool[k][s] && lex_greater(v, &pool[k]))) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            kept.push(pool.swap_remove(i));
        }
    }
    while let Some(c) = pool.pop() {
        if let Some(b) = witness(&c, &kept) {
            let mut best = c;
            let mut best_v: f64 = b.iter().zip(&best).map(|(p, x)| p * x).sum();
            let mut i = 0;
            while i < pool.len() {
                let v: f64 = b.iter().zip(&pool[i]).map(|(p, x)| p * x).sum();
                if v > best_v || (v == best_v && lex_greater(&pool[i], &best)) {
                    best_v = v;
                    std::mem::swap(&mut best, &mut pool[i]);
                }
                i += 1;
            }
            kept.push(best);
        }
    }
    kept
}

/// Belief where `c` beats every vector in `others` by more than the
/// tolerance, if one exists.
fn witness(c: &[f64], others: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = c.len();
    if others.is_empty() {
        return Some(vec![1.0 / n as f64; n]);
    }
    // Variables: b_0..b_{n-2} (b_{n-1} = 1 - sum) and d = delta + m_shift.
    let diffs: Vec<Vec<f64>> = others.iter().map(|o| o.iter().zip(c).map(|(x, y)| x - y).collect()).collect();
    let m_shift = diffs.iter().map(|d| d[n - 1]).fold(0.0f64, f64::max);
    let mut a = Vec::with_capacity(diffs.len() + 1);
    let mut b = Vec::with_capacity(diffs.len() + 1);
    for d in &diffs {
        let mut row: Vec<f64> = (0..n - 1).map(|i| d[i] - d[n - 1]).collect();
        row.push(1.0);
        a.push(row);
        b.push(m_shift - d[n - 1]);
    }
    let mut simplex_row = vec![1.0; n - 1];
    simplex_row.push(0.0);
    a.push(simplex_row);
    b.push(1.0);
    let mut obj = vec![0.0; n - 1];
    obj.push(1.0);
    match maximize(&a, &b, &obj) {
        LpOutcome::Optimal { value, x } => {
            if value - m_shift > WITNESS_TOL {
                let mut belief: Vec<f64> = x[..n - 1].iter().map(|v| v.max(0.0)).collect();
                let rest = (1.0 - belief.iter().sum::<f64>()).max(0.0);
                belief.push(rest);
                Some(belief)
            } else {
                None
            }
        }
        // undecided: keeping the vector is always safe
        LpOutcome::Stalled { x, .. } => {
            let mut belief: Vec<f64> = x[..n - 1].iter().map(|v| v.max(0.0)).collect();
            let rest = (1.0 - belief.iter().sum::<f64>()).max(0.0);
            belief.push(rest);
            Some(belief)
        }
        LpOutcome::Unbounded => Some(vec![1.0 / n as f64; n]),
    }
}
