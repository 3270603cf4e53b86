//! Heuristic search value iteration over the sparse belief machinery.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bounds::{AlphaVector, BoundPair, Interpolation, LowerBound, UpperBound};
use super::ssea::ssea_grow;
use super::{admissible_actions, belief_reward, successors, Belief, Pomdp, PomdpError, Result, Successor};

/// Models at least this large get parallel loops over states and actions.
const PAR_STATES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpperInit {
    /// Best stage reward over `1 - discount` at every corner.
    BestCase,
    /// Fully observed MDP values.
    Mdp,
    /// Fast informed bound.
    FastInformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsviConfig {
    pub eps: f64,
    pub max_iterations: usize,
    pub time_budget: Option<Duration>,
    /// Defaults to `ceil(log_discount(eps / initial gap)) + 20`.
    pub depth_cap: Option<usize>,
    pub upper_init: UpperInit,
    pub interpolation: Interpolation,
    /// Also back up each visited belief on the way down.
    pub pre_update: bool,
    /// Convergence tolerance of the iterative upper-bound initializers.
    pub init_tol: f64,
    /// Witness pruning of the alpha set every this many updates (0 = never).
    pub prune_every: usize,
    /// SSEA belief points backed up before the first trial.
    pub ssea_points: usize,
    pub seed: u64,
    pub record_wall_ms: bool,
    pub trace: bool,
}

impl Default for HsviConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_iterations: 10_000,
            time_budget: None,
            depth_cap: None,
            upper_init: UpperInit::BestCase,
            interpolation: Interpolation::Lp,
            pre_update: true,
            init_tol: 1e-9,
            prune_every: 64,
            ssea_points: 0,
            seed: 0,
            record_wall_ms: false,
            trace: false,
        }
    }
}

/// One solver log line. Values are in reward orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub root_lower: f64,
    pub root_upper: f64,
    pub alphas: usize,
    pub upper_points: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct HsviResult {
    pub bounds: BoundPair,
    pub log: Vec<LogRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub truncations: usize,
    pub root_lower: f64,
    pub root_upper: f64,
}

/// Per-action lookahead at a belief.
#[derive(Debug, Clone)]
pub struct ActionEval {
    pub action: usize,
    pub succ: Vec<Successor>,
    /// Index of the best lower-bound vector at each successor.
    pub lower_idx: Vec<usize>,
    /// Bound values at each successor (upper is NaN when not requested).
    pub succ_lower: Vec<f64>,
    pub succ_upper: Vec<f64>,
    pub q_lower: f64,
    pub q_upper: f64,
}

pub fn evaluate_actions<M: Pomdp + ?Sized>(
    model: &M,
    bounds: &BoundPair,
    b: &Belief,
    actions: &[usize],
    need_upper: bool,
) -> Result<Vec<ActionEval>> {
    if actions.is_empty() {
        return Err(PomdpError::NoAdmissibleAction);
    }
    let g = model.discount();
    let eval = |&a: &usize| -> Result<ActionEval> {
        let r = belief_reward(model, b, a);
        let succ = successors(model, b, a);
        let mut lower_idx = Vec::with_capacity(succ.len());
        let mut succ_lower = Vec::with_capacity(succ.len());
        let mut succ_upper = Vec::with_capacity(succ.len());
        let (mut lo, mut up) = (0.0, 0.0);
        for x in &succ {
            let (v, i) = bounds.lower.value(&x.belief)?;
            lower_idx.push(i);
            succ_lower.push(v);
            lo += x.prob * v;
            let u = if need_upper { bounds.upper.value(&x.belief) } else { f64::NAN };
            succ_upper.push(u);
            up += x.prob * u;
        }
        let q_upper = if need_upper { r + g * up } else { f64::NAN };
        Ok(ActionEval { action: a, succ, lower_idx, succ_lower, succ_upper, q_lower: r + g * lo, q_upper })
    };
    if model.n_states() >= PAR_STATES {
        actions.par_iter().map(eval).collect()
    } else {
        actions.iter().map(eval).collect()
    }
}

fn argmax_by(evals: &[ActionEval], kind: BoundKind) -> usize {
    let key = |e: &ActionEval| match kind {
        BoundKind::Lower => e.q_lower,
        BoundKind::Upper => e.q_upper,
    };
    let mut best = 0;
    for i in 1..evals.len() {
        if key(&evals[i]) > key(&evals[best]) {
            best = i;
        }
    }
    best
}

/// Best one-step lookahead value at `b` against one bound, with the
/// maximizing action (lowest index on ties). Uses admissible actions.
pub fn bellman_value<M: Pomdp + ?Sized>(b: &Belief, bounds: &BoundPair, model: &M, kind: BoundKind) -> Result<(f64, usize)> {
    let evals = evaluate_actions(model, bounds, b, &admissible_actions(model, b), kind == BoundKind::Upper)?;
    let i = argmax_by(&evals, kind);
    let v = match kind {
        BoundKind::Lower => evals[i].q_lower,
        BoundKind::Upper => evals[i].q_upper,
    };
    Ok((v, evals[i].action))
}

pub fn excess_uncertainty(b: &Belief, bounds: &BoundPair, t: usize, eps: f64, discount: f64) -> Result<f64> {
    Ok(bounds.gap(b)? - threshold(eps, discount, t))
}

fn threshold(eps: f64, discount: f64, t: usize) -> f64 {
    eps / discount.powi(t as i32)
}

/// Builds the full alpha-vector for the best lower-bound action in `evals`.
/// Observations unreachable from the belief take the vector that is best at
/// their likelihood-weighted belief.
pub fn alpha_from_evals<M: Pomdp + ?Sized>(model: &M, lower: &LowerBound, evals: &[ActionEval]) -> Result<AlphaVector> {
    let ev = &evals[argmax_by(evals, BoundKind::Lower)];
    let a = ev.action;
    let n = model.n_states();
    let mut choice: Vec<Option<usize>> = vec![None; model.n_observations()];
    for (x, &i) in ev.succ.iter().zip(&ev.lower_idx) {
        choice[x.obs] = Some(i);
    }
    let mut lik: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut trans = Vec::new();
    let mut obs = Vec::new();
    for s in 0..n {
        model.transitions(s, a, &mut trans);
        for &(s2, p) in &trans {
            model.observations(s2, a, &mut obs);
            for &(o, q) in &obs {
                if choice[o].is_none() && p * q > 0.0 {
                    lik.entry(o).or_default().push((s2, p * q));
                }
            }
        }
    }
    for (o, w) in lik {
        let b = Belief::normalized(w)?;
        choice[o] = Some(lower.value(&b)?.1);
    }
    let g = model.discount();
    let alphas = lower.alphas();
    let entry = |s: usize| -> f64 {
        let mut trans = Vec::new();
        let mut obs = Vec::new();
        let mut v = 0.0;
        model.transitions(s, a, &mut trans);
        for &(s2, p) in &trans {
            model.observations(s2, a, &mut obs);
            for &(o, q) in &obs {
                if let Some(i) = choice[o] {
                    v += p * q * alphas[i].values[s2];
                }
            }
        }
        model.reward(s, a) + g * v
    };
    let values: Vec<f64> = if n >= PAR_STATES { (0..n).into_par_iter().map(entry).collect() } else { (0..n).map(entry).collect() };
    Ok(AlphaVector { values, action: a })
}

/// Point-based backup at `b` over admissible actions.
pub fn backup<M: Pomdp + ?Sized>(b: &Belief, bounds: &BoundPair, model: &M) -> Result<AlphaVector> {
    let evals = evaluate_actions(model, bounds, b, &admissible_actions(model, b), false)?;
    alpha_from_evals(model, &bounds.lower, &evals)
}

pub type ActionFilter<'a> = &'a (dyn Fn(&Belief) -> Vec<usize> + Sync);

pub struct Hsvi<'a, M: Pomdp + ?Sized> {
    model: &'a M,
    cfg: HsviConfig,
    filter: Option<ActionFilter<'a>>,
    pub bounds: BoundPair,
    pub trace: Vec<Belief>,
    pub truncations: usize,
    updates: usize,
    root: Option<Belief>,
}

impl<'a, M: Pomdp + ?Sized> Hsvi<'a, M> {
    pub fn new(model: &'a M, cfg: HsviConfig, filter: Option<ActionFilter<'a>>, b0: &Belief) -> Result<Self> {
        let lower = initial_lower(model, filter, b0);
        let upper = initial_upper(model, cfg.upper_init, cfg.init_tol)?.with_mode(cfg.interpolation);
        Ok(Self { model, cfg, filter, bounds: BoundPair { lower, upper }, trace: Vec::new(), truncations: 0, updates: 0, root: None })
    }

    pub fn config(&self) -> &HsviConfig {
        &self.cfg
    }

    pub fn actions(&self, b: &Belief) -> Vec<usize> {
        match self.filter {
            Some(f) => f(b),
            None => admissible_actions(self.model, b),
        }
    }

    pub fn evaluate(&self, b: &Belief, need_upper: bool) -> Result<Vec<ActionEval>> {
        evaluate_actions(self.model, &self.bounds, b, &self.actions(b), need_upper)
    }

    pub fn bellman(&self, b: &Belief, kind: BoundKind) -> Result<(f64, usize)> {
        let evals = self.evaluate(b, kind == BoundKind::Upper)?;
        let i = argmax_by(&evals, kind);
        let v = match kind {
            BoundKind::Lower => evals[i].q_lower,
            BoundKind::Upper => evals[i].q_upper,
        };
        Ok((v, evals[i].action))
    }

    /// Lookahead action against the lower bound.
    pub fn greedy_action(&self, b: &Belief) -> Result<usize> {
        Ok(self.bellman(b, BoundKind::Lower)?.1)
    }

    /// Backs up both bounds at `b`.
    pub fn update(&mut self, b: &Belief) -> Result<()> {
        let evals = self.evaluate(b, true)?;
        self.update_with(b, &evals)
    }

    /// Backs up both bounds at `b` from a lookahead computed there.
    fn update_with(&mut self, b: &Belief, evals: &[ActionEval]) -> Result<()> {
        let alpha = alpha_from_evals(self.model, &self.bounds.lower, &evals)?;
        let v_up = evals[argmax_by(&evals, BoundKind::Upper)].q_upper;
        self.bounds.lower.insert(alpha);
        self.bounds.upper.insert(b.clone(), v_up);
        self.updates += 1;
        if self.cfg.prune_every > 0 && self.updates % self.cfg.prune_every == 0 {
            let mut w: Vec<Belief> = self.bounds.upper.points().iter().map(|p| p.0.clone()).collect();
            w.extend(self.root.clone());
            self.bounds.lower.prune(&w);
            self.bounds.upper.prune();
        }
        Ok(())
    }

    pub fn explore(&mut self, b: &Belief, t: usize, cap: usize) -> Result<()> {
        let g = self.model.discount();
        if self.bounds.gap(b)? <= threshold(self.cfg.eps, g, t) {
            return Ok(());
        }
        if self.cfg.trace {
            self.trace.push(b.clone());
        }
        if t >= cap {
            self.truncations += 1;
            return self.update(b);
        }
        // One lookahead drives the branch choice and, when enabled, an
        // early backup that tightens b before the deeper trial returns.
        let next = {
            let evals = self.evaluate(b, true)?;
            if self.cfg.pre_update {
                self.update_with(b, &evals)?;
            }
            let ev = &evals[argmax_by(&evals, BoundKind::Upper)];
            let thr = threshold(self.cfg.eps, g, t + 1);
            let mut best: Option<(f64, usize)> = None;
            for (k, x) in ev.succ.iter().enumerate() {
                let score = x.prob * (ev.succ_upper[k] - ev.succ_lower[k] - thr);
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, k));
                }
            }
            best.map(|(_, k)| ev.succ[k].belief.clone())
        };
        if let Some(nb) = next {
            self.explore(&nb, t + 1, cap)?;
        }
        self.update(b)
    }

    pub fn default_depth_cap(&self, gap: f64) -> usize {
        let g = self.model.discount();
        if gap <= self.cfg.eps || g <= 0.0 {
            return 20;
        }
        ((self.cfg.eps / gap).ln() / g.ln()).ceil() as usize + 20
    }

    fn record(&self, b0: &Belief, iteration: usize, start: Instant) -> Result<LogRecord> {
        Ok(LogRecord {
            iteration,
            root_lower: self.bounds.lower.value(b0)?.0,
            root_upper: self.bounds.upper.value(b0),
            alphas: self.bounds.lower.len(),
            upper_points: self.bounds.upper.len(),
            wall_ms: self.cfg.record_wall_ms.then(|| start.elapsed().as_millis() as u64),
        })
    }

    pub fn solve(&mut self, b0: &Belief) -> Result<HsviResult> {
        if !(self.cfg.eps > 0.0) {
            return Err(PomdpError::InvalidModel("eps must be positive".into()));
        }
        let start = Instant::now();
        self.root = Some(b0.clone());
        if self.cfg.ssea_points > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            let set = ssea_grow(b0, self.model, self.cfg.ssea_points, &mut rng);
            for b in set.iter().rev() {
                self.update(b)?;
            }
        }
        let cap = match self.cfg.depth_cap {
            Some(c) => c,
            None => self.default_depth_cap(self.bounds.gap(b0)?),
        };
        let mut log = Vec::new();
        let mut iteration = 0;
        let converged = loop {
            let rec = self.record(b0, iteration, start)?;
            let gap = rec.root_upper - rec.root_lower;
            log.push(rec);
            if gap < self.cfg.eps {
                break true;
            }
            if iteration >= self.cfg.max_iterations || self.cfg.time_budget.is_some_and(|t| start.elapsed() >= t) {
                break false;
            }
            self.explore(b0, 0, cap)?;
            iteration += 1;
        };
        let last = log.last().expect("log has the initial record");
        Ok(HsviResult {
            root_lower: last.root_lower,
            root_upper: last.root_upper,
            bounds: self.bounds.clone(),
            log,
            converged,
            iterations: iteration,
            truncations: self.truncations,
        })
    }
}

fn initial_lower<M: Pomdp + ?Sized>(model: &M, filter: Option<ActionFilter<'_>>, b0: &Belief) -> LowerBound {
    let n = model.n_states();
    let g = model.discount();
    let at_root: Vec<usize> = match filter {
        Some(f) => f(b0),
        None => (0..model.n_actions()).collect(),
    };
    let everywhere: Vec<usize> = at_root.into_iter().filter(|&a| (0..n).all(|s| model.admissible(s, a))).collect();
    let mut best: Option<(f64, usize)> = None;
    for &a in &everywhere {
        let worst = (0..n).map(|s| model.reward(s, a)).fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(v, _)| worst > v) {
            best = Some((worst, a));
        }
    }
    let (v, a) = best.unwrap_or_else(|| {
        let worst = (0..n).flat_map(|s| (0..model.n_actions()).map(move |a| (s, a))).map(|(s, a)| model.reward(s, a)).fold(f64::INFINITY, f64::min);
        (worst, 0)
    });
    LowerBound::new(vec![AlphaVector { values: vec![v / (1.0 - g); n], action: a }])
}

fn initial_upper<M: Pomdp + ?Sized>(model: &M, init: UpperInit, tol: f64) -> Result<UpperBound> {
    let n = model.n_states();
    let na = model.n_actions();
    let g = model.discount();
    let best = (0..n).flat_map(|s| (0..na).map(move |a| (s, a))).map(|(s, a)| model.reward(s, a)).fold(f64::NEG_INFINITY, f64::max);
    let flat = best / (1.0 - g);
    let corners = match init {
        UpperInit::BestCase => vec![flat; n],
        UpperInit::Mdp => {
            let mut v = vec![flat; n];
            loop {
                let next: Vec<f64> = (0..n)
                    .map(|s| {
                        let mut trans = Vec::new();
                        (0..na)
                            .map(|a| {
                                model.transitions(s, a, &mut trans);
                                model.reward(s, a) + g * trans.iter().map(|&(s2, p)| p * v[s2]).sum::<f64>()
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = next;
                if diff * g / (1.0 - g) <= tol {
                    break;
                }
            }
            v
        }
        UpperInit::FastInformed => {
            // per (s, a): observation-grouped (s', weight) lists
            let mut trans = Vec::new();
            let mut obs = Vec::new();
            let mut groups: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(n * na);
            for s in 0..n {
                for a in 0..na {
                    let mut by_o: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
                    model.transitions(s, a, &mut trans);
                    for &(s2, p) in &trans {
                        model.observations(s2, a, &mut obs);
                        for &(o, q) in &obs {
                            by_o.entry(o).or_default().push((s2, p * q));
                        }
                    }
                    groups.push(by_o.into_values().collect());
                }
            }
            let mut q = vec![flat; n * na];
            loop {
                let next: Vec<f64> = (0..n * na)
                    .map(|i| {
                        let (s, a) = (i / na, i % na);
                        let future: f64 = groups[i]
                            .iter()
                            .map(|grp| (0..na).map(|a2| grp.iter().map(|&(s2, w)| w * q[s2 * na + a2]).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max))
                            .sum();
                        model.reward(s, a) + g * future
                    })
                    .collect();
                let diff = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                q = next;
                if diff * g / (1.0 - g) <= tol {
                    break;
                }
            }
            (0..n).map(|s| (0..na).map(|a| q[s * na + a]).fold(f64::NEG_INFINITY, f64::max)).collect()
        }
    };
    UpperBound::new(corners, n)
}
