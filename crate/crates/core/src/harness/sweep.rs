//! Delay-versus-power and effective-power-versus-array-size sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_user_channels, uplink_sinr, AntennaSelection, BeamformerSet, Dims, Link, UplinkNoise};

use super::baselines::{baseline_policy, PolicyKind};
use super::calibrate::Calibration;
use super::config::{Duplex, ScenarioConfig};
use super::episode::{mean_ci, monte_carlo_on, slot_key, traces, RunResult};
use super::trace::PhyConsts;
use super::HarnessError;

/// One row of the delay-versus-power table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub scenario_hash: String,
    pub policy: String,
    pub budget_w: f64,
    pub delay_ms_mean: f64,
    pub delay_ms_ci: f64,
    /// Per-user averages.
    pub p_up_w: f64,
    pub p_down_w: f64,
    pub rate_up: f64,
    pub rate_down: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct PowerSweep {
    pub rows: Vec<PowerRow>,
    pub results: Vec<RunResult>,
    /// Solver runs that stopped on their iteration or time budget.
    pub unconverged: usize,
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Every `(budget, policy)` pair on one shared set of episode traces.
pub fn sweep_power(cfg: &ScenarioConfig, budgets: &[f64], policies: &[PolicyKind], episodes: usize, horizon: usize, seed: u64) -> Result<PowerSweep, HarnessError> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Incompatible("budgets must be increasing".into()));
    }
    let mut base = cfg.clone();
    // the largest budget fixes the energy unit and the level reference
    base.sweep.budgets_w = budgets.to_vec();
    let cal = Calibration::run(&base);
    let tr = traces(&base, seed, episodes, horizon);
    let hash = cfg.hash();
    let mut out = PowerSweep { rows: Vec::new(), results: Vec::new(), unconverged: 0 };
    for &b in budgets {
        let at = base.with_budget(b);
        for &kind in policies {
            let built = baseline_policy(kind, &at, &cal)?;
            out.unconverged += built.solves.iter().filter(|r| !r.converged).count();
            let r = monte_carlo_on(&kind.scenario(&at), &cal, &built.policy, &tr, seed)?;
            out.rows.push(PowerRow {
                scenario_hash: hash.clone(),
                policy: kind.name().to_string(),
                budget_w: b,
                delay_ms_mean: r.delay_ms_mean,
                delay_ms_ci: r.delay_ms_ci,
                p_up_w: r.p_up_w_mean,
                p_down_w: avg(&r.p_down_w),
                rate_up: avg(&r.rate_up),
                rate_down: avg(&r.rate_down),
                episodes,
            });
            out.results.push(r);
        }
    }
    Ok(out)
}

/// One row of the effective-power table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaRow {
    pub scenario_hash: String,
    pub policy: String,
    pub n_r: usize,
    pub effective_power_w: f64,
    pub effective_power_ci: f64,
    /// Share of slots where even the largest power missed the rate target.
    pub outage: f64,
    pub episodes: usize,
}

/// Active-antenna counts tried by the selection heuristic: evenly spaced
/// from the ZF minimum to the full array, at most `limit` of them.
pub fn candidates(min: usize, n_r: usize, limit: usize) -> Vec<usize> {
    let span = n_r - min;
    if span + 1 <= limit.max(2) {
        return (min..=n_r).collect();
    }
    let s = limit.max(2);
    let mut v: Vec<usize> = (0..s).map(|i| min + (i * span + (s - 1) / 2) / (s - 1)).collect();
    v.dedup();
    v
}

/// Stream SINRs as a function of a common uplink power `p`: every term but
/// the noise scales with `p`, so `1 / sinr(p) = a + c / p`.
#[derive(Debug, Clone)]
pub struct CommonPowerSinr {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl CommonPowerSinr {
    pub fn fit(at1: &[Vec<f64>], at2: &[Vec<f64>]) -> Self {
        let mut a = Vec::new();
        let mut c = Vec::new();
        for (u1, u2) in at1.iter().zip(at2) {
            let cu: Vec<f64> = u1.iter().zip(u2).map(|(g1, g2)| 2.0 * (1.0 / g1 - 1.0 / g2)).collect();
            a.push(u1.iter().zip(&cu).map(|(g1, c)| 1.0 / g1 - c).collect());
            c.push(cu);
        }
        Self { a, c }
    }

    pub fn at(&self, user: usize, p: f64) -> Vec<f64> {
        self.a[user].iter().zip(&self.c[user]).map(|(a, c)| if p > 0.0 { 1.0 / (a + c / p) } else { 0.0 }).collect()
    }
}

/// Effective power of one slot: transmit power scaled by the active share
/// of the array plus circuit power per active antenna.
pub fn effective_power(users: usize, p: f64, n_active: usize, n_r: usize, circuit_w: f64) -> f64 {
    users as f64 * p * n_active as f64 / n_r as f64 + n_active as f64 * circuit_w
}

/// Smallest common power in `[0, p_max]` meeting `target` packets per user,
/// judged on the estimated channel. `None` when `p_max` falls short.
fn required_power(model: &CommonPowerSinr, consts: &PhyConsts, users: usize, target: f64, p_max: f64) -> Option<f64> {
    let ok = |p: f64| (0..users).all(|u| consts.packets(&model.at(u, p)) as f64 >= target);
    if !ok(p_max) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, p_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Per-slot effective power with and without selection.
fn antenna_slot(cfg: &ScenarioConfig, dims: &Dims, consts: &PhyConsts, seed: u64, key: u64) -> (f64, f64, bool) {
    let k = dims.k;
    let up = draw_user_channels(dims, cfg.phy.alpha, seed, key, Link::Uplink).expect("dims validated");
    let down = draw_user_channels(dims, cfg.phy.alpha, seed, key, Link::Downlink).expect("dims validated");
    let si = if consts.duplex == Duplex::Full { consts.self_int } else { 0.0 };
    let noise = UplinkNoise { sigma2: consts.sigma2, self_interference: si };
    let p_max = cfg.power_reference();
    let target = cfg.r_min_up();
    let pc = cfg.phy.circuit_power_w;
    let mut best: Option<f64> = None;
    let mut full = None;
    for n_a in candidates(k * dims.n_u, dims.n_r, cfg.model.mask_shortlist) {
        let sel = if n_a == dims.n_r { AntennaSelection::all(dims) } else { AntennaSelection::norm_greedy(&up, n_a, dims).expect("size validated") };
        let eval = |p: f64| BeamformerSet::zero_forcing(dims, &down, &sel, vec![p; k], vec![consts.p_down; k]).and_then(|bf| uplink_sinr(&up, &sel, &bf, &noise));
        let p = match (eval(1.0), eval(2.0)) {
            (Ok(g1), Ok(g2)) => required_power(&CommonPowerSinr::fit(&g1, &g2), consts, k, target, p_max),
            _ => None,
        };
        if let Some(p) = p {
            let e = effective_power(k, p, n_a, dims.n_r, pc);
            best = Some(best.map_or(e, |b: f64| b.min(e)));
        }
        if n_a == dims.n_r {
            full = p;
        }
    }
    let outage = full.is_none();
    let no_sel = effective_power(k, full.unwrap_or(p_max), dims.n_r, dims.n_r, pc);
    (best.unwrap_or(no_sel).min(no_sel), no_sel, outage)
}

/// Effective power versus array size, selection on and off, on shared draws.
pub fn sweep_antennas(cfg: &ScenarioConfig, n_rs: &[usize], episodes: usize, horizon: usize, seed: u64) -> Result<Vec<AntennaRow>, HarnessError> {
    if episodes < 2 {
        return Err(HarnessError::Incompatible("the antenna sweep needs at least two episodes".into()));
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for &n_r in n_rs {
        let dims = Dims::new(n_r, cfg.dims.n_u, cfg.dims.k).map_err(|e| HarnessError::Incompatible(e.to_string()))?;
        let mut at = cfg.clone();
        at.dims.n_r = n_r;
        let consts = PhyConsts::from_config(&at);
        let per: Vec<(f64, f64, f64)> = (0..episodes)
            .into_par_iter()
            .map(|e| {
                let mut acc = (0.0, 0.0, 0.0);
                for t in 0..horizon {
                    let (s, n, o) = antenna_slot(&at, &dims, &consts, seed, slot_key(e, t));
                    acc.0 += s;
                    acc.1 += n;
                    acc.2 += o as u8 as f64;
                }
                let h = horizon as f64;
                (acc.0 / h, acc.1 / h, acc.2 / h)
            })
            .collect();
        let outage = per.iter().map(|x| x.2).sum::<f64>() / episodes as f64;
        for (name, pick) in [("selection", 0usize), ("no-selection", 1)] {
            let xs: Vec<f64> = per.iter().map(|x| if pick == 0 { x.0 } else { x.1 }).collect();
            let (m, ci) = mean_ci(&xs);
            rows.push(AntennaRow {
                scenario_hash: hash.clone(),
                policy: name.to_string(),
                n_r,
                effective_power_w: m,
                effective_power_ci: ci,
                outage,
                episodes,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_lists() {
        assert_eq!(candidates(6, 8, 16), vec![6, 7, 8]);
        let c = candidates(6, 32, 4);
        assert_eq!(c.first(), Some(&6));
        assert_eq!(c.last(), Some(&32));
        assert_eq!(c.len(), 4);
        assert_eq!(candidates(6, 6, 16), vec![6]);
    }

    #[test]
    fn common_power_fit_is_exact() {
        let dims = Dims::new(8, 2, 2).unwrap();
        let cfg = ScenarioConfig::desk("a");
        let consts = PhyConsts::from_config(&cfg);
        let up = draw_user_channels(&dims, 0.2, 3, 0, Link::Uplink).unwrap();
        let down = draw_user_channels(&dims, 0.2, 3, 0, Link::Downlink).unwrap();
        let sel = AntennaSelection::all(&dims);
        let noise = UplinkNoise { sigma2: consts.sigma2, self_interference: consts.self_int };
        let eval = |p: f64| uplink_sinr(&up, &sel, &BeamformerSet::zero_forcing(&dims, &down, &sel, vec![p; 2], vec![0.5; 2]).unwrap(), &noise).unwrap();
        let fit = CommonPowerSinr::fit(&eval(1.0), &eval(2.0));
        let direct = eval(0.37);
        for u in 0..2 {
            for (x, y) in fit.at(u, 0.37).iter().zip(&direct[u]) {
                assert!((x - y).abs() <= 1e-9 * y);
            }
        }
    }

    #[test]
    fn selection_off_is_full_array_power() {
        assert!((effective_power(3, 0.1, 16, 16, 0.05) - (0.3 + 0.8)).abs() < 1e-15);
        let mut cfg = ScenarioConfig::full("a");
        cfg.constraints.r_min_up = Some(1.0);
        let rows = sweep_antennas(&cfg, &[6, 8], 2, 3, 1).unwrap();
        for pair in rows.chunks(2) {
            assert!(pair[0].effective_power_w <= pair[1].effective_power_w + 1e-12);
        }
        // the minimum array leaves nothing to select
        assert_eq!(rows[0].effective_power_w, rows[1].effective_power_w);
    }
}
