//! Monte Carlo calibration of the per-user link abstraction the POMDP uses.
//!
//! One fixed-seed batch of slots is reduced to power-independent gains and
//! kept, so link tables for any budget or duplex mode come from the same
//! draws.

use rayon::prelude::*;

use crate::system::{LinkTable, MaskLink};

use super::config::ScenarioConfig;
use super::trace::{slot_gains, PhyConsts, SlotGains};

#[derive(Debug, Clone)]
pub struct Calibration {
    /// Level edges on the reference uplink SINR (dB), true channel.
    pub edges_db: Vec<f64>,
    /// Edges applied to the SINR computed from the estimate. The estimate
    /// carries the error term as interference, so its scale is lower; with
    /// equiprobable levels each gets its own quantiles.
    pub est_edges_db: Vec<f64>,
    pub samples: Vec<SlotGains>,
}

/// Channel level of a reference SINR: the number of edges at or below it.
pub fn quantize(edges: &[f64], db: f64) -> usize {
    edges.partition_point(|e| *e <= db)
}

/// Lower median of a nonempty sample.
fn median(mut v: Vec<u32>) -> u32 {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

fn median_f(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

impl Calibration {
    pub fn run(cfg: &ScenarioConfig) -> Self {
        let dims = cfg.dims().expect("validated config");
        let consts = PhyConsts::from_config(cfg);
        let masks = cfg.masks();
        let p_ref = cfg.power_reference();
        let seed = cfg.model.calibration_seed;
        let samples: Vec<SlotGains> =
            (0..cfg.model.calibration_slots as u64).into_par_iter().map(|t| slot_gains(&dims, cfg.phy.alpha, &masks, p_ref, &consts, seed, t)).collect();
        let quantiles = |f: fn(&SlotGains) -> &Vec<f64>| -> Vec<f64> {
            let mut pool: Vec<f64> = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
            pool.sort_by(f64::total_cmp);
            let l = cfg.model.levels;
            (1..l).map(|i| pool[i * pool.len() / l]).collect()
        };
        let (edges_db, est_edges_db) = match &cfg.model.level_edges_db {
            Some(e) => (e.clone(), e.clone()),
            None => (quantiles(|s| &s.ref_true_db), quantiles(|s| &s.ref_est_db)),
        };
        Self { edges_db, est_edges_db, samples }
    }

    /// True channel level.
    pub fn level(&self, db: f64) -> usize {
        quantize(&self.edges_db, db)
    }

    /// Level the controller observes.
    pub fn est_level(&self, db: f64) -> usize {
        quantize(&self.est_edges_db, db)
    }

    pub fn levels(&self) -> usize {
        self.edges_db.len() + 1
    }

    /// Link abstraction for the budget and duplex mode of `cfg`.
    pub fn link_table(&self, cfg: &ScenarioConfig) -> LinkTable {
        let consts = PhyConsts::from_config(cfg);
        let l = self.levels();
        let k = cfg.dims.k;
        let unit = cfg.unit_j();
        let power_up = power_grid(cfg);
        let units = energy_units(cfg, &power_up);
        let mut level_count = vec![0.0; l];
        let mut confusion = vec![vec![0.0; l]; l];
        for s in &self.samples {
            for u in 0..k {
                let (t, e) = (self.level(s.ref_true_db[u]), self.est_level(s.ref_est_db[u]));
                level_count[t] += 1.0;
                confusion[t][e] += 1.0;
            }
        }
        let total: f64 = level_count.iter().sum();
        let level_pmf: Vec<f64> = level_count.iter().map(|c| c / total).collect();
        for (t, row) in confusion.iter_mut().enumerate() {
            let n: f64 = row.iter().sum();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                row[t] = 1.0;
            }
        }
        let masks = (0..cfg.masks().len())
            .map(|m| {
                let mut by_level: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); power_up.len()]; l];
                let mut harvest = vec![0.0; cfg.energy.e_max as usize + 1];
                let mut down = Vec::new();
                let top = vec![*power_up.last().expect("nonempty grid"); k];
                for s in &self.samples {
                    let g = &s.masks[m];
                    for u in 0..k {
                        let lv = self.level(s.ref_true_db[u]);
                        for (i, &p) in power_up.iter().enumerate() {
                            by_level[lv][i].push(consts.packets(&consts.uplink_sinr(g, u, &vec![p; k])));
                        }
                        harvest[consts.harvest_units(g, u, unit, cfg.energy.e_max) as usize] += 1.0;
                        down.push(consts.packets(&[consts.downlink_sinr(g, u, &top)]) as f64);
                    }
                }
                let n: f64 = harvest.iter().sum();
                MaskLink {
                    active: g_active(&self.samples, m),
                    served: by_level.into_iter().map(|row| row.into_iter().map(|v| if v.is_empty() { 0 } else { median(v) }).collect()).collect(),
                    harvest: harvest.iter().enumerate().filter(|x| *x.1 > 0.0).map(|(h, c)| (h as u32, c / n)).collect(),
                    rate_down: median_f(down),
                }
            })
            .collect();
        LinkTable { level_pmf, confusion, power_up, units, p_down: consts.p_down, masks }
    }
}

fn g_active(samples: &[SlotGains], m: usize) -> usize {
    samples[0].masks[m].active
}

/// Uplink power levels (W) of the scenario's budget.
pub fn power_grid(cfg: &ScenarioConfig) -> Vec<f64> {
    cfg.power.fractions.iter().map(|f| f * cfg.power.up_max_w).collect()
}

/// Whole units spent per slot at each power level over the uplink air time.
pub fn energy_units(cfg: &ScenarioConfig, powers: &[f64]) -> Vec<u32> {
    let air = PhyConsts::from_config(cfg).airtime();
    let unit = cfg.unit_j();
    powers.iter().map(|p| (p * air / unit - 1e-9).ceil().max(0.0) as u32).collect()
}
