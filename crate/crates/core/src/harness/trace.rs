//! Per-slot physical-layer factors.
//!
//! Every SINR used by the harness is a ratio of terms linear in the transmit
//! powers, so one channel draw is reduced to its power-independent gains and
//! reused across policies, budgets and duplex modes (common random numbers).
//!
//! The uplink receiver is ZF designed on the estimated channel and evaluated
//! on the true one, so imperfect CSI shows up as residual interference and as
//! a mismatch between the estimated and realized channel level.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::{
    draw_inter_user, draw_user_channels, stacked_uplink, stream_rng, uplink_sinr, zf_equalizer, AntennaSelection,
    BeamformerSet, ChannelPair, Dims, Link, UplinkNoise, DEFAULT_CONDITION_CAP,
};

use super::config::{Duplex, ScenarioConfig};

fn db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

fn frob_sq(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|x| x.norm_sqr()).sum()
}

/// Power-independent gains of one slot under one antenna mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGains {
    pub active: usize,
    /// `[k][s]`: desired stream gain, own cross-stream leakage, noise projection.
    pub sig: Vec<Vec<f64>>,
    pub own_leak: Vec<Vec<f64>>,
    pub noise_proj: Vec<Vec<f64>>,
    /// `[k][i][s]`: leakage of user `i` into stream `s` of user `k`.
    pub other: Vec<Vec<Vec<f64>>>,
    /// RF power at user `k` per watt of common downlink power.
    pub rx_gain: Vec<f64>,
    /// Downlink SINR terms at unit powers: signal, inter-user, estimation
    /// error and uplink leakage `[k][i]`.
    pub dl_signal: Vec<f64>,
    pub dl_inter: Vec<Vec<f64>>,
    pub dl_error: Vec<Vec<f64>>,
    pub dl_uplink: Vec<Vec<f64>>,
}

/// All factors of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGains {
    /// Reference uplink SINR (dB, mean over streams) on the true and on the
    /// estimated channel, full array, every user at the reference power.
    pub ref_true_db: Vec<f64>,
    pub ref_est_db: Vec<f64>,
    pub masks: Vec<MaskGains>,
    pub arrivals: Vec<u32>,
}

/// Scalars the SINR evaluation needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhyConsts {
    pub alpha: f64,
    pub rho: f64,
    pub eta: f64,
    pub sigma2: f64,
    pub sigma_d2: f64,
    pub sigma_s2: f64,
    pub self_int: f64,
    pub cross_gain: f64,
    pub loop_gain: f64,
    pub bandwidth: f64,
    pub slot: f64,
    pub packet_bits: f64,
    pub duplex: Duplex,
    pub p_down: f64,
    pub n_u: usize,
}

impl PhyConsts {
    pub fn from_config(c: &ScenarioConfig) -> Self {
        Self {
            alpha: c.phy.alpha,
            rho: c.phy.rho,
            eta: c.phy.eta,
            sigma2: c.phy.noise_up_w,
            sigma_d2: c.phy.noise_down_w,
            sigma_s2: c.phy.noise_conv_w,
            self_int: db(c.phy.self_interference_db),
            cross_gain: db(c.phy.cross_gain_db),
            loop_gain: db(c.phy.loop_gain_db),
            bandwidth: c.phy.bandwidth_hz,
            slot: c.phy.slot_s,
            packet_bits: c.traffic.packet_bits,
            duplex: c.phy.duplex,
            p_down: c.power.down_w,
            n_u: c.dims.n_u,
        }
    }

    /// Air time per direction: half-duplex splits the slot in two.
    pub fn airtime(&self) -> f64 {
        match self.duplex {
            Duplex::Full => self.slot,
            Duplex::Half => self.slot / 2.0,
        }
    }

    fn full_duplex(&self) -> bool {
        self.duplex == Duplex::Full
    }

    /// Effective uplink noise including residual self-interference (full
    /// duplex only).
    pub fn uplink_noise(&self, users: usize) -> f64 {
        let si = if self.full_duplex() { self.self_int * self.p_down * users as f64 } else { 0.0 };
        self.sigma2 + si
    }

    /// Realized per-stream uplink SINR of user `k`.
    pub fn uplink_sinr(&self, g: &MaskGains, k: usize, p_up: &[f64]) -> Vec<f64> {
        realized_uplink(g, k, p_up, self.uplink_noise(p_up.len()))
    }
}

/// Per-stream SINR of user `k` at the ZF output, evaluated on the true channel.
pub fn realized_uplink(g: &MaskGains, k: usize, p_up: &[f64], noise: f64) -> Vec<f64> {
    (0..g.sig[k].len())
            .map(|s| {
                if p_up[k] == 0.0 {
                    return 0.0;
                }
                let mut den = p_up[k] * g.own_leak[k][s] + noise * g.noise_proj[k][s];
                for (i, &p) in p_up.iter().enumerate() {
                    if i != k {
                        den += p * g.other[k][i][s];
                    }
                }
                p_up[k] * g.sig[k][s] / den
            })
            .collect()
}

impl PhyConsts {
    /// Packets deliverable in one slot at the given stream SINRs.
    pub fn packets(&self, sinrs: &[f64]) -> u32 {
        let se: f64 = sinrs.iter().map(|g| (1.0 + g).log2()).sum();
        crate::channel::achievable_rate(2f64.powf(se) - 1.0, self.bandwidth, self.airtime(), self.packet_bits)
    }

    /// Aggregate downlink SINR of user `k` with a common downlink power.
    pub fn downlink_sinr(&self, g: &MaskGains, k: usize, p_up: &[f64]) -> f64 {
        let a2 = self.alpha * self.alpha;
        let scale = 1.0 - a2;
        let pd = self.p_down;
        let signal = pd * g.dl_signal[k];
        if signal == 0.0 {
            return 0.0;
        }
        let mut inter = 0.0;
        let mut err = 0.0;
        let mut ul = 0.0;
        for i in 0..p_up.len() {
            if i != k {
                inter += pd * g.dl_inter[k][i];
            }
            err += pd * g.dl_error[k][i];
            if self.full_duplex() {
                let gain = if i == k { self.loop_gain } else { self.cross_gain };
                ul += gain * p_up[i] * g.dl_uplink[k][i];
            }
        }
        let noise = self.n_u as f64 * (self.sigma_d2 + self.sigma_s2 / self.rho);
        signal / (inter + a2 / scale * err + ul / scale + noise / scale)
    }

    /// Harvested units over the downlink air time.
    pub fn harvest_units(&self, g: &MaskGains, k: usize, unit_j: f64, cap: u32) -> u32 {
        let split = crate::channel::split_received(self.p_down * g.rx_gain[k], self.rho).expect("rho validated");
        crate::channel::harvested_energy(split.eh_power, self.eta, self.airtime(), unit_j, cap)
    }
}

/// Draws the channels of `slot` from the counter-based streams keyed by
/// `seed` and reduces them to gains for every mask.
pub fn slot_gains(dims: &Dims, alpha: f64, masks: &[usize], p_ref: f64, consts: &PhyConsts, seed: u64, slot: u64) -> SlotGains {
    let k = dims.k;
    let up = draw_user_channels(dims, alpha, seed, slot, Link::Uplink).expect("dims validated");
    let down = draw_user_channels(dims, alpha, seed, slot, Link::Downlink).expect("dims validated");
    let inter = draw_inter_user(dims, &mut stream_rng(seed, slot, 0, Link::InterUser));
    let full = AntennaSelection::all(dims);
    let p = vec![p_ref; k];
    let noise = UplinkNoise { sigma2: consts.sigma2, self_interference: 0.0 };
    let (ref_true_db, ref_est_db) = match BeamformerSet::zero_forcing(dims, &down, &full, p.clone(), vec![consts.p_down; k]) {
        Ok(bf) => {
            let est = uplink_sinr(&up, &full, &bf, &noise).unwrap_or_else(|_| vec![vec![0.0; dims.n_u]; k]);
            let true_gains = mask_gains(&up, &down, &inter, &full, dims);
            let tr: Vec<f64> = (0..k).map(|u| mean_db(&realized_uplink(&true_gains, u, &p, consts.sigma2))).collect();
            (tr, est.iter().map(|s| mean_db(s)).collect())
        }
        Err(_) => (vec![f64::NEG_INFINITY; k], vec![f64::NEG_INFINITY; k]),
    };
    let masks = masks
        .iter()
        .map(|&n_a| {
            let sel = if n_a >= dims.n_r { full.clone() } else { AntennaSelection::norm_greedy(&up, n_a, dims).expect("mask size validated") };
            mask_gains(&up, &down, &inter, &sel, dims)
        })
        .collect();
    SlotGains { ref_true_db, ref_est_db, masks, arrivals: Vec::new() }
}

fn mean_db(s: &[f64]) -> f64 {
    let m = s.iter().sum::<f64>() / s.len() as f64;
    10.0 * m.log10()
}

fn outage(k: usize, n_u: usize, active: usize) -> MaskGains {
    MaskGains {
        active,
        sig: vec![vec![0.0; n_u]; k],
        own_leak: vec![vec![0.0; n_u]; k],
        noise_proj: vec![vec![1.0; n_u]; k],
        other: vec![vec![vec![0.0; n_u]; k]; k],
        rx_gain: vec![0.0; k],
        dl_signal: vec![0.0; k],
        dl_inter: vec![vec![0.0; k]; k],
        dl_error: vec![vec![0.0; k]; k],
        dl_uplink: vec![vec![0.0; k]; k],
    }
}

/// Gains under one selection. An ill-conditioned draw counts as an outage.
pub fn mask_gains(up: &[ChannelPair], down: &[ChannelPair], inter: &[Vec<DMatrix<Complex64>>], sel: &AntennaSelection, dims: &Dims) -> MaskGains {
    let k = dims.k;
    let n_u = dims.n_u;
    let active = sel.active_count();
    let ones = vec![1.0; k];
    let Ok(bf) = BeamformerSet::zero_forcing(dims, down, sel, ones.clone(), ones) else {
        return outage(k, n_u, active);
    };
    let mut g = outage(k, n_u, active);
    for u in 0..k {
        let h_check = stacked_uplink(up, sel, &bf, u);
        let Ok(eq) = zf_equalizer(&h_check, bf.streams(u), DEFAULT_CONDITION_CAP) else {
            return outage(k, n_u, active);
        };
        let proj = &eq * eq.adjoint();
        for i in 0..k {
            let t = &eq * sel.select_rows(&up[i].h_true) * &bf.w_up[i];
            for s in 0..t.nrows() {
                let row: f64 = t.row(s).iter().map(|x| x.norm_sqr()).sum();
                if i == u {
                    let d = t[(s, s)].norm_sqr();
                    g.sig[u][s] = d;
                    g.own_leak[u][s] = row - d;
                } else {
                    g.other[u][i][s] = row;
                }
            }
        }
        for s in 0..proj.nrows() {
            g.noise_proj[u][s] = proj[(s, s)].re;
        }
        let f_true = sel.select_rows(&down[u].h_true);
        let f_est = sel.select_rows(&down[u].h_est);
        let f_err = sel.select_rows(&down[u].delta);
        g.rx_gain[u] = bf.w_down.iter().map(|w| frob_sq(&(f_true.adjoint() * w))).sum();
        g.dl_signal[u] = frob_sq(&(f_est.adjoint() * &bf.w_down[u]));
        for i in 0..k {
            g.dl_inter[u][i] = frob_sq(&(f_est.adjoint() * &bf.w_down[i]));
            g.dl_error[u][i] = frob_sq(&(f_err.adjoint() * &bf.w_down[i]));
            g.dl_uplink[u][i] = frob_sq(&(&inter[u][i] * &bf.w_up[i]));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{downlink_sinr, DownlinkNoise, UserInterference};

    fn consts(alpha: f64, duplex: Duplex) -> PhyConsts {
        let mut c = PhyConsts::from_config(&ScenarioConfig::desk("t"));
        c.alpha = alpha;
        c.duplex = duplex;
        c
    }

    #[test]
    fn perfect_csi_matches_closed_form_uplink() {
        let dims = Dims::new(8, 2, 2).unwrap();
        let c = consts(0.0, Duplex::Half);
        for slot in 0..5 {
            let up = draw_user_channels(&dims, 0.0, 3, slot, Link::Uplink).unwrap();
            let down = draw_user_channels(&dims, 0.0, 3, slot, Link::Downlink).unwrap();
            let inter = draw_inter_user(&dims, &mut stream_rng(3, slot, 0, Link::InterUser));
            let sel = AntennaSelection::all(&dims);
            let g = mask_gains(&up, &down, &inter, &sel, &dims);
            let p = [0.3, 0.7];
            let bf = BeamformerSet::zero_forcing(&dims, &down, &sel, p.to_vec(), vec![c.p_down; 2]).unwrap();
            let closed = uplink_sinr(&up, &sel, &bf, &UplinkNoise { sigma2: c.sigma2, self_interference: 0.0 }).unwrap();
            for u in 0..2 {
                let mine = c.uplink_sinr(&g, u, &p);
                for s in 0..2 {
                    assert!((mine[s] - closed[u][s]).abs() <= 1e-9 * closed[u][s], "{} vs {}", mine[s], closed[u][s]);
                }
            }
        }
    }

    #[test]
    fn downlink_terms_match_direct_evaluation() {
        let dims = Dims::new(8, 2, 2).unwrap();
        let c = consts(0.2, Duplex::Full);
        let up = draw_user_channels(&dims, 0.2, 5, 1, Link::Uplink).unwrap();
        let down = draw_user_channels(&dims, 0.2, 5, 1, Link::Downlink).unwrap();
        let inter = draw_inter_user(&dims, &mut stream_rng(5, 1, 0, Link::InterUser));
        let sel = AntennaSelection::all(&dims);
        let g = mask_gains(&up, &down, &inter, &sel, &dims);
        let p = [0.1, 0.4];
        let bf = BeamformerSet::zero_forcing(&dims, &down, &sel, p.to_vec(), vec![c.p_down; 2]).unwrap();
        let leak = UserInterference { cross_gain: c.cross_gain, loop_gain: c.loop_gain };
        let direct = downlink_sinr(&down, &bf, &sel, &inter, leak, c.rho, &DownlinkNoise { sigma_d2: c.sigma_d2, sigma_s2: c.sigma_s2 }).unwrap();
        for u in 0..2 {
            let mine = c.downlink_sinr(&g, u, &p);
            assert!((mine - direct[u]).abs() <= 1e-9 * direct[u]);
            let rx = crate::channel::received_power(&down, &bf, &sel, u);
            assert!((c.p_down * g.rx_gain[u] - rx).abs() <= 1e-9 * rx);
        }
    }

    #[test]
    fn half_duplex_halves_airtime_and_drops_leakage() {
        let c = consts(0.2, Duplex::Half);
        assert_eq!(c.airtime(), c.slot / 2.0);
        assert_eq!(c.uplink_noise(2), c.sigma2);
        // 1 bit/s/Hz over half a 5 ms slot at 10 MHz is 25 kbit: one packet
        assert_eq!(c.packets(&[1.0]), 1);
        assert_eq!(consts(0.2, Duplex::Full).packets(&[1.0]), 2);
    }
}
