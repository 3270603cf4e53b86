//! Imperfect-CSI MIMO channel model for the full-duplex SWIPT link.
//!
//! Channels are drawn as `H = sqrt(1 - alpha^2) * H_est + alpha * Delta` with
//! `H_est`, `Delta` i.i.d. CN(0, 1). The aggregator (AGG) applies receive /
//! transmit antenna selection, ZF equalization on the uplink and ZF precoding
//! on the downlink. Sensor users split the received downlink power between
//! the information-detection (ID) and energy-harvesting (EH) branches.
//!
//! Conventions used throughout:
//! - `rho` is the ID share of the received power.
//! - Precoders carry unit Frobenius norm; transmit powers are explicit scalars.
//! - Uplink channels are `n_r x n_u`, downlink channels `n_t x n_u`.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

pub type CMat = DMatrix<Complex64>;

/// Condition-number cap above which ZF inversion is refused.
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("channel uncertainty factor {0} outside [0, 1)")]
    InvalidAlpha(f64),
    #[error("matrix is singular or ill-conditioned (condition number {cond:e}, cap {cap:e})")]
    IllConditioned { cond: f64, cap: f64 },
    #[error("power-split ratio {0} outside (0, 1)")]
    InvalidSplitRatio(f64),
    #[error("negative power {0}")]
    NegativePower(f64),
    #[error("density argument must be positive definite")]
    NonPositiveArgument,
    #[error("degenerate moment-matching input: {0}")]
    DegenerateParameters(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_t: usize,
    pub n_r: usize,
    pub n_u: usize,
    pub k: usize,
}

impl Dims {
    pub fn new(n_r: usize, n_u: usize, k: usize) -> Result<Self> {
        let d = Self { n_t: n_r, n_r, n_u, k };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t != self.n_r {
            return Err(ChannelError::InvalidDims(format!(
                "n_t ({}) must equal n_r ({})",
                self.n_t, self.n_r
            )));
        }
        if self.n_u == 0 || self.k == 0 {
            return Err(ChannelError::InvalidDims("n_u and k must be >= 1".into()));
        }
        if self.n_r < self.k * self.n_u {
            return Err(ChannelError::InvalidDims(format!(
                "n_r ({}) < k * n_u ({}) violates ZF feasibility",
                self.n_r,
                self.k * self.n_u
            )));
        }
        Ok(())
    }

    /// Total number of spatial streams when every user sends `n_u` streams.
    pub fn total_streams(&self) -> usize {
        self.k * self.n_u
    }
}

/// Identifies the physical link a random stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Uplink = 0,
    Downlink = 1,
    SelfInterference = 2,
    InterUser = 3,
    Auxiliary = 4,
}

/// Counter-based random stream keyed by `(seed, slot, user, link)`.
///
/// Distinct keys give statistically independent ChaCha streams, so episodes
/// and users can be simulated in any order with identical results.
pub fn stream_rng(seed: u64, slot: u64, user: usize, link: Link) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = (slot << 24) ^ ((user as u64 & 0xFFFF) << 8) ^ link as u64;
    rng.set_stream(stream);
    rng
}

/// One CN(0, 1) sample.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Matrix of i.i.d. CN(0, variance) entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, variance: f64, rng: &mut R) -> CMat {
    let s = variance.sqrt();
    DMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng) * s)
}

/// True and estimated channel of one user, tied by the uncertainty factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPair {
    pub h_true: CMat,
    pub h_est: CMat,
    pub delta: CMat,
    pub alpha: f64,
}

impl ChannelPair {
    pub fn from_parts(h_est: CMat, delta: CMat, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if h_est.shape() != delta.shape() {
            return Err(ChannelError::DimensionMismatch("h_est and delta shapes differ".into()));
        }
        let a = Complex64::new(alpha, 0.0);
        let b = Complex64::new((1.0 - alpha * alpha).sqrt(), 0.0);
        let h_true = h_est.map(|x| x * b) + delta.map(|x| x * a);
        Ok(Self { h_true, h_est, delta, alpha })
    }

    pub fn rows(&self) -> usize {
        self.h_est.nrows()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ChannelError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Draws an `n_r x n_u` channel pair for one user.
pub fn draw_channel<R: Rng + ?Sized>(dims: &Dims, alpha: f64, rng: &mut R) -> Result<ChannelPair> {
    dims.validate()?;
    check_alpha(alpha)?;
    let h_est = gaussian_matrix(dims.n_r, dims.n_u, 1.0, rng);
    let delta = gaussian_matrix(dims.n_r, dims.n_u, 1.0, rng);
    ChannelPair::from_parts(h_est, delta, alpha)
}

/// Draws every user's channel on one link for one slot from its own stream.
pub fn draw_user_channels(
    dims: &Dims,
    alpha: f64,
    seed: u64,
    slot: u64,
    link: Link,
) -> Result<Vec<ChannelPair>> {
    (0..dims.k)
        .map(|u| {
            let mut rng = stream_rng(seed, slot, u, link);
            draw_channel(dims, alpha, &mut rng)
        })
        .collect()
}

/// Active receive/transmit antennas at the AGG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AntennaSelection {
    mask: Vec<bool>,
}

impl AntennaSelection {
    pub fn new(mask: Vec<bool>, dims: &Dims) -> Result<Self> {
        if mask.len() != dims.n_r {
            return Err(ChannelError::InvalidDims(format!(
                "mask length {} != n_r {}",
                mask.len(),
                dims.n_r
            )));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active < dims.total_streams() {
            return Err(ChannelError::InvalidDims(format!(
                "{} active antennas < k * n_u = {}",
                active,
                dims.total_streams()
            )));
        }
        Ok(Self { mask })
    }

    pub fn all(dims: &Dims) -> Self {
        Self { mask: vec![true; dims.n_r] }
    }

    /// Keeps the `n_active` rows with the largest aggregate estimated gain.
    /// Ties keep the lower antenna index.
    pub fn norm_greedy(channels: &[ChannelPair], n_active: usize, dims: &Dims) -> Result<Self> {
        let mut gains: Vec<(usize, f64)> = (0..dims.n_r)
            .map(|r| {
                let g: f64 = channels
                    .iter()
                    .map(|c| c.h_est.row(r).iter().map(|x| x.norm_sqr()).sum::<f64>())
                    .sum();
                (r, g)
            })
            .collect();
        gains.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut mask = vec![false; dims.n_r];
        for &(r, _) in gains.iter().take(n_active) {
            mask[r] = true;
        }
        Self::new(mask, dims)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Applies the selection operator: keeps active rows of `m`.
    pub fn select_rows(&self, m: &CMat) -> CMat {
        let idx = self.active_indices();
        m.select_rows(idx.iter())
    }
}

/// Per-user precoders and transmit powers.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    /// Uplink precoders at the users, `n_u x d_k`.
    pub w_up: Vec<CMat>,
    /// Downlink precoders at the AGG over the active antennas, `n_a x d_k`.
    pub w_down: Vec<CMat>,
    pub p_up: Vec<f64>,
    pub p_down: Vec<f64>,
}

impl BeamformerSet {
    /// Uniform uplink precoders and ZF downlink precoders from estimates.
    pub fn zero_forcing(
        dims: &Dims,
        downlink: &[ChannelPair],
        sel: &AntennaSelection,
        p_up: Vec<f64>,
        p_down: Vec<f64>,
    ) -> Result<Self> {
        let w_up = (0..dims.k).map(|_| uniform_precoder(dims.n_u)).collect();
        let w_down = zf_downlink_precoders(downlink, sel, DEFAULT_CONDITION_CAP)?;
        Ok(Self { w_up, w_down, p_up, p_down })
    }

    pub fn streams(&self, user: usize) -> usize {
        self.w_up[user].ncols()
    }
}

/// `I / sqrt(n)`: equal power on every stream, unit Frobenius norm.
pub fn uniform_precoder(n: usize) -> CMat {
    CMat::identity(n, n) * Complex64::new(1.0 / (n as f64).sqrt(), 0.0)
}

fn frob_sq(m: &CMat) -> f64 {
    m.iter().map(|x| x.norm_sqr()).sum()
}

fn condition_number(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Left inverse of a square or tall matrix with a conditioning guard.
pub fn left_inverse(m: &CMat, cond_cap: f64) -> Result<CMat> {
    if m.nrows() < m.ncols() {
        return Err(ChannelError::DimensionMismatch(format!(
            "ZF needs rows >= cols, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let cond = condition_number(m);
    if !(cond <= cond_cap) {
        return Err(ChannelError::IllConditioned { cond, cap: cond_cap });
    }
    let inv = if m.is_square() {
        m.clone().try_inverse()
    } else {
        let gram = m.adjoint() * m;
        gram.try_inverse().map(|g| g * m.adjoint())
    };
    inv.ok_or(ChannelError::IllConditioned { cond: f64::INFINITY, cap: cond_cap })
}

/// ZF equalizer `[I_d 0] * H_check^+` (the plain inverse when square).
pub fn zf_equalizer(h_check: &CMat, d_k: usize, cond_cap: f64) -> Result<CMat> {
    if d_k > h_check.ncols() {
        return Err(ChannelError::DimensionMismatch(format!(
            "{} streams requested from {} columns",
            d_k,
            h_check.ncols()
        )));
    }
    let inv = left_inverse(h_check, cond_cap)?;
    Ok(inv.rows(0, d_k).into_owned())
}

/// Stacked uplink matrix seen by user `k`'s ZF receiver: the user's own
/// selected channel first, then the precoded interferers.
pub fn stacked_uplink(channels: &[ChannelPair], sel: &AntennaSelection, bf: &BeamformerSet, k: usize) -> CMat {
    let own = sel.select_rows(&channels[k].h_est);
    let mut blocks = vec![own];
    for (i, c) in channels.iter().enumerate() {
        if i != k {
            blocks.push(sel.select_rows(&c.h_est) * &bf.w_up[i]);
        }
    }
    hstack(&blocks)
}

fn hstack(blocks: &[CMat]) -> CMat {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(b);
        c0 += b.ncols();
    }
    out
}

/// ZF downlink precoders `F (F^H F)^-1`, one column block per user, each
/// normalized to unit Frobenius norm.
pub fn zf_downlink_precoders(downlink: &[ChannelPair], sel: &AntennaSelection, cond_cap: f64) -> Result<Vec<CMat>> {
    let blocks: Vec<CMat> = downlink.iter().map(|c| sel.select_rows(&c.h_est)).collect();
    let stacked = hstack(&blocks);
    let pinv = left_inverse(&stacked, cond_cap)?;
    // precoder = pinv^H, columns grouped per user
    let p = pinv.adjoint();
    let mut out = Vec::with_capacity(blocks.len());
    let mut c0 = 0;
    for b in &blocks {
        let mut w = p.columns(c0, b.ncols()).into_owned();
        let n = frob_sq(&w).sqrt();
        w /= Complex64::new(n, 0.0);
        out.push(w);
        c0 += b.ncols();
    }
    Ok(out)
}

/// Uplink noise model: thermal noise plus residual full-duplex
/// self-interference leaking from the AGG's own downlink transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UplinkNoise {
    pub sigma2: f64,
    /// Residual self-interference power gain after cancellation (linear).
    pub self_interference: f64,
}

/// Downlink noise and interference parameters at the users.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownlinkNoise {
    /// Antenna noise before the splitter.
    pub sigma_d2: f64,
    /// Conversion noise added on the ID branch.
    pub sigma_s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrReport {
    /// `uplink[k][s]`: SINR of stream `s` of user `k`.
    pub uplink: Vec<Vec<f64>>,
    /// `downlink[k]`: aggregate SINR of user `k`.
    pub downlink: Vec<f64>,
    pub noise_up: f64,
    pub noise_down: f64,
}

/// Per-stream uplink SINR after ZF at the AGG.
///
/// Numerator: `(1 - a^2) p_k ||w_k||^2 / d_k`. Denominator: residual
/// estimation-error power `a^2 sum_i p_i ||w_i||^2` plus effective noise,
/// projected through the diagonal of `(H_check^H H_check)^-1`.
pub fn uplink_sinr(
    channels: &[ChannelPair],
    sel: &AntennaSelection,
    bf: &BeamformerSet,
    noise: &UplinkNoise,
) -> Result<Vec<Vec<f64>>> {
    let self_int = noise.self_interference * bf.p_down.iter().zip(&bf.w_down).map(|(p, w)| p * frob_sq(w)).sum::<f64>();
    let sigma_eff = noise.sigma2 + self_int;
    let mut out = Vec::with_capacity(channels.len());
    for k in 0..channels.len() {
        let alpha2 = channels[k].alpha * channels[k].alpha;
        let d_k = bf.streams(k);
        let h_check = stacked_uplink(channels, sel, bf, k);
        let eq = zf_equalizer(&h_check, d_k, DEFAULT_CONDITION_CAP)?;
        // eq * eq^H == Z^H (H^H H)^-1 Z
        let proj = &eq * eq.adjoint();
        let err: f64 = channels
            .iter()
            .enumerate()
            .map(|(i, c)| c.alpha * c.alpha * bf.p_up[i] * frob_sq(&bf.w_up[i]))
            .sum();
        let signal = (1.0 - alpha2) * bf.p_up[k] * frob_sq(&bf.w_up[k]) / d_k as f64;
        let per_stream = (0..d_k)
            .map(|s| {
                if signal == 0.0 {
                    return 0.0;
                }
                signal / ((err + sigma_eff) * proj[(s, s)].re)
            })
            .collect();
        out.push(per_stream);
    }
    Ok(out)
}

/// Interference-to-signal power ratio at user `k`'s ZF output, measured on the
/// true channels. Zero up to rounding when `alpha == 0`.
pub fn zf_residual_interference(channels: &[ChannelPair], sel: &AntennaSelection, bf: &BeamformerSet, k: usize) -> Result<f64> {
    let d_k = bf.streams(k);
    let h_check = stacked_uplink(channels, sel, bf, k);
    let eq = zf_equalizer(&h_check, d_k, DEFAULT_CONDITION_CAP)?;
    let desired = &eq * sel.select_rows(&channels[k].h_true) * &bf.w_up[k];
    let mut interference = 0.0;
    for (i, c) in channels.iter().enumerate() {
        if i != k {
            interference += bf.p_up[i] * frob_sq(&(&eq * sel.select_rows(&c.h_true) * &bf.w_up[i]));
        }
    }
    Ok(interference / (bf.p_up[k] * frob_sq(&desired)))
}

/// Inter-user channels `g[k][i]` (`n_u x n_u`, from user `i` into user `k`).
/// The diagonal holds each user's own full-duplex loop channel.
pub type InterUserChannels = Vec<Vec<CMat>>;

pub fn draw_inter_user<R: Rng + ?Sized>(dims: &Dims, rng: &mut R) -> InterUserChannels {
    (0..dims.k)
        .map(|_| (0..dims.k).map(|_| gaussian_matrix(dims.n_u, dims.n_u, 1.0, rng)).collect())
        .collect()
}

/// Gains applied to the inter-user channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserInterference {
    /// Power gain of the SU-to-SU uplink leakage between distinct users.
    pub cross_gain: f64,
    /// Residual loop gain of a user's own uplink into its downlink receiver.
    pub loop_gain: f64,
}

impl UserInterference {
    pub const NONE: Self = Self { cross_gain: 0.0, loop_gain: 0.0 };
}

/// Aggregate downlink SINR per user on the ID branch.
///
/// `sum_s tr(signal) / [DL interference + a^2/(1-a^2) * estimation error
///  + UL intracell interference / (1-a^2) + n_u (s_d^2 + s_s^2/rho) / (1-a^2)]`
/// with per-user powers folded into each term; with a common downlink power
/// this is the usual normalized form divided through by `p_d`.
pub fn downlink_sinr(
    downlink: &[ChannelPair],
    bf: &BeamformerSet,
    sel: &AntennaSelection,
    inter_user: &InterUserChannels,
    leakage: UserInterference,
    rho: f64,
    noise: &DownlinkNoise,
) -> Result<Vec<f64>> {
    check_split(rho)?;
    let k_users = downlink.len();
    let mut out = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let c = &downlink[k];
        let a2 = c.alpha * c.alpha;
        let f_k = sel.select_rows(&c.h_est);
        let d_k = sel.select_rows(&c.delta);
        let n_u = f_k.ncols() as f64;
        let quad = |f: &CMat, w: &CMat| frob_sq(&(f.adjoint() * w));
        let signal = bf.p_down[k] * quad(&f_k, &bf.w_down[k]);
        let mut dl_int = 0.0;
        let mut est_err = 0.0;
        for i in 0..k_users {
            if i != k {
                dl_int += bf.p_down[i] * quad(&f_k, &bf.w_down[i]);
            }
            est_err += bf.p_down[i] * quad(&d_k, &bf.w_down[i]);
        }
        let mut ul_int = 0.0;
        for i in 0..k_users {
            let gain = if i == k { leakage.loop_gain } else { leakage.cross_gain };
            if gain > 0.0 {
                ul_int += gain * bf.p_up[i] * frob_sq(&(&inter_user[k][i] * &bf.w_up[i]));
            }
        }
        let scale = 1.0 - a2;
        let denom = dl_int + a2 / scale * est_err + ul_int / scale + n_u * (noise.sigma_d2 + noise.sigma_s2 / rho) / scale;
        out.push(if signal == 0.0 { 0.0 } else { signal / denom });
    }
    Ok(out)
}

/// Total RF power incident on user `k` before the splitter (true channel).
pub fn received_power(downlink: &[ChannelPair], bf: &BeamformerSet, sel: &AntennaSelection, k: usize) -> f64 {
    let f_k = sel.select_rows(&downlink[k].h_true);
    bf.w_down
        .iter()
        .zip(&bf.p_down)
        .map(|(w, p)| p * frob_sq(&(f_k.adjoint() * w)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSignal {
    pub id_power: f64,
    pub eh_power: f64,
    pub rho: f64,
}

fn check_split(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ChannelError::InvalidSplitRatio(rho));
    }
    Ok(())
}

/// Power splitter: `rho` to information detection, the rest to harvesting.
pub fn split_received(received_power: f64, rho: f64) -> Result<SplitSignal> {
    check_split(rho)?;
    if received_power < 0.0 || received_power.is_nan() {
        return Err(ChannelError::NegativePower(received_power));
    }
    let id_power = rho * received_power;
    Ok(SplitSignal { id_power, eh_power: received_power - id_power, rho })
}

// Guards floor() against representation error such as 0.4 * 0.005 / 0.001.
const FLOOR_SLACK: f64 = 1e-9;

/// Harvested energy units over one slot, clamped to `cap`.
pub fn harvested_energy(eh_power: f64, efficiency: f64, slot: f64, delta_e: f64, cap: u32) -> u32 {
    let units = (efficiency * eh_power * slot / delta_e + FLOOR_SLACK).floor();
    if units <= 0.0 {
        0
    } else {
        units.min(cap as f64) as u32
    }
}

/// Shannon rate over one slot, floored to whole packets.
pub fn achievable_rate(sinr: f64, bandwidth: f64, slot: f64, packet_bits: f64) -> u32 {
    if sinr <= 0.0 {
        return 0;
    }
    let bits = bandwidth * slot * (1.0 + sinr).log2();
    let packets = (bits / packet_bits + FLOOR_SLACK).floor();
    if packets >= u32::MAX as f64 {
        u32::MAX
    } else {
        packets as u32
    }
}

/// Degrees of freedom of the Beta-II downlink SINR approximation together
/// with the moment-matching intermediates they are built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaIIParams {
    pub n1: f64,
    pub n2: f64,
    pub eta_g: f64,
    pub n_g: f64,
    pub eta_q: f64,
    pub n_q: f64,
    pub eta_v: f64,
    pub n_v: f64,
}

/// Moment matching of the aggregate interference-plus-noise at a user.
///
/// `power_ratio` is `p_u / p_d`; the chain works with
/// `r = p_u / ((1 - a^2) p_d)` and `c = a^2 / (1 - a^2)`.
pub fn beta2_moment_match(n_t: usize, k: usize, alpha: f64, power_ratio: f64, sigma_d0: f64) -> Result<BetaIIParams> {
    check_alpha(alpha)?;
    if n_t == 0 || k == 0 {
        return Err(ChannelError::DegenerateParameters("n_t and k must be positive"));
    }
    if !(power_ratio > 0.0) || !power_ratio.is_finite() {
        return Err(ChannelError::DegenerateParameters("power ratio must be positive"));
    }
    if !(sigma_d0 > 0.0) || !sigma_d0.is_finite() {
        return Err(ChannelError::DegenerateParameters("noise term must be positive"));
    }
    let nt = n_t as f64;
    let kf = k as f64;
    let a2 = alpha * alpha;
    let r = power_ratio / (1.0 - a2);
    let c = a2 / (1.0 - a2);

    let eta_g = (kf * (1.0 + r * r) - 1.0) / (kf * (1.0 + r) - 1.0);
    let n_g = 2.0 * nt * (r * kf + kf - 1.0).powi(2) / (r * r * kf + kf - 1.0);
    let eta_q = (n_g * eta_g * eta_g + 2.0 * nt * kf * c * c) / (n_g * eta_g + 2.0 * nt * kf * c);
    let n_q = (2.0 * nt * kf * c + n_g * eta_g).powi(2) / (2.0 * nt * kf * c * c + n_g * eta_g * eta_g);
    let eta_v = eta_q * n_q / (n_q + sigma_d0);
    let n_v = n_q / 2.0 + sigma_d0 * (2.0 * n_q + sigma_d0) / (2.0 * n_q);
    let n1 = nt * (nt + (n_v - 2.0) * eta_v + 1.0) / (eta_v * (nt + n_v - 1.0));
    let n2 = (n_v * (nt - 3.0 * eta_v + 2.0) + n_v * n_v * eta_v + 2.0 * (eta_v - 1.0)) / (nt + n_v - 1.0);

    let p = BetaIIParams { n1, n2, eta_g, n_g, eta_q, n_q, eta_v, n_v };
    let all = [n1, n2, eta_g, n_g, eta_q, n_q, eta_v, n_v];
    if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(ChannelError::DegenerateParameters("moment-matching chain left the positive reals"));
    }
    Ok(p)
}

/// `ln Gamma_p(x)`, the multivariate gamma function.
pub fn ln_multivariate_gamma(p: usize, x: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln() + (0..p).map(|i| ln_gamma(x - i as f64 / 2.0)).sum::<f64>()
}

fn ln_det_pd(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(ChannelError::DimensionMismatch("density argument must be square".into()));
    }
    let ch = Cholesky::new(m.clone()).ok_or(ChannelError::NonPositiveArgument)?;
    Ok(2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Matrix variate Beta type II density at a positive-definite `n_u x n_u`
/// argument.
pub fn beta2_pdf(gamma: &DMatrix<f64>, params: &BetaIIParams) -> Result<f64> {
    let p = gamma.nrows();
    let pf = p as f64;
    let ln_det = ln_det_pd(gamma)?;
    let eye = DMatrix::<f64>::identity(p, p);
    let ln_det_1p = ln_det_pd(&(&eye + gamma))?;
    let ln_beta = ln_multivariate_gamma(p, params.n1) + ln_multivariate_gamma(p, params.n2)
        - ln_multivariate_gamma(p, params.n1 + params.n2);
    let ln_f = (2.0 * params.n1 - pf - 1.0) / 2.0 * ln_det - (params.n1 + params.n2) * ln_det_1p - ln_beta;
    Ok(ln_f.exp())
}

/// Scalar (`n_u = 1`) Beta-prime case of [`beta2_pdf`].
pub fn beta2_pdf_scalar(gamma: f64, params: &BetaIIParams) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(ChannelError::NonPositiveArgument);
    }
    beta2_pdf(&DMatrix::from_element(1, 1, gamma), params)
}

/// Effective-SNR scale of a user's uplink streams under ZF.
///
/// `eta^H eta = (1 - a^2) p_u W^H W / (d_k (a^2 p_u J + s^2))` with
/// `J = sum_i ||w_i||^2 / d`.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkEta {
    pub gram: DMatrix<f64>,
}

impl UplinkEta {
    pub fn new(alpha: f64, p_up: f64, w_k: &CMat, j: f64, sigma2: f64) -> Self {
        let a2 = alpha * alpha;
        let d_k = w_k.ncols() as f64;
        let scale = (1.0 - a2) * p_up / (d_k * (a2 * p_up * j + sigma2));
        let gram = (w_k.adjoint() * w_k).map(|x| x.re * scale);
        Self { gram }
    }

    /// `J` for precoders of unit Frobenius norm.
    pub fn unit_j(k: usize, total_streams: usize) -> f64 {
        k as f64 / total_streams as f64
    }

    pub fn scalar(eta_sq: f64) -> Self {
        Self { gram: DMatrix::from_element(1, 1, eta_sq) }
    }
}

/// Uplink ZF SINR density.
///
/// The density is the real Wishart form with `2 n_r` degrees of freedom.
/// With unit-variance complex channel entries each real component carries
/// variance one half, so the Wishart scale matrix is `eta^H eta / 2`.
pub fn uplink_sinr_pdf(gamma: &DMatrix<f64>, eta: &UplinkEta, dims: &Dims) -> Result<f64> {
    let p = gamma.nrows();
    if eta.gram.nrows() != p {
        return Err(ChannelError::DimensionMismatch("gamma and eta sizes differ".into()));
    }
    let pf = p as f64;
    let n = dims.n_r as f64;
    let scale = &eta.gram * 0.5;
    let ln_det_g = ln_det_pd(gamma)?;
    let ln_det_s = ln_det_pd(&scale)?;
    let inv = scale.clone().try_inverse().ok_or(ChannelError::NonPositiveArgument)?;
    let tr = (inv * gamma).trace();
    let ln_f = (2.0 * n - pf - 1.0) / 2.0 * ln_det_g - 0.5 * tr
        - n * pf * 2f64.ln()
        - ln_multivariate_gamma(p, n)
        - n * ln_det_s;
    Ok(ln_f.exp())
}

pub fn uplink_sinr_pdf_scalar(gamma: f64, eta_sq: f64, dims: &Dims) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(ChannelError::NonPositiveArgument);
    }
    uplink_sinr_pdf(&DMatrix::from_element(1, 1, gamma), &UplinkEta::scalar(eta_sq), dims)
}

/// Matrices serialize as rows of `[re, im]` pairs.
pub fn matrix_to_rows(m: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn perfect_csi_identity() {
        let dims = Dims::new(4, 2, 2).unwrap();
        let mut rng = stream_rng(7, 0, 0, Link::Uplink);
        let pair = draw_channel(&dims, 0.0, &mut rng).unwrap();
        assert_eq!(pair.h_true, pair.h_est);
    }

    #[test]
    fn draw_is_reproducible() {
        let dims = Dims::new(8, 2, 3).unwrap();
        let a = draw_user_channels(&dims, 0.2, 11, 5, Link::Downlink).unwrap();
        let b = draw_user_channels(&dims, 0.2, 11, 5, Link::Downlink).unwrap();
        assert_eq!(a, b);
        let other = draw_user_channels(&dims, 0.2, 11, 6, Link::Downlink).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let dims = Dims::new(4, 1, 1).unwrap();
        let mut rng = stream_rng(0, 0, 0, Link::Uplink);
        assert!(matches!(draw_channel(&dims, 1.0, &mut rng), Err(ChannelError::InvalidAlpha(_))));
        assert!(matches!(draw_channel(&dims, -0.1, &mut rng), Err(ChannelError::InvalidAlpha(_))));
    }

    #[test]
    fn channel_moments() {
        // (1 - a^2) + a^2 = 1 and corr(h, h_est) = sqrt(1 - a^2)
        let dims = Dims::new(1, 1, 1).unwrap();
        let mut rng = stream_rng(3, 0, 0, Link::Uplink);
        let n = 100_000;
        let (mut var, mut cross, mut var_est) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let p = draw_channel(&dims, 0.2, &mut rng).unwrap();
            let h = p.h_true[(0, 0)];
            let e = p.h_est[(0, 0)];
            var += h.norm_sqr();
            var_est += e.norm_sqr();
            cross += (h * e.conj()).re;
        }
        let var = var / n as f64;
        let corr = cross / n as f64 / (var * var_est / n as f64).sqrt();
        assert!((var - 1.0).abs() < 0.015, "variance {var}");
        assert!((corr - 0.96f64.sqrt()).abs() < 0.005, "corr {corr}");
    }

    #[test]
    fn dims_validation() {
        assert!(Dims::new(3, 2, 2).is_err());
        assert!(Dims::new(4, 2, 2).is_ok());
        assert!(Dims::new(4, 0, 2).is_err());
        let d = Dims { n_t: 5, n_r: 4, n_u: 1, k: 1 };
        assert!(d.validate().is_err());
    }

    #[test]
    fn zf_identity_channel() {
        let eye = CMat::identity(4, 4);
        let eq = zf_equalizer(&eye, 2, DEFAULT_CONDITION_CAP).unwrap();
        let expected = CMat::identity(4, 4).rows(0, 2).into_owned();
        assert_eq!(eq, expected);
    }

    #[test]
    fn zf_residual_small_on_random_channel() {
        let mut rng = stream_rng(1, 0, 0, Link::Auxiliary);
        for n in [3usize, 6] {
            let h = gaussian_matrix(n, n, 1.0, &mut rng);
            let eq = zf_equalizer(&h, 2, DEFAULT_CONDITION_CAP).unwrap();
            let target = CMat::identity(n, n).rows(0, 2).into_owned();
            let resid = frob_sq(&(eq * &h - target)).sqrt();
            assert!(resid < 1e-9, "residual {resid}");
        }
        let tall = gaussian_matrix(8, 3, 1.0, &mut rng);
        let eq = zf_equalizer(&tall, 3, DEFAULT_CONDITION_CAP).unwrap();
        assert!(frob_sq(&(eq * &tall - CMat::identity(3, 3))).sqrt() < 1e-9);
    }

    #[test]
    fn zf_zero_row_rejected() {
        let mut h = CMat::identity(3, 3);
        h.row_mut(1).fill(c(0.0));
        assert!(matches!(zf_equalizer(&h, 1, DEFAULT_CONDITION_CAP), Err(ChannelError::IllConditioned { .. })));
    }

    #[test]
    fn uplink_sinr_unit_case() {
        let dims = Dims::new(1, 1, 1).unwrap();
        let pair = ChannelPair::from_parts(CMat::identity(1, 1), CMat::zeros(1, 1), 0.0).unwrap();
        let sel = AntennaSelection::all(&dims);
        let bf = BeamformerSet {
            w_up: vec![uniform_precoder(1)],
            w_down: vec![uniform_precoder(1)],
            p_up: vec![1.0],
            p_down: vec![0.0],
        };
        let noise = UplinkNoise { sigma2: 1.0, self_interference: 0.0 };
        let s = uplink_sinr(&[pair.clone()], &sel, &bf, &noise).unwrap();
        assert_relative_eq!(s[0][0], 1.0, max_relative = 1e-12);
        let bf0 = BeamformerSet { p_up: vec![0.0], ..bf };
        assert_eq!(uplink_sinr(&[pair], &sel, &bf0, &noise).unwrap()[0][0], 0.0);
    }

    #[test]
    fn downlink_monotone_in_rho() {
        let dims = Dims::new(4, 1, 2).unwrap();
        let dl = draw_user_channels(&dims, 0.2, 5, 0, Link::Downlink).unwrap();
        let sel = AntennaSelection::all(&dims);
        let bf = BeamformerSet::zero_forcing(&dims, &dl, &sel, vec![0.5; 2], vec![1.0; 2]).unwrap();
        let iu = draw_inter_user(&dims, &mut stream_rng(5, 0, 0, Link::InterUser));
        let leak = UserInterference { cross_gain: 0.01, loop_gain: 1e-6 };
        let noise = DownlinkNoise { sigma_d2: 0.1, sigma_s2: 0.1 };
        let hi = downlink_sinr(&dl, &bf, &sel, &iu, leak, 0.999, &noise).unwrap();
        let mid = downlink_sinr(&dl, &bf, &sel, &iu, leak, 0.5, &noise).unwrap();
        for k in 0..2 {
            assert!(hi[k] > mid[k]);
        }
        assert!(downlink_sinr(&dl, &bf, &sel, &iu, leak, 1.0, &noise).is_err());
        assert!(downlink_sinr(&dl, &bf, &sel, &iu, leak, 0.0, &noise).is_err());
    }

    #[test]
    fn downlink_single_user_noise_only() {
        let dims = Dims::new(4, 1, 1).unwrap();
        let mut rng = stream_rng(9, 0, 0, Link::Downlink);
        let dl = vec![draw_channel(&dims, 0.0, &mut rng).unwrap()];
        let sel = AntennaSelection::all(&dims);
        let bf = BeamformerSet::zero_forcing(&dims, &dl, &sel, vec![0.0], vec![2.0]).unwrap();
        let iu = draw_inter_user(&dims, &mut rng);
        let noise = DownlinkNoise { sigma_d2: 0.3, sigma_s2: 0.2 };
        let rho = 0.4;
        let s = downlink_sinr(&dl, &bf, &sel, &iu, UserInterference::NONE, rho, &noise).unwrap();
        let f = &dl[0].h_est;
        let g = frob_sq(&(f.adjoint() * &bf.w_down[0]));
        let expected = g / (0.3 / 2.0 + 0.2 / (rho * 2.0));
        assert_relative_eq!(s[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn split_examples() {
        let s = split_received(10.0, 0.5).unwrap();
        assert_eq!((s.id_power, s.eh_power), (5.0, 5.0));
        let s = split_received(0.0, 0.3).unwrap();
        assert_eq!((s.id_power, s.eh_power), (0.0, 0.0));
        let s = split_received(8.0, 0.25).unwrap();
        assert_eq!((s.id_power, s.eh_power), (2.0, 6.0));
        assert!(split_received(-1.0, 0.5).is_err());
        assert!(split_received(1.0, 1.0).is_err());
    }

    #[test]
    fn harvest_examples() {
        assert_eq!(harvested_energy(0.0, 0.4, 0.005, 0.001, 10), 0);
        assert_eq!(harvested_energy(1.0, 0.4, 0.005, 0.001, 10), 2);
        assert_eq!(harvested_energy(100.0, 0.4, 0.005, 0.001, 10), 10);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(achievable_rate(0.0, 10e6, 0.005, 20_000.0), 0);
        assert_eq!(achievable_rate(3.0, 10e6, 0.005, 20_000.0), 5);
        let mut last = 0;
        for i in 0..200 {
            let r = achievable_rate(i as f64 * 0.1, 10e6, 0.005, 20_000.0);
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn moment_match_symmetry_case() {
        let p = beta2_moment_match(16, 1, 0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(p.eta_g, 1.0, max_relative = 1e-15);
        assert_relative_eq!(p.n_g, 32.0, max_relative = 1e-15);
        // alpha = 0 removes the estimation-error correction
        assert_relative_eq!(p.eta_q, p.eta_g, max_relative = 1e-15);
        assert_relative_eq!(p.n_q, p.n_g, max_relative = 1e-15);
        assert!(beta2_moment_match(16, 1, 0.0, 0.0, 1.0).is_err());
        assert!(beta2_moment_match(16, 1, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn moment_match_is_deterministic() {
        let a = beta2_moment_match(16, 3, 0.2, 0.7, 1.3).unwrap();
        let b = beta2_moment_match(16, 3, 0.2, 0.7, 1.3).unwrap();
        assert_eq!(a.n1.to_bits(), b.n1.to_bits());
        assert_eq!(a.n2.to_bits(), b.n2.to_bits());
    }

    #[test]
    fn beta2_vanishes_at_origin() {
        let p = beta2_moment_match(16, 1, 0.2, 1.0, 1.0).unwrap();
        assert!(p.n1 > 1.0);
        assert!(beta2_pdf_scalar(1e-8, &p).unwrap() < 1e-50);
        assert!(beta2_pdf_scalar(0.0, &p).is_err());
        assert!(beta2_pdf_scalar(-1.0, &p).is_err());
    }

    #[test]
    fn beta2_matrix_rejects_indefinite() {
        let p = beta2_moment_match(16, 1, 0.2, 1.0, 1.0).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(beta2_pdf(&m, &p).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        assert!(beta2_pdf(&m, &p).unwrap() > 0.0);
    }

    #[test]
    fn uplink_pdf_boundary() {
        let dims = Dims::new(4, 1, 1).unwrap();
        assert!(uplink_sinr_pdf_scalar(1e-9, 2.0, &dims).unwrap() < 1e-20);
        assert!(uplink_sinr_pdf_scalar(0.0, 2.0, &dims).is_err());
    }

    #[test]
    fn greedy_selection_keeps_strongest_rows() {
        let dims = Dims::new(4, 1, 1).unwrap();
        let mut h = CMat::zeros(4, 1);
        h[(0, 0)] = c(0.1);
        h[(1, 0)] = c(3.0);
        h[(2, 0)] = c(2.0);
        h[(3, 0)] = c(0.5);
        let pair = ChannelPair::from_parts(h, CMat::zeros(4, 1), 0.0).unwrap();
        let sel = AntennaSelection::norm_greedy(&[pair], 2, &dims).unwrap();
        assert_eq!(sel.active_indices(), vec![1, 2]);
        assert!(AntennaSelection::new(vec![false; 4], &dims).is_err());
    }
}
