//! Network scenario: geometry, system parameters, and channel realizations.
//!
//! A scenario describes `M` base stations with `N`-antenna uniform linear
//! arrays, `K` single-antenna users per cell, and one eavesdropping target.
//! Each frame has two stages: stage 1 carries dual-function (communication +
//! sensing) transmissions of fractional duration `tau[0]`, stage 2 carries
//! secure communication of duration `tau[1]`.
//!
//! Angle convention (used everywhere in the crate): every array is oriented
//! along the +x axis, and `theta_m` is the polar angle of the BS-to-target
//! vector measured from +x, i.e. `theta = atan2(dy, dx)`. With half-wavelength
//! element spacing the inter-element phase shift is then `pi * cos(theta)`,
//! which is exactly the exponent of [`steering_vector`].
//!
//! Units: config powers are dBm and are converted to linear watts at build
//! time; all internal math is in linear units. Distances are meters.

use crate::linalg::*;
use nalgebra::Matrix2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light, m/s.
pub const C_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

/// Accepts either a scalar (broadcast to all base stations) or a per-BS list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, m: usize) -> Result<Vec<f64>, ScenarioError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; m]),
            ScalarOrVec::Vec(v) if v.len() == m => Ok(v.clone()),
            ScalarOrVec::Vec(v) => Err(ScenarioError::InvalidArgument(format!(
                "per-BS list has {} entries, expected {}",
                v.len(),
                m
            ))),
        }
    }
}

fn default_ple() -> f64 {
    3.0
}
fn default_rcs() -> f64 {
    1.0
}
fn default_ring() -> [f64; 2] {
    [10.0, 40.0]
}

/// Flat configuration record. Field names are the on-disk JSON keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of base stations.
    #[serde(rename = "M")]
    pub m: usize,
    /// Antennas per base station.
    #[serde(rename = "N")]
    pub n: usize,
    /// Users per cell.
    #[serde(rename = "K")]
    pub k: usize,
    /// Sensing snapshots per frame.
    #[serde(rename = "L")]
    pub l: usize,
    /// Carrier frequency, Hz.
    pub carrier_freq: f64,
    /// Stage duration fractions `[tau1, tau2]`, must sum to 1.
    pub tau: [f64; 2],
    /// Per-BS power budget, dBm.
    #[serde(rename = "P_max")]
    pub p_max: f64,
    /// Per-user achievable-rate requirement, bits/s/Hz.
    #[serde(rename = "R_info")]
    pub r_info: f64,
    /// Per-user leakage-rate cap, bits/s/Hz.
    #[serde(rename = "R_leak")]
    pub r_leak: f64,
    /// User receiver noise power, dBm.
    pub noise_user: f64,
    /// Eavesdropper receiver noise power, dBm.
    pub noise_eve: f64,
    /// Sensing receiver noise power, dBm.
    pub noise_sense: f64,
    /// Rician K-factor of the eavesdropper channels (linear).
    pub rician_kappa: f64,
    /// Per-BS bound on the NLoS component norm of the eavesdropper channel.
    pub beta_nlos: ScalarOrVec,
    /// Stage-1 target-position error covariance (from the previous frame), m^2.
    #[serde(rename = "Q1")]
    pub q1: [[f64; 2]; 2],
    /// Master RNG seed for all channel draws.
    pub rng_seed: u64,
    /// BS positions, `[x, y]` in meters.
    pub bs_positions: Vec<[f64; 2]>,
    /// True target position.
    pub eve_position_true: [f64; 2],
    /// Estimated target position; defaults to the true position.
    #[serde(default)]
    pub eve_position_est: Option<[f64; 2]>,
    /// Log-distance path-loss exponent for user links.
    #[serde(default = "default_ple")]
    pub path_loss_exponent: f64,
    /// Radar-cross-section scale applied to round-trip sensing gains.
    #[serde(default = "default_rcs")]
    pub rcs_scale: f64,
    /// Users are placed uniformly in an annulus `[r_min, r_max]` around
    /// their serving BS.
    #[serde(default = "default_ring")]
    pub user_ring: [f64; 2],
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.l == 0 {
            return Err(ScenarioError::InvalidArgument(
                "M, N, K, L must all be positive".into(),
            ));
        }
        if (self.tau[0] + self.tau[1] - 1.0).abs() > 1e-12 || self.tau.iter().any(|&t| t <= 0.0) {
            return Err(ScenarioError::InvalidArgument(
                "tau entries must be positive and sum to 1".into(),
            ));
        }
        if self.bs_positions.len() != self.m {
            return Err(ScenarioError::InvalidGeometry(format!(
                "bs_positions has {} entries, expected M = {}",
                self.bs_positions.len(),
                self.m
            )));
        }
        if self.rician_kappa < 0.0 {
            return Err(ScenarioError::InvalidArgument("rician_kappa must be >= 0".into()));
        }
        let q = Matrix2::new(self.q1[0][0], self.q1[0][1], self.q1[1][0], self.q1[1][1]);
        if (q - q.transpose()).norm() > 1e-12 || q.symmetric_eigen().eigenvalues.min() < 0.0 {
            return Err(ScenarioError::InvalidArgument(
                "Q1 must be symmetric positive semidefinite".into(),
            ));
        }
        self.beta_nlos.expand(self.m)?;
        Ok(())
    }
}

/// dBm to linear watts.
pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Linear watts to dBm.
pub fn w_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Unit-modulus steering vector of an `N`-element half-wavelength ULA,
/// entry `n` equal to `exp(j pi n cos(theta))`.
pub fn steering_vector(theta: f64, n: usize) -> Result<CVec, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::InvalidArgument("steering vector needs N >= 1".into()));
    }
    Ok(CVec::from_fn(n, |i, _| {
        Complex::from_polar(1.0, std::f64::consts::PI * i as f64 * theta.cos())
    }))
}

/// Derivative of [`steering_vector`] with respect to `theta`.
pub fn steering_derivative(theta: f64, n: usize) -> Result<CVec, ScenarioError> {
    let a = steering_vector(theta, n)?;
    Ok(CVec::from_fn(n, |i, _| {
        C64::new(0.0, -std::f64::consts::PI * i as f64 * theta.sin()) * a[i]
    }))
}

/// A fully realized scenario: validated config, derived geometry, linear-unit
/// noise powers, and all channel draws.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    /// Per-BS power budget, watts.
    pub p_max_w: f64,
    pub sigma2_user: f64,
    pub sigma2_eve: f64,
    pub sigma2_sense: f64,
    /// Carrier wavelength, m.
    pub wavelength: f64,
    /// Estimated BS-to-target distances and angles.
    pub d_bar: Vec<f64>,
    pub theta_bar: Vec<f64>,
    /// True BS-to-target distances and angles.
    pub d_true: Vec<f64>,
    pub theta_true: Vec<f64>,
    /// User positions, `user_pos[m][k]`.
    pub user_pos: Vec<Vec<[f64; 2]>>,
    /// User channels, `h[src_bs][cell][k]`, length-N complex vectors.
    pub h: Vec<Vec<Vec<CVec>>>,
    /// Estimated eavesdropper channels (LoS part at the estimated angle).
    pub g_bar: Vec<CVec>,
    /// Drawn NLoS components, `||g_tilde[m]|| <= beta_nlos[m]`.
    pub g_tilde: Vec<CVec>,
    /// True eavesdropper channels (LoS at the true angle plus NLoS).
    pub g_true: Vec<CVec>,
    /// Eavesdropper-link complex gains `alpha_m`.
    pub alpha_eve: Vec<C64>,
    /// Round-trip sensing gains, `alpha_rt[tx][rx]`.
    pub alpha_rt: Vec<Vec<C64>>,
    /// Expanded per-BS NLoS bounds.
    pub beta_nlos: Vec<f64>,
    /// Stage-1 position error covariance.
    pub q1: Matrix2<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn angle(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

/// Build a scenario from a validated config.
///
/// All randomness comes from a ChaCha20 stream seeded with `rng_seed`; the
/// draw order is fixed (user positions, then user channels in `(src, cell, k)`
/// lexicographic order, then per-BS NLoS components, then eavesdropper-gain
/// phases, then round-trip-gain phases), so equal configs produce
/// byte-identical scenarios on any platform.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let m = cfg.m;
    let n = cfg.n;
    let k = cfg.k;
    let wavelength = C_LIGHT / cfg.carrier_freq;
    let eve_est = cfg.eve_position_est.unwrap_or(cfg.eve_position_true);

    let mut d_bar = Vec::with_capacity(m);
    let mut theta_bar = Vec::with_capacity(m);
    let mut d_true = Vec::with_capacity(m);
    let mut theta_true = Vec::with_capacity(m);
    for q in &cfg.bs_positions {
        let db = dist(*q, eve_est);
        let dt = dist(*q, cfg.eve_position_true);
        if db < 1e-6 || dt < 1e-6 {
            return Err(ScenarioError::InvalidGeometry(
                "target is colocated with a base station".into(),
            ));
        }
        d_bar.push(db);
        theta_bar.push(angle(*q, eve_est));
        d_true.push(dt);
        theta_true.push(angle(*q, cfg.eve_position_true));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed);
    let amp_ref = wavelength / (4.0 * std::f64::consts::PI);

    // user placement
    let mut user_pos = vec![vec![[0.0; 2]; k]; m];
    for mm in 0..m {
        for kk in 0..k {
            let r = cfg.user_ring[0] + rng.gen::<f64>() * (cfg.user_ring[1] - cfg.user_ring[0]);
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            user_pos[mm][kk] = [
                cfg.bs_positions[mm][0] + r * phi.cos(),
                cfg.bs_positions[mm][1] + r * phi.sin(),
            ];
        }
    }

    // user channels: i.i.d. CN(0, PL) entries, log-distance path loss with a
    // free-space reference at 1 m
    let mut h = vec![vec![Vec::with_capacity(k); m]; m];
    for src in 0..m {
        for cell in 0..m {
            for kk in 0..k {
                let d = dist(cfg.bs_positions[src], user_pos[cell][kk]).max(1.0);
                let pl = amp_ref.powi(2) * d.powf(-cfg.path_loss_exponent);
                let hv = cn_standard(n, &mut rng) * C64::new(pl.sqrt(), 0.0);
                h[src][cell].push(hv);
            }
        }
    }

    // eavesdropper channels
    let beta_nlos = cfg.beta_nlos.expand(m)?;
    let kap = cfg.rician_kappa;
    let los_w = (kap / (1.0 + kap)).sqrt();
    let nlos_w = (1.0 / (1.0 + kap)).sqrt();
    let mut g_tilde = Vec::with_capacity(m);
    for mm in 0..m {
        g_tilde.push(sample_nlos_component(n, beta_nlos[mm], &mut rng)?);
    }
    let mut alpha_eve = Vec::with_capacity(m);
    for mm in 0..m {
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        alpha_eve.push(Complex::from_polar(amp_ref / d_bar[mm], phase));
    }
    let mut g_bar = Vec::with_capacity(m);
    let mut g_true = Vec::with_capacity(m);
    for mm in 0..m {
        let a_est = steering_vector(theta_bar[mm], n)?;
        let a_tru = steering_vector(theta_true[mm], n)?;
        g_bar.push(&a_est * (alpha_eve[mm] * C64::new(los_w, 0.0)));
        g_true.push(
            (&a_tru * C64::new(los_w, 0.0) + &g_tilde[mm] * C64::new(nlos_w, 0.0))
                * alpha_eve[mm],
        );
    }

    // round-trip sensing gains
    let mut alpha_rt = vec![vec![C64::new(0.0, 0.0); m]; m];
    for tx in 0..m {
        for rx in 0..m {
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            let mag = amp_ref.powi(2) * cfg.rcs_scale.sqrt() / (d_true[tx] * d_true[rx]);
            alpha_rt[tx][rx] = Complex::from_polar(mag, phase);
        }
    }

    Ok(Scenario {
        p_max_w: dbm_to_w(cfg.p_max),
        sigma2_user: dbm_to_w(cfg.noise_user),
        sigma2_eve: dbm_to_w(cfg.noise_eve),
        sigma2_sense: dbm_to_w(cfg.noise_sense),
        wavelength,
        d_bar,
        theta_bar,
        d_true,
        theta_true,
        user_pos,
        h,
        g_bar,
        g_tilde,
        g_true,
        alpha_eve,
        alpha_rt,
        beta_nlos,
        q1: Matrix2::new(cfg.q1[0][0], cfg.q1[0][1], cfg.q1[1][0], cfg.q1[1][1]),
        cfg: cfg.clone(),
    })
}

/// Draw a NLoS component uniformly from the complex ball of radius `beta`.
pub fn sample_nlos_component<R: Rng>(
    n: usize,
    beta: f64,
    rng: &mut R,
) -> Result<CVec, ScenarioError> {
    if beta < 0.0 {
        return Err(ScenarioError::InvalidArgument("beta_nlos must be >= 0".into()));
    }
    Ok(ball_uniform(n, beta, rng))
}

impl Scenario {
    pub fn m(&self) -> usize {
        self.cfg.m
    }
    pub fn n(&self) -> usize {
        self.cfg.n
    }
    pub fn k(&self) -> usize {
        self.cfg.k
    }
    pub fn tau(&self) -> [f64; 2] {
        self.cfg.tau
    }

    /// Stacked estimated eavesdropper channel in `C^{MN}` (BS blocks in order).
    pub fn g_bar_stacked(&self) -> CVec {
        let n = self.n();
        let mut g = CVec::zeros(self.m() * n);
        for mm in 0..self.m() {
            for i in 0..n {
                g[mm * n + i] = self.g_bar[mm][i];
            }
        }
        g
    }

    /// RMS magnitude of user-channel entries; solvers scale channels by this
    /// to keep conic data well conditioned (the model is scale covariant).
    pub fn channel_scale(&self) -> f64 {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for src in &self.h {
            for cell in src {
                for hv in cell {
                    acc += hv.norm_squared();
                    cnt += hv.len();
                }
            }
        }
        (acc / cnt as f64).sqrt()
    }
}

/// Serialized scenario: the config plus hex dumps of every channel draw, so a
/// run can be reproduced bit-exactly without replaying the RNG.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub config: ScenarioConfig,
    pub user_pos: Vec<Vec<[f64; 2]>>,
    pub h_hex: Vec<Vec<Vec<String>>>,
    pub g_tilde_hex: Vec<String>,
    pub alpha_eve_hex: String,
    pub alpha_rt_hex: String,
}

impl ScenarioRecord {
    pub fn from_scenario(s: &Scenario) -> Self {
        let alpha_eve = CVec::from_vec(s.alpha_eve.clone());
        let m = s.m();
        let alpha_rt = CMat::from_fn(m, m, |i, j| s.alpha_rt[i][j]);
        ScenarioRecord {
            config: s.cfg.clone(),
            user_pos: s.user_pos.clone(),
            h_hex: s
                .h
                .iter()
                .map(|a| a.iter().map(|b| b.iter().map(cvec_to_hex).collect()).collect())
                .collect(),
            g_tilde_hex: s.g_tilde.iter().map(cvec_to_hex).collect(),
            alpha_eve_hex: cvec_to_hex(&alpha_eve),
            alpha_rt_hex: cmat_to_hex(&alpha_rt),
        }
    }

    /// Rebuild the scenario with the recorded draws (geometry is re-derived
    /// from the config; channels come from the hex dumps).
    pub fn into_scenario(&self) -> Result<Scenario, ScenarioError> {
        let mut s = build_scenario(&self.config)?;
        let n = s.n();
        let m = s.m();
        let bad = |e: String| ScenarioError::ConfigParse(e);
        s.user_pos = self.user_pos.clone();
        for (src, a) in self.h_hex.iter().enumerate() {
            for (cell, b) in a.iter().enumerate() {
                for (kk, hx) in b.iter().enumerate() {
                    s.h[src][cell][kk] = cvec_from_hex(hx, n).map_err(bad)?;
                }
            }
        }
        for (mm, hx) in self.g_tilde_hex.iter().enumerate() {
            s.g_tilde[mm] = cvec_from_hex(hx, n).map_err(bad)?;
        }
        let ae = cvec_from_hex(&self.alpha_eve_hex, m).map_err(bad)?;
        s.alpha_eve = ae.iter().cloned().collect();
        let art = cmat_from_hex(&self.alpha_rt_hex, m, m).map_err(bad)?;
        for i in 0..m {
            for j in 0..m {
                s.alpha_rt[i][j] = art[(i, j)];
            }
        }
        // channels were overwritten: rebuild the composites that depend on them
        let kap = s.cfg.rician_kappa;
        let los_w = (kap / (1.0 + kap)).sqrt();
        let nlos_w = (1.0 / (1.0 + kap)).sqrt();
        for mm in 0..m {
            let a_est = steering_vector(s.theta_bar[mm], n)?;
            let a_tru = steering_vector(s.theta_true[mm], n)?;
            s.g_bar[mm] = &a_est * (s.alpha_eve[mm] * C64::new(los_w, 0.0));
            s.g_true[mm] = (&a_tru * C64::new(los_w, 0.0)
                + &s.g_tilde[mm] * C64::new(nlos_w, 0.0))
                * s.alpha_eve[mm];
        }
        Ok(s)
    }
}

/// Desk-scale default config used by tests and examples: small enough for
/// second-scale conic solves, same structure as the full-scale setup.
pub fn desk_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        m: 2,
        n: 3,
        k: 2,
        l: 256,
        carrier_freq: 5e9,
        tau: [0.2, 0.8],
        p_max: 20.0,
        r_info: 4.0,
        r_leak: 0.5,
        noise_user: -100.0,
        noise_eve: -100.0,
        noise_sense: -100.0,
        rician_kappa: 3.0,
        beta_nlos: ScalarOrVec::Scalar(0.15),
        q1: [[0.25, 0.0], [0.0, 0.25]],
        rng_seed: seed,
        // the cells sit far apart relative to the user rings: with so few
        // antennas per BS, every spatial degree of freedom is spent on
        // in-cell interference and leakage suppression, so multi-bit rate
        // targets under full frequency reuse are only servable when the
        // cross-cell links are two to three orders of magnitude weaker
        // than the direct links
        bs_positions: vec![[30.0, 45.0], [-50.0, 50.0]],
        eve_position_true: [0.0, 0.0],
        eve_position_est: None,
        path_loss_exponent: 3.0,
        rcs_scale: 1.0,
        user_ring: [5.0, 10.0],
    }
}

/// Full-scale config mirroring the reference deployment: three BSs, four
/// antennas, 1024 snapshots.
pub fn full_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        m: 3,
        n: 4,
        k: 2,
        l: 1024,
        r_info: 5.0,
        bs_positions: vec![[15.0, 22.5], [-25.0, 25.0], [15.0, -30.0]],
        ..desk_config(seed)
    }
}
