//! Communication and secrecy metrics evaluated on beamforming solutions.
//!
//! All evaluators work on transmit covariances (`W`, `R`); a vector-mode SINR
//! is provided for auditing recovered rank-one beamformers. For user `(m, k)`
//! in stage `i` the SINR is
//!
//! ```text
//!              Tr(H_{m,m,k} W_{m,k})
//! gamma = --------------------------------------------------------------
//!         sum_{k'!=k} Tr(H_{m,m,k} W_{m,k'})        (intra-cell)
//!       + sum_{m'!=m} sum_{k'} Tr(H_{m',m,k} W_{m',k'})  (inter-cell)
//!       + sum_{m'} h_{m',m,k}^H R_{m'} h_{m',m,k}   (sensing/jamming)
//!       + sigma^2
//! ```
//!
//! with `H = h h^H`, and the achievable rate is the stage-duration-weighted
//! sum `sum_i tau_i log2(1 + gamma_i)`. The leakage rate toward the
//! eavesdropper for user `(m, k)` excludes multiuser interference (worst-case
//! decoding) but keeps all BSs' sensing covariances in the denominator.

use crate::linalg::*;
use crate::scenario::Scenario;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid stage index {0}; stages are 0 (DFRC) and 1 (secure)")]
    InvalidStage(usize),
}

/// Auxiliary certification variables carried alongside a solution.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolutionAux {
    /// Certified per-stage leakage SINR bounds, `xi[stage][m][k]`.
    pub xi: Vec<Vec<Vec<f64>>>,
    /// Certified stage-2 per-BS CSI-error radii.
    pub delta: Vec<f64>,
    /// Stacked squared stage-2 radius (centralized certificates).
    pub delta0: f64,
    /// Predicted stage-2 position MSE bound, `Tr(Q2)`.
    pub trace_q2: f64,
}

/// Two-stage beamforming solution: per-stage information covariances
/// `W[stage][m][k]`, sensing covariances `R[stage][m]`, optional recovered
/// rank-one beamformers, and certification auxiliaries.
#[derive(Debug, Clone)]
pub struct BeamformingSolution {
    pub w: [Vec<Vec<CMat>>; 2],
    pub r: [Vec<CMat>; 2],
    pub w_vec: Option<[Vec<Vec<CVec>>; 2]>,
    pub aux: SolutionAux,
}

impl BeamformingSolution {
    pub fn zeros(m: usize, n: usize, k: usize) -> Self {
        let wz = vec![vec![CMat::zeros(n, n); k]; m];
        let rz = vec![CMat::zeros(n, n); m];
        BeamformingSolution {
            w: [wz.clone(), wz],
            r: [rz.clone(), rz],
            w_vec: None,
            aux: SolutionAux::default(),
        }
    }

    /// Total transmit covariance of BS `m` in the given stage.
    pub fn s_cov(&self, stage: usize, m: usize) -> CMat {
        let mut s = self.r[stage][m].clone();
        for w in &self.w[stage][m] {
            s += w;
        }
        s
    }

    pub fn check_dims(&self, scen: &Scenario) -> Result<(), MetricsError> {
        for stage in 0..2 {
            if self.w[stage].len() != scen.m() || self.r[stage].len() != scen.m() {
                return Err(MetricsError::DimensionMismatch(
                    "per-BS arrays do not match M".into(),
                ));
            }
            for m in 0..scen.m() {
                if self.w[stage][m].len() != scen.k() {
                    return Err(MetricsError::DimensionMismatch(
                        "per-user arrays do not match K".into(),
                    ));
                }
                for w in &self.w[stage][m] {
                    if w.nrows() != scen.n() || w.ncols() != scen.n() {
                        return Err(MetricsError::DimensionMismatch(
                            "covariance is not N x N".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_stage(i: usize) -> Result<(), MetricsError> {
    if i > 1 {
        return Err(MetricsError::InvalidStage(i));
    }
    Ok(())
}

/// Interference-plus-noise power at user `(m, k)` in stage `i` (everything in
/// the SINR denominator).
pub fn interference_power(
    scen: &Scenario,
    sol: &BeamformingSolution,
    i: usize,
    m: usize,
    k: usize,
) -> f64 {
    let mut den = scen.sigma2_user;
    for src in 0..scen.m() {
        let h = &scen.h[src][m][k];
        den += quad_form(h, &sol.r[i][src]).max(0.0);
        for kk in 0..scen.k() {
            if src == m && kk == k {
                continue;
            }
            den += quad_form(h, &sol.w[i][src][kk]).max(0.0);
        }
    }
    den
}

/// SINR of user `(m, k)` in stage `i` from transmit covariances.
pub fn sinr_user(
    scen: &Scenario,
    sol: &BeamformingSolution,
    i: usize,
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    check_stage(i)?;
    sol.check_dims(scen)?;
    let num = quad_form(&scen.h[m][m][k], &sol.w[i][m][k]).max(0.0);
    Ok(num / interference_power(scen, sol, i, m, k))
}

/// SINR from explicit rank-one beamformers `w[stage][m][k]` (sensing
/// covariances still matrix-valued).
pub fn sinr_user_vec(
    scen: &Scenario,
    w: &[Vec<Vec<CVec>>; 2],
    r: &[Vec<CMat>; 2],
    i: usize,
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    check_stage(i)?;
    let h_own = &scen.h[m][m][k];
    let num = (h_own.adjoint() * &w[i][m][k])[(0, 0)].norm_sqr();
    let mut den = scen.sigma2_user;
    for src in 0..scen.m() {
        let h = &scen.h[src][m][k];
        den += quad_form(h, &r[i][src]).max(0.0);
        for kk in 0..scen.k() {
            if src == m && kk == k {
                continue;
            }
            den += (h.adjoint() * &w[i][src][kk])[(0, 0)].norm_sqr();
        }
    }
    Ok(num / den)
}

/// Stage-weighted achievable rate of user `(m, k)` in bits/s/Hz.
pub fn achievable_rate(
    scen: &Scenario,
    sol: &BeamformingSolution,
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    let tau = scen.tau();
    let mut rate = 0.0;
    for i in 0..2 {
        rate += tau[i] * (1.0 + sinr_user(scen, sol, i, m, k)?).log2();
    }
    Ok(rate)
}

/// Leakage SINR toward the eavesdropper for user `(m, k)` in stage `i`,
/// evaluated at the given per-BS eavesdropper channels.
pub fn leakage_sinr(
    scen: &Scenario,
    sol: &BeamformingSolution,
    g: &[CVec],
    i: usize,
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    check_stage(i)?;
    if g.len() != scen.m() {
        return Err(MetricsError::DimensionMismatch(
            "eavesdropper channel list does not match M".into(),
        ));
    }
    let num = quad_form(&g[m], &sol.w[i][m][k]).max(0.0);
    let mut den = scen.sigma2_eve;
    for src in 0..scen.m() {
        den += quad_form(&g[src], &sol.r[i][src]).max(0.0);
    }
    Ok(num / den)
}

/// Per-stage leakage rate `log2(1 + leakage SINR)`.
pub fn leakage_rate(
    scen: &Scenario,
    sol: &BeamformingSolution,
    g: &[CVec],
    i: usize,
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    Ok((1.0 + leakage_sinr(scen, sol, g, i, m, k)?).log2())
}

/// Stage-weighted leakage rate at fixed eavesdropper channels.
pub fn weighted_leakage_rate(
    scen: &Scenario,
    sol: &BeamformingSolution,
    g: &[CVec],
    m: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    let tau = scen.tau();
    Ok(tau[0] * leakage_rate(scen, sol, g, 0, m, k)?
        + tau[1] * leakage_rate(scen, sol, g, 1, m, k)?)
}

/// Stage-weighted average transmit power of BS `m` in watts.
pub fn bs_power(scen: &Scenario, sol: &BeamformingSolution, m: usize) -> f64 {
    let tau = scen.tau();
    let mut p = 0.0;
    for i in 0..2 {
        let mut stage = tr_re(&sol.r[i][m]);
        for w in &sol.w[i][m] {
            stage += tr_re(w);
        }
        p += tau[i] * stage;
    }
    p
}

/// Network total of [`bs_power`].
pub fn total_power(scen: &Scenario, sol: &BeamformingSolution) -> f64 {
    (0..scen.m()).map(|m| bs_power(scen, sol, m)).sum()
}

/// True if every BS satisfies its averaged power budget within `tol` watts.
pub fn power_constraint_ok(scen: &Scenario, sol: &BeamformingSolution, tol: f64) -> bool {
    (0..scen.m()).all(|m| bs_power(scen, sol, m) <= scen.p_max_w + tol)
}

/// Audit report for a converged solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QosAudit {
    pub min_rate_margin: f64,
    pub max_power_overrun_w: f64,
    pub rates: Vec<Vec<f64>>,
    pub powers_w: Vec<f64>,
}

/// Evaluate rate and power constraints; leakage is audited separately by the
/// sampling oracle in `uncertainty`.
pub fn qos_audit(scen: &Scenario, sol: &BeamformingSolution) -> Result<QosAudit, MetricsError> {
    let mut rates = vec![vec![0.0; scen.k()]; scen.m()];
    let mut min_margin = f64::INFINITY;
    for m in 0..scen.m() {
        for k in 0..scen.k() {
            let r = achievable_rate(scen, sol, m, k)?;
            rates[m][k] = r;
            min_margin = min_margin.min(r - scen.cfg.r_info);
        }
    }
    let powers_w: Vec<f64> = (0..scen.m()).map(|m| bs_power(scen, sol, m)).collect();
    let max_overrun = powers_w
        .iter()
        .map(|p| p - scen.p_max_w)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(QosAudit {
        min_rate_margin: min_margin,
        max_power_overrun_w: max_overrun,
        rates,
        powers_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, desk_config};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn toy_solution(scen: &Scenario, seed: u64) -> BeamformingSolution {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = scen.n();
        let mut sol = BeamformingSolution::zeros(scen.m(), n, scen.k());
        for i in 0..2 {
            for m in 0..scen.m() {
                for k in 0..scen.k() {
                    let v = cn_standard(n, &mut rng) * C64::new(0.05, 0.0);
                    sol.w[i][m][k] = outer(&v);
                }
                let b = CMat::from_fn(n, n, |_, _| {
                    C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.02
                });
                sol.r[i][m] = &b * b.adjoint();
            }
        }
        sol
    }

    /// Monte-Carlo symbol-level check of the SINR formula: simulate received
    /// samples and compare the ratio of averaged powers to the closed form.
    #[test]
    fn sinr_matches_symbol_simulation() {
        let scen = build_scenario(&desk_config(5)).unwrap();
        let sol = toy_solution(&scen, 17);
        let (i, m, k) = (0usize, 0usize, 1usize);
        let analytic = sinr_user(&scen, &sol, i, m, k).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut sig = 0.0;
        let mut intf = 0.0;
        // precompute rank-one factors for W and factors for R
        let wfac: Vec<Vec<CMat>> = (0..scen.m())
            .map(|mm| (0..scen.k()).map(|kk| psd_factor(&sol.w[i][mm][kk])).collect())
            .collect();
        let rfac: Vec<CMat> = (0..scen.m()).map(|mm| psd_factor(&sol.r[i][mm])).collect();
        for _ in 0..draws {
            let mut received_sig = C64::new(0.0, 0.0);
            let mut received_intf = C64::new(0.0, 0.0);
            for src in 0..scen.m() {
                let h = &scen.h[src][m][k];
                for kk in 0..scen.k() {
                    let s: CVec = &wfac[src][kk] * cn_standard(scen.n(), &mut rng);
                    let y = (h.adjoint() * s)[(0, 0)];
                    if src == m && kk == k {
                        received_sig += y;
                    } else {
                        received_intf += y;
                    }
                }
                let r: CVec = &rfac[src] * cn_standard(scen.n(), &mut rng);
                received_intf += (h.adjoint() * r)[(0, 0)];
            }
            let noise = cn_standard(1, &mut rng)[0] * C64::new(scen.sigma2_user.sqrt(), 0.0);
            received_intf += noise;
            sig += received_sig.norm_sqr();
            intf += received_intf.norm_sqr();
        }
        let empirical = sig / intf;
        assert_relative_eq!(empirical, analytic, max_relative = 0.02);
    }

    #[test]
    fn rate_closed_forms() {
        // gamma = 3 in both stages with tau = (0.2, 0.8) -> 2 bits/s/Hz
        let scen = build_scenario(&desk_config(1)).unwrap();
        let mut sol = toy_solution(&scen, 3);
        // construct gamma exactly: zero everything, set W from own channel
        for i in 0..2 {
            for m in 0..scen.m() {
                for k in 0..scen.k() {
                    sol.w[i][m][k] = CMat::zeros(scen.n(), scen.n());
                }
                sol.r[i][m] = CMat::zeros(scen.n(), scen.n());
            }
        }
        let (m, k) = (1usize, 0usize);
        let h = scen.h[m][m][k].clone();
        for i in 0..2 {
            let target = 3.0 * scen.sigma2_user / h.norm_squared().powi(2);
            sol.w[i][m][k] = outer(&h) * C64::new(target, 0.0);
        }
        assert_relative_eq!(sinr_user(&scen, &sol, 0, m, k).unwrap(), 3.0, max_relative = 1e-10);
        assert_relative_eq!(achievable_rate(&scen, &sol, m, k).unwrap(), 2.0, max_relative = 1e-10);
        // asymmetric stages: gamma = (0, 15) -> 0.2*0 + 0.8*4 = 3.2
        sol.w[0][m][k] = CMat::zeros(scen.n(), scen.n());
        let target = 15.0 * scen.sigma2_user / h.norm_squared().powi(2);
        sol.w[1][m][k] = outer(&h) * C64::new(target, 0.0);
        assert_relative_eq!(achievable_rate(&scen, &sol, m, k).unwrap(), 3.2, max_relative = 1e-10);
    }

    #[test]
    fn leakage_excludes_multiuser_terms() {
        let scen = build_scenario(&desk_config(2)).unwrap();
        let mut sol = toy_solution(&scen, 4);
        let g: Vec<CVec> = scen.g_true.clone();
        let base = leakage_sinr(&scen, &sol, &g, 0, 0, 0).unwrap();
        // boosting another user's W must not change the leakage denominator
        sol.w[0][1][1] *= C64::new(10.0, 0.0);
        let after = leakage_sinr(&scen, &sol, &g, 0, 0, 0).unwrap();
        assert_relative_eq!(base, after, max_relative = 1e-12);
        // boosting any R must reduce it
        sol.r[0][1] *= C64::new(10.0, 0.0);
        assert!(leakage_sinr(&scen, &sol, &g, 0, 0, 0).unwrap() < base);
    }

    #[test]
    fn power_is_tau_weighted() {
        let scen = build_scenario(&desk_config(3)).unwrap();
        let sol = toy_solution(&scen, 5);
        let mut expect = 0.0;
        for i in 0..2 {
            for m in 0..scen.m() {
                let mut st = tr_re(&sol.r[i][m]);
                for k in 0..scen.k() {
                    st += tr_re(&sol.w[i][m][k]);
                }
                expect += scen.tau()[i] * st;
            }
        }
        assert_relative_eq!(total_power(&scen, &sol), expect, max_relative = 1e-12);
    }

    /// Scale covariance: scaling all channels by c and noise powers by c^2
    /// leaves SINR, rates, and leakage unchanged.
    #[test]
    fn metrics_are_scale_covariant() {
        let scen = build_scenario(&desk_config(8)).unwrap();
        let sol = toy_solution(&scen, 6);
        let c = 37.0;
        let mut scaled = scen.clone();
        for src in 0..scaled.m() {
            for cell in 0..scaled.m() {
                for k in 0..scaled.k() {
                    scaled.h[src][cell][k] *= C64::new(c, 0.0);
                }
            }
        }
        for m in 0..scaled.m() {
            scaled.g_bar[m] *= C64::new(c, 0.0);
            scaled.g_true[m] *= C64::new(c, 0.0);
        }
        scaled.sigma2_user *= c * c;
        scaled.sigma2_eve *= c * c;
        let g: Vec<CVec> = scen.g_true.clone();
        let gs: Vec<CVec> = scaled.g_true.clone();
        for m in 0..scen.m() {
            for k in 0..scen.k() {
                assert_relative_eq!(
                    sinr_user(&scen, &sol, 1, m, k).unwrap(),
                    sinr_user(&scaled, &sol, 1, m, k).unwrap(),
                    max_relative = 1e-10
                );
                assert_relative_eq!(
                    leakage_rate(&scen, &sol, &g, 0, m, k).unwrap(),
                    leakage_rate(&scaled, &sol, &gs, 0, m, k).unwrap(),
                    max_relative = 1e-10
                );
            }
        }
    }

    /// Monotonicity: adding PSD loading to an interferer's covariance never
    /// increases a victim's SINR.
    #[test]
    fn interference_monotonicity() {
        let scen = build_scenario(&desk_config(9)).unwrap();
        let mut sol = toy_solution(&scen, 7);
        let before = sinr_user(&scen, &sol, 0, 0, 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let v = cn_standard(scen.n(), &mut rng);
        sol.w[0][1][0] += outer(&v) * C64::new(0.01, 0.0);
        let after = sinr_user(&scen, &sol, 0, 0, 0).unwrap();
        assert!(after <= before + 1e-15);
    }
}
