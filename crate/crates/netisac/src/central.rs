//! Centralized two-block power minimization.
//!
//! Block 1 minimizes total transmit power over the per-stage covariances,
//! the stage-2 radii, and the CRB epigraph, holding the leakage caps and
//! S-procedure multipliers fixed. Block 2 re-tightens the leakage caps and
//! multipliers against the fixed covariances under the leakage budget. Both
//! blocks are convex; the nonconvex pieces (user rates, the leakage budget,
//! and the MSE/radius coupling) enter through tangent surrogates that are
//! re-linearized at the current iterate, so every accepted iterate stays
//! feasible for the true constraints and total power is nonincreasing.
//!
//! All channel-bearing data is normalized by the RMS direct-channel entry
//! before entering the conic solver; radii and leakage caps are mapped back
//! on extraction (the problem is exactly covariant under this scaling).

use crate::conic::{ConicError, CxExpr, HermVar, LinExpr, Model, SolveStatus};
use crate::linalg::*;
use crate::metrics::{qos_audit, BeamformingSolution, MetricsError, SolutionAux};
use crate::scenario::Scenario;
use crate::sensing::{
    centralized_fim, fim_coefficients, response_and_derivatives, ResponseDerivatives,
    SensingError,
};
use crate::uncertainty::{coupling_constants, UncertaintyError, UncertaintyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CentralError {
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Options of the centralized block-coordinate loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcdOptions {
    /// Maximum outer iterations.
    pub max_iters: usize,
    /// Relative total-power change below which the loop stops.
    pub rel_tol: f64,
    /// Restarts allowed after a failed block solve.
    pub max_restarts: usize,
}

impl Default for BcdOptions {
    fn default() -> Self {
        BcdOptions {
            max_iters: 50,
            rel_tol: 1e-3,
            max_restarts: 3,
        }
    }
}

/// Per-iteration progress record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub total_power_w: f64,
    pub min_rate: f64,
    pub max_cert_leak: f64,
    pub trace_q2: f64,
    pub delta0: f64,
    pub block1_iterations: u32,
    pub block2_iterations: u32,
}

/// Result of the centralized optimization.
#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub solution: BeamformingSolution,
    pub trace: Vec<IterRecord>,
    pub total_power_w: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
}

/// Scale-normalized problem data shared by the solvers.
pub struct NormProblem {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub tau: [f64; 2],
    pub p_max: f64,
    pub r_info: f64,
    pub r_leak: f64,
    pub sigma2_user: f64,
    pub sigma2_eve: f64,
    /// Normalized direct channels `h[src][cell][k]`.
    pub h: Vec<Vec<Vec<CVec>>>,
    /// Normalized eavesdropper channel estimates per BS.
    pub g_bar: Vec<CVec>,
    /// Stacked normalized eavesdropper channel estimate.
    pub g_stack: CVec,
    /// Normalized coupling constants (`a * s`, `b / s`).
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Squared normalized stacked stage-1 CSI radius.
    pub beta1_sq: f64,
    /// Normalized per-BS stage-1 CSI radii.
    pub beta1_per: Vec<f64>,
    /// FIM coefficient matrices (physical units; power variables are watts).
    pub fim_coeff: Vec<[[CMat; 2]; 2]>,
    /// Response derivatives at the estimated target position.
    pub resp: ResponseDerivatives,
    /// Channel normalization scale.
    pub scale: f64,
    /// Extra eavesdropper-side scale (stacked estimate has unit norm), which
    /// keeps every certificate block at the beam-power magnitude.
    pub eve_scale: f64,
}

impl NormProblem {
    /// Product scale mapping normalized eavesdropper-side radii to physical.
    pub fn eve_unit(&self) -> f64 {
        self.scale * self.eve_scale
    }
}

impl NormProblem {
    pub fn from_scenario(scen: &Scenario) -> Result<Self, CentralError> {
        let (m, n, k) = (scen.m(), scen.n(), scen.k());
        let s = scen.channel_scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(CentralError::Solver("degenerate channel scale".into()));
        }
        let inv = C64::new(1.0 / s, 0.0);
        let h = scen
            .h
            .iter()
            .map(|per_cell| {
                per_cell
                    .iter()
                    .map(|per_k| per_k.iter().map(|v| v * inv).collect())
                    .collect()
            })
            .collect();
        let mut g_bar: Vec<CVec> = scen.g_bar.iter().map(|v| v * inv).collect();
        let mut g_stack = CVec::zeros(m * n);
        for (mm, g) in g_bar.iter().enumerate() {
            for i in 0..n {
                g_stack[mm * n + i] = g[i];
            }
        }
        let cg = g_stack.norm();
        if !(cg.is_finite() && cg > 0.0) {
            return Err(CentralError::Solver("degenerate eavesdropper scale".into()));
        }
        let inv_g = C64::new(1.0 / cg, 0.0);
        for g in g_bar.iter_mut() {
            *g *= inv_g;
        }
        g_stack *= inv_g;
        let su = s * cg;
        let (mut a, mut b) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for mm in 0..m {
            let (am, bm) = coupling_constants(scen, mm);
            a.push(am * su);
            b.push(bm / su);
        }
        let model = UncertaintyModel::stage1(scen)?;
        let beta1 = model.beta_g_stacked[0] / su;
        let beta1_per: Vec<f64> = model.beta_g[0].iter().map(|b| b / su).collect();
        let p_est = scen.cfg.eve_position_est.unwrap_or(scen.cfg.eve_position_true);
        let resp = response_and_derivatives(scen, p_est)?;
        let fim_coeff = fim_coefficients(scen, &resp);
        Ok(NormProblem {
            m,
            n,
            k,
            tau: scen.tau(),
            p_max: scen.p_max_w,
            r_info: scen.cfg.r_info,
            r_leak: scen.cfg.r_leak,
            sigma2_user: scen.sigma2_user / (s * s),
            sigma2_eve: scen.sigma2_eve / (su * su),
            h,
            g_bar,
            g_stack,
            a,
            b,
            beta1_sq: beta1 * beta1,
            beta1_per,
            fim_coeff,
            resp,
            scale: s,
            eve_scale: cg,
        })
    }
}

/// Mutable state of the block-coordinate loop (normalized domain; power
/// variables are watts in both domains).
#[derive(Debug, Clone)]
pub struct BcdState {
    pub w: [Vec<Vec<CMat>>; 2],
    pub r: [Vec<CMat>; 2],
    pub delta: Vec<f64>,
    pub delta0: f64,
    pub xi: [Vec<Vec<f64>>; 2],
    pub eta: [Vec<Vec<f64>>; 2],
    pub trace_q2: f64,
}

#[derive(Debug)]
enum BlockFailure {
    Infeasible(String),
    Solver(String),
}

impl BlockFailure {
    fn into_central(self) -> CentralError {
        match self {
            BlockFailure::Infeasible(s) => CentralError::Infeasible(s),
            BlockFailure::Solver(s) => CentralError::Solver(s),
        }
    }
}

/// Assemble the leakage-certificate matrix
/// `[eta I - M, -M g; -g^H M, corner_extra - g^H M g]`
/// from an entry provider for the stacked matrix `M`.
fn assemble_certificate(
    g_stack: &CVec,
    m_entry: &dyn Fn(usize, usize) -> CxExpr,
    eta_diag: &LinExpr,
    corner_extra: &LinExpr,
) -> Vec<Vec<CxExpr>> {
    let mn = g_stack.len();
    let dim = mn + 1;
    let mut ent = vec![vec![CxExpr::zero(); dim]; dim];
    let mut quad = CxExpr::zero();
    for p in 0..mn {
        for q in 0..mn {
            let mpq = m_entry(p, q);
            let mut e = mpq.scaled(C64::new(-1.0, 0.0));
            if p == q {
                e = e.plus(&CxExpr::from_real(eta_diag.clone()));
            }
            ent[p][q] = e;
        }
        let mut col = CxExpr::zero();
        for q in 0..mn {
            col = col.plus(&m_entry(p, q).scaled(g_stack[q]));
        }
        quad = quad.plus(&col.scaled(g_stack[p].conj()));
        ent[p][mn] = col.scaled(C64::new(-1.0, 0.0));
        ent[mn][p] = ent[p][mn].conj();
    }
    ent[mn][mn] = CxExpr::from_real(corner_extra.minus(&quad.re));
    ent
}

/// Block index of a stacked antenna index.
fn block_of(p: usize, n: usize) -> usize {
    p / n
}

/// Entry provider for `M = Wtilde - xi * Rtilde` with fixed covariance values
/// and affine `xi`.
fn m_entry_fixed_wr<'a>(
    np: &'a NormProblem,
    w_link: &'a CMat,
    r_vals: &'a [CMat],
    m_tested: usize,
    xi: &'a LinExpr,
) -> impl Fn(usize, usize) -> CxExpr + 'a {
    move |p: usize, q: usize| {
        let n = np.n;
        let (bp, bq) = (block_of(p, n), block_of(q, n));
        if bp != bq {
            return CxExpr::zero();
        }
        let (pi, qi) = (p % n, q % n);
        let mut e = if bp == m_tested {
            CxExpr::constant(w_link[(pi, qi)])
        } else {
            CxExpr::zero()
        };
        let rv = r_vals[bp][(pi, qi)];
        if rv.norm_sqr() > 0.0 {
            e = e.minus(&CxExpr::from_real(xi.clone()).scaled(rv));
        }
        e
    }
}

/// Certified leakage budget used by a solution: max over users of the
/// frame-weighted leakage rate implied by the per-stage caps.
pub fn certified_leak_budget(tau: [f64; 2], xi: &[Vec<Vec<f64>>; 2]) -> f64 {
    let m = xi[0].len();
    let k = if m > 0 { xi[0][0].len() } else { 0 };
    let mut worst: f64 = 0.0;
    for mm in 0..m {
        for kk in 0..k {
            let v: f64 = (0..2)
                .map(|i| tau[i] * (1.0 + xi[i][mm][kk]).log2())
                .sum();
            worst = worst.max(v);
        }
    }
    worst
}

/// Tightest leakage-SINR certificate for user `(m, k)` in stage `i` given
/// fixed covariances and a fixed squared ball radius: the smallest `xi`
/// admitting an S-procedure multiplier.
pub fn tightest_certificate(
    np: &NormProblem,
    w: &[Vec<Vec<CMat>>; 2],
    r: &[Vec<CMat>; 2],
    r_sq: f64,
    i: usize,
    m: usize,
    k: usize,
) -> Result<(f64, f64), CentralError> {
    let mut model = Model::new();
    let xi = model.add_var();
    let eta = model.add_var();
    model.nonneg(LinExpr::var(xi), "xi_nonneg");
    model.nonneg(LinExpr::var(eta), "eta_nonneg");
    let xi_e = LinExpr::var(xi);
    let eta_e = LinExpr::var(eta);
    let corner = LinExpr::term(eta, -r_sq).plus(&LinExpr::term(xi, np.sigma2_eve));
    let provider = m_entry_fixed_wr(np, &w[i][m][k], &r[i], m, &xi_e);
    let ent = assemble_certificate(&np.g_stack, &provider, &eta_e, &corner);
    model.psd_hermitian(&ent, "leak_cert");
    model.add_linear_cost(&LinExpr::var(xi));
    let sol = model.solve()?;
    match sol.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal => Ok((
            sol.x[xi].max(0.0),
            sol.x[eta].max(0.0),
        )),
        SolveStatus::Infeasible => Err(CentralError::Infeasible(
            "no leakage certificate exists for the given covariances".into(),
        )),
        other => Err(CentralError::Solver(format!(
            "certificate solve ended with {other:?}"
        ))),
    }
}

/// Interference-plus-noise power at user `(m, k)` in stage `i` (normalized).
fn den_value(np: &NormProblem, w: &[Vec<Vec<CMat>>; 2], r: &[Vec<CMat>; 2], i: usize, m: usize, k: usize) -> f64 {
    let mut den = np.sigma2_user;
    for src in 0..np.m {
        let h = &np.h[src][m][k];
        den += quad_form(h, &r[i][src]).max(0.0);
        for kk in 0..np.k {
            if src == m && kk == k {
                continue;
            }
            den += quad_form(h, &w[i][src][kk]).max(0.0);
        }
    }
    den
}

fn state_power(np: &NormProblem, st: &BcdState) -> f64 {
    let mut p = 0.0;
    for i in 0..2 {
        for m in 0..np.m {
            let mut pm = tr_re(&st.r[i][m]);
            for k in 0..np.k {
                pm += tr_re(&st.w[i][m][k]);
            }
            p += np.tau[i] * pm;
        }
    }
    p
}

fn state_solution(np: &NormProblem, st: &BcdState) -> BeamformingSolution {
    let s = np.eve_unit();
    BeamformingSolution {
        w: st.w.clone(),
        r: st.r.clone(),
        w_vec: None,
        aux: SolutionAux {
            xi: vec![st.xi[0].clone(), st.xi[1].clone()],
            delta: st.delta.iter().map(|d| d * s).collect(),
            delta0: st.delta0 * s * s,
            trace_q2: st.trace_q2,
        },
    }
}


/// Audit and exactly re-certify an extracted candidate design: user rates
/// and per-BS power through the physical audit, achieved sensing accuracy
/// from the realized stage-1 illumination, and per-link leakage caps from
/// fresh tightest-certificate solves (inflated slightly into the interior).
/// This keeps initializer soundness independent of how accurately the
/// initialization program was solved.
fn certify_candidate(
    scen: &Scenario,
    np: &NormProblem,
    w: [Vec<Vec<CMat>>; 2],
    r: [Vec<CMat>; 2],
    trq_guess: f64,
) -> Result<BcdState, String> {
    let (m, k) = (np.m, np.k);
    let mut st = BcdState {
        w,
        r,
        delta: vec![0.0; m],
        delta0: 0.0,
        xi: [vec![vec![0.0; k]; m], vec![vec![0.0; k]; m]],
        eta: [vec![vec![0.0; k]; m], vec![vec![0.0; k]; m]],
        trace_q2: 0.0,
    };
    let audit = qos_audit(scen, &state_solution(np, &st)).map_err(|e| e.to_string())?;
    if audit.min_rate_margin < 1e-3 {
        return Err(format!(
            "candidate rate margin {:.3e} too small",
            audit.min_rate_margin
        ));
    }
    if audit.max_power_overrun_w > 0.0 {
        return Err(format!(
            "candidate overruns the power budget by {:.3e} W",
            audit.max_power_overrun_w
        ));
    }
    // realized stage-1 sensing accuracy fixes the certified radii
    let s_cov: Vec<CMat> = (0..m)
        .map(|mm| {
            let mut s = st.r[0][mm].clone();
            for kk in 0..k {
                s += &st.w[0][mm][kk];
            }
            s
        })
        .collect();
    let fb = centralized_fim(scen, &np.resp, &s_cov).map_err(|e| e.to_string())?;
    let trq_actual = fb.trace_crb();
    if !trq_actual.is_finite() {
        return Err("candidate carries no sensing information".into());
    }
    let trq_used = trq_actual.max(1e-12 * trq_guess);
    let delta: Vec<f64> = (0..m)
        .map(|mm| np.b[mm] + trq_used.sqrt() / np.a[mm])
        .collect();
    let delta0: f64 = delta.iter().map(|d| d * d).sum();
    for i in 0..2 {
        let r_sq = if i == 0 { np.beta1_sq } else { delta0 };
        for mm in 0..m {
            for kk in 0..k {
                match tightest_certificate(np, &st.w, &st.r, r_sq, i, mm, kk) {
                    Ok((x, e)) => {
                        st.xi[i][mm][kk] = 1.02 * x + 1e-9;
                        st.eta[i][mm][kk] = e;
                    }
                    Err(e) => return Err(format!("certificate failed: {e}")),
                }
            }
        }
    }
    let budget = certified_leak_budget(np.tau, &st.xi);
    if budget > 0.999 * np.r_leak {
        if std::env::var("NETISAC_DEBUG").is_ok() {
            eprintln!(
                "reject: delta={:?} delta0={delta0:.4e} trq={trq_used:.4e} xi1={:?} xi2={:?}",
                delta, st.xi[0], st.xi[1]
            );
        }
        return Err(format!(
            "certified leakage {budget:.3} exceeds the {:.3} budget",
            np.r_leak
        ));
    }
    st.delta = delta;
    st.delta0 = delta0;
    st.trace_q2 = trq_used;
    Ok(st)
}

/// Closed-form starting design. Every BS sends zero-forcing information
/// beams in stage 2 (each beam is orthogonal to the co-scheduled users of
/// the same cell and to the estimated eavesdropper channel, so it neither
/// interferes in-cell nor leaks through the nominal channel), artificial
/// noise in the own-user null space leaning toward the eavesdropper, and a
/// pure steering beam toward the estimated target in stage 1. Beam power
/// levels come from a short fixed-point pass on the exact SINR expressions.
/// The candidate is then audited and re-certified exactly, so construction
/// error can only cause rejection, never an unsound start.
/// How the network-wide jamming demand is split across cells.
#[derive(Clone, Copy, PartialEq)]
enum AnAlloc {
    /// every cell carries the same jamming level
    Shared,
    /// coverage is filled greedily by the cells whose jamming damages the
    /// service links least, up to each cell's power headroom
    Focused,
}

#[allow(clippy::too_many_arguments)]
fn witness_candidate(
    scen: &Scenario,
    np: &NormProblem,
    rate_margin: f64,
    an_lambda: f64,
    sense_frac: f64,
    need_boost: f64,
    alloc: AnAlloc,
    trq_iso: f64,
) -> Result<BcdState, String> {
    let (m, n, k) = (np.m, np.n, np.k);

    // stage-2 information beam directions
    let mut z = vec![vec![CVec::zeros(n); k]; m];
    for mm in 0..m {
        for kk in 0..k {
            let mut avoid: Vec<CVec> = Vec::new();
            for kk2 in 0..k {
                if kk2 != kk {
                    avoid.push(np.h[mm][mm][kk2].clone());
                }
            }
            avoid.push(np.g_bar[mm].clone());
            let proj = orth_complement_proj(&avoid, n);
            let dir = &proj * &np.h[mm][mm][kk];
            let nrm = dir.norm();
            if nrm < 1e-9 {
                return Err(format!(
                    "user ({mm},{kk}) has no leakage-free service direction"
                ));
            }
            z[mm][kk] = dir.unscale(nrm);
        }
    }

    let gamma = 2f64.powf(rate_margin * np.r_info / np.tau[1]) - 1.0;
    let own_gain = |mm: usize, kk: usize| -> f64 {
        (np.h[mm][mm][kk].adjoint() * &z[mm][kk])[(0, 0)].norm_sqr()
    };
    for mm in 0..m {
        for kk in 0..k {
            if own_gain(mm, kk) < 1e-12 {
                return Err(format!("user ({mm},{kk}) is blanked by zero forcing"));
            }
        }
    }

    // artificial-noise directions: aimed at the eavesdropper estimate while
    // staying nearly orthogonal to the service links. A hard null-space choice
    // fails whenever the eavesdropper direction sits inside the users' span
    // (the jamming then covers none of the uncertainty ball and worst-case
    // leakage is limited only by receiver noise), so a regularized inversion
    // is used instead; `an_lambda` sets how much self-interference the cell
    // trades for coverage of the eavesdropper. Every service link in the
    // network is protected in proportion to how strongly one watt of this
    // cell's jamming would inflate its power, so links already weakened by
    // the zero-forcing projection get proportionally deeper nulls.
    let mut u = vec![CVec::zeros(n); m];
    for mm in 0..m {
        let mut weights: Vec<(usize, usize, f64)> = Vec::with_capacity(m * k);
        let mut total = 0.0f64;
        for mm2 in 0..m {
            for kk in 0..k {
                let hv = &np.h[mm][mm2][kk];
                let w = gamma * hv.norm_squared() / own_gain(mm2, kk);
                weights.push((mm2, kk, w));
                total += w;
            }
        }
        let mut a = CMat::identity(n, n) * C64::new(an_lambda, 0.0);
        for (mm2, kk, w) in weights {
            let hv = &np.h[mm][mm2][kk];
            let ns = hv.norm_squared();
            if ns > 0.0 && total > 0.0 {
                a += outer(hv) * C64::new(k as f64 * w / (total * ns), 0.0);
            }
        }
        let dir = a
            .lu()
            .solve(&np.g_bar[mm])
            .ok_or_else(|| format!("cell {mm} jamming direction solve failed"))?;
        let nrm = dir.norm();
        if nrm < 1e-12 {
            return Err(format!("cell {mm} has no usable jamming direction"));
        }
        u[mm] = dir.unscale(nrm);
    }
    // how much of each cell's jamming the eavesdropper estimate actually sees
    let cov: Vec<f64> = (0..m)
        .map(|mm| (np.g_bar[mm].adjoint() * &u[mm])[(0, 0)].norm_sqr())
        .collect();
    let cov_total: f64 = cov.iter().sum();
    if cov_total < 1e-9 {
        return Err("jamming cannot reach the eavesdropper estimate".into());
    }

    // stage-2 radius the audit will certify, from the stage-1 illumination
    let p_sense = sense_frac * np.p_max;
    let steer: Vec<CVec> = (0..m)
        .map(|mm| {
            let s = np.g_bar[mm].clone();
            let nrm = s.norm();
            if nrm < 1e-12 {
                return CVec::zeros(n);
            }
            s.unscale(nrm)
        })
        .collect();
    let s_cov: Vec<CMat> = (0..m)
        .map(|mm| outer(&steer[mm]) * C64::new(p_sense, 0.0))
        .collect();
    let fb = centralized_fim(scen, &np.resp, &s_cov).map_err(|e| e.to_string())?;
    let trq = fb.trace_crb();
    if !trq.is_finite() {
        return Err("stage-1 illumination carries no sensing information".into());
    }
    let delta0: f64 = (0..m)
        .map(|mm| {
            let d = np.b[mm] + trq.sqrt() / np.a[mm];
            d * d
        })
        .sum();

    // joint sizing of service and jamming power: the service fixed point
    // responds to the jamming floor, and the jamming level follows the
    // certificate demand of the strongest beam through the uncertainty ball
    let xi_bar = 2f64.powf(0.95 * np.r_leak / np.tau[1]) - 1.0;
    let rho_floor = 1e-4 * np.p_max;
    let mut rho = vec![rho_floor; m];
    let mut p = vec![vec![0.0f64; k]; m];
    for mm in 0..m {
        for kk in 0..k {
            p[mm][kk] = gamma * np.sigma2_user / own_gain(mm, kk);
        }
    }
    for _ in 0..8 {
        // service powers under the current jamming floor
        for _ in 0..60 {
            let mut next = vec![vec![0.0f64; k]; m];
            for mm in 0..m {
                for kk in 0..k {
                    let mut den = np.sigma2_user;
                    for src in 0..m {
                        let hv = &np.h[src][mm][kk];
                        den += rho[src] * (hv.adjoint() * &u[src])[(0, 0)].norm_sqr();
                        for kk2 in 0..k {
                            if src == mm && kk2 == kk {
                                continue;
                            }
                            den +=
                                p[src][kk2] * (hv.adjoint() * &z[src][kk2])[(0, 0)].norm_sqr();
                        }
                    }
                    next[mm][kk] = gamma * den / own_gain(mm, kk);
                    if !next[mm][kk].is_finite() || next[mm][kk] > np.p_max {
                        if std::env::var("NETISAC_DEBUG").is_ok() {
                            let hv = &np.h[mm][mm][kk];
                            let own_an =
                                rho[mm] * (hv.adjoint() * &u[mm])[(0, 0)].norm_sqr();
                            let mut x_an = 0.0;
                            let mut x_beam = 0.0;
                            for src in 0..m {
                                if src == mm {
                                    continue;
                                }
                                let hx = &np.h[src][mm][kk];
                                x_an += rho[src]
                                    * (hx.adjoint() * &u[src])[(0, 0)].norm_sqr();
                                for kk2 in 0..k {
                                    x_beam += p[src][kk2]
                                        * (hx.adjoint() * &z[src][kk2])[(0, 0)].norm_sqr();
                                }
                            }
                            let solo = gamma * np.sigma2_user / own_gain(mm, kk);
                            eprintln!(
                                "diverge ({mm},{kk}): solo={solo:.3e} sigma2={:.3e} ownAN={own_an:.3e} xAN={x_an:.3e} xBeam={x_beam:.3e} gain={:.3e} rho={rho:?}",
                                np.sigma2_user,
                                own_gain(mm, kk)
                            );
                        }
                        return Err(format!(
                            "service power for user ({mm},{kk}) diverges under interference"
                        ));
                    }
                }
            }
            p = next;
        }
        // jamming demand: the strongest beam leaking through the whole ball
        // must stay under the per-link cap with the network's jamming seen
        // by the eavesdropper in the denominator
        let p_peak = p
            .iter()
            .flat_map(|per| per.iter().copied())
            .fold(0.0f64, f64::max);
        let need = need_boost * 2.0 * p_peak * delta0 / xi_bar;
        let caps: Vec<f64> = (0..m)
            .map(|mm| {
                let stage2_beams: f64 = (0..k).map(|kk| p[mm][kk]).sum();
                ((0.95 * np.p_max - np.tau[0] * p_sense) / np.tau[1] - stage2_beams)
                    .max(0.0)
            })
            .collect();
        match alloc {
            AnAlloc::Shared => {
                for mm in 0..m {
                    rho[mm] =
                        (need / cov_total).clamp(rho_floor.min(caps[mm]), caps[mm]);
                }
            }
            AnAlloc::Focused => {
                // the eavesdropper sees every cell's jamming, so the coverage
                // demand can be met by whichever cells damage the service
                // links least; rank cells by coverage delivered per unit of
                // worst-link damage and fill greedily up to each headroom
                let dmg: Vec<f64> = (0..m)
                    .map(|src| {
                        let mut worst = 0.0f64;
                        for mm in 0..m {
                            for kk in 0..k {
                                let leak = (np.h[src][mm][kk].adjoint() * &u[src])
                                    [(0, 0)]
                                .norm_sqr();
                                worst = worst.max(gamma * leak / own_gain(mm, kk));
                            }
                        }
                        worst.max(1e-18)
                    })
                    .collect();
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&i, &j| {
                    let vi = cov[i] / dmg[i];
                    let vj = cov[j] / dmg[j];
                    vj.partial_cmp(&vi).unwrap_or(std::cmp::Ordering::Equal)
                });
                let mut remain = need;
                for mm in 0..m {
                    rho[mm] = rho_floor.min(caps[mm]);
                    remain -= rho[mm] * cov[mm];
                }
                for &mm in &order {
                    if remain <= 0.0 {
                        break;
                    }
                    if cov[mm] < 1e-12 {
                        continue;
                    }
                    let add = (remain / cov[mm]).min(caps[mm] - rho[mm]).max(0.0);
                    rho[mm] += add;
                    remain -= add * cov[mm];
                }
            }
        }
    }

    // assemble covariances (watts); stage 1 senses, stage 2 serves
    let mut w = [
        vec![vec![CMat::zeros(n, n); k]; m],
        vec![vec![CMat::zeros(n, n); k]; m],
    ];
    let mut r = [vec![CMat::zeros(n, n); m], vec![CMat::zeros(n, n); m]];
    for mm in 0..m {
        r[0][mm] = s_cov[mm].clone();
        r[1][mm] = outer(&u[mm]) * C64::new(rho[mm], 0.0);
        for kk in 0..k {
            w[1][mm][kk] = outer(&z[mm][kk]) * C64::new(p[mm][kk], 0.0);
        }
        let frame = np.tau[0] * p_sense
            + np.tau[1] * (rho[mm] + (0..k).map(|kk| p[mm][kk]).sum::<f64>());
        if frame > 0.97 * np.p_max {
            return Err(format!(
                "cell {mm} frame power {frame:.3e} W leaves no slack under the budget"
            ));
        }
    }
    if std::env::var("NETISAC_DEBUG").is_ok() {
        eprintln!(
            "witness lam={an_lambda} se={sense_frac}: cov={cov:?} d0={delta0:.3e} p={p:?} rho={rho:?}"
        );
    }
    certify_candidate(scen, np, w, r, trq_iso)
}

/// Find a certified feasible starting point: scan the closed-form witness
/// over a few artificial-noise and sensing power shares; each restart widens
/// the rate margin the witness aims for.
fn initialize(
    scen: &Scenario,
    np: &NormProblem,
    attempt: usize,
) -> Result<BcdState, CentralError> {
    let idx = attempt.min(3);
    let rate_margin = [1.02, 1.05, 1.08, 1.12][idx];

    // reference accuracy: isotropic illumination at half the power budget
    let mut f_iso = nalgebra::Matrix2::<f64>::zeros();
    let p_iso = 0.5 * np.p_max / np.n as f64;
    for mm in 0..np.m {
        for i in 0..2 {
            for j in 0..2 {
                f_iso[(i, j)] += np.fim_coeff[mm][i][j].trace().re * p_iso;
            }
        }
    }
    let trq_iso = crate::sensing::FisherBlock::from_fim(f_iso).trace_crb();
    if !trq_iso.is_finite() {
        return Err(CentralError::Infeasible(
            "the deployment carries no sensing information".into(),
        ));
    }

    let mut last = String::from("no starting design admitted a certificate");
    for &(an_lambda, sense_frac) in &[
        (3e-3, 0.50),
        (3e-2, 0.50),
        (0.15, 0.50),
        (3e-3, 0.80),
        (3e-2, 0.80),
        (0.15, 0.80),
        (3e-3, 0.25),
        (3e-2, 0.25),
        (0.15, 0.25),
        (3e-2, 0.10),
    ] {
        for &alloc in &[AnAlloc::Shared, AnAlloc::Focused] {
            // the jamming demand estimate is a heuristic: when the exact
            // certificate overshoots the leakage budget, retry the design with
            // more jamming; when the service fixed point diverges, the demand
            // itself may be the trigger, so under-sized levels are also tried
            // and the certificate stays the arbiter
            for &boost in &[1.0, 2.5, 6.0, 0.45, 0.2] {
                match witness_candidate(
                    scen, np, rate_margin, an_lambda, sense_frac, boost, alloc, trq_iso,
                ) {
                    Ok(st) => return Ok(st),
                    Err(s) => {
                        if std::env::var("NETISAC_DEBUG").is_ok() {
                            let am = if alloc == AnAlloc::Shared { "sh" } else { "fo" };
                            eprintln!(
                                "witness lam={an_lambda} se={sense_frac} {am} x{boost} rejected: {s}"
                            );
                        }
                        last = s;
                    }
                }
            }
        }
    }
    Err(CentralError::Infeasible(last))
}

struct Block1Out {
    w: [Vec<Vec<CMat>>; 2],
    r: [Vec<CMat>; 2],
    delta: Vec<f64>,
    delta0: f64,
    trace_q2: f64,
    power_w: f64,
    iterations: u32,
}

/// Power-minimization block: covariances, radii, and the CRB epigraph under
/// fixed leakage caps and multipliers.
fn solve_block1(np: &NormProblem, st: &BcdState) -> Result<Block1Out, BlockFailure> {
    let (m, n, k) = (np.m, np.n, np.k);
    let mut model = Model::new();

    let w_v: Vec<Vec<Vec<HermVar>>> = (0..2)
        .map(|_| {
            (0..m)
                .map(|_| (0..k).map(|_| model.add_herm_var(n)).collect())
                .collect()
        })
        .collect();
    let r_v: Vec<Vec<HermVar>> = (0..2)
        .map(|_| (0..m).map(|_| model.add_herm_var(n)).collect())
        .collect();
    for i in 0..2 {
        for mm in 0..m {
            for kk in 0..k {
                let ent: Vec<Vec<CxExpr>> = (0..n)
                    .map(|p| (0..n).map(|q| w_v[i][mm][kk].entry(p, q)).collect())
                    .collect();
                model.psd_hermitian(&ent, "w_psd");
            }
            let ent: Vec<Vec<CxExpr>> = (0..n)
                .map(|p| (0..n).map(|q| r_v[i][mm].entry(p, q)).collect())
                .collect();
            model.psd_hermitian(&ent, "r_psd");
        }
    }

    let delta_v = model.add_vars(m);
    let delta0_v = model.add_var();
    for mm in 0..m {
        model.nonneg(LinExpr::var(delta_v[mm]).shift(-np.b[mm]), "radius_floor");
    }
    let t_diag = model.add_vars(2);
    let t_off = model.add_var();

    // per-BS frame power and the total-power objective
    let mut total = LinExpr::zero();
    for mm in 0..m {
        let mut pm = LinExpr::zero();
        for i in 0..2 {
            let mut stage = r_v[i][mm].trace();
            for kk in 0..k {
                stage = stage.plus(&w_v[i][mm][kk].trace());
            }
            pm.add_scaled(&stage, np.tau[i]);
        }
        model.le(&pm, &LinExpr::constant(np.p_max), "power");
        total = total.plus(&pm);
    }
    model.add_linear_cost(&total);

    // user rates: exponential-cone epigraphs of the total received power and
    // tangent over-estimators of the interference term at the current iterate
    for mm in 0..m {
        for kk in 0..k {
            let mut frame = LinExpr::constant(-np.r_info);
            for i in 0..2 {
                let t = model.add_var();
                let mut den = LinExpr::constant(np.sigma2_user);
                for src in 0..m {
                    let h = &np.h[src][mm][kk];
                    den = den.plus(&r_v[i][src].quad_form(h));
                    for kk2 in 0..k {
                        if src == mm && kk2 == kk {
                            continue;
                        }
                        den = den.plus(&w_v[i][src][kk2].quad_form(h));
                    }
                }
                let num = w_v[i][mm][kk].quad_form(&np.h[mm][mm][kk]);
                let total_rx = den.plus(&num);
                model.ln_ge(LinExpr::term(t, LN_2), total_rx, "rate_epi");
                let den_bar = den_value(np, &st.w, &st.r, i, mm, kk);
                // y = log2(den_bar) + (den - den_bar) / (ln2 * den_bar)
                let y = den
                    .scaled(1.0 / (LN_2 * den_bar))
                    .shift(den_bar.log2() - 1.0 / LN_2);
                frame.add_scaled(&LinExpr::var(t).minus(&y), np.tau[i]);
            }
            model.nonneg(frame, "rate");
        }
    }

    // leakage certificates with fixed caps and multipliers
    for i in 0..2 {
        for mm in 0..m {
            for kk in 0..k {
                let xi_bar = st.xi[i][mm][kk];
                let eta_bar = st.eta[i][mm][kk];
                let provider = |p: usize, q: usize| -> CxExpr {
                    let (bp, bq) = (block_of(p, n), block_of(q, n));
                    if bp != bq {
                        return CxExpr::zero();
                    }
                    let (pi, qi) = (p % n, q % n);
                    let mut e = r_v[i][bp].entry(pi, qi).scaled(C64::new(-xi_bar, 0.0));
                    if bp == mm {
                        e = e.plus(&w_v[i][mm][kk].entry(pi, qi));
                    }
                    e
                };
                let eta_e = LinExpr::constant(eta_bar);
                let corner = if i == 0 {
                    LinExpr::constant(-eta_bar * np.beta1_sq + xi_bar * np.sigma2_eve)
                } else {
                    LinExpr::term(delta0_v, -eta_bar).shift(xi_bar * np.sigma2_eve)
                };
                let ent = assemble_certificate(&np.g_stack, &provider, &eta_e, &corner);
                let tag = if i == 0 { "leak_cert_s1" } else { "leak_cert_s2" };
                model.psd_hermitian(&ent, tag);
            }
        }
    }

    // stacked radius: delta0 >= sum delta_m^2
    let dexprs: Vec<LinExpr> = delta_v.iter().map(|&v| LinExpr::var(v)).collect();
    model.quad_le(&dexprs, &LinExpr::var(delta0_v), "radius_stack");

    // CRB epigraph [T, I; I, F] >= 0 with F affine in the stage-1 covariances
    let mut f_expr = [
        [LinExpr::zero(), LinExpr::zero()],
        [LinExpr::zero(), LinExpr::zero()],
    ];
    for i in 0..2 {
        for j in 0..2 {
            let mut e = LinExpr::zero();
            for mm in 0..m {
                let c = &np.fim_coeff[mm][i][j];
                e = e.plus(&r_v[0][mm].re_tr_prod(c));
                for kk in 0..k {
                    e = e.plus(&w_v[0][mm][kk].re_tr_prod(c));
                }
            }
            f_expr[i][j] = e;
        }
    }
    let one = LinExpr::constant(1.0);
    let zero = LinExpr::constant(0.0);
    let epi = vec![
        vec![
            LinExpr::var(t_diag[0]),
            LinExpr::var(t_off),
            one.clone(),
            zero.clone(),
        ],
        vec![
            LinExpr::var(t_off),
            LinExpr::var(t_diag[1]),
            zero.clone(),
            one.clone(),
        ],
        vec![one.clone(), zero.clone(), f_expr[0][0].clone(), f_expr[0][1].clone()],
        vec![zero.clone(), one.clone(), f_expr[1][0].clone(), f_expr[1][1].clone()],
    ];
    model.psd_real(&epi, "crb_epigraph");

    // sensing/radius coupling, linearized at the current radii:
    // tr T <= a^2 (d_bar - b)^2 + 2 a^2 (d_bar - b)(delta - d_bar)
    let tr_t = LinExpr::var(t_diag[0]).plus(&LinExpr::var(t_diag[1]));
    for mm in 0..m {
        let a2 = np.a[mm] * np.a[mm];
        let gap = st.delta[mm] - np.b[mm];
        let cap = LinExpr::term(delta_v[mm], 2.0 * a2 * gap)
            .shift(a2 * gap * gap - 2.0 * a2 * gap * st.delta[mm]);
        model.le(&tr_t, &cap, "mse_coupling");
    }

    let sol = model.solve().map_err(|e| BlockFailure::Solver(e.to_string()))?;
    match sol.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal => {}
        SolveStatus::Infeasible => {
            return Err(BlockFailure::Infeasible("covariance block".into()))
        }
        other => return Err(BlockFailure::Solver(format!("covariance block: {other:?}"))),
    }

    let mut w = [Vec::new(), Vec::new()];
    let mut r = [Vec::new(), Vec::new()];
    for i in 0..2 {
        w[i] = (0..m)
            .map(|mm| {
                (0..k)
                    .map(|kk| psd_clamp(&sol.herm_value(&w_v[i][mm][kk])))
                    .collect::<Vec<_>>()
            })
            .collect();
        r[i] = (0..m)
            .map(|mm| psd_clamp(&sol.herm_value(&r_v[i][mm])))
            .collect();
    }
    let delta: Vec<f64> = delta_v.iter().map(|&v| sol.x[v]).collect();
    let delta0 = sol.x[delta0_v];
    let trace_q2 = sol.x[t_diag[0]] + sol.x[t_diag[1]];
    let power_w = sol.value(&total);
    Ok(Block1Out {
        w,
        r,
        delta,
        delta0,
        trace_q2,
        power_w,
        iterations: sol.iterations,
    })
}

struct Block2Out {
    xi: [Vec<Vec<f64>>; 2],
    eta: [Vec<Vec<f64>>; 2],
    iterations: u32,
}

/// Certificate-tightening block: leakage caps and multipliers under the
/// leakage budget, with the budget's concave terms replaced by tangents at
/// the current caps.
fn solve_block2(np: &NormProblem, st: &BcdState) -> Result<Block2Out, BlockFailure> {
    let (m, n, k) = (np.m, np.n, np.k);
    let _ = n;
    let mut model = Model::new();
    let mut xi_v = [Vec::new(), Vec::new()];
    let mut eta_v = [Vec::new(), Vec::new()];
    for i in 0..2 {
        xi_v[i] = (0..m)
            .map(|_| model.add_vars(k))
            .collect::<Vec<Vec<usize>>>();
        eta_v[i] = (0..m)
            .map(|_| model.add_vars(k))
            .collect::<Vec<Vec<usize>>>();
    }
    let mut objective = LinExpr::zero();
    for i in 0..2 {
        let r_sq = if i == 0 { np.beta1_sq } else { st.delta0 };
        for mm in 0..m {
            for kk in 0..k {
                let xi = xi_v[i][mm][kk];
                let eta = eta_v[i][mm][kk];
                model.nonneg(LinExpr::var(xi), "xi_nonneg");
                model.nonneg(LinExpr::var(eta), "eta_nonneg");
                let xi_e = LinExpr::var(xi);
                let eta_e = LinExpr::var(eta);
                let corner =
                    LinExpr::term(eta, -r_sq).plus(&LinExpr::term(xi, np.sigma2_eve));
                let provider =
                    m_entry_fixed_wr(np, &st.w[i][mm][kk], &st.r[i], mm, &xi_e);
                let ent = assemble_certificate(&np.g_stack, &provider, &eta_e, &corner);
                model.psd_hermitian(&ent, "leak_cert");
                objective.add_scaled(
                    &LinExpr::var(xi),
                    np.tau[i] / (LN_2 * (1.0 + st.xi[i][mm][kk])),
                );
            }
        }
    }
    // leakage budget via tangent over-estimators at the current caps
    for mm in 0..m {
        for kk in 0..k {
            let mut lhs = LinExpr::zero();
            for i in 0..2 {
                let bar = st.xi[i][mm][kk];
                let tangent = LinExpr::var(xi_v[i][mm][kk])
                    .scaled(1.0 / (LN_2 * (1.0 + bar)))
                    .shift((1.0 + bar).log2() - bar / (LN_2 * (1.0 + bar)));
                lhs.add_scaled(&tangent, np.tau[i]);
            }
            model.le(&lhs, &LinExpr::constant(np.r_leak), "leak_budget");
        }
    }
    model.add_linear_cost(&objective);
    let sol = model.solve().map_err(|e| BlockFailure::Solver(e.to_string()))?;
    match sol.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal => {}
        SolveStatus::Infeasible => {
            return Err(BlockFailure::Infeasible("certificate block".into()))
        }
        other => {
            return Err(BlockFailure::Solver(format!("certificate block: {other:?}")))
        }
    }
    let mut xi = [vec![vec![0.0; k]; m], vec![vec![0.0; k]; m]];
    let mut eta = [vec![vec![0.0; k]; m], vec![vec![0.0; k]; m]];
    for i in 0..2 {
        for mm in 0..m {
            for kk in 0..k {
                xi[i][mm][kk] = sol.x[xi_v[i][mm][kk]].max(0.0);
                eta[i][mm][kk] = sol.x[eta_v[i][mm][kk]].max(0.0);
            }
        }
    }
    Ok(Block2Out {
        xi,
        eta,
        iterations: sol.iterations,
    })
}

/// Run the centralized block-coordinate optimization.
pub fn solve_centralized(
    scen: &Scenario,
    opts: &BcdOptions,
) -> Result<CentralOutcome, CentralError> {
    let np = NormProblem::from_scenario(scen)?;
    let mut attempt = 0usize;
    'outer: loop {
        let mut st = initialize(scen, &np, attempt)?;
        let mut trace: Vec<IterRecord> = Vec::new();
        let mut prev = state_power(&np, &st);
        let mut converged = false;
        let mut iterations = 0usize;
        for it in 0..opts.max_iters {
            iterations = it + 1;
            let b1 = match solve_block1(&np, &st) {
                Ok(b) => b,
                Err(e) => {
                    if attempt < opts.max_restarts {
                        attempt += 1;
                        continue 'outer;
                    }
                    return Err(e.into_central());
                }
            };
            if it >= 1 && b1.power_w > prev {
                // the previous design stays feasible for every refreshed
                // constraint set, so an exact solve cannot rise; a small rise
                // means the numerical noise floor was reached and the previous
                // certified state is the answer
                if b1.power_w - prev <= opts.rel_tol * prev.max(1e-12) {
                    converged = true;
                    iterations = it;
                    break;
                }
                if attempt < opts.max_restarts {
                    attempt += 1;
                    continue 'outer;
                }
                return Err(CentralError::Solver(format!(
                    "power rose from {prev:.6e} to {:.6e} W between passes",
                    b1.power_w
                )));
            }
            st.w = b1.w;
            st.r = b1.r;
            st.delta = b1.delta;
            st.delta0 = b1.delta0;
            st.trace_q2 = b1.trace_q2;
            let b2 = match solve_block2(&np, &st) {
                Ok(b) => b,
                Err(e) => {
                    if attempt < opts.max_restarts {
                        attempt += 1;
                        continue 'outer;
                    }
                    return Err(e.into_central());
                }
            };
            st.xi = b2.xi;
            st.eta = b2.eta;

            let audit = qos_audit(scen, &state_solution(&np, &st))
                .map_err(CentralError::Metrics)?;
            let min_rate = audit
                .rates
                .iter()
                .flatten()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            trace.push(IterRecord {
                iter: it,
                total_power_w: b1.power_w,
                min_rate,
                max_cert_leak: certified_leak_budget(np.tau, &st.xi),
                trace_q2: st.trace_q2,
                delta0: st.delta0 * np.eve_unit() * np.eve_unit(),
                block1_iterations: b1.iterations,
                block2_iterations: b2.iterations,
            });
            if std::env::var("NETISAC_DEBUG").is_ok() {
                eprintln!(
                    "bcd it={it}: p={:.9e} min_rate={min_rate:.6} leak={:.6} d0={:.4e} trq={:.4e}",
                    b1.power_w,
                    certified_leak_budget(np.tau, &st.xi),
                    st.delta0,
                    st.trace_q2
                );
            }
            if it >= 1 && (prev - b1.power_w).abs() <= opts.rel_tol * prev.max(1e-12) {
                converged = true;
                prev = b1.power_w;
                break;
            }
            prev = b1.power_w;
        }
        let solution = state_solution(&np, &st);
        return Ok(CentralOutcome {
            solution,
            trace,
            total_power_w: prev,
            iterations,
            converged,
            restarts: attempt,
        });
    }
}

/// Report of the rank-one beam extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub min_eig_ratio: f64,
    pub power_penalty: f64,
    pub method: String,
    pub feasible: bool,
}

fn candidate_feasible(
    scen: &Scenario,
    np: &NormProblem,
    cand: &BeamformingSolution,
) -> Result<bool, CentralError> {
    let audit = qos_audit(scen, cand)?;
    if audit.min_rate_margin < -1e-9 || audit.max_power_overrun_w > 1e-9 * np.p_max {
        return Ok(false);
    }
    let s = np.eve_unit();
    let delta0_norm = cand.aux.delta0 / (s * s);
    let mut xi = [
        vec![vec![0.0; np.k]; np.m],
        vec![vec![0.0; np.k]; np.m],
    ];
    for i in 0..2 {
        let r_sq = if i == 0 { np.beta1_sq } else { delta0_norm };
        for mm in 0..np.m {
            for kk in 0..np.k {
                match tightest_certificate(np, &cand.w, &cand.r, r_sq, i, mm, kk) {
                    Ok((x, _)) => xi[i][mm][kk] = x,
                    Err(CentralError::Infeasible(_)) => return Ok(false),
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(certified_leak_budget(np.tau, &xi) <= np.r_leak + 1e-9)
}

/// Extract rank-one beamformers from the covariance solution: direct
/// eigen-extraction when the covariances are (near) rank one, Gaussian
/// randomization with a common rate-restoring rescaling otherwise.
pub fn recover_rank1(
    scen: &Scenario,
    base: &BeamformingSolution,
    n_draws: usize,
    seed: u64,
) -> Result<(BeamformingSolution, RecoveryReport), CentralError> {
    let np = NormProblem::from_scenario(scen)?;
    let (m, k) = (np.m, np.k);
    let base_power = crate::metrics::total_power(scen, base);

    let mut min_ratio = f64::INFINITY;
    for i in 0..2 {
        for mm in 0..m {
            for kk in 0..k {
                let w = &base.w[i][mm][kk];
                let tr = tr_re(w);
                if tr <= 1e-14 * np.p_max {
                    continue;
                }
                let (lam, _) = top_eigpair(w);
                min_ratio = min_ratio.min(lam / tr);
            }
        }
    }
    if !min_ratio.is_finite() {
        min_ratio = 1.0;
    }

    let beams_from = |w_mats: &[Vec<Vec<CMat>>; 2],
                      draw: Option<(&mut ChaCha20Rng,)>|
     -> [Vec<Vec<CVec>>; 2] {
        let mut rng_opt = draw;
        let mut out: [Vec<Vec<CVec>>; 2] = [Vec::new(), Vec::new()];
        for i in 0..2 {
            out[i] = w_mats[i]
                .iter()
                .map(|per_k| {
                    per_k
                        .iter()
                        .map(|w| {
                            let tr = tr_re(w);
                            if tr <= 0.0 {
                                return CVec::zeros(w.nrows());
                            }
                            match rng_opt.as_mut() {
                                None => {
                                    let (lam, u) = top_eigpair(w);
                                    u * C64::new(lam.max(0.0).sqrt(), 0.0)
                                }
                                Some((rng,)) => {
                                    let b = psd_factor(w);
                                    let v = cn_standard(w.nrows(), *rng);
                                    let cand = &b * v;
                                    let nrm = cand.norm();
                                    if nrm <= 0.0 {
                                        CVec::zeros(w.nrows())
                                    } else {
                                        &cand * C64::new(tr.sqrt() / nrm, 0.0)
                                    }
                                }
                            }
                        })
                        .collect()
                })
                .collect();
        }
        out
    };

    let assemble = |beams: &[Vec<Vec<CVec>>; 2], scale: f64| -> BeamformingSolution {
        let mut cand = base.clone();
        let c = C64::new(scale.sqrt(), 0.0);
        let mut wv: [Vec<Vec<CVec>>; 2] = [Vec::new(), Vec::new()];
        for i in 0..2 {
            wv[i] = beams[i]
                .iter()
                .map(|per_k| per_k.iter().map(|b| b * c).collect())
                .collect();
            cand.w[i] = wv[i]
                .iter()
                .map(|per_k| per_k.iter().map(outer).collect())
                .collect();
        }
        cand.w_vec = Some(wv);
        cand
    };

    // rate margins increase with a common scaling of the information beams,
    // so bisection restores QoS whenever it is restorable within the budget
    let rate_fix = |beams: &[Vec<Vec<CVec>>; 2]| -> Result<Option<f64>, CentralError> {
        let margin = |c: f64| -> Result<(f64, f64), CentralError> {
            let cand = assemble(beams, c);
            let audit = qos_audit(scen, &cand)?;
            Ok((audit.min_rate_margin, audit.max_power_overrun_w))
        };
        let (m0, over0) = margin(1.0)?;
        if m0 >= 0.0 && over0 <= 0.0 {
            return Ok(Some(1.0));
        }
        if m0 < 0.0 {
            let mut lo = 1.0;
            let mut hi = 1.0;
            let mut ok = false;
            for _ in 0..8 {
                hi *= 1.25;
                let (mh, oh) = margin(hi)?;
                if oh > 0.0 {
                    break;
                }
                if mh >= 0.0 {
                    ok = true;
                    break;
                }
                lo = hi;
            }
            if !ok {
                return Ok(None);
            }
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let (mm2, _) = margin(mid)?;
                if mm2 >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(hi * (1.0 + 1e-9)));
        }
        Ok(Some(1.0))
    };

    let mut best: Option<(BeamformingSolution, f64, String)> = None;
    let consider = |cand: BeamformingSolution,
                        method: &str,
                        best: &mut Option<(BeamformingSolution, f64, String)>|
     -> Result<(), CentralError> {
        if candidate_feasible(scen, &np, &cand)? {
            let p = crate::metrics::total_power(scen, &cand);
            let penalty = (p - base_power) / base_power;
            if best.as_ref().map(|(_, bp, _)| penalty < *bp).unwrap_or(true) {
                *best = Some((cand, penalty, method.to_string()));
            }
        }
        Ok(())
    };

    let eig_beams = beams_from(&base.w, None);
    if let Some(c) = rate_fix(&eig_beams)? {
        consider(assemble(&eig_beams, c), "eigen", &mut best)?;
    }
    if best.is_none() || min_ratio < 0.999 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..n_draws {
            let beams = beams_from(&base.w, Some((&mut rng,)));
            if let Some(c) = rate_fix(&beams)? {
                consider(assemble(&beams, c), "randomized", &mut best)?;
            }
            if best.as_ref().map(|(_, p, _)| *p <= 0.0).unwrap_or(false) {
                break;
            }
        }
    }

    match best {
        Some((cand, penalty, method)) => Ok((
            cand,
            RecoveryReport {
                min_eig_ratio: min_ratio,
                power_penalty: penalty,
                method,
                feasible: true,
            },
        )),
        None => {
            let cand = assemble(&eig_beams, 1.0);
            Ok((
                cand,
                RecoveryReport {
                    min_eig_ratio: min_ratio,
                    power_penalty: 0.0,
                    method: "eigen".into(),
                    feasible: false,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::power_constraint_ok;
    use crate::scenario::{build_scenario, desk_config};
    use crate::uncertainty::{radius_from_mse, worst_case_leakage_oracle, Ball};

    fn desk() -> Scenario {
        build_scenario(&desk_config(18)).unwrap()
    }

    #[test]
    fn initializer_produces_certified_start() {
        let scen = desk();
        let np = NormProblem::from_scenario(&scen).unwrap();
        let st = initialize(&scen, &np, 0).unwrap();
        let audit = qos_audit(&scen, &state_solution(&np, &st)).unwrap();
        assert!(audit.min_rate_margin >= 0.0);
        assert!(audit.max_power_overrun_w <= 0.0);
        assert!(certified_leak_budget(np.tau, &st.xi) <= np.r_leak);
        for mm in 0..np.m {
            assert!(st.delta[mm] > np.b[mm]);
        }
        assert!(st.delta0 > 0.0 && st.trace_q2.is_finite());
    }

    #[test]
    fn bcd_converges_with_monotone_power() {
        let scen = desk();
        let out = solve_centralized(&scen, &BcdOptions::default()).unwrap();
        assert!(out.converged, "no convergence in {} iters", out.iterations);
        for w in out.trace.windows(2) {
            assert!(
                w[1].total_power_w <= w[0].total_power_w * (1.0 + 1e-6),
                "power increased: {} -> {}",
                w[0].total_power_w,
                w[1].total_power_w
            );
        }
        let audit = qos_audit(&scen, &out.solution).unwrap();
        assert!(audit.min_rate_margin >= -1e-6, "{}", audit.min_rate_margin);
        assert!(power_constraint_ok(&scen, &out.solution, 1e-9));
        let np = NormProblem::from_scenario(&scen).unwrap();
        assert!(
            certified_leak_budget(np.tau, &[
                out.solution.aux.xi[0].clone(),
                out.solution.aux.xi[1].clone()
            ]) <= np.r_leak + 1e-9
        );
        // certified radii cover the radii implied by the certified MSE bound
        for mm in 0..np.m {
            let implied = radius_from_mse(&scen, mm, out.solution.aux.trace_q2);
            assert!(
                out.solution.aux.delta[mm] >= implied - 1e-9,
                "bs {mm}: {} < {}",
                out.solution.aux.delta[mm],
                implied
            );
        }
        let sum_sq: f64 = out.solution.aux.delta.iter().map(|d| d * d).sum();
        assert!(out.solution.aux.delta0 >= sum_sq - 1e-12);
    }

    #[test]
    fn certificates_dominate_sampled_worst_case() {
        let scen = desk();
        let out = solve_centralized(&scen, &BcdOptions::default()).unwrap();
        let model = UncertaintyModel::stage1(&scen).unwrap();
        for i in 0..2 {
            let ball = if i == 0 {
                Ball::Stacked(model.beta_g_stacked[0])
            } else {
                Ball::Stacked(out.solution.aux.delta0.sqrt())
            };
            for mm in 0..scen.m() {
                for kk in 0..scen.k() {
                    let wc = worst_case_leakage_oracle(
                        &scen,
                        &out.solution,
                        &ball,
                        i,
                        mm,
                        kk,
                        1500,
                        91,
                    )
                    .unwrap();
                    // the caps come out of an interior-point solve with zero
                    // slack at the optimum, so domination holds up to the
                    // solver's accuracy, not exactly
                    let cap = out.solution.aux.xi[i][mm][kk];
                    assert!(
                        wc.sinr <= cap * (1.0 + 1e-5) + 1e-9,
                        "stage {i} user ({mm},{kk}): sampled {} > certified {}",
                        wc.sinr,
                        cap
                    );
                }
            }
        }
    }

    #[test]
    fn rank_one_recovery_stays_feasible() {
        let scen = desk();
        let out = solve_centralized(&scen, &BcdOptions::default()).unwrap();
        let (rec, report) = recover_rank1(&scen, &out.solution, 200, 5).unwrap();
        assert!(report.feasible);
        assert!(
            report.min_eig_ratio >= 0.99 || report.power_penalty <= 0.01,
            "ratio {} penalty {}",
            report.min_eig_ratio,
            report.power_penalty
        );
        let audit = qos_audit(&scen, &rec).unwrap();
        assert!(audit.min_rate_margin >= -1e-9);
        assert!(rec.w_vec.is_some());
    }
}
