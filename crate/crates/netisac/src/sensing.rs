//! Multistatic sensing: target response models, Fisher information for the
//! target position, Cramer-Rao bounds, and linear fusion of per-BS estimates.
//!
//! The stage-1 downlink of BS `m'` illuminates the target; BS `m` receives the
//! echo through the rank-one response
//!
//! ```text
//! G_{m',m} = alpha_{m',m} a(theta_m) a(theta_{m'})^H   in C^{N x N},
//! ```
//!
//! where `a` is the ULA steering vector, `theta` angles follow the crate-wide
//! convention (see `scenario`), and the round-trip gains `alpha` are treated
//! as constants with respect to the target position (their position
//! sensitivity is dominated by the steering phases).
//!
//! With `L` snapshots, sensing noise power `sigma_s^2`, and stage-1 transmit
//! covariances `S_m`, the position FIM of the pooled (centralized) receiver is
//!
//! ```text
//! [F]_{ij} = (2L / sigma_s^2) sum_{m'} sum_m
//!            Re Tr( dG_{m',m}/dp_j  S_{m'}  (dG_{m',m}/dp_i)^H ),
//! ```
//!
//! the per-receiver FIM `F_m` keeps only receiver-`m` terms, and the
//! per-transmitter regrouping `Fbar_m` keeps only transmitter-`m` terms; the
//! three aggregates satisfy `F = sum_m F_m = sum_m Fbar_m` exactly.

use crate::linalg::*;
use crate::scenario::{steering_derivative, steering_vector, Scenario, ScenarioError};
use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("singular Fisher information; no finite CRB")]
    SingularFim,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Target responses and their position derivatives at a probe position `p`.
///
/// `g[tx][rx]` is `G_{tx,rx}`; `dg[j][tx][rx]` is its derivative with respect
/// to position coordinate `j` (x, y).
#[derive(Debug, Clone)]
pub struct ResponseDerivatives {
    pub g: Vec<Vec<CMat>>,
    pub dg: [Vec<Vec<CMat>>; 2],
    /// Angles seen from each BS at the probe position.
    pub theta: Vec<f64>,
    /// Gradients `d theta_m / d p`.
    pub dtheta: Vec<[f64; 2]>,
}

/// Build all pairwise responses `G_{m',m}` and derivatives at position `p`.
pub fn response_and_derivatives(
    scen: &Scenario,
    p: [f64; 2],
) -> Result<ResponseDerivatives, SensingError> {
    let m = scen.m();
    let n = scen.n();
    let mut theta = Vec::with_capacity(m);
    let mut dtheta = Vec::with_capacity(m);
    let mut a = Vec::with_capacity(m);
    let mut da = Vec::with_capacity(m);
    for q in &scen.cfg.bs_positions {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let d2 = dx * dx + dy * dy;
        if d2 < 1e-12 {
            return Err(ScenarioError::InvalidGeometry(
                "probe position coincides with a base station".into(),
            )
            .into());
        }
        let th = dy.atan2(dx);
        theta.push(th);
        dtheta.push([-dy / d2, dx / d2]);
        a.push(steering_vector(th, n)?);
        da.push(steering_derivative(th, n)?);
    }
    let mut g = vec![vec![CMat::zeros(n, n); m]; m];
    let mut dg = [
        vec![vec![CMat::zeros(n, n); m]; m],
        vec![vec![CMat::zeros(n, n); m]; m],
    ];
    for tx in 0..m {
        for rx in 0..m {
            let al = scen.alpha_rt[tx][rx];
            g[tx][rx] = (&a[rx] * a[tx].adjoint()) * al;
            for j in 0..2 {
                // product rule through theta_rx and theta_tx
                let term_rx = (&da[rx] * a[tx].adjoint()) * C64::new(dtheta[rx][j], 0.0);
                let term_tx = (&a[rx] * da[tx].adjoint()) * C64::new(dtheta[tx][j], 0.0);
                dg[j][tx][rx] = (term_rx + term_tx) * al;
            }
        }
    }
    Ok(ResponseDerivatives { g, dg, theta, dtheta })
}

/// Fisher information block: the 2x2 position FIM and, when invertible, the
/// corresponding error covariance `Q = F^{-1}`.
#[derive(Debug, Clone)]
pub struct FisherBlock {
    pub f: Matrix2<f64>,
    pub q: Option<Matrix2<f64>>,
}

impl FisherBlock {
    pub fn from_fim(f: Matrix2<f64>) -> Self {
        let scale = f.norm().max(1.0);
        let det = f.determinant();
        let q = if det.abs() > 1e-12 * scale * scale {
            f.try_inverse()
        } else {
            None
        };
        FisherBlock { f, q }
    }

    /// `Tr(F^{-1})`, infinite when the FIM is singular.
    pub fn trace_crb(&self) -> f64 {
        self.q.map(|q| q.trace()).unwrap_or(f64::INFINITY)
    }
}

fn fim_from_links<'a>(
    scen: &Scenario,
    resp: &ResponseDerivatives,
    s_cov: &[CMat],
    links: impl Iterator<Item = (usize, usize)> + 'a,
) -> Matrix2<f64> {
    let scale = 2.0 * scen.cfg.l as f64 / scen.sigma2_sense;
    let mut f = Matrix2::zeros();
    for (tx, rx) in links {
        for i in 0..2 {
            for j in i..2 {
                let v = re_tr_prod(&(&resp.dg[j][tx][rx] * &s_cov[tx]), &resp.dg[i][tx][rx].adjoint());
                f[(i, j)] += scale * v;
            }
        }
    }
    f[(1, 0)] = f[(0, 1)];
    f
}

fn check_s(scen: &Scenario, s_cov: &[CMat]) -> Result<(), SensingError> {
    if s_cov.len() != scen.m() {
        return Err(SensingError::DimensionMismatch(
            "need one stage-1 covariance per BS".into(),
        ));
    }
    Ok(())
}

/// Pooled-receiver position FIM over all `(tx, rx)` links.
pub fn centralized_fim(
    scen: &Scenario,
    resp: &ResponseDerivatives,
    s_cov: &[CMat],
) -> Result<FisherBlock, SensingError> {
    check_s(scen, s_cov)?;
    let m = scen.m();
    let links = (0..m).flat_map(move |tx| (0..m).map(move |rx| (tx, rx)));
    Ok(FisherBlock::from_fim(fim_from_links(scen, resp, s_cov, links)))
}

/// FIM of receiver `m` alone (echoes from all transmitters).
pub fn local_fim(
    scen: &Scenario,
    resp: &ResponseDerivatives,
    s_cov: &[CMat],
    m: usize,
) -> Result<FisherBlock, SensingError> {
    check_s(scen, s_cov)?;
    let links = (0..scen.m()).map(move |tx| (tx, m));
    Ok(FisherBlock::from_fim(fim_from_links(scen, resp, s_cov, links)))
}

/// Transmitter-`m` regrouping of the network FIM (its illumination received
/// anywhere). Depends only on BS `m`'s own covariance.
pub fn transmitter_fim(
    scen: &Scenario,
    resp: &ResponseDerivatives,
    s_cov: &[CMat],
    m: usize,
) -> Result<FisherBlock, SensingError> {
    check_s(scen, s_cov)?;
    let links = (0..scen.m()).map(move |rx| (m, rx));
    Ok(FisherBlock::from_fim(fim_from_links(scen, resp, s_cov, links)))
}

/// Hermitian coefficient matrices `C[m][i][j]` such that
/// `[Fbar_m]_{ij} = Re Tr(C[m][i][j] S_m)` for Hermitian `S_m`. These make the
/// FIM an explicit linear function of the stage-1 covariances for the conic
/// solvers. Summing over `m` yields the centralized FIM.
pub fn fim_coefficients(
    scen: &Scenario,
    resp: &ResponseDerivatives,
) -> Vec<[[CMat; 2]; 2]> {
    let m = scen.m();
    let n = scen.n();
    let scale = 2.0 * scen.cfg.l as f64 / scen.sigma2_sense;
    (0..m)
        .map(|tx| {
            let mut block: [[CMat; 2]; 2] = [
                [CMat::zeros(n, n), CMat::zeros(n, n)],
                [CMat::zeros(n, n), CMat::zeros(n, n)],
            ];
            for i in 0..2 {
                for j in 0..2 {
                    let mut c = CMat::zeros(n, n);
                    for rx in 0..m {
                        // Tr(dG_j S dG_i^H) = Tr((dG_i^H dG_j) S)
                        c += resp.dg[i][tx][rx].adjoint() * &resp.dg[j][tx][rx];
                    }
                    block[i][j] = herm_part(&(c * C64::new(scale, 0.0)));
                }
            }
            block
        })
        .collect()
}

/// Best-linear-unbiased fusion of per-BS estimates with covariances `q_m`:
/// weights `A_m = (sum Q^{-1})^{-1} Q_m^{-1}` (summing to identity), fused
/// covariance `(sum Q_m^{-1})^{-1}`.
pub fn fuse_estimates(
    estimates: &[Vector2<f64>],
    covs: &[Matrix2<f64>],
) -> Result<(Vector2<f64>, Matrix2<f64>, Vec<Matrix2<f64>>), SensingError> {
    if estimates.len() != covs.len() || estimates.is_empty() {
        return Err(SensingError::DimensionMismatch(
            "need matching, nonempty estimate and covariance lists".into(),
        ));
    }
    let mut info = Matrix2::zeros();
    let mut inv_covs = Vec::with_capacity(covs.len());
    for q in covs {
        let qi = q.try_inverse().ok_or(SensingError::SingularFim)?;
        info += qi;
        inv_covs.push(qi);
    }
    let fused_q = info.try_inverse().ok_or(SensingError::SingularFim)?;
    let weights: Vec<Matrix2<f64>> = inv_covs.iter().map(|qi| fused_q * qi).collect();
    let mut p = Vector2::zeros();
    for (w, e) in weights.iter().zip(estimates) {
        p += w * e;
    }
    Ok((p, fused_q, weights))
}

/// Draw a position estimate from `N(p_true, Q)`.
pub fn simulate_estimation<R: Rng>(
    p_true: [f64; 2],
    q: &Matrix2<f64>,
    rng: &mut R,
) -> Result<Vector2<f64>, SensingError> {
    use rand_distr::StandardNormal;
    let chol = nalgebra::Cholesky::new(*q + Matrix2::identity() * 1e-18)
        .ok_or(SensingError::SingularFim)?;
    let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    Ok(Vector2::new(p_true[0], p_true[1]) + chol.l() * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, desk_config};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_s(scen: &Scenario, seed: u64) -> Vec<CMat> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..scen.m())
            .map(|_| {
                let b = CMat::from_fn(scen.n(), scen.n(), |_, _| {
                    C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.1
                });
                &b * b.adjoint()
            })
            .collect()
    }

    #[test]
    fn response_derivatives_match_finite_differences() {
        let scen = build_scenario(&desk_config(11)).unwrap();
        let p = [1.5, -2.0];
        let resp = response_and_derivatives(&scen, p).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut pp = p;
            pp[j] += h;
            let mut pm = p;
            pm[j] -= h;
            let rp = response_and_derivatives(&scen, pp).unwrap();
            let rm = response_and_derivatives(&scen, pm).unwrap();
            for tx in 0..scen.m() {
                for rx in 0..scen.m() {
                    let fd = (&rp.g[tx][rx] - &rm.g[tx][rx]) / C64::new(2.0 * h, 0.0);
                    let err = (&fd - &resp.dg[j][tx][rx]).norm() / resp.dg[j][tx][rx].norm();
                    assert!(err < 1e-6, "link ({tx},{rx}) coord {j}: rel err {err}");
                }
            }
        }
    }

    /// The pooled FIM computed from per-link terms must equal the literal
    /// block-matrix evaluation with the all-ones coupling of the stacked
    /// snapshot covariance.
    #[test]
    fn centralized_fim_matches_block_matrix_route() {
        let scen = build_scenario(&desk_config(13)).unwrap();
        let s = toy_s(&scen, 50);
        let p = scen.cfg.eve_position_true;
        let resp = response_and_derivatives(&scen, p).unwrap();
        let f = centralized_fim(&scen, &resp, &s).unwrap().f;

        let m = scen.m();
        let n = scen.n();
        let mn = m * n;
        // big block-diagonal dG_m over receivers, S_tilde = ones (x) S_m
        let scale = 2.0 * scen.cfg.l as f64 / scen.sigma2_sense;
        let mut f_big = Matrix2::<f64>::zeros();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for tx in 0..m {
                    let mut dgi = CMat::zeros(mn, mn);
                    let mut dgj = CMat::zeros(mn, mn);
                    for rx in 0..m {
                        dgi.view_mut((rx * n, rx * n), (n, n))
                            .copy_from(&resp.dg[i][tx][rx]);
                        dgj.view_mut((rx * n, rx * n), (n, n))
                            .copy_from(&resp.dg[j][tx][rx]);
                    }
                    let mut s_tilde = CMat::zeros(mn, mn);
                    for a in 0..m {
                        for b in 0..m {
                            s_tilde.view_mut((a * n, b * n), (n, n)).copy_from(&s[tx]);
                        }
                    }
                    acc += re_tr_prod(&(&dgj * &s_tilde), &dgi.adjoint());
                }
                f_big[(i, j)] = scale * acc;
            }
        }
        assert_relative_eq!((f - f_big).norm(), 0.0, epsilon = 1e-10 * f.norm());
    }

    #[test]
    fn fim_decompositions_agree() {
        let scen = build_scenario(&desk_config(21)).unwrap();
        let s = toy_s(&scen, 51);
        let resp = response_and_derivatives(&scen, scen.cfg.eve_position_true).unwrap();
        let f = centralized_fim(&scen, &resp, &s).unwrap().f;
        let mut sum_rx = Matrix2::zeros();
        let mut sum_tx = Matrix2::zeros();
        for m in 0..scen.m() {
            sum_rx += local_fim(&scen, &resp, &s, m).unwrap().f;
            sum_tx += transmitter_fim(&scen, &resp, &s, m).unwrap().f;
        }
        assert_relative_eq!((f - sum_rx).norm(), 0.0, epsilon = 1e-12 * f.norm());
        assert_relative_eq!((f - sum_tx).norm(), 0.0, epsilon = 1e-12 * f.norm());
    }

    #[test]
    fn fim_coefficients_reproduce_fims() {
        let scen = build_scenario(&desk_config(23)).unwrap();
        let s = toy_s(&scen, 52);
        let resp = response_and_derivatives(&scen, scen.cfg.eve_position_true).unwrap();
        let coeffs = fim_coefficients(&scen, &resp);
        let mut f_lin = Matrix2::<f64>::zeros();
        for m in 0..scen.m() {
            let fbar = transmitter_fim(&scen, &resp, &s, m).unwrap().f;
            for i in 0..2 {
                for j in 0..2 {
                    let v = re_tr_prod(&coeffs[m][i][j], &s[m]);
                    assert_relative_eq!(v, fbar[(i, j)], max_relative = 1e-10);
                    f_lin[(i, j)] += v;
                }
            }
        }
        let f = centralized_fim(&scen, &resp, &s).unwrap().f;
        assert_relative_eq!((f - f_lin).norm(), 0.0, epsilon = 1e-10 * f.norm());
    }

    #[test]
    fn fim_scales_linearly_with_power_and_snapshots() {
        let scen = build_scenario(&desk_config(29)).unwrap();
        let s = toy_s(&scen, 53);
        let resp = response_and_derivatives(&scen, scen.cfg.eve_position_true).unwrap();
        let f1 = centralized_fim(&scen, &resp, &s).unwrap().f;
        let s2: Vec<CMat> = s.iter().map(|x| x * C64::new(3.0, 0.0)).collect();
        let f2 = centralized_fim(&scen, &resp, &s2).unwrap().f;
        assert_relative_eq!((f2 - f1 * 3.0).norm(), 0.0, epsilon = 1e-10 * f2.norm());
        let mut scen_l = scen.clone();
        scen_l.cfg.l *= 4;
        let resp_l = response_and_derivatives(&scen_l, scen.cfg.eve_position_true).unwrap();
        let f4 = centralized_fim(&scen_l, &resp_l, &s).unwrap().f;
        assert_relative_eq!((f4 - f1 * 4.0).norm(), 0.0, epsilon = 1e-10 * f4.norm());
    }

    #[test]
    fn zero_covariance_flags_singular() {
        let scen = build_scenario(&desk_config(31)).unwrap();
        let z = vec![CMat::zeros(scen.n(), scen.n()); scen.m()];
        let resp = response_and_derivatives(&scen, scen.cfg.eve_position_true).unwrap();
        let fb = centralized_fim(&scen, &resp, &z).unwrap();
        assert!(fb.q.is_none());
        assert!(fb.trace_crb().is_infinite());
    }

    #[test]
    fn fusion_closed_form() {
        // Q1 = diag(1,4), Q2 = diag(4,1) -> fused diag(0.8, 0.8)
        let q1 = Matrix2::new(1.0, 0.0, 0.0, 4.0);
        let q2 = Matrix2::new(4.0, 0.0, 0.0, 1.0);
        let e = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        let (p, q, w) = fuse_estimates(&e, &[q1, q2]).unwrap();
        assert_relative_eq!(q[(0, 0)], 0.8, epsilon = 1e-12);
        assert_relative_eq!(q[(1, 1)], 0.8, epsilon = 1e-12);
        let wsum = w[0] + w[1];
        assert_relative_eq!((wsum - Matrix2::identity()).norm(), 0.0, epsilon = 1e-12);
        // weights favor the smaller-variance coordinate of each estimate
        assert!(w[0][(0, 0)] > w[0][(1, 1)]);
        let pred = w[0] * e[0] + w[1] * e[1];
        assert_relative_eq!((p - pred).norm(), 0.0, epsilon = 1e-14);
    }

    /// Fused covariance equals the inverse of the summed per-receiver FIMs,
    /// and pooled processing is never worse than fusion (Loewner order).
    #[test]
    fn fusion_matches_information_sum() {
        let scen = build_scenario(&desk_config(37)).unwrap();
        let s = toy_s(&scen, 54);
        let resp = response_and_derivatives(&scen, scen.cfg.eve_position_true).unwrap();
        let mut covs = Vec::new();
        let mut info_sum = Matrix2::zeros();
        for m in 0..scen.m() {
            let fb = local_fim(&scen, &resp, &s, m).unwrap();
            info_sum += fb.f;
            covs.push(fb.q.expect("local FIM invertible for random S"));
        }
        let est = vec![Vector2::new(0.0, 0.0); scen.m()];
        let (_, fused_q, _) = fuse_estimates(&est, &covs).unwrap();
        let direct = info_sum.try_inverse().unwrap();
        assert_relative_eq!((fused_q - direct).norm(), 0.0, epsilon = 1e-10 * direct.norm());
        // pooled = sum over all links = same as fused here (independent noise),
        // so check Loewner: Q_central <= Q_fused within tolerance
        let qc = centralized_fim(&scen, &resp, &s).unwrap().q.unwrap();
        let diff = fused_q - qc;
        let eig_min = diff.symmetric_eigen().eigenvalues.min();
        assert!(eig_min > -1e-10 * fused_q.norm());
    }

    #[test]
    fn estimation_sampling_matches_covariance() {
        let q = Matrix2::new(0.04, 0.01, 0.01, 0.09);
        let p = [3.0, -1.0];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 10_000;
        let mut mean = Vector2::zeros();
        let mut cov = Matrix2::zeros();
        let draws: Vec<Vector2<f64>> = (0..n)
            .map(|_| simulate_estimation(p, &q, &mut rng).unwrap())
            .collect();
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        for d in &draws {
            let c = d - mean;
            cov += c * c.transpose();
        }
        cov /= n as f64 - 1.0;
        assert!((mean - Vector2::new(3.0, -1.0)).norm() < 0.01);
        assert!((cov - q).norm() / q.norm() < 0.1);
    }
}
