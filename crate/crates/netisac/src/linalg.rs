//! Complex-matrix helpers shared by the signal model, the solvers, and the tests.
//!
//! Conventions used across the crate:
//! - channels and beamformers are `DVector<Complex<f64>>`,
//! - covariances are Hermitian `DMatrix<Complex<f64>>`,
//! - all quadratic forms `h^H A h` with Hermitian `A` are returned as `f64`
//!   (the imaginary part is discarded; it is zero up to round-off).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

/// Hermitian part `(A + A^H)/2`.
pub fn herm_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

/// Max absolute deviation from Hermitian symmetry.
pub fn hermiticity_error(a: &CMat) -> f64 {
    (a - a.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Rank-one outer product `v v^H`.
pub fn outer(v: &CVec) -> CMat {
    v * v.adjoint()
}

/// `Re{h^H A h}` for Hermitian `A`.
pub fn quad_form(h: &CVec, a: &CMat) -> f64 {
    (h.adjoint() * a * h)[(0, 0)].re
}

/// `Re{Tr(A B)}`.
pub fn re_tr_prod(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s.re
}

/// Real trace of a complex matrix.
pub fn tr_re(a: &CMat) -> f64 {
    a.diagonal().iter().map(|z| z.re).sum()
}

/// Eigendecomposition of a Hermitian matrix: ascending eigenvalues and
/// the matrix whose columns are the corresponding eigenvectors.
pub fn hermitian_eigen(a: &CMat) -> (Vec<f64>, CMat) {
    let se = herm_part(a).symmetric_eigen();
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let vals: Vec<f64> = idx.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Largest eigenvalue and its eigenvector.
pub fn top_eigpair(a: &CMat) -> (f64, CVec) {
    let (vals, vecs) = hermitian_eigen(a);
    let n = vals.len();
    (vals[n - 1], vecs.column(n - 1).into_owned())
}

/// Project a nearly-Hermitian, nearly-PSD matrix onto the PSD cone
/// (symmetrize, clamp negative eigenvalues at zero).
pub fn psd_clamp(a: &CMat) -> CMat {
    let (vals, vecs) = hermitian_eigen(a);
    let n = vals.len();
    let mut out = CMat::zeros(n, n);
    for i in 0..n {
        if vals[i] > 0.0 {
            let v = vecs.column(i);
            out += (&v * v.adjoint()) * C64::new(vals[i], 0.0);
        }
    }
    out
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eig(a: &CMat) -> f64 {
    hermitian_eigen(a).0[0]
}

/// A factor `B` with `B B^H = A` for Hermitian PSD `A` (eigen square root;
/// tiny negative eigenvalues are clamped). Used to sample `CN(0, A)`.
pub fn psd_factor(a: &CMat) -> CMat {
    let (vals, vecs) = hermitian_eigen(a);
    let n = vals.len();
    let mut out = CMat::zeros(n, n);
    for i in 0..n {
        let s = vals[i].max(0.0).sqrt();
        out.set_column(i, &(vecs.column(i) * C64::new(s, 0.0)));
    }
    out
}

/// Orthonormal basis of the span of the given vectors (Gram-Schmidt;
/// directions already covered are dropped).
pub fn gram_schmidt(vecs: &[CVec]) -> Vec<CVec> {
    let mut basis: Vec<CVec> = Vec::new();
    for v in vecs {
        let mut u = v.clone();
        for q in &basis {
            let c = q.dotc(&u);
            u -= q * c;
        }
        let nrm = u.norm();
        if nrm > 1e-12 * v.norm().max(1.0) {
            basis.push(u / C64::new(nrm, 0.0));
        }
    }
    basis
}

/// Projector onto the orthogonal complement of the span of the given vectors.
pub fn orth_complement_proj(vecs: &[CVec], n: usize) -> CMat {
    let mut p = CMat::identity(n, n);
    for q in gram_schmidt(vecs) {
        p -= outer(&q);
    }
    p
}

/// Standard circularly-symmetric complex Gaussian vector, unit variance
/// per complex entry.
pub fn cn_standard<R: Rng>(n: usize, rng: &mut R) -> CVec {
    use rand_distr::StandardNormal;
    CVec::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re / 2f64.sqrt(), im / 2f64.sqrt())
    })
}

/// Uniform draw from the closed complex ball of the given radius.
pub fn ball_uniform<R: Rng>(n: usize, radius: f64, rng: &mut R) -> CVec {
    let dir = cn_standard(n, rng);
    let nrm = dir.norm();
    if nrm == 0.0 {
        return CVec::zeros(n);
    }
    // ||x|| <= r uniform in C^n = R^{2n}: radius factor u^{1/(2n)}
    let u: f64 = rng.gen::<f64>();
    let r = radius * u.powf(1.0 / (2.0 * n as f64));
    dir * C64::new(r / nrm, 0.0)
}

/// Hex dump of complex data as little-endian f64 pairs (re, im), row-major.
pub fn cmat_to_hex(a: &CMat) -> String {
    let mut bytes = Vec::with_capacity(a.len() * 16);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            bytes.extend_from_slice(&a[(i, j)].re.to_le_bytes());
            bytes.extend_from_slice(&a[(i, j)].im.to_le_bytes());
        }
    }
    hex::encode(bytes)
}

/// Inverse of [`cmat_to_hex`] given the matrix dimensions.
pub fn cmat_from_hex(s: &str, nrows: usize, ncols: usize) -> Result<CMat, String> {
    let bytes = hex::decode(s).map_err(|e| e.to_string())?;
    if bytes.len() != nrows * ncols * 16 {
        return Err(format!(
            "hex payload has {} bytes, expected {}",
            bytes.len(),
            nrows * ncols * 16
        ));
    }
    let mut a = CMat::zeros(nrows, ncols);
    for idx in 0..nrows * ncols {
        let off = idx * 16;
        let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        a[(idx / ncols, idx % ncols)] = C64::new(re, im);
    }
    Ok(a)
}

pub fn cvec_to_hex(v: &CVec) -> String {
    cmat_to_hex(&CMat::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn cvec_from_hex(s: &str, n: usize) -> Result<CVec, String> {
    Ok(CVec::from_column_slice(cmat_from_hex(s, n, 1)?.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn hermitian_eigen_recovers_matrix() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let b = CMat::from_fn(4, 4, |_, _| {
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let a = &b * b.adjoint();
        let (vals, vecs) = hermitian_eigen(&a);
        let mut rec = CMat::zeros(4, 4);
        for i in 0..4 {
            let v = vecs.column(i);
            rec += (&v * v.adjoint()) * C64::new(vals[i], 0.0);
        }
        assert_relative_eq!((rec - &a).norm(), 0.0, epsilon = 1e-10);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert!(vals[0] >= -1e-12);
    }

    #[test]
    fn ball_uniform_stays_in_ball() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = ball_uniform(3, 0.7, &mut rng);
            assert!(v.norm() <= 0.7 + 1e-12);
        }
    }

    #[test]
    fn hex_roundtrip() {
        let v = CVec::from_vec(vec![C64::new(1.5, -2.25), C64::new(0.0, 3.5e-13)]);
        let s = cvec_to_hex(&v);
        let w = cvec_from_hex(&s, 2).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn psd_factor_reproduces_covariance() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let b = CMat::from_fn(3, 3, |_, _| {
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let a = &b * b.adjoint();
        let f = psd_factor(&a);
        assert_relative_eq!((&f * f.adjoint() - &a).norm(), 0.0, epsilon = 1e-10);
    }
}
