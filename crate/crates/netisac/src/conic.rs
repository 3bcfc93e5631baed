//! Thin conic-programming layer over an interior-point backend.
//!
//! Models are affine expressions over scalar variables constrained to cone
//! blocks (zero, nonnegative, second-order, exponential, PSD-triangle), with
//! an optional convex quadratic cost. Hermitian matrix variables expand into
//! real scalars (diagonal + re/im of the strict upper triangle), and PSD
//! constraints on complex matrices go through the real embedding
//! `[Re(X), -Im(X); Im(X), Re(X)] >= 0`.
//!
//! The backend is selected by the `ISAC_SOLVER` environment variable;
//! `clarabel` (the default) is currently the only supported value.

use crate::linalg::*;
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use thiserror::Error;

pub type VarId = usize;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("unknown solver backend `{0}` (supported: clarabel)")]
    UnknownSolver(String),
    #[error("model error: {0}")]
    BadModel(String),
}

/// Validate a solver backend name (used for the `ISAC_SOLVER` variable).
pub fn parse_solver_name(name: &str) -> Result<(), ConicError> {
    match name.trim() {
        "" | "clarabel" => Ok(()),
        other => Err(ConicError::UnknownSolver(other.to_string())),
    }
}

/// Sparse affine expression `constant + sum coeff * x[var]`.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        LinExpr {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(v: VarId, c: f64) -> Self {
        LinExpr {
            terms: vec![(v, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, c: f64) {
        if c != 0.0 {
            self.terms.push((v, c));
        }
    }

    pub fn add_scaled(&mut self, e: &LinExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.constant += s * e.constant;
        for &(v, c) in &e.terms {
            self.terms.push((v, s * c));
        }
    }

    pub fn plus(&self, e: &LinExpr) -> Self {
        let mut out = self.clone();
        out.add_scaled(e, 1.0);
        out
    }

    pub fn minus(&self, e: &LinExpr) -> Self {
        let mut out = self.clone();
        out.add_scaled(e, -1.0);
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = LinExpr::constant(self.constant * s);
        for &(v, c) in &self.terms {
            out.add_term(v, c * s);
        }
        out
    }

    pub fn shift(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.constant += c;
        out
    }

    /// Merge duplicate variable ids.
    pub fn compressed(&self) -> Self {
        let mut map: BTreeMap<VarId, f64> = BTreeMap::new();
        for &(v, c) in &self.terms {
            *map.entry(v).or_insert(0.0) += c;
        }
        LinExpr {
            terms: map.into_iter().filter(|&(_, c)| c != 0.0).collect(),
            constant: self.constant,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

/// Complex affine expression.
#[derive(Debug, Clone, Default)]
pub struct CxExpr {
    pub re: LinExpr,
    pub im: LinExpr,
}

impl CxExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: C64) -> Self {
        CxExpr {
            re: LinExpr::constant(c.re),
            im: LinExpr::constant(c.im),
        }
    }

    pub fn from_real(e: LinExpr) -> Self {
        CxExpr {
            re: e,
            im: LinExpr::zero(),
        }
    }

    pub fn conj(&self) -> Self {
        CxExpr {
            re: self.re.clone(),
            im: self.im.scaled(-1.0),
        }
    }

    pub fn scaled(&self, c: C64) -> Self {
        CxExpr {
            re: self.re.scaled(c.re).minus(&self.im.scaled(c.im)),
            im: self.re.scaled(c.im).plus(&self.im.scaled(c.re)),
        }
    }

    pub fn plus(&self, o: &Self) -> Self {
        CxExpr {
            re: self.re.plus(&o.re),
            im: self.im.plus(&o.im),
        }
    }

    pub fn minus(&self, o: &Self) -> Self {
        CxExpr {
            re: self.re.minus(&o.re),
            im: self.im.minus(&o.im),
        }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        C64::new(self.re.eval(x), self.im.eval(x))
    }
}

/// Hermitian matrix variable: real diagonal plus re/im of the upper triangle.
#[derive(Debug, Clone)]
pub struct HermVar {
    pub n: usize,
    diag: Vec<VarId>,
    re_up: BTreeMap<(usize, usize), VarId>,
    im_up: BTreeMap<(usize, usize), VarId>,
}

impl HermVar {
    /// Affine expression of entry `(i, j)`.
    pub fn entry(&self, i: usize, j: usize) -> CxExpr {
        if i == j {
            CxExpr::from_real(LinExpr::var(self.diag[i]))
        } else if i < j {
            CxExpr {
                re: LinExpr::var(self.re_up[&(i, j)]),
                im: LinExpr::var(self.im_up[&(i, j)]),
            }
        } else {
            self.entry(j, i).conj()
        }
    }

    pub fn trace(&self) -> LinExpr {
        let mut e = LinExpr::zero();
        for &d in &self.diag {
            e.add_term(d, 1.0);
        }
        e
    }

    /// Real expression `Re tr(A X)` for a constant matrix `A`.
    pub fn re_tr_prod(&self, a: &CMat) -> LinExpr {
        assert_eq!(a.nrows(), self.n);
        assert_eq!(a.ncols(), self.n);
        let mut e = LinExpr::zero();
        for i in 0..self.n {
            e.add_term(self.diag[i], a[(i, i)].re);
        }
        for (&(i, j), &ru) in &self.re_up {
            let iu = self.im_up[&(i, j)];
            // X_ij = u + i v contributes u (Re a_ij + Re a_ji) + v (Im a_ij - Im a_ji)
            e.add_term(ru, a[(i, j)].re + a[(j, i)].re);
            e.add_term(iu, a[(i, j)].im - a[(j, i)].im);
        }
        e
    }

    /// Real expression `h^H X h`.
    pub fn quad_form(&self, h: &CVec) -> LinExpr {
        self.re_tr_prod(&outer(h))
    }

    /// Complex expression `u^H X v`.
    pub fn sandwich(&self, u: &CVec, v: &CVec) -> CxExpr {
        assert_eq!(u.len(), self.n);
        assert_eq!(v.len(), self.n);
        let mut out = CxExpr::zero();
        for i in 0..self.n {
            for j in 0..self.n {
                let c = u[i].conj() * v[j];
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                out = out.plus(&self.entry(i, j).scaled(c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConeSpec {
    Zero(usize),
    NonNeg(usize),
    Soc(usize),
    Exp,
    /// PSD cone on the scaled upper triangle of a `d x d` symmetric matrix.
    PsdTri(usize),
}

impl ConeSpec {
    fn rows(&self) -> usize {
        match *self {
            ConeSpec::Zero(n) | ConeSpec::NonNeg(n) | ConeSpec::Soc(n) => n,
            ConeSpec::Exp => 3,
            ConeSpec::PsdTri(d) => d * (d + 1) / 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    cone: ConeSpec,
    tag: String,
    first_row: usize,
}

/// Termination state of a solve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    Unbounded,
    Failed(String),
}

impl SolveStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }
}

/// Primal solution returned by [`Model::solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub obj: f64,
    pub iterations: u32,
}

impl Solution {
    pub fn value(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    pub fn cx_value(&self, e: &CxExpr) -> C64 {
        e.eval(&self.x)
    }

    pub fn herm_value(&self, h: &HermVar) -> CMat {
        CMat::from_fn(h.n, h.n, |i, j| self.cx_value(&h.entry(i, j)))
    }
}

/// Conic model under construction.
#[derive(Debug, Clone, Default)]
pub struct Model {
    nvar: usize,
    obj_lin: Vec<f64>,
    obj_quad: BTreeMap<(VarId, VarId), f64>,
    obj_const: f64,
    rows: Vec<LinExpr>,
    blocks: Vec<Block>,
    pub verbose: bool,
    pub max_iter: Option<u32>,
}

impl Model {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.nvar
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_var(&mut self) -> VarId {
        let id = self.nvar;
        self.nvar += 1;
        self.obj_lin.push(0.0);
        id
    }

    pub fn add_vars(&mut self, n: usize) -> Vec<VarId> {
        (0..n).map(|_| self.add_var()).collect()
    }

    pub fn add_herm_var(&mut self, n: usize) -> HermVar {
        let diag = self.add_vars(n);
        let mut re_up = BTreeMap::new();
        let mut im_up = BTreeMap::new();
        for i in 0..n {
            for j in (i + 1)..n {
                re_up.insert((i, j), self.add_var());
                im_up.insert((i, j), self.add_var());
            }
        }
        HermVar {
            n,
            diag,
            re_up,
            im_up,
        }
    }

    /// Add `expr` to the (minimized) objective.
    pub fn add_linear_cost(&mut self, e: &LinExpr) {
        self.obj_const += e.constant;
        for &(v, c) in &e.terms {
            self.obj_lin[v] += c;
        }
    }

    /// Add `weight * expr^2` to the objective.
    pub fn add_sq_cost(&mut self, e: &LinExpr, weight: f64) {
        if weight == 0.0 {
            return;
        }
        assert!(weight > 0.0, "squared-cost weight must be nonnegative");
        let e = e.compressed();
        for (a, &(vi, ci)) in e.terms.iter().enumerate() {
            for &(vj, cj) in e.terms.iter().skip(a) {
                let (lo, hi) = if vi <= vj { (vi, vj) } else { (vj, vi) };
                *self.obj_quad.entry((lo, hi)).or_insert(0.0) += 2.0 * weight * ci * cj;
            }
            self.obj_lin[vi] += 2.0 * weight * e.constant * ci;
        }
        self.obj_const += weight * e.constant * e.constant;
    }

    fn push_block(&mut self, exprs: Vec<LinExpr>, cone: ConeSpec, tag: &str) {
        debug_assert_eq!(exprs.len(), cone.rows());
        self.blocks.push(Block {
            cone,
            tag: tag.to_string(),
            first_row: self.rows.len(),
        });
        self.rows.extend(exprs);
    }

    /// Constrain `expr == 0`.
    pub fn eq_zero(&mut self, e: LinExpr, tag: &str) {
        self.push_block(vec![e], ConeSpec::Zero(1), tag);
    }

    /// Constrain `expr >= 0`.
    pub fn nonneg(&mut self, e: LinExpr, tag: &str) {
        self.push_block(vec![e], ConeSpec::NonNeg(1), tag);
    }

    /// Constrain `lhs <= rhs`.
    pub fn le(&mut self, lhs: &LinExpr, rhs: &LinExpr, tag: &str) {
        self.nonneg(rhs.minus(lhs), tag);
    }

    /// Constrain `t >= ||v||_2`.
    pub fn soc(&mut self, t: LinExpr, v: Vec<LinExpr>, tag: &str) {
        let n = v.len() + 1;
        let mut exprs = Vec::with_capacity(n);
        exprs.push(t);
        exprs.extend(v);
        self.push_block(exprs, ConeSpec::Soc(n), tag);
    }

    /// Constrain `sum_i v_i^2 <= bound` (`bound` affine) via a second-order cone.
    pub fn quad_le(&mut self, v: &[LinExpr], bound: &LinExpr, tag: &str) {
        let t = bound.shift(1.0).scaled(0.5);
        let mut rows = vec![bound.shift(-1.0).scaled(0.5)];
        rows.extend(v.iter().cloned());
        self.soc(t, rows, tag);
    }

    /// Constrain `x <= ln(z)` (`x`, `z` affine, natural log).
    pub fn ln_ge(&mut self, x: LinExpr, z: LinExpr, tag: &str) {
        self.push_block(vec![x, LinExpr::constant(1.0), z], ConeSpec::Exp, tag);
    }

    /// Constrain a symmetric matrix of affine expressions to be PSD.
    /// Only the upper triangle (`i <= j`) is read; symmetry is implied.
    pub fn psd_real(&mut self, mat: &[Vec<LinExpr>], tag: &str) {
        let d = mat.len();
        for row in mat {
            assert_eq!(row.len(), d, "PSD matrix must be square");
        }
        let mut exprs = Vec::with_capacity(d * (d + 1) / 2);
        for j in 0..d {
            for i in 0..=j {
                let e = &mat[i][j];
                exprs.push(if i == j { e.clone() } else { e.scaled(SQRT_2) });
            }
        }
        self.push_block(exprs, ConeSpec::PsdTri(d), tag);
    }

    /// Constrain a Hermitian matrix of affine expressions to be PSD via the
    /// real embedding `[Re, -Im; Im, Re]`.
    pub fn psd_hermitian(&mut self, mat: &[Vec<CxExpr>], tag: &str) {
        let d = mat.len();
        for row in mat {
            assert_eq!(row.len(), d, "PSD matrix must be square");
        }
        let mut big = vec![vec![LinExpr::zero(); 2 * d]; 2 * d];
        for i in 0..d {
            for j in 0..d {
                big[i][j] = mat[i][j].re.clone();
                big[d + i][d + j] = mat[i][j].re.clone();
                big[i][d + j] = mat[i][j].im.scaled(-1.0);
                big[d + i][j] = mat[i][j].im.clone();
            }
        }
        self.psd_real(&big, tag);
    }

    /// Solve with the backend selected by `ISAC_SOLVER` (default `clarabel`).
    pub fn solve(&self) -> Result<Solution, ConicError> {
        let backend = std::env::var("ISAC_SOLVER").unwrap_or_default();
        parse_solver_name(&backend)?;
        self.solve_clarabel()
    }

    fn solve_clarabel(&self) -> Result<Solution, ConicError> {
        let n = self.nvar;
        if n == 0 {
            return Err(ConicError::BadModel("model has no variables".into()));
        }
        let m = self.rows.len();

        // s = b - Ax must equal each row expression
        let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = vec![0.0; m];
        for (r, e) in self.rows.iter().enumerate() {
            let e = e.compressed();
            b[r] = e.constant;
            for (v, c) in e.terms {
                if v >= n {
                    return Err(ConicError::BadModel(format!(
                        "row {r} references unknown variable {v}"
                    )));
                }
                a_trip.push((r, v, -c));
            }
        }
        let a = csc_from_triplets(m, n, &a_trip);
        let p_trip: Vec<(usize, usize, f64)> = self
            .obj_quad
            .iter()
            .map(|(&(i, j), &v)| (i, j, v))
            .collect();
        let p = csc_from_triplets(n, n, &p_trip);

        let cones: Vec<SupportedConeT<f64>> = self
            .blocks
            .iter()
            .map(|blk| match blk.cone {
                ConeSpec::Zero(k) => SupportedConeT::ZeroConeT(k),
                ConeSpec::NonNeg(k) => SupportedConeT::NonnegativeConeT(k),
                ConeSpec::Soc(k) => SupportedConeT::SecondOrderConeT(k),
                ConeSpec::Exp => SupportedConeT::ExponentialConeT(),
                ConeSpec::PsdTri(d) => SupportedConeT::PSDTriangleConeT(d),
            })
            .collect();

        // chordal decomposition splits the block-sparse certificate matrices
        // into tiny cliques whose consensus rows are poorly conditioned here
        let mut settings = DefaultSettings {
            verbose: self.verbose || std::env::var("NETISAC_VERBOSE").is_ok(),
            max_iter: self.max_iter.unwrap_or(200),
            chordal_decomposition_enable: false,
            ..DefaultSettings::default()
        };
        if std::env::var("NETISAC_NO_EQUIL").is_ok() {
            settings.equilibrate_enable = false;
        }
        if let Ok(v) = std::env::var("NETISAC_REG") {
            if let Ok(x) = v.parse() {
                settings.static_regularization_constant = x;
            }
        }
        if let Ok(v) = std::env::var("NETISAC_MAXSTEP") {
            if let Ok(x) = v.parse() {
                settings.max_step_fraction = x;
            }
        }
        let mut solver = DefaultSolver::new(&p, &self.obj_lin, &a, &b, &cones, settings);
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            other => SolveStatus::Failed(format!("{other:?}")),
        };
        Ok(Solution {
            status,
            x: solver.solution.x.clone(),
            obj: solver.solution.obj_val + self.obj_const,
            iterations: solver.solution.iterations,
        })
    }

    /// Worst violation per constraint tag at the point `x` (diagnostic).
    pub fn constraint_report(&self, x: &[f64]) -> Vec<(String, f64)> {
        let mut worst: BTreeMap<String, f64> = BTreeMap::new();
        for blk in &self.blocks {
            let s: Vec<f64> = (0..blk.cone.rows())
                .map(|k| self.rows[blk.first_row + k].eval(x))
                .collect();
            let v = cone_violation(blk.cone, &s);
            let e = worst.entry(blk.tag.clone()).or_insert(0.0);
            *e = e.max(v);
        }
        worst.into_iter().collect()
    }
}

fn cone_violation(cone: ConeSpec, s: &[f64]) -> f64 {
    match cone {
        ConeSpec::Zero(_) => s.iter().fold(0.0, |a, &v| a.max(v.abs())),
        ConeSpec::NonNeg(_) => s.iter().fold(0.0, |a, &v| a.max(-v)),
        ConeSpec::Soc(_) => {
            let t = s[0];
            let vn = s[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (vn - t).max(0.0)
        }
        ConeSpec::Exp => {
            let (x, y, z) = (s[0], s[1], s[2]);
            if y > 1e-300 {
                (y * (x / y).exp() - z).max(0.0)
            } else {
                (-y).max(x).max(-z).max(0.0)
            }
        }
        ConeSpec::PsdTri(d) => {
            let mut mat = RMat::zeros(d, d);
            let mut idx = 0;
            for j in 0..d {
                for i in 0..=j {
                    let v = if i == j { s[idx] } else { s[idx] / SQRT_2 };
                    mat[(i, j)] = v;
                    mat[(j, i)] = v;
                    idx += 1;
                }
            }
            let eig = mat.symmetric_eigen();
            (-eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v))).max(0.0)
        }
    }
}

fn csc_from_triplets(m: usize, n: usize, trip: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut sorted: Vec<(usize, usize, f64)> = trip.to_vec();
    sorted.sort_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(sorted.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
    let mut last: Option<(usize, usize)> = None;
    for &(r, c, v) in &sorted {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
