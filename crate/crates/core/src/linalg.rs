//! Sparse matrices and linear solvers.
//!
//! `CsrMatrix` is the storage used everywhere in the crate. Direct
//! factorizations (LU, Cholesky) are delegated to `faer`; GMRES and CG are
//! implemented here because the cost study needs their iteration counts and
//! stopping rules under our control.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseRowMatRef, SymbolicSparseRowMatRef};
use faer::{MatMut, Side};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Clone, Debug, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        TripletBuilder { nrows, ncols, ..Default::default() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        TripletBuilder {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.rows.push(i as u32);
        self.cols.push(j as u32);
        self.vals.push(v);
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn build(self) -> CsrMatrix {
        let n = self.nrows;
        let mut count = vec![0usize; n + 1];
        for &r in &self.rows {
            count[r as usize + 1] += 1;
        }
        for i in 0..n {
            count[i + 1] += count[i];
        }
        let nnz = self.vals.len();
        let mut cols = vec![0u32; nnz];
        let mut vals = vec![0.0; nnz];
        let mut next = count.clone();
        for k in 0..nnz {
            let r = self.rows[k] as usize;
            let p = next[r];
            cols[p] = self.cols[k];
            vals[p] = self.vals[k];
            next[r] += 1;
        }
        drop(self.rows);
        drop(self.cols);
        drop(self.vals);

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        let mut perm: Vec<usize> = Vec::new();
        for i in 0..n {
            let (a, b) = (count[i], count[i + 1]);
            perm.clear();
            perm.extend(a..b);
            perm.sort_unstable_by_key(|&p| cols[p]);
            let mut last = usize::MAX;
            for &p in &perm {
                let c = cols[p] as usize;
                if c == last {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    col_idx.push(c);
                    values.push(vals[p]);
                    last = c;
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { nrows: n, ncols: self.ncols, row_ptr, col_idx, values }
    }
}

impl CsrMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> CsrMatrix {
        let mut b = TripletBuilder::with_capacity(nrows, ncols, triplets.len());
        for &(i, j, v) in triplets {
            b.push(i, j, v);
        }
        b.build()
    }

    pub fn zeros(nrows: usize, ncols: usize) -> CsrMatrix {
        CsrMatrix { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> CsrMatrix {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> CsrMatrix {
        let n = d.len();
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> CsrMatrix {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut b = TripletBuilder::new(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&j) {
            Ok(p) => v[p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols, "mul_vec: x has wrong length");
        assert_eq!(y.len(), self.nrows, "mul_vec: y has wrong length");
        for i in 0..self.nrows {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[p] * x[self.col_idx[p]];
            }
            y[i] = s;
        }
    }

    /// `y += a * self * x`
    pub fn mul_vec_acc(&self, a: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[p] * x[self.col_idx[p]];
            }
            y[i] += a * s;
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut b = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for i in 0..self.nrows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                b.push(self.col_idx[p], i, self.values[p]);
            }
        }
        b.build()
    }

    /// `a * self + b * other`, on the union of the sparsity patterns.
    pub fn lin_comb(&self, a: f64, other: &CsrMatrix, b: f64) -> Result<CsrMatrix> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut t = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz() + other.nnz());
        for (m, s) in [(self, a), (other, b)] {
            for i in 0..m.nrows {
                for p in m.row_ptr[i]..m.row_ptr[i + 1] {
                    t.push(i, m.col_idx[p], s * m.values[p]);
                }
            }
        }
        Ok(t.build())
    }

    pub fn add(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn scaled(&self, a: f64) -> CsrMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= a);
        m
    }

    /// `(A + A^T) / 2`
    pub fn symmetric_part(&self) -> Result<CsrMatrix> {
        self.lin_comb(0.5, &self.transpose(), 0.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.lin_comb(1.0, &self.transpose(), -1.0).map(|d| d.max_abs()).unwrap_or(f64::INFINITY)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for i in 0..self.nrows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i][self.col_idx[p]] += self.values[p];
            }
        }
        d
    }

    fn faer_ref(&self) -> SparseRowMatRef<'_, usize, f64> {
        let sym = SymbolicSparseRowMatRef::new_checked(self.nrows, self.ncols, &self.row_ptr, None, &self.col_idx);
        SparseRowMatRef::new(sym, &self.values)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `b - A x`
pub fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = b.to_vec();
    a.mul_vec_acc(-1.0, x, &mut r);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    DirectLu,
    Gmres,
    Cg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreconditionerKind {
    None,
    Diagonal,
    /// Sparse Cholesky factor of `(A + A^T)/2`; requires that part to be SPD.
    SymmetricCholesky,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub backend: Backend,
    /// GMRES: bound on the (relative) preconditioned residual. CG: bound on
    /// its square.
    pub tolerance: f64,
    pub restart: usize,
    pub max_iter: usize,
    pub preconditioner: PreconditionerKind,
    /// Measure residuals relative to the preconditioned right-hand side.
    pub relative: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::direct()
    }
}

impl SolverConfig {
    pub fn direct() -> Self {
        SolverConfig {
            backend: Backend::DirectLu,
            tolerance: 1e-11,
            restart: 200,
            max_iter: 10_000,
            preconditioner: PreconditionerKind::Diagonal,
            relative: true,
        }
    }

    pub fn gmres() -> Self {
        SolverConfig { backend: Backend::Gmres, ..Self::direct() }
    }

    pub fn cg() -> Self {
        SolverConfig { backend: Backend::Cg, tolerance: 1e-20, ..Self::direct() }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_preconditioner(mut self, p: PreconditionerKind) -> Self {
        self.preconditioner = p;
        self
    }

    pub fn with_max_iter(mut self, n: usize) -> Self {
        self.max_iter = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid(format!("solver tolerance must be positive, got {}", self.tolerance)));
        }
        if self.backend == Backend::Gmres && self.restart == 0 {
            return Err(Error::invalid("GMRES restart length must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final residual in the solver's own stopping measure.
    pub residual: f64,
}

pub struct LuFactorization {
    n: usize,
    lu: Lu<usize, f64>,
}

impl std::fmt::Debug for LuFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuFactorization").field("n", &self.n).finish()
    }
}

pub fn lu_factorize(a: &CsrMatrix) -> Result<LuFactorization> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!("LU of a {}x{} matrix", a.nrows, a.ncols)));
    }
    let lu = a.faer_ref().sp_lu().map_err(|_| Error::Singular)?;
    let f = LuFactorization { n: a.nrows, lu };
    // partial pivoting does not report a numerically zero pivot; a probe
    // solve does
    if a.nrows > 0 {
        let probe = f.solve(&vec![1.0; a.nrows]);
        if probe.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
    }
    Ok(f)
}

impl LuFactorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        if self.n == 0 {
            return;
        }
        let m = MatMut::from_column_major_slice_mut(x, self.n, 1);
        self.lu.solve_in_place(m);
    }
}

pub fn lu_solve(f: &LuFactorization, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != f.n {
        return Err(Error::DimensionMismatch(format!("rhs length {} for dimension {}", rhs.len(), f.n)));
    }
    let x = f.solve(rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(x)
}

pub struct CholeskyFactorization {
    n: usize,
    llt: Llt<usize, f64>,
}

impl CholeskyFactorization {
    /// Factorizes a symmetric positive definite matrix (lower triangle read).
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch("Cholesky of a non-square matrix".into()));
        }
        let llt = a
            .faer_ref()
            .sp_cholesky(Side::Lower)
            .map_err(|_| Error::Indefinite { curvature: f64::NAN })?;
        Ok(CholeskyFactorization { n: a.nrows, llt })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        if self.n == 0 {
            return;
        }
        let m = MatMut::from_column_major_slice_mut(x, self.n, 1);
        self.llt.solve_in_place(m);
    }
}

pub trait Preconditioner {
    /// `z = M^{-1} r`
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let inv_diag = a
            .diagonal()
            .into_iter()
            .map(|d| if d != 0.0 { Ok(1.0 / d) } else { Err(Error::Singular) })
            .collect::<Result<_>>()?;
        Ok(Jacobi { inv_diag })
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), d) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * d;
        }
    }
}

impl Preconditioner for CholeskyFactorization {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        self.solve_in_place(z);
    }
}

fn make_preconditioner(a: &CsrMatrix, kind: PreconditionerKind) -> Result<Box<dyn Preconditioner + Send + Sync>> {
    Ok(match kind {
        PreconditionerKind::None => Box::new(IdentityPreconditioner),
        PreconditionerKind::Diagonal => Box::new(Jacobi::new(a)?),
        PreconditionerKind::SymmetricCholesky => Box::new(CholeskyFactorization::new(&a.symmetric_part()?)?),
    })
}

/// Restarted GMRES with left preconditioning. Stops when
/// `|M^{-1}(b - Ax)| <= tol * |M^{-1} b|` (or `<= tol` when not relative);
/// the reported residual is recomputed from the returned iterate.
pub fn gmres(a: &CsrMatrix, b: &[f64], config: &SolverConfig, x0: Option<&[f64]>) -> Result<LinearSolution> {
    config.validate()?;
    let m = make_preconditioner(a, config.preconditioner)?;
    gmres_with(a, b, m.as_ref(), config, x0)
}

pub fn gmres_with(
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    config: &SolverConfig,
    x0: Option<&[f64]>,
) -> Result<LinearSolution> {
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::DimensionMismatch(format!("GMRES on {}x{} with rhs {}", a.nrows, a.ncols, b.len())));
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    if n == 0 {
        return Ok(LinearSolution { x, iterations: 0, residual: 0.0 });
    }
    let mut z = vec![0.0; n];
    let scale = if config.relative {
        m.apply(b, &mut z);
        let s = norm2(&z);
        if s == 0.0 {
            return Ok(LinearSolution { x: vec![0.0; n], iterations: 0, residual: 0.0 });
        }
        s
    } else {
        1.0
    };
    let target = config.tolerance * scale;
    let restart = config.restart.min(n).max(1);
    let mut total = 0usize;

    let precond_residual = |x: &[f64], z: &mut [f64]| {
        let r = residual(a, x, b);
        m.apply(&r, z);
        norm2(z)
    };

    let mut beta = precond_residual(&x, &mut z);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
    let mut hess = vec![vec![0.0; restart]; restart + 1];
    let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
    let mut g = vec![0.0; restart + 1];
    let mut w = vec![0.0; n];
    let mut av = vec![0.0; n];
    let mut stagnant = 0;

    while beta > target {
        if total >= config.max_iter {
            return Err(Error::NotConverged { solver: "gmres", iterations: total, residual: beta / scale, best: x });
        }
        basis.clear();
        basis.push(z.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k = 0;
        while k < restart && total < config.max_iter {
            a.mul_vec_into(&basis[k], &mut av);
            m.apply(&av, &mut w);
            for j in 0..=k {
                let h = dot(&w, &basis[j]);
                hess[j][k] = h;
                axpy(-h, &basis[j], &mut w);
            }
            let hn = norm2(&w);
            hess[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let (c, s) = givens(hess[k][k], hess[k + 1][k]);
            cs[k] = c;
            sn[k] = s;
            hess[k][k] = c * hess[k][k] + s * hess[k + 1][k];
            hess[k + 1][k] = 0.0;
            g[k + 1] = -s * g[k];
            g[k] *= c;
            total += 1;
            k += 1;
            if g[k].abs() <= target || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution on the k x k triangle
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= hess[i][j] * y[j];
            }
            y[i] = s / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut x);
        }
        let new_beta = precond_residual(&x, &mut z);
        if !new_beta.is_finite() {
            return Err(Error::Singular);
        }
        if new_beta >= beta * (1.0 - 1e-14) {
            stagnant += 1;
            if stagnant >= 3 {
                return Err(Error::NotConverged { solver: "gmres", iterations: total, residual: new_beta / scale, best: x });
            }
        } else {
            stagnant = 0;
        }
        beta = new_beta;
    }
    Ok(LinearSolution { x, iterations: total, residual: beta / scale })
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Preconditioned conjugate gradients. Stops when the squared preconditioned
/// residual `|M^{-1} r|^2` falls below `tol` (relative to `|M^{-1} b|^2` when
/// configured relative).
pub fn cg(a: &CsrMatrix, b: &[f64], config: &SolverConfig, x0: Option<&[f64]>) -> Result<LinearSolution> {
    config.validate()?;
    let m = make_preconditioner(a, config.preconditioner)?;
    cg_with(a, b, m.as_ref(), config, x0)
}

pub fn cg_with(
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    config: &SolverConfig,
    x0: Option<&[f64]>,
) -> Result<LinearSolution> {
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::DimensionMismatch(format!("CG on {}x{} with rhs {}", a.nrows, a.ncols, b.len())));
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    if n == 0 {
        return Ok(LinearSolution { x, iterations: 0, residual: 0.0 });
    }
    let mut z = vec![0.0; n];
    let scale2 = if config.relative {
        m.apply(b, &mut z);
        let s = dot(&z, &z);
        if s == 0.0 {
            return Ok(LinearSolution { x: vec![0.0; n], iterations: 0, residual: 0.0 });
        }
        s
    } else {
        1.0
    };
    let target = config.tolerance * scale2;
    let mut r = residual(a, &x, b);
    m.apply(&r, &mut z);
    let mut zz = dot(&z, &z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut it = 0;
    while zz > target {
        if it >= config.max_iter {
            return Err(Error::NotConverged { solver: "cg", iterations: it, residual: zz / scale2, best: x });
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Indefinite { curvature: pap });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        m.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        zz = dot(&z, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        it += 1;
    }
    // recompute from the iterate so the reported value is honest
    let r = residual(a, &x, b);
    m.apply(&r, &mut z);
    let zz = dot(&z, &z);
    Ok(LinearSolution { x, iterations: it, residual: zz / scale2 })
}

/// A matrix prepared for repeated solves: factorized (direct backend) or
/// paired with its preconditioner (iterative backends).
pub struct PreparedSolver {
    config: SolverConfig,
    inner: Prepared,
}

enum Prepared {
    Lu(LuFactorization),
    Iterative { matrix: CsrMatrix, precond: Box<dyn Preconditioner + Send + Sync> },
}

impl PreparedSolver {
    pub fn new(a: &CsrMatrix, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let inner = match config.backend {
            Backend::DirectLu => Prepared::Lu(lu_factorize(a)?),
            Backend::Gmres | Backend::Cg => Prepared::Iterative {
                matrix: a.clone(),
                precond: make_preconditioner(a, config.preconditioner)?,
            },
        };
        Ok(PreparedSolver { config, inner })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn solve(&self, rhs: &[f64], x0: Option<&[f64]>) -> Result<LinearSolution> {
        match &self.inner {
            Prepared::Lu(f) => Ok(LinearSolution { x: lu_solve(f, rhs)?, iterations: 0, residual: 0.0 }),
            Prepared::Iterative { matrix, precond } => match self.config.backend {
                Backend::Gmres => gmres_with(matrix, rhs, precond.as_ref(), &self.config, x0),
                _ => cg_with(matrix, rhs, precond.as_ref(), &self.config, x0),
            },
        }
    }
}

/// One-shot solve with the configured backend.
pub fn solve(a: &CsrMatrix, b: &[f64], config: &SolverConfig) -> Result<LinearSolution> {
    PreparedSolver::new(a, *config)?.solve(b, None)
}

/// Small dense LU with partial pivoting, for per-element systems.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        if m[p][k] == 0.0 {
            return Err(Error::Singular);
        }
        m.swap(k, p);
        x.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f != 0.0 {
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in k + 1..n {
            s -= m[k][j] * x[j];
        }
        x[k] = s / m[k][k];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        // interior dofs of a uniform mesh with n cells, h = 1/n
        let m = n - 1;
        let h = 1.0 / n as f64;
        let mut b = TripletBuilder::new(m, m);
        for i in 0..m {
            b.push(i, i, 2.0 / h);
            if i > 0 {
                b.push(i, i - 1, -1.0 / h);
            }
            if i + 1 < m {
                b.push(i, i + 1, -1.0 / h);
            }
        }
        b.build()
    }

    fn laplace_2d(n: usize) -> CsrMatrix {
        let m = n - 1;
        let id = |i: usize, j: usize| i * m + j;
        let mut b = TripletBuilder::new(m * m, m * m);
        for i in 0..m {
            for j in 0..m {
                b.push(id(i, j), id(i, j), 4.0);
                if i > 0 {
                    b.push(id(i, j), id(i - 1, j), -1.0);
                }
                if i + 1 < m {
                    b.push(id(i, j), id(i + 1, j), -1.0);
                }
                if j > 0 {
                    b.push(id(i, j), id(i, j - 1), -1.0);
                }
                if j + 1 < m {
                    b.push(id(i, j), id(i, j + 1), -1.0);
                }
            }
        }
        b.build()
    }

    fn advection_1d(n: usize, alpha: f64, b: f64) -> CsrMatrix {
        let m = n - 1;
        let h = 1.0 / n as f64;
        let mut t = TripletBuilder::new(m, m);
        for i in 0..m {
            t.push(i, i, 2.0 * alpha / h);
            if i > 0 {
                t.push(i, i - 1, -alpha / h - b / 2.0);
            }
            if i + 1 < m {
                t.push(i, i + 1, -alpha / h + b / 2.0);
            }
        }
        t.build()
    }

    #[test]
    fn duplicates_are_summed_and_sorted() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 3.0), (1, 1, 5.0)]);
        assert_eq!(m.row(0).0, &[0, 2]);
        assert_eq!(m.row(0).1, &[2.0, 4.0]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 1), 5.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn transpose_and_matvec() {
        let m = CsrMatrix::from_dense(&[vec![1.0, 2.0, 0.0], vec![0.0, 3.0, 4.0]]);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 7.0]);
        let t = m.transpose();
        assert_eq!(t.to_dense(), vec![vec![1.0, 0.0], vec![2.0, 3.0], vec![0.0, 4.0]]);
    }

    #[test]
    fn lu_identity() {
        let f = lu_factorize(&CsrMatrix::identity(5)).unwrap();
        let b = [1.0, -2.0, 3.5, 0.0, 7.0];
        assert_eq!(lu_solve(&f, &b).unwrap(), b.to_vec());
    }

    #[test]
    fn lu_tridiagonal_hand_elimination() {
        let a = CsrMatrix::from_dense(&[vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]]);
        let x = lu_solve(&lu_factorize(&a).unwrap(), &[1.0, 0.0, 0.0]).unwrap();
        for (xi, e) in x.iter().zip([0.75, 0.5, 0.25]) {
            assert!((xi - e).abs() < 1e-15);
        }
    }

    #[test]
    fn lu_laplacian_nodally_exact() {
        let n = 8;
        let h = 1.0 / n as f64;
        let x = lu_solve(&lu_factorize(&laplace_1d(n)).unwrap(), &vec![h; n - 1]).unwrap();
        for (i, xi) in x.iter().enumerate() {
            let t = (i + 1) as f64 * h;
            assert!((xi - t * (1.0 - t) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_detects_singular() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(lu_factorize(&a), Err(Error::Singular)));
        let z = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0)]);
        assert!(matches!(lu_factorize(&z), Err(Error::Singular)));
    }

    #[test]
    fn gmres_identity_one_iteration() {
        let b = vec![1.0, 2.0, 3.0];
        let cfg = SolverConfig::gmres().with_preconditioner(PreconditionerKind::None);
        let s = gmres(&CsrMatrix::identity(3), &b, &cfg, None).unwrap();
        assert_eq!(s.iterations, 1);
        for (x, y) in s.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gmres_scaled_identity_with_jacobi() {
        let a = CsrMatrix::from_diagonal(&[2.0; 4]);
        let s = gmres(&a, &[2.0, 4.0, 6.0, 8.0], &SolverConfig::gmres(), None).unwrap();
        assert_eq!(s.iterations, 1);
        assert!((s.x[3] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn gmres_matches_lu_on_advection() {
        let a = advection_1d(32, 1.0 / 8.0, 1.0);
        let b: Vec<f64> = (0..31).map(|i| 1.0 + 0.1 * i as f64).collect();
        let xd = lu_solve(&lu_factorize(&a).unwrap(), &b).unwrap();
        let s = gmres(&a, &b, &SolverConfig::gmres(), None).unwrap();
        let err = xd.iter().zip(&s.x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9 * xd.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn gmres_reports_nonconvergence_with_best_iterate() {
        let a = advection_1d(64, 1e-3, 1.0);
        let cfg = SolverConfig::gmres().with_max_iter(3);
        let cfg = SolverConfig { restart: 2, ..cfg };
        match gmres(&a, &vec![1.0; 63], &cfg, None) {
            Err(Error::NotConverged { solver, iterations, best, .. }) => {
                assert_eq!(solver, "gmres");
                assert!(iterations <= 3);
                assert_eq!(best.len(), 63);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn gmres_with_symmetric_cholesky_preconditioner() {
        let a = advection_1d(200, 1.0 / 64.0, 1.0);
        let b = vec![1.0; 199];
        let cfg = SolverConfig::gmres().with_tolerance(1e-14).with_preconditioner(PreconditionerKind::SymmetricCholesky);
        let s = gmres(&a, &b, &cfg, None).unwrap();
        let xd = lu_solve(&lu_factorize(&a).unwrap(), &b).unwrap();
        let err = xd.iter().zip(&s.x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn cg_identity_and_diagonal() {
        let cfg = SolverConfig::cg().with_preconditioner(PreconditionerKind::None);
        let s = cg(&CsrMatrix::identity(4), &[1.0, 2.0, 3.0, 4.0], &cfg, None).unwrap();
        assert_eq!(s.iterations, 1);
        let d = CsrMatrix::from_diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = cg(&d, &[1.0; 5], &cfg, None).unwrap();
        assert!(s.iterations <= 5);
        for (i, x) in s.x.iter().enumerate() {
            assert!((x - 1.0 / (i + 1) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_matches_lu_on_2d_laplacian() {
        let a = laplace_2d(8);
        let b: Vec<f64> = (0..49).map(|i| (i as f64).sin()).collect();
        let s = cg(&a, &b, &SolverConfig::cg(), None).unwrap();
        let xd = lu_solve(&lu_factorize(&a).unwrap(), &b).unwrap();
        let err = xd.iter().zip(&s.x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn cg_detects_indefinite() {
        let a = CsrMatrix::from_diagonal(&[1.0, -1.0]);
        let cfg = SolverConfig::cg().with_preconditioner(PreconditionerKind::None);
        assert!(matches!(cg(&a, &[1.0, 1.0], &cfg, None), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn reported_residuals_hold_when_recomputed() {
        let a = advection_1d(40, 0.05, 1.0);
        let b: Vec<f64> = (0..39).map(|i| (0.3 * i as f64).cos()).collect();
        let cfg = SolverConfig::gmres();
        let s = gmres(&a, &b, &cfg, None).unwrap();
        let j = Jacobi::new(&a).unwrap();
        let mut z = vec![0.0; 39];
        let mut zb = vec![0.0; 39];
        j.apply(&residual(&a, &s.x, &b), &mut z);
        j.apply(&b, &mut zb);
        assert!(norm2(&z) / norm2(&zb) <= cfg.tolerance);

        let l = laplace_2d(10);
        let b2 = vec![1.0; 81];
        let cfg = SolverConfig::cg();
        let s = cg(&l, &b2, &cfg, None).unwrap();
        let j = Jacobi::new(&l).unwrap();
        let mut z = vec![0.0; 81];
        let mut zb = vec![0.0; 81];
        j.apply(&residual(&l, &s.x, &b2), &mut z);
        j.apply(&b2, &mut zb);
        assert!(dot(&z, &z) / dot(&zb, &zb) <= cfg.tolerance);
    }

    #[test]
    fn jacobi_does_not_slow_cg_on_laplacian() {
        let a = laplace_1d(50).lin_comb(1.0, &CsrMatrix::from_diagonal(&(0..49).map(|i| 1.0 + i as f64).collect::<Vec<_>>()), 1.0).unwrap();
        let b = vec![1.0; 49];
        let plain = cg(&a, &b, &SolverConfig::cg().with_preconditioner(PreconditionerKind::None), None).unwrap();
        let jac = cg(&a, &b, &SolverConfig::cg(), None).unwrap();
        assert!(jac.iterations <= plain.iterations);
    }

    #[test]
    fn prepared_solver_reuses_factorization() {
        let a = laplace_1d(10);
        let p = PreparedSolver::new(&a, SolverConfig::direct()).unwrap();
        let x1 = p.solve(&vec![1.0; 9], None).unwrap().x;
        let x2 = p.solve(&vec![2.0; 9], None).unwrap().x;
        for (u, v) in x1.iter().zip(&x2) {
            assert!((2.0 * u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn dense_solve_small() {
        let x = dense_solve(&[vec![0.0, 1.0], vec![2.0, 0.0]], &[3.0, 4.0]).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
        assert!(dense_solve(&[vec![1.0, 2.0], vec![2.0, 4.0]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn invalid_tolerance_rejected() {
        let cfg = SolverConfig::gmres().with_tolerance(0.0);
        assert!(gmres(&CsrMatrix::identity(2), &[1.0, 1.0], &cfg, None).is_err());
    }
}
