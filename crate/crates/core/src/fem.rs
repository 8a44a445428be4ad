//! Coefficient fields, P1 spaces and assembly of the bilinear and linear forms
//! of the advection-diffusion problem and its streamline-diffusion
//! stabilization.
//!
//! All element integrals use the midpoint rule for the coefficient, which is
//! exact for P1 gradients against a cellwise constant sample.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, TripletBuilder};
use crate::mesh::{CellGeometry, Dim, Mesh, MeshHierarchy};

pub type Point = [f64; 2];
pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Scalar diffusion coefficient `A(x) Id`.
#[derive(Clone)]
pub enum Diffusion {
    Constant(f64),
    /// `alpha (1 + delta cos(2 pi x_1 / epsilon))`
    Oscillating { alpha: f64, delta: f64, epsilon: f64 },
    /// Arbitrary field with user-supplied ellipticity bounds.
    Custom { f: ScalarFn, lower: f64, upper: f64 },
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(a) => write!(f, "Constant({a})"),
            Diffusion::Oscillating { alpha, delta, epsilon } => {
                write!(f, "Oscillating {{ alpha: {alpha}, delta: {delta}, epsilon: {epsilon} }}")
            }
            Diffusion::Custom { lower, upper, .. } => write!(f, "Custom {{ lower: {lower}, upper: {upper} }}"),
        }
    }
}

impl Diffusion {
    pub fn oscillating(alpha: f64, delta: f64, epsilon: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {delta}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Diffusion::Oscillating { alpha, delta, epsilon })
    }

    pub fn custom(f: impl Fn(Point) -> f64 + Send + Sync + 'static, lower: f64, upper: f64) -> Self {
        Diffusion::Custom { f: Arc::new(f), lower, upper }
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            Diffusion::Constant(a) => *a,
            Diffusion::Oscillating { alpha, delta, epsilon } => {
                alpha * (1.0 + delta * (2.0 * std::f64::consts::PI * x[0] / epsilon).cos())
            }
            Diffusion::Custom { f, .. } => f(x),
        }
    }

    /// Ellipticity bounds `(alpha_1, alpha_2)`.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Diffusion::Constant(a) => (*a, *a),
            Diffusion::Oscillating { alpha, delta, .. } => (alpha * (1.0 - delta), alpha * (1.0 + delta)),
            Diffusion::Custom { lower, upper, .. } => (*lower, *upper),
        }
    }

    /// The mean level `alpha` (midpoint of the bounds for custom fields).
    pub fn nominal(&self) -> f64 {
        match self {
            Diffusion::Constant(a) => *a,
            Diffusion::Oscillating { alpha, .. } => *alpha,
            Diffusion::Custom { lower, upper, .. } => 0.5 * (lower + upper),
        }
    }

    /// `sup |A - c|` over the range of the field.
    pub fn deviation_from(&self, c: f64) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - c).abs().max((lo - c).abs())
    }

    /// `sup |A'|` for the analytic families; `None` for custom fields.
    pub fn derivative_sup(&self) -> Option<f64> {
        match self {
            Diffusion::Constant(_) => Some(0.0),
            Diffusion::Oscillating { alpha, delta, epsilon } => {
                Some(alpha * delta * 2.0 * std::f64::consts::PI / epsilon)
            }
            Diffusion::Custom { .. } => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Diffusion::Constant(_) => true,
            Diffusion::Oscillating { delta, .. } => *delta == 0.0,
            Diffusion::Custom { .. } => false,
        }
    }

    /// Sum of two fields, evaluated pointwise.
    pub fn plus(&self, other: &Diffusion) -> Diffusion {
        let (a, b) = (self.clone(), other.clone());
        let (l1, u1) = self.bounds();
        let (l2, u2) = other.bounds();
        Diffusion::custom(move |x| a.eval(x) + b.eval(x), l1 + l2, u1 + u2)
    }

    /// `A + shift`, keeping the analytic form where possible.
    pub fn shifted(&self, shift: f64) -> Diffusion {
        if shift == 0.0 {
            return self.clone();
        }
        match self {
            Diffusion::Constant(a) => Diffusion::Constant(a + shift),
            _ => self.plus(&Diffusion::Constant(shift)),
        }
    }
}

#[derive(Clone)]
pub enum Source {
    Constant(f64),
    Custom(ScalarFn),
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Source {
    pub fn custom(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Source::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Custom(f) => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Constant(c) if *c == 0.0)
    }

    /// `|f|_{L^2}` by the midpoint rule on `mesh`.
    pub fn l2_norm(&self, mesh: &Mesh) -> f64 {
        (0..mesh.n_cells())
            .map(|k| {
                let g = mesh.geometry(k);
                g.measure * self.eval(g.barycenter).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VelocityNorm {
    Euclidean,
    /// Largest component in absolute value.
    Componentwise,
}

/// Norm of a constant velocity; only the first component counts in 1D.
pub fn velocity_norm(b: [f64; 2], dim: Dim, norm: VelocityNorm) -> f64 {
    match (dim, norm) {
        (Dim::One, _) => b[0].abs(),
        (Dim::Two, VelocityNorm::Euclidean) => b[0].hypot(b[1]),
        (Dim::Two, VelocityNorm::Componentwise) => b[0].abs().max(b[1].abs()),
    }
}

/// Global Péclet number `|b|_inf / (2 alpha)` with the componentwise sup.
pub fn global_peclet(b: [f64; 2], alpha: f64, dim: Dim) -> f64 {
    velocity_norm(b, dim, VelocityNorm::Componentwise) / (2.0 * alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauMode {
    /// `H / (2|b|)`
    Simple,
    /// `H / (2|b|) (coth Pe_K - 1/Pe_K)` with `Pe_K = |b| H / (2 alpha)`
    Coth,
}

/// Which operator the stabilization tests against: `L_ss + rho L_s` with
/// `rho = -1, 0, 1`. On P1 the elementwise Laplacian vanishes, so all three
/// give the same matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StabVariant {
    DouglasWang,
    Supg,
    Gls,
}

impl StabVariant {
    pub fn rho(self) -> i8 {
        match self {
            StabVariant::DouglasWang => -1,
            StabVariant::Supg => 0,
            StabVariant::Gls => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabParams {
    pub mode: TauMode,
    pub variant: StabVariant,
    /// Elementwise constant value (the velocity is constant and the mesh
    /// uniform, so one value serves every element).
    pub tau: f64,
    /// Set when `|b| = 0` made the parameter undefined; `tau` is then 0.
    pub undefined: bool,
}

impl StabParams {
    pub fn none() -> Self {
        StabParams { mode: TauMode::Simple, variant: StabVariant::Supg, tau: 0.0, undefined: false }
    }

    pub fn tau_at(&self, _cell: usize) -> f64 {
        self.tau
    }
}

/// `coth(p) - 1/p`, accurate for small `p`.
pub fn langevin(p: f64) -> f64 {
    if p.abs() < 1e-2 {
        let p2 = p * p;
        p * (1.0 / 3.0 - p2 / 45.0 + 2.0 * p2 * p2 / 945.0)
    } else {
        1.0 / p.tanh() - 1.0 / p
    }
}

pub fn tau_value(mode: TauMode, alpha: f64, bnorm: f64, h: f64) -> f64 {
    if bnorm == 0.0 {
        return 0.0;
    }
    let simple = h / (2.0 * bnorm);
    match mode {
        TauMode::Simple => simple,
        TauMode::Coth => simple * langevin(bnorm * h / (2.0 * alpha)),
    }
}

pub fn tau_field(mode: TauMode, alpha: f64, b: [f64; 2], h: f64, dim: Dim, norm: VelocityNorm) -> StabParams {
    let bn = velocity_norm(b, dim, norm);
    StabParams { mode, variant: StabVariant::Supg, tau: tau_value(mode, alpha, bn, h), undefined: bn == 0.0 }
}

/// One term of a bilinear form, integrated cell by cell.
#[derive(Clone, Copy, Debug)]
pub enum Term<'a> {
    /// `(A grad u, grad v)`
    Diffusion(&'a Diffusion),
    /// `c (grad u, grad v)`
    Laplace(f64),
    /// `(b . grad u, v)`
    Convection([f64; 2]),
    /// `tau (b . grad u, b . grad v)`
    Streamline { b: [f64; 2], tau: f64 },
    /// `c (u, v)`
    Mass(f64),
}

/// Element matrix `E[i][j] = form(phi_j, phi_i)` for the barycentric basis of
/// one cell.
pub fn element_matrix(g: &CellGeometry, terms: &[Term<'_>]) -> Result<[[f64; 3]; 3]> {
    let nv = g.nv;
    let mut e = [[0.0; 3]; 3];
    let gg = |i: usize, j: usize| g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1];
    for t in terms {
        match *t {
            Term::Diffusion(a) => {
                let x = g.barycenter;
                let c = a.eval(x);
                if !(c > 0.0) {
                    return Err(Error::NotElliptic { x: x[0], y: x[1], value: c });
                }
                for i in 0..nv {
                    for j in 0..nv {
                        e[i][j] += c * gg(i, j) * g.measure;
                    }
                }
            }
            Term::Laplace(c) => {
                for i in 0..nv {
                    for j in 0..nv {
                        e[i][j] += c * gg(i, j) * g.measure;
                    }
                }
            }
            Term::Convection(b) => {
                let w = g.measure / nv as f64;
                for j in 0..nv {
                    let bg = b[0] * g.grads[j][0] + b[1] * g.grads[j][1];
                    for row in e.iter_mut().take(nv) {
                        row[j] += bg * w;
                    }
                }
            }
            Term::Streamline { b, tau } => {
                let bg: Vec<f64> = (0..nv).map(|i| b[0] * g.grads[i][0] + b[1] * g.grads[i][1]).collect();
                for i in 0..nv {
                    for j in 0..nv {
                        e[i][j] += tau * bg[i] * bg[j] * g.measure;
                    }
                }
            }
            Term::Mass(c) => {
                let w = c * g.measure / (nv * (nv + 1)) as f64;
                for i in 0..nv {
                    for j in 0..nv {
                        e[i][j] += if i == j { 2.0 * w } else { w };
                    }
                }
            }
        }
    }
    Ok(e)
}

/// One term of a linear form.
#[derive(Clone, Copy, Debug)]
pub enum LoadTerm<'a> {
    /// `(f, v)`
    Plain(&'a Source),
    /// `tau (f, b . grad v)`
    Streamline { f: &'a Source, b: [f64; 2], tau: f64 },
}

pub fn element_load(g: &CellGeometry, terms: &[LoadTerm<'_>]) -> [f64; 3] {
    let nv = g.nv;
    let mut l = [0.0; 3];
    for t in terms {
        match *t {
            LoadTerm::Plain(f) => {
                let w = f.eval(g.barycenter) * g.measure / nv as f64;
                for v in l.iter_mut().take(nv) {
                    *v += w;
                }
            }
            LoadTerm::Streamline { f, b, tau } => {
                let fv = f.eval(g.barycenter);
                for (i, v) in l.iter_mut().enumerate().take(nv) {
                    *v += tau * fv * (b[0] * g.grads[i][0] + b[1] * g.grads[i][1]) * g.measure;
                }
            }
        }
    }
    l
}

/// Continuous P1 space on a mesh with homogeneous Dirichlet conditions;
/// boundary vertices carry no dof.
#[derive(Clone, Debug)]
pub struct P1Space<'m> {
    mesh: &'m Mesh,
    dof_of_vertex: Vec<Option<usize>>,
    vertex_of_dof: Vec<usize>,
}

impl<'m> P1Space<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let mut dof_of_vertex = vec![None; mesh.n_vertices()];
        let mut vertex_of_dof = Vec::new();
        for (v, d) in dof_of_vertex.iter_mut().enumerate() {
            if !mesh.is_boundary(v) {
                *d = Some(vertex_of_dof.len());
                vertex_of_dof.push(v);
            }
        }
        P1Space { mesh, dof_of_vertex, vertex_of_dof }
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.vertex_of_dof.len()
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.dof_of_vertex[vertex]
    }

    pub fn vertex(&self, dof: usize) -> usize {
        self.vertex_of_dof[dof]
    }

    pub fn dof_map(&self) -> &[Option<usize>] {
        &self.dof_of_vertex
    }

    /// Nodal values of `u` at the free vertices.
    pub fn interpolate(&self, u: impl Fn(Point) -> f64) -> Vec<f64> {
        self.vertex_of_dof.iter().map(|&v| u(self.mesh.vertex(v))).collect()
    }

    /// Vertex values with zeros on the boundary.
    pub fn expand(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.n_vertices()];
        for (d, &v) in self.vertex_of_dof.iter().enumerate() {
            out[v] = coeffs[d];
        }
        out
    }
}

/// Assembles `sum_K E_K` over the interior dofs.
pub fn assemble(space: &P1Space<'_>, terms: &[Term<'_>]) -> Result<CsrMatrix> {
    let mesh = space.mesh();
    let n = space.n_dofs();
    let nv = mesh.nv();
    let mut t = TripletBuilder::with_capacity(n, n, mesh.n_cells() * nv * nv);
    for k in 0..mesh.n_cells() {
        let e = element_matrix(&mesh.geometry(k), terms)?;
        let c = mesh.cell(k);
        for i in 0..nv {
            let Some(di) = space.dof(c[i]) else { continue };
            for j in 0..nv {
                if let Some(dj) = space.dof(c[j]) {
                    t.push(di, dj, e[i][j]);
                }
            }
        }
    }
    Ok(t.build())
}

pub fn assemble_diffusion(space: &P1Space<'_>, a: &Diffusion) -> Result<CsrMatrix> {
    assemble(space, &[Term::Diffusion(a)])
}

pub fn assemble_convection(space: &P1Space<'_>, b: [f64; 2]) -> CsrMatrix {
    assemble(space, &[Term::Convection(b)]).expect("convection assembly has no failure mode")
}

/// Right-hand side contribution `sum_K tau_K (f, b . grad v)_K`.
#[derive(Clone, Copy, Debug)]
pub struct SupgLoad {
    pub b: [f64; 2],
    pub tau: f64,
}

impl SupgLoad {
    pub fn rhs(&self, space: &P1Space<'_>, f: &Source) -> Vec<f64> {
        assemble_rhs(space, &[LoadTerm::Streamline { f, b: self.b, tau: self.tau }])
    }
}

/// Streamline-diffusion matrix increment and its load counterpart. Only the
/// P1 case is handled here; the multiscale forms are assembled from the
/// basis.
pub fn assemble_supg(space: &P1Space<'_>, b: [f64; 2], stab: &StabParams) -> (CsrMatrix, SupgLoad) {
    let m = assemble(space, &[Term::Streamline { b, tau: stab.tau }]).expect("no coefficient to check");
    (m, SupgLoad { b, tau: stab.tau })
}

pub fn assemble_rhs(space: &P1Space<'_>, terms: &[LoadTerm<'_>]) -> Vec<f64> {
    let mesh = space.mesh();
    let mut rhs = vec![0.0; space.n_dofs()];
    for k in 0..mesh.n_cells() {
        let l = element_load(&mesh.geometry(k), terms);
        for (i, &v) in mesh.cell(k).iter().enumerate() {
            if let Some(d) = space.dof(v) {
                rhs[d] += l[i];
            }
        }
    }
    rhs
}

pub fn assemble_load(space: &P1Space<'_>, f: &Source) -> Vec<f64> {
    assemble_rhs(space, &[LoadTerm::Plain(f)])
}

/// `F_i = int f_h phi_i` for a fine P1 field `f_h` (vertex values) against
/// the coarse hat functions of `space`, integrated exactly on the fine cells.
pub fn assemble_load_fine(space: &P1Space<'_>, hierarchy: &MeshHierarchy, fine_values: &[f64]) -> Result<Vec<f64>> {
    let coarse = hierarchy.coarse();
    let fine = hierarchy.fine();
    if coarse.n_cells() != space.mesh().n_cells() || coarse.dim() != space.mesh().dim() {
        return Err(Error::DimensionMismatch("space does not live on the hierarchy's coarse mesh".into()));
    }
    if fine_values.len() != fine.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "fine field has {} values for {} vertices",
            fine_values.len(),
            fine.n_vertices()
        )));
    }
    let nv = fine.nv();
    let mut rhs = vec![0.0; space.n_dofs()];
    for t in 0..fine.n_cells() {
        let k = hierarchy.parent(t);
        let kc = coarse.cell(k);
        let tc = fine.cell(t);
        let meas = fine.measure(t);
        let fv: Vec<f64> = tc.iter().map(|&v| fine_values[v]).collect();
        let fsum: f64 = fv.iter().sum();
        // hat values of the coarse vertices at the fine vertices
        let lam: Vec<[f64; 3]> = tc.iter().map(|&v| coarse.barycentric(k, fine.vertex(v))).collect();
        let w = meas / (nv * (nv + 1)) as f64;
        for (i, &cv) in kc.iter().enumerate() {
            let Some(d) = space.dof(cv) else { continue };
            let phi: Vec<f64> = lam.iter().map(|l| l[i]).collect();
            let psum: f64 = phi.iter().sum();
            let pair: f64 = fv.iter().zip(&phi).map(|(a, b)| a * b).sum();
            rhs[d] += w * (pair + fsum * psum);
        }
    }
    Ok(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CholeskyFactorization;
    use crate::mesh::{build_structured, refine};

    fn mesh1(n: usize) -> Mesh {
        build_structured(Dim::One, 1.0, n).unwrap()
    }

    fn mesh2(n: usize) -> Mesh {
        build_structured(Dim::Two, 1.0, n).unwrap()
    }

    fn assert_tridiag(m: &CsrMatrix, sub: f64, diag: f64, sup: f64, tol: f64) {
        let n = m.nrows();
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j {
                    diag
                } else if j + 1 == i {
                    sub
                } else if j == i + 1 {
                    sup
                } else {
                    0.0
                };
                assert!((m.get(i, j) - expect).abs() <= tol, "({i},{j}) {} vs {expect}", m.get(i, j));
            }
        }
    }

    #[test]
    fn diffusion_1d_hand_stencil() {
        let m = mesh1(8);
        let s = P1Space::new(&m);
        let a = assemble_diffusion(&s, &Diffusion::Constant(1.0)).unwrap();
        assert_tridiag(&a, -8.0, 16.0, -8.0, 1e-12);
    }

    #[test]
    fn diffusion_2d_spd() {
        let m = mesh2(2);
        let s = P1Space::new(&m);
        let a = assemble_diffusion(&s, &Diffusion::Constant(1.0)).unwrap();
        assert_eq!(a.nrows(), 1);
        assert!((a.get(0, 0) - 4.0).abs() < 1e-14);
        let m = mesh2(6);
        let s = P1Space::new(&m);
        let a = assemble_diffusion(&s, &Diffusion::oscillating(0.3, 0.5, 0.1).unwrap()).unwrap();
        assert!(a.asymmetry() < 1e-14);
        assert!(CholeskyFactorization::new(&a).is_ok());
    }

    #[test]
    fn unoscillating_field_scales_unit_laplacian() {
        let m = mesh1(10);
        let s = P1Space::new(&m);
        let one = assemble_diffusion(&s, &Diffusion::Constant(1.0)).unwrap();
        let a = assemble_diffusion(&s, &Diffusion::oscillating(0.37, 0.0, 0.01).unwrap()).unwrap();
        for i in 0..one.nrows() {
            for j in 0..one.ncols() {
                assert!((a.get(i, j) - 0.37 * one.get(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn non_elliptic_detected() {
        let m = mesh1(4);
        let s = P1Space::new(&m);
        let bad = Diffusion::custom(|x| x[0] - 0.5, -0.5, 0.5);
        assert!(matches!(assemble_diffusion(&s, &bad), Err(Error::NotElliptic { .. })));
    }

    #[test]
    fn convection_1d_hand_stencil() {
        let m = mesh1(8);
        let s = P1Space::new(&m);
        let c = assemble_convection(&s, [1.0, 0.0]);
        assert_tridiag(&c, -0.5, 0.0, 0.5, 1e-14);
        let z = assemble_convection(&s, [0.0, 0.0]);
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn convection_2d_skew() {
        let m = mesh2(8);
        let s = P1Space::new(&m);
        let c = assemble_convection(&s, [1.0, 1.0]);
        assert!(c.asymmetry() > 1e-3);
        let sum = c.add(&c.transpose()).unwrap();
        assert!(sum.max_abs() < 1e-13);
    }

    #[test]
    fn tau_reference_value() {
        // Pe_K = 8: tau = (1/32)(coth 8 - 1/8)
        let t = tau_value(TauMode::Coth, 1.0 / 256.0, 1.0, 1.0 / 16.0);
        let coth8 = (1.0 + (-16.0f64).exp()) / (1.0 - (-16.0f64).exp());
        assert!((t - (coth8 - 0.125) / 32.0).abs() < 1e-16);
        assert!((t - 0.0273438).abs() < 5e-8);
        assert_eq!(tau_value(TauMode::Simple, 1.0, 2.0, 1.0 / 8.0), 1.0 / 32.0);
        let far = tau_value(TauMode::Coth, 1e-12, 1.0, 0.1);
        assert!((far - 0.05).abs() < 1e-10);
    }

    #[test]
    fn langevin_series_matches_direct_form() {
        for p in [1e-3, 1e-2, 2e-2] {
            let direct = 1.0 / f64::tanh(p) - 1.0 / p;
            let series = p * (1.0 / 3.0 - p * p / 45.0 + 2.0 * p.powi(4) / 945.0);
            assert!((direct - series).abs() < 1e-11);
        }
        assert!(langevin(1e-9) > 0.0);
    }

    #[test]
    fn tau_undefined_for_zero_velocity() {
        let p = tau_field(TauMode::Coth, 1.0, [0.0, 0.0], 0.1, Dim::Two, VelocityNorm::Euclidean);
        assert!(p.undefined);
        assert_eq!(p.tau, 0.0);
    }

    #[test]
    fn supg_1d_hand_stencil() {
        let n = 8;
        let m = mesh1(n);
        let s = P1Space::new(&m);
        let tau = 0.5 / n as f64;
        let stab = StabParams { tau, ..StabParams::none() };
        let (inc, load) = assemble_supg(&s, [1.0, 0.0], &stab);
        let nf = n as f64;
        assert_tridiag(&inc, -tau * nf, 2.0 * tau * nf, -tau * nf, 1e-13);
        assert!(load.rhs(&s, &Source::Constant(0.0)).iter().all(|v| *v == 0.0));
        let (zero, _) = assemble_supg(&s, [1.0, 0.0], &StabParams::none());
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn supg_variants_identical_on_p1() {
        let m = mesh2(5);
        let s = P1Space::new(&m);
        let base = tau_field(TauMode::Coth, 0.01, [1.0, 1.0], 0.2, Dim::Two, VelocityNorm::Euclidean);
        let mats: Vec<CsrMatrix> = [StabVariant::DouglasWang, StabVariant::Supg, StabVariant::Gls]
            .into_iter()
            .map(|v| assemble_supg(&s, [1.0, 1.0], &StabParams { variant: v, ..base }).0)
            .collect();
        assert_eq!(mats[0], mats[1]);
        assert_eq!(mats[1], mats[2]);
    }

    #[test]
    fn load_of_unit_source() {
        let m = mesh1(8);
        let s = P1Space::new(&m);
        let f = assemble_load(&s, &Source::Constant(1.0));
        assert!(f.iter().all(|v| (v - 0.125).abs() < 1e-15));
        assert!(assemble_load(&s, &Source::Constant(0.0)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fine_field_load_matches_analytic() {
        for dim in [Dim::One, Dim::Two] {
            let c = build_structured(dim, 1.0, 4).unwrap();
            let h = refine(&c, 3).unwrap();
            let s = P1Space::new(&c);
            let ones = vec![1.0; h.fine().n_vertices()];
            let a = assemble_load_fine(&s, &h, &ones).unwrap();
            let b = assemble_load(&s, &Source::Constant(1.0));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fine_field_load_needs_matching_hierarchy() {
        let c = mesh2(4);
        let other = mesh2(2);
        let h = refine(&c, 2).unwrap();
        let s = P1Space::new(&other);
        assert!(assemble_load_fine(&s, &h, &vec![1.0; h.fine().n_vertices()]).is_err());
    }

    #[test]
    fn peclet_conventions() {
        assert_eq!(global_peclet([1.0, 1.0], 1.0 / 128.0, Dim::Two), 64.0);
        assert_eq!(global_peclet([1.0, 0.0], 0.5, Dim::One), 1.0);
        assert_eq!(global_peclet([1.0, 1.0], 1.0 / 32.0, Dim::Two) / 32.0, 0.5);
    }

    #[test]
    fn assembly_is_linear_in_coefficient() {
        let m = mesh2(6);
        let s = P1Space::new(&m);
        let a1 = Diffusion::oscillating(0.2, 0.4, 0.25).unwrap();
        let a2 = Diffusion::custom(|x| 1.0 + x[1], 1.0, 2.0);
        let sum = assemble_diffusion(&s, &a1.plus(&a2)).unwrap();
        let parts = assemble_diffusion(&s, &a1).unwrap().add(&assemble_diffusion(&s, &a2).unwrap()).unwrap();
        assert!(sum.lin_comb(1.0, &parts, -1.0).unwrap().max_abs() < 1e-13);
    }
}
