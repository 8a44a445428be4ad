//! Multiscale basis functions computed by local fine-mesh solves, coarse
//! assembly through those bases, and fields living on the fine mesh.
//!
//! Every basis function is stored per coarse element as values at the
//! vertices of that element's fine submesh. Conforming and nonconforming
//! spaces share this layout; conforming fields simply agree on shared
//! vertices.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{element_load, element_matrix, Diffusion, LoadTerm, P1Space, Term};
use crate::linalg::{
    cg, dense_solve, gmres, lu_factorize, norm2, CsrMatrix, LinearSolution, LuFactorization, SolverConfig,
    TripletBuilder,
};
use crate::mesh::{oversampling_patch, Dim, Mesh, MeshHierarchy, Submesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    /// Coarse P1 hat functions, sampled on the fine submeshes.
    Hat,
    /// Solutions of `-div(A grad psi) = 0`.
    DiffusionOnly,
    /// Solutions of `-div(A grad phi) + b . grad phi = 0`.
    AdvectionDiffusion,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundaryVariant {
    /// Affine Dirichlet data on the element boundary.
    Linear,
    /// Affine data on an enlarged patch, restricted to the element.
    Oversampling { ratio: f64 },
    /// Edge-average constraints with natural flux conditions.
    CrouzeixRaviart,
}

impl BoundaryVariant {
    pub fn label(&self) -> &'static str {
        match self {
            BoundaryVariant::Linear => "lin",
            BoundaryVariant::Oversampling { .. } => "os",
            BoundaryVariant::CrouzeixRaviart => "cr",
        }
    }
}

/// How the local problems are solved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalSolver {
    Direct,
    /// GMRES for advective problems, CG for symmetric ones. Constrained
    /// (Crouzeix-Raviart) systems always use the direct solver.
    Iterative { gmres: SolverConfig, cg: SolverConfig },
}

impl LocalSolver {
    pub fn iterative() -> Self {
        LocalSolver::Iterative { gmres: SolverConfig::gmres(), cg: SolverConfig::cg() }
    }
}

/// Local basis of one coarse element.
#[derive(Clone, Debug)]
pub struct ElementBasis {
    /// Global dof of each local function (`None` on the Dirichlet boundary).
    pub dofs: Vec<Option<usize>>,
    /// Values of each local function at the element's submesh vertices.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct MultiscaleSpace {
    hierarchy: Arc<MeshHierarchy>,
    kind: BasisKind,
    variant: BoundaryVariant,
    n_dofs: usize,
    elements: Vec<ElementBasis>,
    conforming: bool,
    /// Largest relative residual over all local solves.
    pub local_residual: f64,
    /// Total iterations spent by iterative local solves.
    pub local_iterations: usize,
}

/// Fine-mesh field stored per coarse element on the submesh vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct BrokenField {
    pub values: Vec<Vec<f64>>,
}

impl BrokenField {
    pub fn zeros(h: &MeshHierarchy) -> Self {
        BrokenField { values: h.submeshes().iter().map(|s| vec![0.0; s.n_vertices()]).collect() }
    }

    /// Restriction of a continuous field given by fine vertex values.
    pub fn from_nodal(h: &MeshHierarchy, nodal: &[f64]) -> Result<Self> {
        if nodal.len() != h.fine().n_vertices() {
            return Err(Error::DimensionMismatch(format!(
                "{} nodal values for {} fine vertices",
                nodal.len(),
                h.fine().n_vertices()
            )));
        }
        Ok(BrokenField {
            values: h.submeshes().iter().map(|s| s.vertices.iter().map(|&v| nodal[v]).collect()).collect(),
        })
    }

    pub fn from_fn(h: &MeshHierarchy, u: impl Fn([f64; 2]) -> f64) -> Self {
        let fine = h.fine();
        BrokenField {
            values: h.submeshes().iter().map(|s| s.vertices.iter().map(|&v| u(fine.vertex(v))).collect()).collect(),
        }
    }

    /// Fine vertex values, averaging over the elements sharing a vertex.
    pub fn to_nodal(&self, h: &MeshHierarchy) -> Vec<f64> {
        let n = h.fine().n_vertices();
        let mut sum = vec![0.0; n];
        let mut count = vec![0u32; n];
        for (s, vals) in h.submeshes().iter().zip(&self.values) {
            for (&v, &x) in s.vertices.iter().zip(vals) {
                sum[v] += x;
                count[v] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }

    /// Largest jump between element copies of the same fine vertex.
    pub fn max_jump(&self, h: &MeshHierarchy) -> f64 {
        let n = h.fine().n_vertices();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for (s, vals) in h.submeshes().iter().zip(&self.values) {
            for (&v, &x) in s.vertices.iter().zip(vals) {
                lo[v] = lo[v].min(x);
                hi[v] = hi[v].max(x);
            }
        }
        lo.iter().zip(&hi).filter(|(l, _)| l.is_finite()).map(|(l, h)| h - l).fold(0.0, f64::max)
    }

    pub fn scaled(&self, a: f64) -> Self {
        BrokenField { values: self.values.iter().map(|v| v.iter().map(|x| a * x).collect()).collect() }
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: f64, other: &BrokenField, b: f64) -> Self {
        BrokenField {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect())
                .collect(),
        }
    }

    /// Values at the vertices of fine cell `t` (third entry unused in 1D).
    #[inline]
    pub fn cell_values(&self, h: &MeshHierarchy, t: usize) -> [f64; 3] {
        let k = h.parent(t);
        let loc = h.submesh(k).local[h.child_index(t)];
        let vals = &self.values[k];
        let nv = h.fine().nv();
        let mut out = [0.0; 3];
        for i in 0..nv {
            out[i] = vals[loc[i] as usize];
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Submesh-level Dirichlet problem: `terms` assembled on `cells`, with values
/// prescribed at `fixed` vertices. Each entry of `data` holds values at all
/// submesh vertices, of which only the fixed ones are read. Returns the
/// solutions (full vertex vectors), the iterations and the worst relative
/// residual.
#[allow(clippy::too_many_arguments)]
fn solve_dirichlet(
    fine: &Mesh,
    sub: &Submesh,
    fixed: &[bool],
    terms: &[Term<'_>],
    data: &[Vec<f64>],
    symmetric: bool,
    solver: &LocalSolver,
) -> Result<(Vec<Vec<f64>>, usize, f64)> {
    let nsv = sub.n_vertices();
    let nv = fine.nv();
    let mut free_index = vec![usize::MAX; nsv];
    let mut nfree = 0;
    for v in 0..nsv {
        if !fixed[v] {
            free_index[v] = nfree;
            nfree += 1;
        }
    }
    let mut t = TripletBuilder::with_capacity(nfree, nfree, sub.cells.len() * nv * nv);
    let mut rhs = vec![vec![0.0; nfree]; data.len()];
    for (c, &cell) in sub.cells.iter().enumerate() {
        let e = element_matrix(&fine.geometry(cell), terms)?;
        let loc = &sub.local[c];
        for i in 0..nv {
            let li = loc[i] as usize;
            let fi = free_index[li];
            if fi == usize::MAX {
                continue;
            }
            for j in 0..nv {
                let lj = loc[j] as usize;
                let fj = free_index[lj];
                if fj == usize::MAX {
                    for (r, d) in rhs.iter_mut().zip(data) {
                        r[fi] -= e[i][j] * d[lj];
                    }
                } else {
                    t.push(fi, fj, e[i][j]);
                }
            }
        }
    }
    let a = t.build();
    let mut out = Vec::with_capacity(data.len());
    let mut iterations = 0;
    let mut worst: f64 = 0.0;
    let lu = match solver {
        LocalSolver::Direct => Some(lu_factorize(&a)?),
        _ => None,
    };
    for (r, d) in rhs.iter().zip(data) {
        let x = match (solver, &lu) {
            (_, Some(f)) => f.solve(r),
            (LocalSolver::Iterative { gmres: gc, cg: cc }, None) => {
                let s: LinearSolution = if symmetric { cg(&a, r, cc, None)? } else { gmres(&a, r, gc, None)? };
                iterations += s.iterations;
                s.x
            }
            _ => unreachable!(),
        };
        let rn = norm2(r);
        if rn > 0.0 {
            let res = crate::linalg::residual(&a, &x, r);
            worst = worst.max(norm2(&res) / rn);
        }
        let mut full = d.clone();
        for v in 0..nsv {
            if free_index[v] != usize::MAX {
                full[v] = x[free_index[v]];
            }
        }
        out.push(full);
    }
    Ok((out, iterations, worst))
}

fn local_terms<'a>(kind: BasisKind, a: &'a Diffusion, b: [f64; 2], fine_tau: Option<f64>) -> Vec<Term<'a>> {
    match (kind, fine_tau) {
        (BasisKind::AdvectionDiffusion, Some(tau)) => vec![Term::Diffusion(a), Term::Convection(b), Term::Streamline { b, tau }],
        (BasisKind::AdvectionDiffusion, None) => vec![Term::Diffusion(a), Term::Convection(b)],
        _ => vec![Term::Diffusion(a)],
    }
}

/// Coarse P1 hat functions of `h`, as a multiscale space.
pub fn hat_space(h: &Arc<MeshHierarchy>) -> MultiscaleSpace {
    build_space(h, BasisKind::Hat, &Diffusion::Constant(1.0), [0.0; 2], BoundaryVariant::Linear, &LocalSolver::Direct)
        .expect("hat functions need no local solve")
}

pub fn build_space(
    h: &Arc<MeshHierarchy>,
    kind: BasisKind,
    a: &Diffusion,
    b: [f64; 2],
    variant: BoundaryVariant,
    solver: &LocalSolver,
) -> Result<MultiscaleSpace> {
    build_space_with(h, kind, a, b, variant, solver, None)
}

/// As [`build_space`], with an optional streamline-diffusion term of
/// parameter `fine_tau` added to the fine discretization of the advective
/// local problems. With the coth parameter of the fine mesh this makes the
/// 1D local solves nodally exact.
pub fn build_space_with(
    h: &Arc<MeshHierarchy>,
    kind: BasisKind,
    a: &Diffusion,
    b: [f64; 2],
    variant: BoundaryVariant,
    solver: &LocalSolver,
    fine_tau: Option<f64>,
) -> Result<MultiscaleSpace> {
    let coarse = h.coarse();
    let fine = h.fine();
    let nv = coarse.nv();
    let variant = if kind == BasisKind::Hat { BoundaryVariant::Linear } else { variant };
    if let BoundaryVariant::Oversampling { ratio } = variant {
        if !(ratio >= 1.0) {
            return Err(Error::invalid(format!("oversampling ratio must be >= 1, got {ratio}")));
        }
    }
    let b = if kind == BasisKind::AdvectionDiffusion { b } else { [0.0; 2] };
    let terms = local_terms(kind, a, b, fine_tau);
    let symmetric = kind != BasisKind::AdvectionDiffusion;

    // global dof numbering
    let (n_dofs, dof_of) = match variant {
        BoundaryVariant::CrouzeixRaviart => {
            let faces = coarse.faces();
            let mut map = vec![None; faces.len()];
            let mut n = 0;
            for (f, &bd) in faces.boundary.iter().enumerate() {
                if !bd {
                    map[f] = Some(n);
                    n += 1;
                }
            }
            let per_cell: Vec<Vec<Option<usize>>> =
                faces.cell_faces.iter().map(|cf| (0..nv).map(|i| map[cf[i]]).collect()).collect();
            (n, per_cell)
        }
        _ => {
            let p1 = P1Space::new(coarse);
            let per_cell = (0..coarse.n_cells()).map(|k| coarse.cell(k).iter().map(|&v| p1.dof(v)).collect()).collect();
            (p1.n_dofs(), per_cell)
        }
    };

    let mut elements = Vec::with_capacity(coarse.n_cells());
    let mut worst: f64 = 0.0;
    let mut iterations = 0;
    for k in 0..coarse.n_cells() {
        let sub = h.submesh(k);
        let lam: Vec<[f64; 3]> = sub.vertices.iter().map(|&v| coarse.barycentric(k, fine.vertex(v))).collect();
        let hats: Vec<Vec<f64>> = (0..nv).map(|i| lam.iter().map(|l| l[i]).collect()).collect();
        let wrap = |e: Error| Error::LocalProblem { element: k, source: Box::new(e) };
        let values = match (kind, variant) {
            (BasisKind::Hat, _) => hats,
            (_, BoundaryVariant::Linear) => {
                let (v, it, res) = solve_dirichlet(fine, sub, &sub.boundary, &terms, &hats, symmetric, solver).map_err(wrap)?;
                iterations += it;
                worst = worst.max(res);
                v
            }
            (_, BoundaryVariant::Oversampling { ratio }) => {
                let patch = oversampling_patch(h, k, ratio).map_err(wrap)?;
                let ps = &patch.submesh;
                let data: Vec<Vec<f64>> = {
                    let coords: Vec<[f64; 3]> =
                        ps.vertices.iter().map(|&v| patch.simplex_coordinates(fine.vertex(v))).collect();
                    (0..nv).map(|m| coords.iter().map(|c| c[m]).collect()).collect()
                };
                let (chi, it, res) =
                    solve_dirichlet(fine, ps, &ps.boundary, &terms, &data, symmetric, solver).map_err(wrap)?;
                iterations += it;
                worst = worst.max(res);
                // restrict to the element's submesh
                let pos: Vec<usize> = sub
                    .vertices
                    .iter()
                    .map(|&v| ps.local_index(v).ok_or_else(|| wrap(Error::invalid("patch does not cover its element"))))
                    .collect::<Result<_>>()?;
                let restricted: Vec<Vec<f64>> = chi.iter().map(|c| pos.iter().map(|&p| c[p]).collect()).collect();
                // recombine so that the values at the element vertices are a
                // Kronecker delta
                let corner: Vec<usize> = coarse
                    .cell(k)
                    .iter()
                    .map(|&cv| sub.local_index(h.fine_vertex(cv)).expect("coarse vertex in submesh"))
                    .collect();
                let cmat: Vec<Vec<f64>> = corner.iter().map(|&a| (0..nv).map(|m| restricted[m][a]).collect()).collect();
                let mut out = Vec::with_capacity(nv);
                for i in 0..nv {
                    let e: Vec<f64> = (0..nv).map(|a| if a == i { 1.0 } else { 0.0 }).collect();
                    let c = dense_solve(&cmat, &e).map_err(wrap)?;
                    let mut v = vec![0.0; sub.n_vertices()];
                    for (m, cm) in c.iter().enumerate() {
                        for (x, r) in v.iter_mut().zip(&restricted[m]) {
                            *x += cm * r;
                        }
                    }
                    out.push(v);
                }
                out
            }
            (_, BoundaryVariant::CrouzeixRaviart) => {
                let (v, res) = solve_crouzeix_raviart(h, k, &terms).map_err(wrap)?;
                worst = worst.max(res);
                v
            }
        };
        elements.push(ElementBasis { dofs: dof_of[k].clone(), values });
    }
    Ok(MultiscaleSpace {
        hierarchy: Arc::clone(h),
        kind,
        variant,
        n_dofs,
        elements,
        conforming: matches!(variant, BoundaryVariant::Linear),
        local_residual: worst,
        local_iterations: iterations,
    })
}

/// Averaging weights of the face functionals of coarse element `k`, as
/// `(submesh vertex, weight)` lists. Face `i` joins local vertices `i` and
/// `i + 1` in 2D and is local vertex `i` in 1D.
fn face_functionals(h: &MeshHierarchy, k: usize) -> Vec<Vec<(usize, f64)>> {
    let coarse = h.coarse();
    let fine = h.fine();
    let sub = h.submesh(k);
    let c = coarse.cell(k);
    match coarse.dim() {
        Dim::One => (0..2).map(|i| vec![(sub.local_index(h.fine_vertex(c[i])).unwrap(), 1.0)]).collect(),
        Dim::Two => (0..3)
            .map(|i| {
                let opp = (i + 2) % 3;
                let (p, q) = (coarse.vertex(c[i]), coarse.vertex(c[(i + 1) % 3]));
                let len2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
                let mut on_edge: Vec<(f64, usize)> = sub
                    .vertices
                    .iter()
                    .enumerate()
                    .filter_map(|(l, &v)| {
                        let x = fine.vertex(v);
                        let lam = coarse.barycentric(k, x);
                        (lam[opp].abs() < 1e-10).then(|| (((x[0] - p[0]) * (q[0] - p[0]) + (x[1] - p[1]) * (q[1] - p[1])) / len2, l))
                    })
                    .collect();
                on_edge.sort_by(|a, b| a.0.total_cmp(&b.0));
                let m = on_edge.len();
                (0..m)
                    .map(|j| {
                        let left = if j > 0 { on_edge[j].0 - on_edge[j - 1].0 } else { 0.0 };
                        let right = if j + 1 < m { on_edge[j + 1].0 - on_edge[j].0 } else { 0.0 };
                        (on_edge[j].1, 0.5 * (left + right))
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Natural boundary conditions plus one multiplier per face enforcing the
/// face averages; the system is solved directly.
fn solve_crouzeix_raviart(h: &MeshHierarchy, k: usize, terms: &[Term<'_>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let fine = h.fine();
    let sub = h.submesh(k);
    let nsv = sub.n_vertices();
    let nv = fine.nv();
    let faces = face_functionals(h, k);
    let nf = faces.len();
    let n = nsv + nf;
    let mut t = TripletBuilder::with_capacity(n, n, sub.cells.len() * nv * nv + 4 * nsv);
    for (c, &cell) in sub.cells.iter().enumerate() {
        let e = element_matrix(&fine.geometry(cell), terms)?;
        let loc = &sub.local[c];
        for i in 0..nv {
            for j in 0..nv {
                t.push(loc[i] as usize, loc[j] as usize, e[i][j]);
            }
        }
    }
    for (f, w) in faces.iter().enumerate() {
        for &(l, wt) in w {
            t.push(nsv + f, l, wt);
            t.push(l, nsv + f, wt);
        }
    }
    let a = t.build();
    let lu: LuFactorization = lu_factorize(&a)?;
    let mut out = Vec::with_capacity(nf);
    let mut worst: f64 = 0.0;
    for i in 0..nf {
        let mut r = vec![0.0; n];
        r[nsv + i] = 1.0;
        let x = lu.solve(&r);
        let res = crate::linalg::residual(&a, &x, &r);
        worst = worst.max(norm2(&res));
        out.push(x[..nsv].to_vec());
    }
    Ok((out, worst))
}

impl MultiscaleSpace {
    pub fn hierarchy(&self) -> &Arc<MeshHierarchy> {
        &self.hierarchy
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn variant(&self) -> BoundaryVariant {
        self.variant
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn is_conforming(&self) -> bool {
        self.conforming
    }

    pub fn element(&self, k: usize) -> &ElementBasis {
        &self.elements[k]
    }

    pub fn elements(&self) -> &[ElementBasis] {
        &self.elements
    }

    /// `sum_j c_j psi_j` on the fine mesh.
    pub fn field(&self, coeffs: &[f64]) -> BrokenField {
        assert_eq!(coeffs.len(), self.n_dofs, "coefficient vector has wrong length");
        BrokenField {
            values: self
                .elements
                .iter()
                .map(|e| {
                    let mut v = vec![0.0; e.values.first().map_or(0, |x| x.len())];
                    for (d, vals) in e.dofs.iter().zip(&e.values) {
                        if let Some(d) = d {
                            let c = coeffs[*d];
                            if c != 0.0 {
                                for (x, y) in v.iter_mut().zip(vals) {
                                    *x += c * y;
                                }
                            }
                        }
                    }
                    v
                })
                .collect(),
        }
    }

    /// Field of a single basis function.
    pub fn basis_field(&self, dof: usize) -> BrokenField {
        let mut c = vec![0.0; self.n_dofs];
        c[dof] = 1.0;
        self.field(&c)
    }

    /// Largest `|sum_i psi_i - 1|` over all submesh vertices, including the
    /// local functions attached to boundary dofs.
    pub fn partition_of_unity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.elements {
            let n = e.values[0].len();
            for v in 0..n {
                let s: f64 = e.values.iter().map(|f| f[v]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    fn same_hierarchy(&self, other: &MultiscaleSpace) -> Result<()> {
        if Arc::ptr_eq(&self.hierarchy, &other.hierarchy) {
            return Ok(());
        }
        let (a, b) = (&self.hierarchy, &other.hierarchy);
        if a.coarse().n_cells() == b.coarse().n_cells()
            && a.fine().n_cells() == b.fine().n_cells()
            && a.coarse().dim() == b.coarse().dim()
        {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("spaces live on different hierarchies".into()))
        }
    }

    /// Basis cache in a line-oriented text format.
    pub fn write_cache<W: Write>(&self, mut w: W, key: &str) -> std::io::Result<()> {
        writeln!(w, "msfem-basis 1 {key}")?;
        writeln!(w, "{} {} {}", self.elements.len(), self.n_dofs, u8::from(self.conforming))?;
        for e in &self.elements {
            let d: Vec<String> = e.dofs.iter().map(|d| d.map_or("-".to_string(), |x| x.to_string())).collect();
            writeln!(w, "{}", d.join(" "))?;
            for v in &e.values {
                let s: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
                writeln!(w, "{}", s.join(" "))?;
            }
        }
        Ok(())
    }

    /// Reads a cache written by [`write_cache`](Self::write_cache); fails if
    /// the key or the element layout does not match.
    pub fn read_cache<R: BufRead>(
        r: R,
        h: &Arc<MeshHierarchy>,
        key: &str,
        kind: BasisKind,
        variant: BoundaryVariant,
    ) -> Result<MultiscaleSpace> {
        let bad = |m: &str| Error::invalid(format!("basis cache: {m}"));
        let mut lines = r.lines();
        let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("truncated"))?.map_err(Error::from) };
        let head = next()?;
        if head != format!("msfem-basis 1 {key}") {
            return Err(bad("key mismatch"));
        }
        let meta: Vec<usize> = next()?.split_whitespace().map(|s| s.parse().map_err(|_| bad("bad header"))).collect::<Result<_>>()?;
        if meta.len() != 3 || meta[0] != h.coarse().n_cells() {
            return Err(bad("element count mismatch"));
        }
        let mut elements = Vec::with_capacity(meta[0]);
        for k in 0..meta[0] {
            let dofs: Vec<Option<usize>> = next()?
                .split_whitespace()
                .map(|s| if s == "-" { Ok(None) } else { s.parse().map(Some).map_err(|_| bad("bad dof")) })
                .collect::<Result<_>>()?;
            let mut values = Vec::with_capacity(dofs.len());
            for _ in 0..dofs.len() {
                let v: Vec<f64> = next()?.split_whitespace().map(|s| s.parse().map_err(|_| bad("bad value"))).collect::<Result<_>>()?;
                if v.len() != h.submesh(k).n_vertices() {
                    return Err(bad("submesh size mismatch"));
                }
                values.push(v);
            }
            elements.push(ElementBasis { dofs, values });
        }
        Ok(MultiscaleSpace {
            hierarchy: Arc::clone(h),
            kind,
            variant,
            n_dofs: meta[1],
            elements,
            conforming: meta[2] == 1,
            local_residual: 0.0,
            local_iterations: 0,
        })
    }
}

/// Per fine cell, the element matrix of `terms` applied to pairs of local
/// functions; `visit(k, i, j, value)` receives each element contribution.
fn for_each_pair(
    test: &MultiscaleSpace,
    trial: &MultiscaleSpace,
    terms: &[Term<'_>],
    mut visit: impl FnMut(usize, usize, usize, f64),
) -> Result<()> {
    test.same_hierarchy(trial)?;
    let h = test.hierarchy();
    let fine = h.fine();
    let nv = fine.nv();
    for k in 0..h.coarse().n_cells() {
        let sub = h.submesh(k);
        let (te, tr) = (&test.elements[k], &trial.elements[k]);
        let (ni, nj) = (te.values.len(), tr.values.len());
        let mut local = [[0.0; 3]; 3];
        for (c, &cell) in sub.cells.iter().enumerate() {
            let e = element_matrix(&fine.geometry(cell), terms)?;
            let loc = &sub.local[c];
            let mut u = [[0.0; 3]; 3];
            let mut v = [[0.0; 3]; 3];
            for a in 0..nv {
                let l = loc[a] as usize;
                for j in 0..nj {
                    u[j][a] = tr.values[j][l];
                }
                for i in 0..ni {
                    v[i][a] = te.values[i][l];
                }
            }
            for i in 0..ni {
                // w = E^T-contracted test values
                let mut w = [0.0; 3];
                for a in 0..nv {
                    for bb in 0..nv {
                        w[bb] += v[i][a] * e[a][bb];
                    }
                }
                for j in 0..nj {
                    let mut s = 0.0;
                    for bb in 0..nv {
                        s += w[bb] * u[j][bb];
                    }
                    local[i][j] += s;
                }
            }
        }
        for i in 0..ni {
            for j in 0..nj {
                visit(k, i, j, local[i][j]);
            }
        }
    }
    Ok(())
}

/// `M[i][j] = form(trial_j, test_i)`, assembled element by element through
/// the fine submeshes.
pub fn coarse_assemble(test: &MultiscaleSpace, trial: &MultiscaleSpace, terms: &[Term<'_>]) -> Result<CsrMatrix> {
    let mut t = TripletBuilder::new(test.n_dofs, trial.n_dofs);
    let (te, tr) = (&test.elements, &trial.elements);
    for_each_pair(test, trial, terms, |k, i, j, v| {
        if let (Some(di), Some(dj)) = (te[k].dofs[i], tr[k].dofs[j]) {
            t.push(di, dj, v);
        }
    })?;
    Ok(t.build())
}

/// `F_i = l(psi_i)` for a linear form given by load terms.
pub fn coarse_load(space: &MultiscaleSpace, terms: &[LoadTerm<'_>]) -> Vec<f64> {
    let h = space.hierarchy();
    let fine = h.fine();
    let nv = fine.nv();
    let mut rhs = vec![0.0; space.n_dofs];
    for k in 0..h.coarse().n_cells() {
        let sub = h.submesh(k);
        let el = &space.elements[k];
        for (c, &cell) in sub.cells.iter().enumerate() {
            let g = fine.geometry(cell);
            let l = element_load(&g, terms);
            // the fine-cell load is linear in the P1 test function, so
            // pairing the hat loads with the local values integrates exactly
            // for the plain term and exactly for the gradient term
            let loc = &sub.local[c];
            for (d, vals) in el.dofs.iter().zip(&el.values) {
                if let Some(d) = d {
                    let mut s = 0.0;
                    for a in 0..nv {
                        s += l[a] * vals[loc[a] as usize];
                    }
                    rhs[*d] += s;
                }
            }
        }
    }
    rhs
}

/// `r_i = form(field, psi_i)`, integrated on the fine mesh.
pub fn pairing(space: &MultiscaleSpace, field: &BrokenField, terms: &[Term<'_>]) -> Result<Vec<f64>> {
    let h = space.hierarchy();
    let fine = h.fine();
    let nv = fine.nv();
    let mut r = vec![0.0; space.n_dofs];
    for k in 0..h.coarse().n_cells() {
        let sub = h.submesh(k);
        let el = &space.elements[k];
        let fv = &field.values[k];
        for (c, &cell) in sub.cells.iter().enumerate() {
            let e = element_matrix(&fine.geometry(cell), terms)?;
            let loc = &sub.local[c];
            let mut eu = [0.0; 3];
            for a in 0..nv {
                for bb in 0..nv {
                    eu[a] += e[a][bb] * fv[loc[bb] as usize];
                }
            }
            for (d, vals) in el.dofs.iter().zip(&el.values) {
                if let Some(d) = d {
                    let mut s = 0.0;
                    for a in 0..nv {
                        s += vals[loc[a] as usize] * eu[a];
                    }
                    r[*d] += s;
                }
            }
        }
    }
    Ok(r)
}

/// Bilinear form defining a Galerkin projection onto a space.
#[derive(Clone, Debug)]
pub enum ProjectionForm {
    /// `c (grad u, grad v)`
    Laplace(f64),
    /// `((beta + A) grad u, grad v)`
    ShiftedDiffusion { beta: f64, diffusion: Diffusion },
}

/// Galerkin projection: coefficients `p` with `a(sum p_j psi_j, psi_i) =
/// a(v, psi_i)` for every basis function.
pub fn project_onto_space(v: &BrokenField, space: &MultiscaleSpace, form: &ProjectionForm) -> Result<Vec<f64>> {
    let shifted;
    let terms: Vec<Term<'_>> = match form {
        ProjectionForm::Laplace(c) => vec![Term::Laplace(*c)],
        ProjectionForm::ShiftedDiffusion { beta, diffusion } => {
            shifted = diffusion.shifted(*beta);
            vec![Term::Diffusion(&shifted)]
        }
    };
    let gram = coarse_assemble(space, space, &terms)?;
    let rhs = pairing(space, v, &terms)?;
    let f = lu_factorize(&gram)?;
    crate::linalg::lu_solve(&f, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, Source};
    use crate::mesh::{build_structured, refine};

    fn hier(dim: Dim, n: usize, r: usize) -> Arc<MeshHierarchy> {
        Arc::new(refine(&build_structured(dim, 1.0, n).unwrap(), r).unwrap())
    }

    fn osc() -> Diffusion {
        Diffusion::oscillating(0.05, 0.6, 0.07).unwrap()
    }

    #[test]
    fn constant_coefficient_basis_is_hat() {
        let h = hier(Dim::Two, 3, 4);
        let hat = hat_space(&h);
        for kind in [BasisKind::DiffusionOnly, BasisKind::AdvectionDiffusion] {
            let s = build_space(&h, kind, &Diffusion::Constant(0.3), [0.0, 0.0], BoundaryVariant::Linear, &LocalSolver::Direct)
                .unwrap();
            for (a, b) in s.elements().iter().zip(hat.elements()) {
                for (u, v) in a.values.iter().zip(&b.values) {
                    for (x, y) in u.iter().zip(v) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_coefficient_stiffness_equals_p1() {
        let h = hier(Dim::Two, 4, 3);
        let s = build_space(&h, BasisKind::DiffusionOnly, &Diffusion::Constant(0.3), [0.0; 2], BoundaryVariant::Linear, &LocalSolver::Direct)
            .unwrap();
        let a = coarse_assemble(&s, &s, &[Term::Diffusion(&Diffusion::Constant(0.3))]).unwrap();
        let p1 = P1Space::new(h.coarse());
        let b = assemble(&p1, &[Term::Laplace(0.3)]).unwrap();
        assert!(a.lin_comb(1.0, &b, -1.0).unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn harmonic_profile_in_1d() {
        let h = hier(Dim::One, 4, 64);
        let a = osc();
        let s = build_space(&h, BasisKind::DiffusionOnly, &a, [0.0; 2], BoundaryVariant::Linear, &LocalSolver::Direct).unwrap();
        let fine = h.fine();
        for k in 0..4 {
            let sub = h.submesh(k);
            // discrete harmonic coordinate: cumulative midpoint sums of h/A
            let mut acc = vec![0.0];
            for &c in &sub.cells {
                let g = fine.geometry(c);
                acc.push(acc.last().unwrap() + g.measure / a.eval(g.barycenter));
            }
            let total = *acc.last().unwrap();
            for (l, &v) in sub.vertices.iter().enumerate() {
                let expect = acc[l] / total;
                let _ = v;
                assert!((s.element(k).values[1][l] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_of_unity_all_variants() {
        let h = hier(Dim::Two, 4, 6);
        let a = osc();
        for kind in [BasisKind::DiffusionOnly, BasisKind::AdvectionDiffusion] {
            for v in [BoundaryVariant::Linear, BoundaryVariant::Oversampling { ratio: 3.0 }, BoundaryVariant::CrouzeixRaviart] {
                let s = build_space(&h, kind, &a, [1.0, 1.0], v, &LocalSolver::Direct).unwrap();
                assert!(s.partition_of_unity_defect() < 1e-10, "{kind:?} {v:?}: {}", s.partition_of_unity_defect());
                assert!(s.local_residual < 1e-10);
            }
        }
    }

    #[test]
    fn crouzeix_raviart_dofs_are_interior_edges() {
        let h = hier(Dim::Two, 4, 4);
        let s = build_space(&h, BasisKind::DiffusionOnly, &osc(), [0.0; 2], BoundaryVariant::CrouzeixRaviart, &LocalSolver::Direct).unwrap();
        assert_eq!(s.n_dofs(), 3 * 16 + 8 - 16);
        assert!(!s.is_conforming());
        // each basis function has unit average on its own edge
        let faces = face_functionals(&h, 5);
        for (i, w) in faces.iter().enumerate() {
            for (j, vals) in s.element(5).values.iter().enumerate() {
                let avg: f64 = w.iter().map(|&(l, wt)| wt * vals[l]).sum();
                assert!((avg - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn crouzeix_raviart_in_1d_is_linear_variant() {
        let h = hier(Dim::One, 5, 16);
        let a = osc();
        let lin = build_space(&h, BasisKind::AdvectionDiffusion, &a, [1.0, 0.0], BoundaryVariant::Linear, &LocalSolver::Direct).unwrap();
        let cr = build_space(&h, BasisKind::AdvectionDiffusion, &a, [1.0, 0.0], BoundaryVariant::CrouzeixRaviart, &LocalSolver::Direct).unwrap();
        assert_eq!(lin.n_dofs(), cr.n_dofs());
        for (p, q) in lin.elements().iter().zip(cr.elements()) {
            for (u, v) in p.values.iter().zip(&q.values) {
                for (x, y) in u.iter().zip(v) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn oversampling_matches_vertex_values() {
        let h = hier(Dim::Two, 4, 6);
        let s = build_space(&h, BasisKind::DiffusionOnly, &osc(), [0.0; 2], BoundaryVariant::Oversampling { ratio: 3.0 }, &LocalSolver::Direct)
            .unwrap();
        let coarse = h.coarse();
        for k in 0..coarse.n_cells() {
            let sub = h.submesh(k);
            for (a, &cv) in coarse.cell(k).iter().enumerate() {
                let l = sub.local_index(h.fine_vertex(cv)).unwrap();
                for i in 0..3 {
                    let e = if a == i { 1.0 } else { 0.0 };
                    assert!((s.element(k).values[i][l] - e).abs() < 1e-10);
                }
            }
        }
        assert!(!s.is_conforming());
        assert!(s.field(&vec![1.0; s.n_dofs()]).max_jump(&h) > 0.0);
    }

    #[test]
    fn iterative_local_solver_agrees_with_direct() {
        let h = hier(Dim::Two, 2, 8);
        let a = osc();
        for kind in [BasisKind::DiffusionOnly, BasisKind::AdvectionDiffusion] {
            let d = build_space(&h, kind, &a, [1.0, 1.0], BoundaryVariant::Linear, &LocalSolver::Direct).unwrap();
            let it = build_space(&h, kind, &a, [1.0, 1.0], BoundaryVariant::Linear, &LocalSolver::iterative()).unwrap();
            assert!(it.local_iterations > 0);
            let diff = d.field(&vec![1.0; d.n_dofs()]).lin_comb(1.0, &it.field(&vec![1.0; it.n_dofs()]), -1.0);
            assert!(diff.max_abs() < 1e-8);
        }
    }

    #[test]
    fn hat_load_matches_p1_load() {
        let h = hier(Dim::Two, 4, 3);
        let s = hat_space(&h);
        let f = Source::Constant(1.0);
        let a = coarse_load(&s, &[LoadTerm::Plain(&f)]);
        let b = crate::fem::assemble_load(&P1Space::new(h.coarse()), &f);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let h = hier(Dim::Two, 3, 6);
        let s = build_space(&h, BasisKind::DiffusionOnly, &osc(), [0.0; 2], BoundaryVariant::Linear, &LocalSolver::Direct).unwrap();
        let c: Vec<f64> = (0..s.n_dofs()).map(|i| (i as f64 + 0.5).sin()).collect();
        let v = s.field(&c);
        let p = project_onto_space(&v, &s, &ProjectionForm::Laplace(2.0)).unwrap();
        for (x, y) in p.iter().zip(&c) {
            assert!((x - y).abs() < 1e-11);
        }
        let z = project_onto_space(&BrokenField::zeros(&h), &s, &ProjectionForm::Laplace(1.0)).unwrap();
        assert!(z.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cache_round_trip() {
        let h = hier(Dim::Two, 2, 4);
        let s = build_space(&h, BasisKind::AdvectionDiffusion, &osc(), [1.0, 1.0], BoundaryVariant::CrouzeixRaviart, &LocalSolver::Direct).unwrap();
        let mut buf = Vec::new();
        s.write_cache(&mut buf, "eps=0.07 H=0.5 h=0.125").unwrap();
        let back = MultiscaleSpace::read_cache(&buf[..], &h, "eps=0.07 H=0.5 h=0.125", s.kind(), s.variant()).unwrap();
        assert_eq!(back.n_dofs(), s.n_dofs());
        assert_eq!(back.is_conforming(), s.is_conforming());
        for (a, b) in back.elements().iter().zip(s.elements()) {
            assert_eq!(a.dofs, b.dofs);
            assert_eq!(a.values, b.values);
        }
        assert!(MultiscaleSpace::read_cache(&buf[..], &h, "other", s.kind(), s.variant()).is_err());
    }

    #[test]
    fn broken_field_nodal_round_trip() {
        let h = hier(Dim::Two, 3, 4);
        let nodal: Vec<f64> = (0..h.fine().n_vertices()).map(|i| i as f64 * 0.01).collect();
        let f = BrokenField::from_nodal(&h, &nodal).unwrap();
        for (a, b) in f.to_nodal(&h).iter().zip(&nodal) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(f.max_jump(&h), 0.0);
    }
}
