//! Structured simplicial meshes on `(0, L)` and `(0, L)^2`, nested refinement,
//! oversampling patches and the boundary-layer classification of fine cells.
//!
//! 2D meshes are built from `n x n` squares, each split along its `(+1, +1)`
//! diagonal into a lower triangle `[v00, v10, v11]` and an upper triangle
//! `[v00, v11, v01]`. Vertices are numbered row by row, `x` fastest.

use std::collections::HashMap;
use std::io::{self, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dim {
    One,
    Two,
}

impl Dim {
    pub fn from_usize(d: usize) -> Result<Dim> {
        match d {
            1 => Ok(Dim::One),
            2 => Ok(Dim::Two),
            _ => Err(Error::invalid(format!("dimension must be 1 or 2, got {d}"))),
        }
    }

    pub fn as_usize(self) -> usize {
        match self {
            Dim::One => 1,
            Dim::Two => 2,
        }
    }

    /// Vertices per cell.
    pub fn nv(self) -> usize {
        self.as_usize() + 1
    }
}

/// Measure, barycentric gradients and barycenter of one cell.
#[derive(Clone, Copy, Debug)]
pub struct CellGeometry {
    pub nv: usize,
    pub measure: f64,
    pub grads: [[f64; 2]; 3],
    pub barycenter: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct Mesh {
    dim: Dim,
    length: f64,
    n: usize,
    coords: Vec<[f64; 2]>,
    cells: Vec<usize>,
    boundary: Vec<bool>,
}

pub fn build_structured(dim: Dim, length: f64, n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("subdivision count must be at least 1"));
    }
    if !(length > 0.0) {
        return Err(Error::invalid(format!("domain length must be positive, got {length}")));
    }
    let h = length / n as f64;
    let mesh = match dim {
        Dim::One => {
            let coords = (0..=n).map(|i| [i as f64 * h, 0.0]).collect();
            let cells = (0..n).flat_map(|i| [i, i + 1]).collect();
            let boundary = (0..=n).map(|i| i == 0 || i == n).collect();
            Mesh { dim, length, n, coords, cells, boundary }
        }
        Dim::Two => {
            let np = n + 1;
            let mut coords = Vec::with_capacity(np * np);
            let mut boundary = Vec::with_capacity(np * np);
            for iy in 0..np {
                for ix in 0..np {
                    coords.push([ix as f64 * h, iy as f64 * h]);
                    boundary.push(ix == 0 || iy == 0 || ix == n || iy == n);
                }
            }
            let mut cells = Vec::with_capacity(6 * n * n);
            for iy in 0..n {
                for ix in 0..n {
                    let v00 = iy * np + ix;
                    let v10 = v00 + 1;
                    let v01 = v00 + np;
                    let v11 = v01 + 1;
                    cells.extend_from_slice(&[v00, v10, v11]);
                    cells.extend_from_slice(&[v00, v11, v01]);
                }
            }
            Mesh { dim, length, n, coords, cells, boundary }
        }
    };
    Ok(mesh)
}

impl Mesh {
    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    /// Characteristic size `L / n`.
    pub fn size(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn nv(&self) -> usize {
        self.dim.nv()
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / self.nv()
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        self.coords[i]
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn cell(&self, k: usize) -> &[usize] {
        let nv = self.nv();
        &self.cells[k * nv..(k + 1) * nv]
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn measure(&self, k: usize) -> f64 {
        self.geometry(k).measure
    }

    pub fn barycenter(&self, k: usize) -> [f64; 2] {
        let c = self.cell(k);
        let s = 1.0 / c.len() as f64;
        let mut b = [0.0; 2];
        for &v in c {
            b[0] += self.coords[v][0] * s;
            b[1] += self.coords[v][1] * s;
        }
        b
    }

    pub fn geometry(&self, k: usize) -> CellGeometry {
        let c = self.cell(k);
        match self.dim {
            Dim::One => {
                let (x0, x1) = (self.coords[c[0]][0], self.coords[c[1]][0]);
                let h = x1 - x0;
                CellGeometry {
                    nv: 2,
                    measure: h.abs(),
                    grads: [[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0, 0.0]],
                    barycenter: [0.5 * (x0 + x1), 0.0],
                }
            }
            Dim::Two => {
                let p = [self.coords[c[0]], self.coords[c[1]], self.coords[c[2]]];
                triangle_geometry(p)
            }
        }
    }

    /// Barycentric coordinates of `x` with respect to cell `k` (the third
    /// entry is zero in 1D).
    pub fn barycentric(&self, k: usize, x: [f64; 2]) -> [f64; 3] {
        let c = self.cell(k);
        let simplex: Vec<[f64; 2]> = c.iter().map(|&v| self.coords[v]).collect();
        barycentric(&simplex, x)
    }

    /// Index of the cell containing `x` (points on shared edges go to the
    /// cell of the lower-left square).
    pub fn locate(&self, x: [f64; 2]) -> usize {
        let n = self.n;
        let h = self.size();
        let idx = |t: f64| ((t / h).floor().max(0.0) as usize).min(n - 1);
        match self.dim {
            Dim::One => idx(x[0]),
            Dim::Two => {
                let (ix, iy) = (idx(x[0]), idx(x[1]));
                let lx = x[0] / h - ix as f64;
                let ly = x[1] / h - iy as f64;
                2 * (iy * n + ix) + usize::from(ly > lx)
            }
        }
    }

    /// Faces of the mesh: edges in 2D, vertices in 1D. In 2D face `i` of a
    /// cell joins local vertices `i` and `i + 1 (mod 3)`; in 1D it is local
    /// vertex `i`.
    pub fn faces(&self) -> FaceTable {
        let nc = self.n_cells();
        match self.dim {
            Dim::One => {
                let faces = (0..self.n_vertices()).map(|v| [v, v]).collect();
                let cell_faces = (0..nc)
                    .map(|k| {
                        let c = self.cell(k);
                        [c[0], c[1], usize::MAX]
                    })
                    .collect();
                let boundary = self.boundary.clone();
                FaceTable { faces, cell_faces, boundary }
            }
            Dim::Two => {
                let mut index: HashMap<(usize, usize), usize> = HashMap::new();
                let mut faces = Vec::new();
                let mut count = Vec::new();
                let mut cell_faces = Vec::with_capacity(nc);
                for k in 0..nc {
                    let c = self.cell(k);
                    let mut ids = [0usize; 3];
                    for i in 0..3 {
                        let (a, b) = (c[i], c[(i + 1) % 3]);
                        let key = (a.min(b), a.max(b));
                        let id = *index.entry(key).or_insert_with(|| {
                            faces.push([key.0, key.1]);
                            count.push(0usize);
                            faces.len() - 1
                        });
                        count[id] += 1;
                        ids[i] = id;
                    }
                    cell_faces.push(ids);
                }
                let boundary = count.iter().map(|&c| c == 1).collect();
                FaceTable { faces, cell_faces, boundary }
            }
        }
    }

    /// Plain-text listing: a header, one `x y boundary` record per vertex,
    /// then one record of 0-based vertex indices per cell.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "vertices {}", self.n_vertices())?;
        for (p, b) in self.coords.iter().zip(&self.boundary) {
            writeln!(w, "{} {} {}", p[0], p[1], u8::from(*b))?;
        }
        writeln!(w, "cells {}", self.n_cells())?;
        for k in 0..self.n_cells() {
            let line: Vec<String> = self.cell(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

pub(crate) fn triangle_geometry(p: [[f64; 2]; 3]) -> CellGeometry {
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut grads = [[0.0; 2]; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        grads[i] = [(p[j][1] - p[k][1]) / area2, (p[k][0] - p[j][0]) / area2];
    }
    CellGeometry {
        nv: 3,
        measure: 0.5 * area2.abs(),
        grads,
        barycenter: [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ],
    }
}

#[derive(Clone, Debug)]
pub struct FaceTable {
    /// Vertex pair per face (both entries equal in 1D).
    pub faces: Vec<[usize; 2]>,
    pub cell_faces: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
}

impl FaceTable {
    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// A set of cells of some mesh with a compact local vertex numbering.
#[derive(Clone, Debug, Default)]
pub struct Submesh {
    /// Global cell ids, ascending.
    pub cells: Vec<usize>,
    /// Global vertex ids, ascending.
    pub vertices: Vec<usize>,
    /// Cell connectivity in local vertex numbering.
    pub local: Vec<[u32; 3]>,
    /// Vertex lies on the boundary of the union of `cells`.
    pub boundary: Vec<bool>,
}

impl Submesh {
    pub fn from_cells(mesh: &Mesh, mut cells: Vec<usize>) -> Submesh {
        cells.sort_unstable();
        cells.dedup();
        let nv = mesh.nv();
        let mut vertices: Vec<usize> = cells.iter().flat_map(|&k| mesh.cell(k).iter().copied()).collect();
        vertices.sort_unstable();
        vertices.dedup();
        let pos = |v: usize| vertices.binary_search(&v).unwrap() as u32;
        let local: Vec<[u32; 3]> = cells
            .iter()
            .map(|&k| {
                let c = mesh.cell(k);
                let mut l = [u32::MAX; 3];
                for i in 0..nv {
                    l[i] = pos(c[i]);
                }
                l
            })
            .collect();
        let mut boundary = vec![false; vertices.len()];
        match mesh.dim() {
            Dim::One => {
                let mut count = vec![0u8; vertices.len()];
                for l in &local {
                    count[l[0] as usize] += 1;
                    count[l[1] as usize] += 1;
                }
                for (b, c) in boundary.iter_mut().zip(count) {
                    *b = c == 1;
                }
            }
            Dim::Two => {
                let mut count: HashMap<(u32, u32), u8> = HashMap::with_capacity(local.len() * 2);
                for l in &local {
                    for i in 0..3 {
                        let (a, b) = (l[i], l[(i + 1) % 3]);
                        *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    }
                }
                for ((a, b), c) in count {
                    if c == 1 {
                        boundary[a as usize] = true;
                        boundary[b as usize] = true;
                    }
                }
            }
        }
        Submesh { cells, vertices, local, boundary }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Local index of global vertex `v`, if present.
    pub fn local_index(&self, v: usize) -> Option<usize> {
        self.vertices.binary_search(&v).ok()
    }

    pub fn measure(&self, mesh: &Mesh) -> f64 {
        self.cells.iter().map(|&k| mesh.measure(k)).sum()
    }
}

/// A coarse mesh together with a nested fine refinement.
#[derive(Clone, Debug)]
pub struct MeshHierarchy {
    coarse: Mesh,
    fine: Mesh,
    ratio: usize,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    child_index: Vec<u32>,
    submeshes: Vec<Submesh>,
}

pub fn refine(coarse: &Mesh, ratio: usize) -> Result<MeshHierarchy> {
    if ratio == 0 {
        return Err(Error::invalid("refinement ratio must be at least 1"));
    }
    let n = coarse.subdivisions();
    let fine = build_structured(coarse.dim(), coarse.length(), n * ratio)?;
    let nf = fine.n_cells();
    let mut parent = Vec::with_capacity(nf);
    match coarse.dim() {
        Dim::One => {
            for k in 0..nf {
                parent.push(k / ratio);
            }
        }
        Dim::Two => {
            let fnn = n * ratio;
            for k in 0..nf {
                let sq = k / 2;
                let (fx, fy) = (sq % fnn, sq / fnn);
                let (cx, cy) = (fx / ratio, fy / ratio);
                let (lx, ly) = ((fx % ratio) as f64, (fy % ratio) as f64);
                let (bx, by) = if k % 2 == 0 {
                    (lx + 2.0 / 3.0, ly + 1.0 / 3.0)
                } else {
                    (lx + 1.0 / 3.0, ly + 2.0 / 3.0)
                };
                parent.push(2 * (cy * n + cx) + usize::from(by > bx));
            }
        }
    }
    let mut children = vec![Vec::new(); coarse.n_cells()];
    let mut child_index = Vec::with_capacity(nf);
    for (k, &p) in parent.iter().enumerate() {
        child_index.push(children[p].len() as u32);
        children[p].push(k);
    }
    let submeshes = children.iter().map(|c| Submesh::from_cells(&fine, c.clone())).collect();
    Ok(MeshHierarchy {
        coarse: coarse.clone(),
        fine,
        ratio,
        parent,
        children,
        child_index,
        submeshes,
    })
}

impl MeshHierarchy {
    pub fn coarse(&self) -> &Mesh {
        &self.coarse
    }

    pub fn fine(&self) -> &Mesh {
        &self.fine
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn parent(&self, fine_cell: usize) -> usize {
        self.parent[fine_cell]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn children(&self, coarse_cell: usize) -> &[usize] {
        &self.children[coarse_cell]
    }

    /// Position of a fine cell among the children of its parent, which is
    /// also its index in the parent's submesh.
    pub fn child_index(&self, fine_cell: usize) -> usize {
        self.child_index[fine_cell] as usize
    }

    /// Fine-mesh index of a coarse vertex.
    pub fn fine_vertex(&self, coarse_vertex: usize) -> usize {
        let n = self.coarse.subdivisions();
        let r = self.ratio;
        match self.coarse.dim() {
            Dim::One => coarse_vertex * r,
            Dim::Two => {
                let (ix, iy) = (coarse_vertex % (n + 1), coarse_vertex / (n + 1));
                iy * r * (n * r + 1) + ix * r
            }
        }
    }

    /// Fine submesh tiling coarse cell `k`.
    pub fn submesh(&self, k: usize) -> &Submesh {
        &self.submeshes[k]
    }

    pub fn submeshes(&self) -> &[Submesh] {
        &self.submeshes
    }
}

/// Per-fine-cell classification into the outflow boundary layer.
#[derive(Clone, Debug)]
pub struct LayerMask {
    inside: Vec<bool>,
    width: f64,
    defined: bool,
}

/// Cells whose barycenter lies within `ln(Pe)/Pe` of the outflow boundary
/// (`x = L` in 1D, `x = L` or `y = L` in 2D). For `Pe <= 1` the layer is
/// undefined and every cell is outside.
pub fn layer_mask(fine: &Mesh, peclet: f64) -> LayerMask {
    let nc = fine.n_cells();
    if !(peclet > 1.0) {
        return LayerMask { inside: vec![false; nc], width: 0.0, defined: false };
    }
    let width = peclet.ln() / peclet;
    let edge = fine.length() - width;
    let inside = (0..nc)
        .map(|k| {
            let b = fine.barycenter(k);
            match fine.dim() {
                Dim::One => b[0] > edge,
                Dim::Two => b[0] > edge || b[1] > edge,
            }
        })
        .collect();
    LayerMask { inside, width, defined: true }
}

impl LayerMask {
    pub fn is_inside(&self, k: usize) -> bool {
        self.inside[k]
    }

    pub fn flags(&self) -> &[bool] {
        &self.inside
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// False when the Péclet number was too small for a layer to exist.
    pub fn is_defined(&self) -> bool {
        self.defined
    }

    pub fn inside_measure(&self, mesh: &Mesh) -> f64 {
        (0..mesh.n_cells()).filter(|&k| self.inside[k]).map(|k| mesh.measure(k)).sum()
    }
}

/// Enlarged domain around a coarse cell used for oversampled local problems.
#[derive(Clone, Debug)]
pub struct OversamplingPatch {
    pub target: usize,
    pub ratio: f64,
    /// Image of the target cell under the homothety (not clipped).
    pub simplex: Vec<[f64; 2]>,
    /// Homothety image clipped to the domain; the interval endpoints in 1D.
    pub polygon: Vec<[f64; 2]>,
    /// Fine cells whose barycenter lies in `polygon`.
    pub submesh: Submesh,
}

impl OversamplingPatch {
    /// Exact measure of the clipped polygon.
    pub fn area(&self) -> f64 {
        if self.polygon.len() == 2 {
            return (self.polygon[1][0] - self.polygon[0][0]).abs();
        }
        polygon_area(&self.polygon)
    }

    pub fn contains(&self, x: [f64; 2], tol: f64) -> bool {
        if self.polygon.len() == 2 {
            return x[0] >= self.polygon[0][0] - tol && x[0] <= self.polygon[1][0] + tol;
        }
        convex_contains(&self.polygon, x, tol)
    }

    /// Barycentric coordinates of `x` with respect to the scaled simplex.
    pub fn simplex_coordinates(&self, x: [f64; 2]) -> [f64; 3] {
        barycentric(&self.simplex, x)
    }
}

pub fn oversampling_patch(h: &MeshHierarchy, k: usize, ratio: f64) -> Result<OversamplingPatch> {
    if !(ratio >= 1.0) {
        return Err(Error::invalid(format!("oversampling ratio must be >= 1, got {ratio}")));
    }
    let coarse = h.coarse();
    let fine = h.fine();
    let c = coarse.barycenter(k);
    let simplex: Vec<[f64; 2]> = coarse
        .cell(k)
        .iter()
        .map(|&v| {
            let p = coarse.vertex(v);
            [c[0] + ratio * (p[0] - c[0]), c[1] + ratio * (p[1] - c[1])]
        })
        .collect();
    let len = coarse.length();
    let tol = 1e-12 * len;
    let polygon = match coarse.dim() {
        Dim::One => {
            let a = simplex[0][0].min(simplex[1][0]).max(0.0);
            let b = simplex[0][0].max(simplex[1][0]).min(len);
            vec![[a, 0.0], [b, 0.0]]
        }
        Dim::Two => clip_to_box(&simplex, len),
    };
    let mut patch = OversamplingPatch { target: k, ratio, simplex, polygon, submesh: Submesh::default() };

    let hf = fine.size();
    let nf = fine.subdivisions();
    let range = |lo: f64, hi: f64| {
        let a = ((lo / hf).floor().max(0.0)) as usize;
        let b = (((hi / hf).ceil()) as usize).min(nf);
        a..b
    };
    let xs: Vec<f64> = patch.polygon.iter().map(|p| p[0]).collect();
    let (xmin, xmax) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let mut cells = Vec::new();
    match coarse.dim() {
        Dim::One => {
            for i in range(xmin, xmax) {
                if patch.contains(fine.barycenter(i), tol) {
                    cells.push(i);
                }
            }
        }
        Dim::Two => {
            let ys: Vec<f64> = patch.polygon.iter().map(|p| p[1]).collect();
            let (ymin, ymax) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
            for iy in range(ymin, ymax) {
                for ix in range(xmin, xmax) {
                    for t in 0..2 {
                        let cell = 2 * (iy * nf + ix) + t;
                        if patch.contains(fine.barycenter(cell), tol) {
                            cells.push(cell);
                        }
                    }
                }
            }
        }
    }
    patch.submesh = Submesh::from_cells(fine, cells);
    Ok(patch)
}

fn barycentric(simplex: &[[f64; 2]], x: [f64; 2]) -> [f64; 3] {
    if simplex.len() == 2 {
        let (a, b) = (simplex[0][0], simplex[1][0]);
        let t = (x[0] - a) / (b - a);
        return [1.0 - t, t, 0.0];
    }
    let g = triangle_geometry([simplex[0], simplex[1], simplex[2]]);
    let mut l = [0.0; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        // lambda_i vanishes on the opposite edge, which contains vertex j
        l[i] = g.grads[i][0] * (x[0] - simplex[j][0]) + g.grads[i][1] * (x[1] - simplex[j][1]);
    }
    l
}

pub(crate) fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += p[i][0] * p[j][1] - p[j][0] * p[i][1];
    }
    0.5 * s.abs()
}

fn convex_contains(p: &[[f64; 2]], x: [f64; 2], tol: f64) -> bool {
    let n = p.len();
    if n < 3 {
        return false;
    }
    let orient = if polygon_signed_area(p) >= 0.0 { 1.0 } else { -1.0 };
    (0..n).all(|i| {
        let a = p[i];
        let b = p[(i + 1) % n];
        let cross = (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        orient * cross >= -tol * len
    })
}

fn polygon_signed_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += p[i][0] * p[j][1] - p[j][0] * p[i][1];
    }
    0.5 * s
}

/// Sutherland-Hodgman clipping against `[0, len]^2`.
fn clip_to_box(poly: &[[f64; 2]], len: f64) -> Vec<[f64; 2]> {
    // (axis, bound, keep >= bound)
    let planes = [(0usize, 0.0, true), (0, len, false), (1, 0.0, true), (1, len, false)];
    let mut out: Vec<[f64; 2]> = poly.to_vec();
    for (axis, bound, keep_above) in planes {
        if out.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if keep_above { p[axis] >= bound } else { p[axis] <= bound };
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut q = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
                q[axis] = bound;
                out.push(q);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_1d_counts() {
        let m = build_structured(Dim::One, 1.0, 4).unwrap();
        assert_eq!(m.n_cells(), 4);
        assert_eq!(m.n_vertices(), 5);
        let b: Vec<usize> = (0..5).filter(|&i| m.is_boundary(i)).collect();
        assert_eq!(b, vec![0, 4]);
    }

    #[test]
    fn structured_2d_small() {
        let m = build_structured(Dim::Two, 1.0, 2).unwrap();
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.n_vertices(), 9);
        let area: f64 = (0..8).map(|k| m.measure(k)).sum();
        assert!((area - 1.0).abs() < 1e-15);
        // only the center vertex is interior
        assert_eq!(m.boundary_flags().iter().filter(|b| !**b).count(), 1);
        assert!(!m.is_boundary(4));
    }

    #[test]
    fn element_count_formula() {
        let m = build_structured(Dim::Two, 1.0, 16).unwrap();
        assert_eq!(m.n_cells(), 2 * 16 * 16);
        assert_eq!(m.size(), 1.0 / 16.0);
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(matches!(build_structured(Dim::Two, 1.0, 0), Err(Error::InvalidParameter(_))));
        let m = build_structured(Dim::One, 1.0, 2).unwrap();
        assert!(refine(&m, 0).is_err());
    }

    #[test]
    fn triangles_positively_oriented() {
        let m = build_structured(Dim::Two, 1.0, 3).unwrap();
        for k in 0..m.n_cells() {
            let c = m.cell(k);
            let p: Vec<[f64; 2]> = c.iter().map(|&v| m.vertex(v)).collect();
            let cross = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
            assert!(cross > 0.0);
        }
    }

    #[test]
    fn interior_edges_shared_by_two() {
        let m = build_structured(Dim::Two, 1.0, 4).unwrap();
        let f = m.faces();
        // 3n^2 + 2n edges for the diagonal split
        assert_eq!(f.len(), 3 * 16 + 8);
        let on_boundary = f.boundary.iter().filter(|b| **b).count();
        assert_eq!(on_boundary, 16);
        for (e, b) in f.faces.iter().zip(&f.boundary) {
            assert_eq!(*b, m.is_boundary(e[0]) && m.is_boundary(e[1]) && {
                let (p, q) = (m.vertex(e[0]), m.vertex(e[1]));
                (p[0] == q[0] && (p[0] == 0.0 || p[0] == 1.0)) || (p[1] == q[1] && (p[1] == 0.0 || p[1] == 1.0))
            });
        }
    }

    #[test]
    fn refine_1d() {
        let m = build_structured(Dim::One, 1.0, 4).unwrap();
        let h = refine(&m, 2).unwrap();
        assert_eq!(h.fine().n_cells(), 8);
        for k in 0..4 {
            assert_eq!(h.children(k).len(), 2);
        }
    }

    #[test]
    fn refine_identity() {
        let m = build_structured(Dim::Two, 1.0, 3).unwrap();
        let h = refine(&m, 1).unwrap();
        assert_eq!(h.fine().n_cells(), m.n_cells());
        for k in 0..m.n_cells() {
            assert_eq!(h.parent(k), k);
            assert_eq!(h.fine().cell(k), m.cell(k));
        }
    }

    #[test]
    fn children_lie_inside_parent() {
        let m = build_structured(Dim::Two, 1.0, 2).unwrap();
        let h = refine(&m, 4).unwrap();
        assert_eq!(h.fine().size(), 1.0 / 8.0);
        for k in 0..h.fine().n_cells() {
            let p = h.parent(k);
            let b = h.fine().barycenter(k);
            let c = m.cell(p);
            let g = m.geometry(p);
            for i in 0..3 {
                let j = (i + 1) % 3;
                let q = m.vertex(c[j]);
                let l = g.grads[i][0] * (b[0] - q[0]) + g.grads[i][1] * (b[1] - q[1]);
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn coarse_vertices_embed_in_fine_mesh() {
        for dim in [Dim::One, Dim::Two] {
            let m = build_structured(dim, 1.0, 3).unwrap();
            let h = refine(&m, 5).unwrap();
            for v in 0..m.n_vertices() {
                assert_eq!(h.fine().vertex(h.fine_vertex(v)), m.vertex(v));
            }
            for t in 0..h.fine().n_cells() {
                assert_eq!(h.submesh(h.parent(t)).cells[h.child_index(t)], t);
            }
        }
    }

    #[test]
    fn coarse_submesh_boundary_is_cell_boundary() {
        let m = build_structured(Dim::Two, 1.0, 2).unwrap();
        let h = refine(&m, 4).unwrap();
        for k in 0..m.n_cells() {
            let s = h.submesh(k);
            // triangle with 4 subdivisions per side: 15 vertices, 12 on the boundary
            assert_eq!(s.n_vertices(), 15);
            assert_eq!(s.boundary.iter().filter(|b| **b).count(), 12);
        }
    }

    #[test]
    fn locate_finds_containing_cell() {
        let m = build_structured(Dim::Two, 1.0, 5).unwrap();
        for k in 0..m.n_cells() {
            assert_eq!(m.locate(m.barycenter(k)), k);
        }
        let m1 = build_structured(Dim::One, 2.0, 5).unwrap();
        assert_eq!(m1.locate([1.9, 0.0]), 4);
    }

    #[test]
    fn layer_width_at_euler() {
        let m = build_structured(Dim::One, 1.0, 10).unwrap();
        let mask = layer_mask(&m, std::f64::consts::E);
        assert!((mask.width() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn layer_undefined_for_small_peclet() {
        let m = build_structured(Dim::Two, 1.0, 4).unwrap();
        let mask = layer_mask(&m, 1.0);
        assert!(!mask.is_defined());
        assert_eq!(mask.width(), 0.0);
        assert!(mask.flags().iter().all(|f| !f));
    }

    #[test]
    fn oversampling_ratio_one_is_cell() {
        let m = build_structured(Dim::Two, 1.0, 4).unwrap();
        let h = refine(&m, 4).unwrap();
        let k = 2 * (4 + 1);
        let p = oversampling_patch(&h, k, 1.0).unwrap();
        assert!((p.area() - m.measure(k)).abs() < 1e-15);
        assert_eq!(p.submesh.cells, h.submesh(k).cells);
    }

    #[test]
    fn text_export_has_one_record_per_line() {
        let m = build_structured(Dim::Two, 1.0, 2).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2 + 9 + 8);
        assert_eq!(s.lines().nth(10).unwrap(), "cells 8");
        assert_eq!(s.lines().nth(11).unwrap(), "0 1 4");
    }
}
