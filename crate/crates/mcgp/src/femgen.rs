//! Quadratic triangular finite elements on the unit square, a banded
//! Cholesky Poisson solver, and the dataset files the emulator trains on.
//!
//! The mesh is structured: a square grid of pitch approximately `h` (m =
//! round(1/h) cells per side), each cell split along its bottom-left to
//! top-right diagonal into two counterclockwise triangles, with midside
//! nodes added for the quadratic basis. Nodes live on the fine lattice of
//! pitch `1/(2m)`, indexed row-major, so vertices sit at even lattice
//! coordinates and midsides at odd ones.
//!
//! The model problem is `laplace(u) = f(x, s)` on the unit square with
//! homogeneous Dirichlet data and a one-parameter family of right-hand
//! sides chosen so the exact solution is known in closed form:
//! `u0(s, x) = exp(x s1) sin(pi s1) sin(pi s2)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::tables;
use crate::{Error, Result};

/// Structured quadratic triangulation of the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pitch: f64,
    cells: usize,
    nodes: DMatrix<f64>,
    elements: Vec<[usize; 6]>,
    boundary: Vec<usize>,
    is_boundary: Vec<bool>,
}

/// Result of point location: the containing element and the point's
/// barycentric coordinates in it.
#[derive(Debug, Clone, Copy)]
pub struct Located {
    pub element: usize,
    pub barycentric: [f64; 3],
}

impl TriMesh {
    /// Cell pitch of the vertex grid (twice the node lattice pitch).
    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    /// Cells per side.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// N x 2 node coordinates on the fine lattice, row-major by rows of
    /// constant s2.
    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    /// Elements as node-index arrays `[v1, v2, v3, m12, m23, m13]`: the
    /// three vertices counterclockwise, then the midsides opposite them in
    /// edge order 1-2, 2-3, 1-3.
    pub fn elements(&self) -> &[[usize; 6]] {
        &self.elements
    }

    /// Sorted indices of nodes on the square's boundary.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    fn vertex_coords(&self, element: usize) -> [[f64; 2]; 3] {
        let e = &self.elements[element];
        let mut v = [[0.0; 2]; 3];
        for i in 0..3 {
            v[i] = [self.nodes[(e[i], 0)], self.nodes[(e[i], 1)]];
        }
        v
    }

    /// Locate a point of the closed unit square: structured arithmetic picks
    /// the cell and triangle directly; a brute-force scan over elements
    /// covers any round-off disagreement at edges.
    pub fn locate(&self, s: &[f64]) -> Result<Located> {
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "spatial points are 2-dimensional, got {}",
                s.len()
            )));
        }
        const EPS: f64 = 1e-12;
        if s.iter().any(|&v| !(v.is_finite() && (-EPS..=1.0 + EPS).contains(&v))) {
            return Err(Error::OutOfDomain(s[0], s[1], self.nearest_element(s)));
        }
        let sx = s[0].clamp(0.0, 1.0);
        let sy = s[1].clamp(0.0, 1.0);
        let m = self.cells;
        let cx = ((sx * m as f64).floor() as usize).min(m - 1);
        let cy = ((sy * m as f64).floor() as usize).min(m - 1);
        let lx = sx * m as f64 - cx as f64;
        let ly = sy * m as f64 - cy as f64;
        // the cell diagonal runs bottom-left to top-right; below it lies the
        // first of the cell's two triangles
        let tri = 2 * (cy * m + cx) + usize::from(ly > lx);
        if let Some(bary) = self.barycentric_in(tri, sx, sy) {
            return Ok(Located {
                element: tri,
                barycentric: bary,
            });
        }
        // fallback: the element whose barycentric minimum is largest
        let mut best = (0, [0.0; 3], f64::NEG_INFINITY);
        for e in 0..self.elements.len() {
            let geom = ElementGeom::new(&self.vertex_coords(e))
                .expect("mesh elements have positive area");
            let bary = geom.barycentric(sx, sy);
            let low = bary.iter().cloned().fold(f64::INFINITY, f64::min);
            if low > best.2 {
                best = (e, bary, low);
            }
        }
        Ok(Located {
            element: best.0,
            barycentric: normalize_bary(best.1),
        })
    }

    // Element whose centroid is nearest to the (possibly exterior) point;
    // used as a hint in out-of-domain errors.
    fn nearest_element(&self, s: &[f64]) -> usize {
        let sx = if s[0].is_finite() { s[0] } else { 0.0 };
        let sy = if s.len() > 1 && s[1].is_finite() { s[1] } else { 0.0 };
        let mut best = (0, f64::INFINITY);
        for (e, _) in self.elements.iter().enumerate() {
            let v = self.vertex_coords(e);
            let cx = (v[0][0] + v[1][0] + v[2][0]) / 3.0;
            let cy = (v[0][1] + v[1][1] + v[2][1]) / 3.0;
            let d = (cx - sx) * (cx - sx) + (cy - sy) * (cy - sy);
            if d < best.1 {
                best = (e, d);
            }
        }
        best.0
    }

    fn barycentric_in(&self, element: usize, sx: f64, sy: f64) -> Option<[f64; 3]> {
        let geom = ElementGeom::new(&self.vertex_coords(element)).ok()?;
        let bary = geom.barycentric(sx, sy);
        if bary.iter().all(|&b| b >= -1e-9) {
            Some(normalize_bary(bary))
        } else {
            None
        }
    }
}

fn normalize_bary(mut bary: [f64; 3]) -> [f64; 3] {
    for b in &mut bary {
        *b = b.max(0.0);
    }
    let sum: f64 = bary.iter().sum();
    for b in &mut bary {
        *b /= sum;
    }
    bary
}

/// Build the structured mesh of pitch nearest to `h`; requires
/// `0 < h <= 0.5`.
pub fn build_mesh(h: f64) -> Result<TriMesh> {
    if !(h.is_finite() && h > 0.0 && h <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "mesh size h = {h} must lie in (0, 0.5]"
        )));
    }
    let m = (1.0 / h).round() as usize;
    Ok(mesh_from_cells(m))
}

fn mesh_from_cells(m: usize) -> TriMesh {
    let fine = 2 * m + 1;
    let n_nodes = fine * fine;
    let lattice = 1.0 / (2 * m) as f64;
    let mut nodes = DMatrix::zeros(n_nodes, 2);
    let mut is_boundary = vec![false; n_nodes];
    let mut boundary = Vec::new();
    for iy in 0..fine {
        for ix in 0..fine {
            let idx = iy * fine + ix;
            nodes[(idx, 0)] = ix as f64 * lattice;
            nodes[(idx, 1)] = iy as f64 * lattice;
            if ix == 0 || iy == 0 || ix == fine - 1 || iy == fine - 1 {
                is_boundary[idx] = true;
                boundary.push(idx);
            }
        }
    }
    let at = |fx: usize, fy: usize| fy * fine + fx;
    let mid = |p: (usize, usize), q: (usize, usize)| at((p.0 + q.0) / 2, (p.1 + q.1) / 2);
    let mut elements = Vec::with_capacity(2 * m * m);
    for cy in 0..m {
        for cx in 0..m {
            let a = (2 * cx, 2 * cy);
            let b = (2 * cx + 2, 2 * cy);
            let c = (2 * cx + 2, 2 * cy + 2);
            let d = (2 * cx, 2 * cy + 2);
            elements.push([
                at(a.0, a.1),
                at(b.0, b.1),
                at(c.0, c.1),
                mid(a, b),
                mid(b, c),
                mid(a, c),
            ]);
            elements.push([
                at(a.0, a.1),
                at(c.0, c.1),
                at(d.0, d.1),
                mid(a, c),
                mid(c, d),
                mid(a, d),
            ]);
        }
    }
    TriMesh {
        pitch: 1.0 / m as f64,
        cells: m,
        nodes,
        elements,
        boundary,
        is_boundary,
    }
}

// Affine geometry of one triangle: barycentric coordinates as affine
// functions xi_j(s) = a_j + b_j s1 + c_j s2, plus the area.
struct ElementGeom {
    area: f64,
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
    verts: [[f64; 2]; 3],
}

impl ElementGeom {
    fn new(v: &[[f64; 2]; 3]) -> Result<Self> {
        let two_a = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
            - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
        if two_a <= 0.0 {
            return Err(Error::MeshValidity(
                "element vertices are not counterclockwise or are collinear".into(),
            ));
        }
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let mut c = [0.0; 3];
        for j in 0..3 {
            let p = v[(j + 1) % 3];
            let q = v[(j + 2) % 3];
            a[j] = (p[0] * q[1] - q[0] * p[1]) / two_a;
            b[j] = (p[1] - q[1]) / two_a;
            c[j] = (q[0] - p[0]) / two_a;
        }
        Ok(ElementGeom {
            area: two_a / 2.0,
            a,
            b,
            c,
            verts: *v,
        })
    }

    fn barycentric(&self, sx: f64, sy: f64) -> [f64; 3] {
        [
            self.a[0] + self.b[0] * sx + self.c[0] * sy,
            self.a[1] + self.b[1] * sx + self.c[1] * sy,
            self.a[2] + self.b[2] * sx + self.c[2] * sy,
        ]
    }

    fn physical(&self, xi: &[f64; 3]) -> [f64; 2] {
        let mut p = [0.0; 2];
        for j in 0..3 {
            p[0] += xi[j] * self.verts[j][0];
            p[1] += xi[j] * self.verts[j][1];
        }
        p
    }
}

/// Quadratic Lagrange shape functions at barycentric coordinates, in element
/// node order (three vertices, then midsides 1-2, 2-3, 1-3).
pub fn shape_values(xi: &[f64; 3]) -> [f64; 6] {
    [
        xi[0] * (2.0 * xi[0] - 1.0),
        xi[1] * (2.0 * xi[1] - 1.0),
        xi[2] * (2.0 * xi[2] - 1.0),
        4.0 * xi[0] * xi[1],
        4.0 * xi[1] * xi[2],
        4.0 * xi[2] * xi[0],
    ]
}

// Physical-coordinate gradients of the shape functions at xi: chain rule
// through the affine barycentric map.
fn shape_gradients(geom: &ElementGeom, xi: &[f64; 3]) -> [[f64; 2]; 6] {
    // d shape / d xi_j
    let dxi = [
        [4.0 * xi[0] - 1.0, 0.0, 0.0],
        [0.0, 4.0 * xi[1] - 1.0, 0.0],
        [0.0, 0.0, 4.0 * xi[2] - 1.0],
        [4.0 * xi[1], 4.0 * xi[0], 0.0],
        [0.0, 4.0 * xi[2], 4.0 * xi[1]],
        [4.0 * xi[2], 0.0, 4.0 * xi[0]],
    ];
    let mut grads = [[0.0; 2]; 6];
    for i in 0..6 {
        for j in 0..3 {
            grads[i][0] += dxi[i][j] * geom.b[j];
            grads[i][1] += dxi[i][j] * geom.c[j];
        }
    }
    grads
}

// Symmetric triangle quadrature, barycentric points with weights summing to
// one; exact through polynomial degree 4.
const QUAD_DEG4: [([f64; 3], f64); 6] = {
    const A1: f64 = 0.445948490915965;
    const W1: f64 = 0.223381589678011;
    const A2: f64 = 0.091576213509771;
    const W2: f64 = 0.109951743655322;
    [
        ([A1, A1, 1.0 - 2.0 * A1], W1),
        ([A1, 1.0 - 2.0 * A1, A1], W1),
        ([1.0 - 2.0 * A1, A1, A1], W1),
        ([A2, A2, 1.0 - 2.0 * A2], W2),
        ([A2, 1.0 - 2.0 * A2, A2], W2),
        ([1.0 - 2.0 * A2, A2, A2], W2),
    ]
};

// Exact through polynomial degree 6; used for error integrals so the
// quadrature error stays below the discretization error being measured.
const QUAD_DEG6: [([f64; 3], f64); 12] = {
    const A1: f64 = 0.063089014491502;
    const W1: f64 = 0.050844906370207;
    const A2: f64 = 0.249286745170910;
    const W2: f64 = 0.116786275726379;
    const A3: f64 = 0.310352451033785;
    const B3: f64 = 0.053145049844816;
    const C3: f64 = 1.0 - A3 - B3;
    const W3: f64 = 0.082851075618374;
    [
        ([A1, A1, 1.0 - 2.0 * A1], W1),
        ([A1, 1.0 - 2.0 * A1, A1], W1),
        ([1.0 - 2.0 * A1, A1, A1], W1),
        ([A2, A2, 1.0 - 2.0 * A2], W2),
        ([A2, 1.0 - 2.0 * A2, A2], W2),
        ([1.0 - 2.0 * A2, A2, A2], W2),
        ([A3, B3, C3], W3),
        ([A3, C3, B3], W3),
        ([B3, A3, C3], W3),
        ([B3, C3, A3], W3),
        ([C3, A3, B3], W3),
        ([C3, B3, A3], W3),
    ]
};

// Symmetric banded matrix stored by lower band: row i holds columns
// [i-bw, i], padded on the left.
struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bw {
            0.0
        } else {
            self.data[self.idx(hi, lo)]
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let at = self.idx(hi, lo);
        self.data[at] += v;
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let at = self.idx(hi, lo);
        self.data[at] = v;
    }

    // In-place banded Cholesky; fails with a mesh-validity error when the
    // system is not positive definite.
    fn factor(mut self) -> Result<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut sum = self.data[self.idx(i, j)];
                let kmin = lo.max(j.saturating_sub(bw));
                for k in kmin..j {
                    sum -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::MeshValidity(format!(
                            "stiffness system is singular at row {i} (pivot {sum:e})"
                        )));
                    }
                    let at = self.idx(i, i);
                    self.data[at] = sum.sqrt();
                } else {
                    let at = self.idx(i, j);
                    let diag = self.data[self.idx(j, j)];
                    self.data[at] = sum / diag;
                }
            }
        }
        Ok(BandedCholesky {
            n,
            bw,
            data: self.data,
        })
    }
}

struct BandedCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = rhs.clone();
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let mut v = y[i];
            for k in lo..i {
                v -= self.data[self.idx(i, k)] * y[k];
            }
            y[i] = v / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + self.bw).min(n - 1);
            let mut v = y[i];
            for k in (i + 1)..=hi {
                v -= self.data[self.idx(k, i)] * y[k];
            }
            y[i] = v / self.data[self.idx(i, i)];
        }
        y
    }
}

/// The family of right-hand sides: `laplace(u0)` for the closed-form
/// solution below.
pub fn rhs_field(s1: f64, s2: f64, x: f64) -> f64 {
    use std::f64::consts::PI;
    let e = (x * s1).exp();
    (x * x - 2.0 * PI * PI) * e * (PI * s1).sin() * (PI * s2).sin()
        + 2.0 * x * PI * e * (PI * s1).cos() * (PI * s2).sin()
}

/// Closed-form solution `u0(s, x) = exp(x s1) sin(pi s1) sin(pi s2)`.
pub fn analytic_solution(s1: f64, s2: f64, x: f64) -> f64 {
    use std::f64::consts::PI;
    (x * s1).exp() * (PI * s1).sin() * (PI * s2).sin()
}

/// Assembled and factorized Poisson operator for one mesh; solving for many
/// right-hand sides reuses the factorization.
pub struct PoissonSolver<'a> {
    mesh: &'a TriMesh,
    // original stiffness entries, needed to move Dirichlet data to the
    // right-hand side
    stiffness: BandedSpd,
    factor: BandedCholesky,
}

impl<'a> PoissonSolver<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        let n = mesh.n_nodes();
        let bw = mesh
            .elements()
            .iter()
            .map(|e| e.iter().max().unwrap() - e.iter().min().unwrap())
            .max()
            .unwrap_or(0);
        let mut k = BandedSpd::zeros(n, bw);
        for element in mesh.elements() {
            let geom = ElementGeom::new(&[
                [mesh.nodes[(element[0], 0)], mesh.nodes[(element[0], 1)]],
                [mesh.nodes[(element[1], 0)], mesh.nodes[(element[1], 1)]],
                [mesh.nodes[(element[2], 0)], mesh.nodes[(element[2], 1)]],
            ])?;
            let mut local = [[0.0; 6]; 6];
            for (xi, w) in &QUAD_DEG4 {
                let grads = shape_gradients(&geom, xi);
                for a in 0..6 {
                    for b in a..6 {
                        local[a][b] += w * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    }
                }
            }
            // each unordered pair is assembled once (a <= b local); the
            // banded store is symmetric, so that covers both triangles of K
            for a in 0..6 {
                for b in a..6 {
                    k.add(element[a], element[b], geom.area * local[a][b]);
                }
            }
        }

        // impose the Dirichlet rows/columns structurally (the data moves to
        // the right-hand side per solve, using the original entries)
        let mut modified = BandedSpd {
            n,
            bw,
            data: k.data.clone(),
        };
        for &b in mesh.boundary() {
            let lo = b.saturating_sub(bw);
            let hi = (b + bw).min(n - 1);
            for i in lo..=hi {
                if i != b {
                    modified.set(i, b, 0.0);
                }
            }
            modified.set(b, b, 1.0);
        }
        let factor = modified.factor()?;
        Ok(PoissonSolver {
            mesh,
            stiffness: k,
            factor,
        })
    }

    /// Solve `laplace(u) = f` with Dirichlet data `g` on the boundary.
    /// The weak form puts the load at `-integral(f v)`, and boundary data is
    /// moved to the right-hand side through the original stiffness columns.
    pub fn solve(
        &self,
        f: impl Fn(f64, f64) -> f64,
        g: impl Fn(f64, f64) -> f64,
    ) -> Result<DVector<f64>> {
        let mesh = self.mesh;
        let n = mesh.n_nodes();
        let mut rhs = DVector::zeros(n);
        for element in mesh.elements() {
            let geom = ElementGeom::new(&[
                [mesh.nodes[(element[0], 0)], mesh.nodes[(element[0], 1)]],
                [mesh.nodes[(element[1], 0)], mesh.nodes[(element[1], 1)]],
                [mesh.nodes[(element[2], 0)], mesh.nodes[(element[2], 1)]],
            ])?;
            for (xi, w) in &QUAD_DEG4 {
                let p = geom.physical(xi);
                let fv = f(p[0], p[1]);
                let shapes = shape_values(xi);
                for a in 0..6 {
                    rhs[element[a]] -= geom.area * w * fv * shapes[a];
                }
            }
        }

        let bw = self.stiffness.bw;
        let boundary_values: Vec<f64> = mesh
            .boundary()
            .iter()
            .map(|&b| g(mesh.nodes[(b, 0)], mesh.nodes[(b, 1)]))
            .collect();
        for (&b, &gb) in mesh.boundary().iter().zip(&boundary_values) {
            if gb == 0.0 {
                continue;
            }
            let lo = b.saturating_sub(bw);
            let hi = (b + bw).min(n - 1);
            for i in lo..=hi {
                if i != b && !mesh.is_boundary(i) {
                    rhs[i] -= self.stiffness.get(i, b) * gb;
                }
            }
        }
        for (&b, &gb) in mesh.boundary().iter().zip(&boundary_values) {
            rhs[b] = gb;
        }
        Ok(self.factor.solve(&rhs))
    }
}

/// Solve the model problem at input `x` with homogeneous boundary data.
pub fn solve_poisson(mesh: &TriMesh, x: f64) -> Result<DVector<f64>> {
    PoissonSolver::new(mesh)?.solve(|s1, s2| rhs_field(s1, s2, x), |_, _| 0.0)
}

/// Columns of node values, one solve per design row (single input column,
/// values in [-1, 1]); the operator is factorized once.
pub fn generate_solutions(mesh: &TriMesh, design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if design.ncols() != 1 {
        return Err(Error::InvalidArgument(format!(
            "the model problem has one input, design has {} columns",
            design.ncols()
        )));
    }
    for i in 0..design.nrows() {
        let x = design[(i, 0)];
        if !(x.is_finite() && (-1.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument(format!(
                "design input {x} lies outside [-1, 1]"
            )));
        }
    }
    let solver = PoissonSolver::new(mesh)?;
    let mut solutions = DMatrix::zeros(mesh.n_nodes(), design.nrows());
    for i in 0..design.nrows() {
        let x = design[(i, 0)];
        let u = solver.solve(|s1, s2| rhs_field(s1, s2, x), |_, _| 0.0)?;
        solutions.set_column(i, &u);
    }
    Ok(solutions)
}

/// L2 norm of `u_h - exact` over the mesh, with the degree-6 rule per
/// element; `u_h` is the quadratic interpolant of the nodal coefficients.
pub fn l2_error(mesh: &TriMesh, coeffs: &DVector<f64>, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let mut total = 0.0;
    for element in mesh.elements() {
        let geom = ElementGeom::new(&[
            [mesh.nodes[(element[0], 0)], mesh.nodes[(element[0], 1)]],
            [mesh.nodes[(element[1], 0)], mesh.nodes[(element[1], 1)]],
            [mesh.nodes[(element[2], 0)], mesh.nodes[(element[2], 1)]],
        ])
        .expect("mesh elements have positive area");
        for (xi, w) in &QUAD_DEG6 {
            let shapes = shape_values(xi);
            let mut val = 0.0;
            for a in 0..6 {
                val += coeffs[element[a]] * shapes[a];
            }
            let p = geom.physical(xi);
            let diff = val - exact(p[0], p[1]);
            total += geom.area * w * diff * diff;
        }
    }
    total.sqrt()
}

/// A dataset directory's contents: the mesh, the n x p design, and the
/// N x n node solutions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub mesh: TriMesh,
    pub design: DMatrix<f64>,
    pub solutions: DMatrix<f64>,
}

pub const NODES_CSV: &str = "nodes.csv";
pub const ELEMENTS_CSV: &str = "elements.csv";
pub const BOUNDARY_CSV: &str = "boundary.csv";
pub const DESIGN_CSV: &str = "design.csv";
pub const DATASET_SOLUTIONS_CSV: &str = "solutions.csv";

/// Write the five dataset tables.
pub fn write_dataset(
    dir: &Path,
    mesh: &TriMesh,
    design: &DMatrix<f64>,
    solutions: &DMatrix<f64>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    tables::write_f64_table(&dir.join(NODES_CSV), Some(&["s1", "s2"]), mesh.nodes())?;
    let element_rows: Vec<Vec<usize>> = mesh.elements().iter().map(|e| e.to_vec()).collect();
    tables::write_usize_table(
        &dir.join(ELEMENTS_CSV),
        Some(&["v1", "v2", "v3", "m12", "m23", "m13"]),
        &element_rows,
    )?;
    let boundary_rows: Vec<Vec<usize>> = mesh.boundary().iter().map(|&b| vec![b]).collect();
    tables::write_usize_table(&dir.join(BOUNDARY_CSV), Some(&["node"]), &boundary_rows)?;
    let design_header: Vec<String> = (1..=design.ncols()).map(|i| format!("x{i}")).collect();
    let header_refs: Vec<&str> = design_header.iter().map(String::as_str).collect();
    tables::write_f64_table(&dir.join(DESIGN_CSV), Some(&header_refs), design)?;
    tables::write_f64_table(&dir.join(DATASET_SOLUTIONS_CSV), None, solutions)?;
    Ok(())
}

/// Rebuild the structured mesh whose node table matches `nodes`.
///
/// The lattice is inferred from the node count (an odd square), rebuilt
/// canonically, and every coordinate checked against the given table. This
/// lets a saved model (which stores node coordinates but not connectivity)
/// recover the mesh it was trained on for field-level predictions.
pub fn canonical_mesh(nodes: &DMatrix<f64>) -> Result<TriMesh> {
    let n_nodes = nodes.nrows();
    let fine = (n_nodes as f64).sqrt().round() as usize;
    if fine * fine != n_nodes || fine < 3 || fine % 2 == 0 {
        return Err(Error::MeshValidity(format!(
            "{n_nodes} nodes do not form an odd square lattice"
        )));
    }
    let m = (fine - 1) / 2;
    let mesh = mesh_from_cells(m);
    if nodes.ncols() != 2 {
        return Err(Error::MeshValidity(format!(
            "nodes table has {} columns, expected 2",
            nodes.ncols()
        )));
    }
    for j in 0..n_nodes {
        for a in 0..2 {
            if (nodes[(j, a)] - mesh.nodes[(j, a)]).abs() > 1e-12 {
                return Err(Error::MeshValidity(format!(
                    "node {j} at ({}, {}) does not sit on the structured lattice",
                    nodes[(j, a)],
                    nodes[(j, 1 - a)]
                )));
            }
        }
    }
    Ok(mesh)
}

/// Load and validate a dataset directory: node coordinates must reproduce
/// the structured lattice, elements and boundary must match the canonical
/// construction, and table sizes must agree.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let nodes = tables::read_f64_table(&dir.join(NODES_CSV))?;
    let elements = tables::read_usize_table(&dir.join(ELEMENTS_CSV))?;
    let boundary = tables::read_usize_table(&dir.join(BOUNDARY_CSV))?;
    let design = tables::read_f64_table(&dir.join(DESIGN_CSV))?;
    let solutions = tables::read_f64_table(&dir.join(DATASET_SOLUTIONS_CSV))?;

    let mesh = canonical_mesh(&nodes)?;
    let n_nodes = nodes.nrows();
    if elements.len() != mesh.elements().len() {
        return Err(Error::MeshValidity(format!(
            "{} elements listed, lattice implies {}",
            elements.len(),
            mesh.elements().len()
        )));
    }
    for (i, row) in elements.iter().enumerate() {
        if row.len() != 6 {
            return Err(Error::MeshValidity(format!(
                "element {i} lists {} nodes, expected 6",
                row.len()
            )));
        }
        if row.iter().any(|&v| v >= n_nodes) {
            return Err(Error::MeshValidity(format!(
                "element {i} references a node index beyond {n_nodes}"
            )));
        }
        if row.as_slice() != mesh.elements()[i].as_slice() {
            return Err(Error::MeshValidity(format!(
                "element {i} does not match the structured triangulation"
            )));
        }
    }
    let boundary_flat: Vec<usize> = boundary.iter().map(|r| r[0]).collect();
    if boundary_flat != mesh.boundary() {
        return Err(Error::MeshValidity(
            "boundary list does not match the lattice boundary".into(),
        ));
    }
    if solutions.nrows() != n_nodes {
        return Err(Error::format(
            &dir.join(DATASET_SOLUTIONS_CSV).display().to_string(),
            &format!(
                "{} rows but the mesh has {} nodes",
                solutions.nrows(),
                n_nodes
            ),
        ));
    }
    if solutions.ncols() != design.nrows() {
        return Err(Error::format(
            &dir.join(DATASET_SOLUTIONS_CSV).display().to_string(),
            &format!(
                "{} columns but the design has {} rows",
                solutions.ncols(),
                design.nrows()
            ),
        ));
    }
    Ok(Dataset {
        mesh,
        design,
        solutions,
    })
}
