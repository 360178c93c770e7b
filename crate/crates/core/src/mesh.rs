//! Triangulation of the study domain, linear-element FEM matrices and
//! barycentric projectors from mesh nodes to point sets.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{ring_is_simple, signed_area, Point2D};
use crate::sparse::{CscMatrix, SymMatrix, Triplets};

/// Smallest interior angle the lattice generator will produce.
pub const MIN_ANGLE_DEG: f64 = 20.0;

const BARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangularMesh {
    vertices: Vec<Point2D>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
}

impl TriangularMesh {
    /// Validates and stores a triangulation. Triangles are reoriented counter-clockwise.
    pub fn new(vertices: Vec<Point2D>, triangles: Vec<[usize; 3]>, boundary: Vec<bool>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidInput("a mesh needs at least 3 vertices".into()));
        }
        if boundary.len() != vertices.len() {
            return Err(Error::InvalidInput("boundary flags must match the vertex count".into()));
        }
        if let Some(k) = vertices.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("vertex {k} is not finite")));
        }
        let mut triangles = triangles;
        for (k, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidInput(format!("triangle {k} references a missing vertex")));
            }
            let a = tri_signed_area(&vertices, tri);
            if a < 0.0 {
                tri.swap(1, 2);
            } else if !(a > 0.0) {
                return Err(Error::InvalidInput(format!("triangle {k} is degenerate")));
            }
        }
        if triangles.is_empty() {
            return Err(Error::InvalidInput("a mesh needs at least one triangle".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            boundary,
        })
    }

    pub fn vertices(&self) -> &[Point2D] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| tri_signed_area(&self.vertices, t))
            .sum()
    }

    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| (0..3).map(move |e| (t[e], t[(e + 1) % 3])))
            .map(|(a, b)| self.vertices[a].distance(&self.vertices[b]))
            .fold(0.0, f64::max)
    }

    pub fn min_angle_deg(&self) -> f64 {
        let mut min = f64::INFINITY;
        for t in &self.triangles {
            for k in 0..3 {
                let p = self.vertices[t[k]];
                let a = self.vertices[t[(k + 1) % 3]];
                let b = self.vertices[t[(k + 2) % 3]];
                let (ux, uy) = (a.x - p.x, a.y - p.y);
                let (vx, vy) = (b.x - p.x, b.y - p.y);
                let cos = (ux * vx + uy * vy) / (ux.hypot(uy) * vx.hypot(vy));
                min = min.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        min
    }

    /// Applies a vertex relabelling: new vertex `i` is old vertex `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_vertices();
        if perm.len() != n {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::InvalidInput("not a permutation".into()));
            }
            inv[p] = i;
        }
        let vertices = perm.iter().map(|&p| self.vertices[p]).collect();
        let boundary = perm.iter().map(|&p| self.boundary[p]).collect();
        let triangles = self
            .triangles
            .iter()
            .map(|t| [inv[t[0]], inv[t[1]], inv[t[2]]])
            .collect();
        Self::new(vertices, triangles, boundary)
    }

    /// Writes the plain-text mesh format:
    ///
    /// ```text
    /// vertices <D>
    /// <x> <y> <boundary 0|1>      (D lines)
    /// triangles <n>
    /// <i> <j> <k>                 (n lines, zero-based, counter-clockwise)
    /// ```
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "vertices {}", self.vertices.len())?;
        for (p, b) in self.vertices.iter().zip(&self.boundary) {
            writeln!(w, "{:?} {:?} {}", p.x, p.y, u8::from(*b))?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::Parse(e.to_string())),
                None => Err(Error::Parse("unexpected end of mesh file".into())),
            }
        };
        let header = |line: String, key: &str| -> Result<usize> {
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(|s| s.parse().ok())) {
                (Some(k), Some(n)) if k == key => Ok(n),
                _ => Err(Error::Parse(format!("expected `{key} <count>`, got `{line}`"))),
            }
        };
        let bad = |line: &str| Error::Parse(format!("malformed mesh line `{line}`"));
        let nv = header(next()?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        let mut boundary = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(&line));
            }
            let x: f64 = f[0].parse().map_err(|_| bad(&line))?;
            let y: f64 = f[1].parse().map_err(|_| bad(&line))?;
            vertices.push(Point2D::new(x, y));
            boundary.push(f[2] == "1");
        }
        let nt = header(next()?, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = next()?;
            let idx: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(&line)))
                .collect::<Result<_>>()?;
            if idx.len() != 3 {
                return Err(bad(&line));
            }
            triangles.push([idx[0], idx[1], idx[2]]);
        }
        Self::new(vertices, triangles, boundary)
    }
}

fn tri_signed_area(v: &[Point2D], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (v[t[0]], v[t[1]], v[t[2]]);
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

/// Structured right-triangle lattice over the bounding box of `hull` grown by `buffer`.
///
/// Cell legs are chosen so that the hypotenuse is at most `max_edge` and the
/// leg ratio keeps the smallest angle at or above [`MIN_ANGLE_DEG`]. Lattice
/// lines pass through the bounding-box edges, so a rectangular hull is
/// reproduced exactly.
pub fn build_mesh(hull: &[Point2D], max_edge: f64, buffer: f64) -> Result<TriangularMesh> {
    if !(max_edge > 0.0) || !max_edge.is_finite() {
        return Err(Error::InvalidInput(format!("max_edge must be positive, got {max_edge}")));
    }
    if !(buffer >= 0.0) || !buffer.is_finite() {
        return Err(Error::InvalidInput(format!("buffer must be non-negative, got {buffer}")));
    }
    let mut ring = hull.to_vec();
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("hull has non-finite coordinates".into()));
    }
    if ring.len() < 3 || !ring_is_simple(&ring) || signed_area(&ring).abs() <= 0.0 {
        return Err(Error::InvalidInput("hull must be a simple polygon with positive area".into()));
    }
    let xmin = ring.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - buffer;
    let xmax = ring.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + buffer;
    let ymin = ring.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - buffer;
    let ymax = ring.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + buffer;
    let (width, height) = (xmax - xmin, ymax - ymin);

    let leg = max_edge / std::f64::consts::SQRT_2;
    let mut nx = (width / leg).ceil().max(1.0) as usize;
    let mut ny = (height / leg).ceil().max(1.0) as usize;
    let min_ratio = MIN_ANGLE_DEG.to_radians().tan();
    loop {
        let (hx, hy) = (width / nx as f64, height / ny as f64);
        if hx < min_ratio * hy {
            ny += 1;
        } else if hy < min_ratio * hx {
            nx += 1;
        } else {
            break;
        }
    }
    let (hx, hy) = (width / nx as f64, height / ny as f64);

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut boundary = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let y = if j == ny { ymax } else { ymin + j as f64 * hy };
        for i in 0..=nx {
            let x = if i == nx { xmax } else { xmin + i as f64 * hx };
            vertices.push(Point2D::new(x, y));
            boundary.push(i == 0 || j == 0 || i == nx || j == ny);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriangularMesh::new(vertices, triangles, boundary)
}

/// Linear-element mass and stiffness matrices.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub c_consistent: SymMatrix,
    pub c_lumped: Vec<f64>,
    pub g: SymMatrix,
}

pub fn assemble_fem(mesh: &TriangularMesh) -> FemMatrices {
    let n = mesh.n_vertices();
    let v = mesh.vertices();
    let mut c = Triplets::with_capacity(n, n, 9 * mesh.triangles().len());
    let mut g = Triplets::with_capacity(n, n, 9 * mesh.triangles().len());
    let mut lumped = vec![0.0; n];
    for t in mesh.triangles() {
        let area = tri_signed_area(v, t);
        // Barycentric gradient of vertex k is perp(opposite edge) / (2·area).
        let edge = |k: usize| {
            let (p, q) = (v[t[(k + 1) % 3]], v[t[(k + 2) % 3]]);
            (q.x - p.x, q.y - p.y)
        };
        let e = [edge(0), edge(1), edge(2)];
        for a in 0..3 {
            lumped[t[a]] += area / 3.0;
            for b in 0..3 {
                let mass = if a == b { area / 6.0 } else { area / 12.0 };
                c.push(t[a], t[b], mass);
                let dot = e[a].0 * e[b].0 + e[a].1 * e[b].1;
                g.push(t[a], t[b], dot / (4.0 * area));
            }
        }
    }
    FemMatrices {
        c_consistent: c.to_sym().expect("element mass matrices are symmetric"),
        c_lumped: lumped,
        g: g.to_sym().expect("element stiffness matrices are symmetric"),
    }
}

/// Barycentric interpolation weights mapping mesh-node values to points.
#[derive(Debug, Clone)]
pub struct Projector {
    pub matrix: CscMatrix,
    pub points: Vec<Point2D>,
}

impl Projector {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Interpolated values at the points for node values `field`.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(field)
    }
}

/// Uniform bucket index of triangle bounding boxes.
struct Locator {
    x0: f64,
    y0: f64,
    cw: f64,
    ch: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn new(mesh: &TriangularMesh) -> Self {
        let v = mesh.vertices();
        let x0 = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let x1 = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let y0 = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let y1 = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let side = (mesh.triangles().len() as f64).sqrt().ceil().max(1.0) as usize;
        let (nx, ny) = (side, side);
        let cw = (x1 - x0) / nx as f64;
        let ch = (y1 - y0) / ny as f64;
        let mut loc = Self {
            x0,
            y0,
            cw,
            ch,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (k, t) in mesh.triangles().iter().enumerate() {
            let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
            for &i in t {
                let (cx, cy) = loc.cell(v[i]);
                bx0 = bx0.min(cx);
                by0 = by0.min(cy);
                bx1 = bx1.max(cx);
                by1 = by1.max(cy);
            }
            for cy in by0..=by1 {
                for cx in bx0..=bx1 {
                    loc.buckets[cy * nx + cx].push(k);
                }
            }
        }
        loc
    }

    fn cell(&self, p: Point2D) -> (usize, usize) {
        let fx = ((p.x - self.x0) / self.cw).floor();
        let fy = ((p.y - self.y0) / self.ch).floor();
        (
            (fx.max(0.0) as usize).min(self.nx - 1),
            (fy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    fn candidates(&self, p: Point2D) -> Option<&[usize]> {
        let tol = 1e-9 * (self.cw * self.nx as f64 + self.ch * self.ny as f64);
        let x_out = p.x < self.x0 - tol || p.x > self.x0 + self.cw * self.nx as f64 + tol;
        let y_out = p.y < self.y0 - tol || p.y > self.y0 + self.ch * self.ny as f64 + tol;
        if x_out || y_out {
            return None;
        }
        let (cx, cy) = self.cell(p);
        Some(&self.buckets[cy * self.nx + cx])
    }
}

fn barycentric(v: &[Point2D], t: &[usize; 3], p: Point2D) -> [f64; 3] {
    let (a, b, c) = (v[t[0]], v[t[1]], v[t[2]]);
    let det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    let l1 = ((p.x - a.x) * (c.y - a.y) - (c.x - a.x) * (p.y - a.y)) / det;
    let l2 = ((b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y)) / det;
    [1.0 - l1 - l2, l1, l2]
}

pub fn build_projector(mesh: &TriangularMesh, points: &[Point2D]) -> Result<Projector> {
    let locator = Locator::new(mesh);
    let v = mesh.vertices();
    let mut trip = Triplets::with_capacity(points.len(), mesh.n_vertices(), 3 * points.len());
    let mut outside = Vec::new();
    for (row, &p) in points.iter().enumerate() {
        let found = locator.candidates(p).and_then(|cands| {
            cands.iter().find_map(|&k| {
                let t = &mesh.triangles()[k];
                let w = barycentric(v, t, p);
                w.iter().all(|&x| x >= -BARY_EPS).then_some((t, w))
            })
        });
        match found {
            Some((t, w)) => {
                let w = w.map(|x| if x.abs() <= BARY_EPS { 0.0 } else { x });
                let total: f64 = w.iter().sum();
                for k in 0..3 {
                    if w[k] > 0.0 {
                        trip.push(row, t[k], w[k] / total);
                    }
                }
            }
            None => outside.push(row),
        }
    }
    if !outside.is_empty() {
        return Err(Error::OutsideHull { indices: outside });
    }
    Ok(Projector {
        matrix: trip.to_csc(),
        points: points.to_vec(),
    })
}

/// Axis-aligned rectangle as a counter-clockwise ring.
pub fn rectangle(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Vec<Point2D> {
    vec![
        Point2D::new(xmin, ymin),
        Point2D::new(xmax, ymin),
        Point2D::new(xmax, ymax),
        Point2D::new(xmin, ymax),
    ]
}
