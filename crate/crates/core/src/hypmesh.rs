//! Intrinsic triangulations of closed hyperbolic surfaces.
//!
//! A [`SurfaceMesh`] is a glued set of triangles carrying hyperbolic edge
//! lengths. It is allowed to be a Δ-complex rather than a simplicial complex:
//! a face may repeat a vertex and an edge may be a loop. This is needed for
//! the unrefined Fuchsian fan, where all polygon corners are one vertex.
//!
//! Half-edges are numbered `3 * face + side`, where side `s` runs from corner
//! `s` to corner `s + 1` of the face. Faces are counter-clockwise.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Tolerance on vertex angle defects and on the Gauss–Bonnet area identity.
pub const FLAT_TOL: f64 = 1e-8;

/// Relative tolerance for the two copies of an edge length in an ITRI file.
pub const DUPLICATE_LENGTH_RTOL: f64 = 1e-12;

const MAX_GLUING_CANDIDATES: usize = 1 << 14;

pub type HalfEdge = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("genus below 2 (got Euler characteristic {chi})")]
    GenusTooSmall { chi: i64 },
    #[error("nonpositive edge length {length} on face {face}")]
    NonpositiveLength { face: usize, length: f64 },
    #[error("triangle inequality violated on face {face}: lengths {lengths:?}")]
    TriangleInequality { face: usize, lengths: [f64; 3] },
    #[error("inconsistent duplicate edge lengths between vertices {a} and {b}: {first} vs {second}")]
    InconsistentLength { a: usize, b: usize, first: f64, second: f64 },
    #[error("malformed mesh file at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("not a closed oriented surface: {0}")]
    NonManifold(String),
    #[error("ambiguous edge gluing: {0}")]
    AmbiguousGluing(String),
    #[error("angle defect {defect:e} at vertex {vertex} exceeds {tol:e}")]
    AngleDefect { vertex: usize, defect: f64, tol: f64 },
    #[error("total area {area} differs from 4π(genus-1) = {expected} by more than {tol:e}")]
    AreaMismatch { area: f64, expected: f64, tol: f64 },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// Closed triangulated surface with hyperbolic edge lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    face_edges: Vec<[usize; 3]>,
    edge_lengths: Vec<f64>,
    edge_halves: Vec<[HalfEdge; 2]>,
    vertex_halfedge: Vec<HalfEdge>,
    corner_angles: Vec<[f64; 3]>,
    face_areas: Vec<f64>,
    vertex_areas: Vec<f64>,
    genus: usize,
}

/// Geometry diagnostics of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshReport {
    pub max_vertex_defect: f64,
    pub total_area: f64,
    pub area_error: f64,
    pub min_angle: f64,
    pub edge_length_range: (f64, f64),
}

/// Cotangent stiffness form and lumped mass weights.
#[derive(Debug, Clone)]
pub struct LaplacePair {
    pub stiffness: DMatrix<f64>,
    pub mass: DVector<f64>,
}

impl SurfaceMesh {
    /// Builds a mesh from faces, per-side edge ids and per-edge lengths.
    ///
    /// Edge ids are renumbered by first appearance in face order, so two
    /// meshes with the same faces and gluing compare equal.
    pub fn from_gluing(
        vertex_count: usize,
        faces: Vec<[usize; 3]>,
        face_edges: Vec<[usize; 3]>,
        edge_lengths: Vec<f64>,
    ) -> Result<Self, MeshError> {
        if faces.len() != face_edges.len() {
            return Err(MeshError::NonManifold("face/edge table size mismatch".into()));
        }
        if faces.iter().flatten().any(|&v| v >= vertex_count) {
            return Err(MeshError::NonManifold("vertex index out of range".into()));
        }

        // Renumber edges by first appearance.
        let mut remap = vec![usize::MAX; edge_lengths.len()];
        let mut lengths = Vec::with_capacity(edge_lengths.len());
        let mut halves: Vec<Vec<HalfEdge>> = Vec::with_capacity(edge_lengths.len());
        let mut new_face_edges = face_edges.clone();
        for (f, sides) in face_edges.iter().enumerate() {
            for s in 0..3 {
                let old = sides[s];
                if old >= edge_lengths.len() {
                    return Err(MeshError::NonManifold(format!("edge id {old} out of range")));
                }
                if remap[old] == usize::MAX {
                    remap[old] = lengths.len();
                    lengths.push(edge_lengths[old]);
                    halves.push(Vec::new());
                }
                new_face_edges[f][s] = remap[old];
                halves[remap[old]].push(3 * f + s);
            }
        }

        let mut edge_halves = Vec::with_capacity(halves.len());
        for (e, hs) in halves.iter().enumerate() {
            if hs.len() != 2 {
                return Err(MeshError::NonManifold(format!(
                    "edge {e} is used by {} face sides",
                    hs.len()
                )));
            }
            let (h0, h1) = (hs[0], hs[1]);
            let ends = |h: HalfEdge| (faces[h / 3][h % 3], faces[h / 3][(h % 3 + 1) % 3]);
            let (a0, b0) = ends(h0);
            let (a1, b1) = ends(h1);
            if a0 != b1 || b0 != a1 {
                return Err(MeshError::NonManifold(format!(
                    "edge {e} is not glued with opposite orientation"
                )));
            }
            edge_halves.push([h0, h1]);
        }

        let mut corner_angles = Vec::with_capacity(faces.len());
        let mut face_areas = Vec::with_capacity(faces.len());
        for (f, sides) in new_face_edges.iter().enumerate() {
            let l = [lengths[sides[0]], lengths[sides[1]], lengths[sides[2]]];
            for &length in &l {
                if !(length > 0.0) || !length.is_finite() {
                    return Err(MeshError::NonpositiveLength { face: f, length });
                }
            }
            if !(l[0] < l[1] + l[2] && l[1] < l[0] + l[2] && l[2] < l[0] + l[1]) {
                return Err(MeshError::TriangleInequality { face: f, lengths: l });
            }
            // Corner s sits between sides s and s+2 and faces side s+1.
            let angles = [
                corner_angle(l[1], l[0], l[2]),
                corner_angle(l[2], l[0], l[1]),
                corner_angle(l[0], l[1], l[2]),
            ];
            face_areas.push(PI - angles[0] - angles[1] - angles[2]);
            corner_angles.push(angles);
        }

        let mut vertex_areas = vec![0.0; vertex_count];
        for (f, tri) in faces.iter().enumerate() {
            for &v in tri {
                vertex_areas[v] += face_areas[f] / 3.0;
            }
        }

        let mut vertex_halfedge = vec![usize::MAX; vertex_count];
        let mut degree = vec![0usize; vertex_count];
        for h in 0..3 * faces.len() {
            let v = faces[h / 3][h % 3];
            degree[v] += 1;
            if vertex_halfedge[v] == usize::MAX {
                vertex_halfedge[v] = h;
            }
        }
        if let Some(v) = vertex_halfedge.iter().position(|&h| h == usize::MAX) {
            return Err(MeshError::NonManifold(format!("vertex {v} has no incident face")));
        }

        let mut mesh = SurfaceMesh {
            vertex_count,
            faces,
            face_edges: new_face_edges,
            edge_lengths: lengths,
            edge_halves,
            vertex_halfedge,
            corner_angles,
            face_areas,
            vertex_areas,
            genus: 0,
        };

        for v in 0..vertex_count {
            if mesh.outgoing(v).len() != degree[v] {
                return Err(MeshError::NonManifold(format!(
                    "the link of vertex {v} is not a single cycle"
                )));
            }
        }

        let chi = mesh.euler_characteristic();
        if chi > -2 || chi % 2 != 0 {
            return Err(MeshError::GenusTooSmall { chi });
        }
        mesh.genus = ((2 - chi) / 2) as usize;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_lengths.len()
    }

    pub fn genus(&self) -> usize {
        self.genus
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count as i64 - self.edge_count() as i64 + self.face_count() as i64
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_edges(&self) -> &[[usize; 3]] {
        &self.face_edges
    }

    pub fn edge_lengths(&self) -> &[f64] {
        &self.edge_lengths
    }

    pub fn corner_angles(&self) -> &[[f64; 3]] {
        &self.corner_angles
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn vertex_areas(&self) -> &[f64] {
        &self.vertex_areas
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    /// Area forced by Gauss–Bonnet for curvature −1.
    pub fn expected_area(&self) -> f64 {
        4.0 * PI * (self.genus as f64 - 1.0)
    }

    pub fn half_edge_count(&self) -> usize {
        3 * self.faces.len()
    }

    pub fn origin(&self, h: HalfEdge) -> usize {
        self.faces[h / 3][h % 3]
    }

    pub fn target(&self, h: HalfEdge) -> usize {
        self.faces[h / 3][(h % 3 + 1) % 3]
    }

    pub fn next(&self, h: HalfEdge) -> HalfEdge {
        3 * (h / 3) + (h % 3 + 1) % 3
    }

    pub fn prev(&self, h: HalfEdge) -> HalfEdge {
        3 * (h / 3) + (h % 3 + 2) % 3
    }

    pub fn edge(&self, h: HalfEdge) -> usize {
        self.face_edges[h / 3][h % 3]
    }

    pub fn twin(&self, h: HalfEdge) -> HalfEdge {
        let [a, b] = self.edge_halves[self.edge(h)];
        if a == h {
            b
        } else {
            a
        }
    }

    /// The two half-edges of an edge, in order of appearance.
    pub fn edge_halves(&self, e: usize) -> [HalfEdge; 2] {
        self.edge_halves[e]
    }

    pub fn length(&self, h: HalfEdge) -> f64 {
        self.edge_lengths[self.edge(h)]
    }

    /// Interior angle of the face at the origin of `h`.
    pub fn angle_at_origin(&self, h: HalfEdge) -> f64 {
        self.corner_angles[h / 3][h % 3]
    }

    /// Angle opposite to `h` in its face.
    pub fn opposite_angle(&self, h: HalfEdge) -> f64 {
        self.corner_angles[h / 3][(h % 3 + 2) % 3]
    }

    /// Outgoing half-edges of `v` in counter-clockwise order, starting from
    /// the lowest-numbered one.
    pub fn outgoing(&self, v: usize) -> Vec<HalfEdge> {
        let start = self.vertex_halfedge[v];
        let mut out = vec![start];
        let mut h = self.twin(self.prev(start));
        while h != start {
            out.push(h);
            if out.len() > self.half_edge_count() {
                break;
            }
            h = self.twin(self.prev(h));
        }
        out
    }

    /// Sum of corner angles at `v`.
    pub fn cone_angle(&self, v: usize) -> f64 {
        self.outgoing(v).iter().map(|&h| self.angle_at_origin(h)).sum()
    }

    pub fn vertex_defect(&self, v: usize) -> f64 {
        2.0 * PI - self.cone_angle(v)
    }

    /// Half the sum of cotangents of the angles opposite to edge `e`.
    pub fn cotan_weight(&self, e: usize) -> f64 {
        let [h0, h1] = self.edge_halves[e];
        0.5 * (1.0 / self.opposite_angle(h0).tan() + 1.0 / self.opposite_angle(h1).tan())
    }

    /// Returns a copy with replaced edge lengths (same combinatorics).
    pub fn with_edge_lengths(&self, lengths: Vec<f64>) -> Result<Self, MeshError> {
        SurfaceMesh::from_gluing(
            self.vertex_count,
            self.faces.clone(),
            self.face_edges.clone(),
            lengths,
        )
    }

    /// Checks zero angle defects and the Gauss–Bonnet area within `tol`.
    pub fn check_hyperbolic_structure(&self, tol: f64) -> Result<(), MeshError> {
        for v in 0..self.vertex_count {
            let defect = self.vertex_defect(v);
            if defect.abs() > tol {
                return Err(MeshError::AngleDefect { vertex: v, defect, tol });
            }
        }
        let area = self.total_area();
        if (area - self.expected_area()).abs() > tol {
            return Err(MeshError::AreaMismatch {
                area,
                expected: self.expected_area(),
                tol,
            });
        }
        Ok(())
    }

    /// True when no edge is a loop and no two edges share both endpoints.
    pub fn is_simplicial(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        for e in 0..self.edge_count() {
            let h = self.edge_halves[e][0];
            let (a, b) = (self.origin(h), self.target(h));
            if a == b || !seen.insert((a.min(b), a.max(b))) {
                return false;
            }
        }
        true
    }
}

/// Interior angle opposite to side `a` in a hyperbolic triangle with sides
/// `a`, `b`, `c`, by the half-angle form of the hyperbolic law of cosines.
pub fn corner_angle(a: f64, b: f64, c: f64) -> f64 {
    let s = 0.5 * (a + b + c);
    let num = (s - b).sinh() * (s - c).sinh();
    let den = s.sinh() * (s - a).sinh();
    2.0 * (num / den).sqrt().atan()
}

/// Geometry diagnostics: defects by the hyperbolic law of cosines, face
/// areas as angle deficits, and the Gauss–Bonnet area error.
pub fn mesh_report(mesh: &SurfaceMesh) -> MeshReport {
    let max_vertex_defect = (0..mesh.vertex_count())
        .map(|v| mesh.vertex_defect(v).abs())
        .fold(0.0, f64::max);
    let total_area = mesh.total_area();
    let min_angle = mesh
        .corner_angles()
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let lo = mesh.edge_lengths().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mesh.edge_lengths().iter().copied().fold(0.0, f64::max);
    MeshReport {
        max_vertex_defect,
        total_area,
        area_error: (total_area - mesh.expected_area()).abs(),
        min_angle,
        edge_length_range: (lo, hi),
    }
}

/// Dense cotangent stiffness matrix (kernel = constants) and lumped masses.
pub fn laplace_pair(mesh: &SurfaceMesh) -> LaplacePair {
    let n = mesh.vertex_count();
    let mut stiffness = DMatrix::zeros(n, n);
    for e in 0..mesh.edge_count() {
        let h = mesh.edge_halves(e)[0];
        let (a, b) = (mesh.origin(h), mesh.target(h));
        if a == b {
            continue;
        }
        let w = mesh.cotan_weight(e);
        stiffness[(a, a)] += w;
        stiffness[(b, b)] += w;
        stiffness[(a, b)] -= w;
        stiffness[(b, a)] -= w;
    }
    LaplacePair {
        stiffness,
        mass: DVector::from_column_slice(mesh.vertex_areas()),
    }
}

// ---------------------------------------------------------------------------
// Fuchsian generator

fn disk_distance(z: Complex64, w: Complex64) -> f64 {
    let den = ((1.0 - z.norm_sqr()) * (1.0 - w.norm_sqr())).sqrt();
    2.0 * ((z - w).norm() / den).asinh()
}

fn disk_midpoint(z: Complex64, w: Complex64) -> Complex64 {
    // Move z to the origin, halve along the ray, move back.
    let t = (w - z) / (Complex64::new(1.0, 0.0) - z.conj() * w);
    let d = t.norm();
    if d == 0.0 {
        return z;
    }
    let m = t * (1.0 / (1.0 + (1.0 - d * d).sqrt()));
    (m + z) / (Complex64::new(1.0, 0.0) + z.conj() * m)
}

struct DiskComplex {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    face_edges: Vec<[usize; 3]>,
    edge_count: usize,
    positions: Vec<[Complex64; 3]>,
}

impl DiskComplex {
    fn fuchsian_fan(genus: usize) -> Self {
        let n = 4 * genus;
        let cot = 1.0 / (PI / n as f64).tan();
        let circumradius = (cot * cot).acosh();
        let r = (0.5 * circumradius).tanh();
        let corner = |k: usize| Complex64::from_polar(r, 2.0 * PI * (k % n) as f64 / n as f64);

        // Vertex 0 is the center, vertex 1 is the identified corner.
        // Spokes are edges 0..n; side pair (4m, 4m+2) and (4m+1, 4m+3)
        // follow the word a b a^-1 b^-1.
        let mut faces = Vec::with_capacity(n);
        let mut face_edges = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for k in 0..n {
            let block = k / 4;
            let side_edge = n + 2 * block + (k % 2);
            faces.push([0, 1, 1]);
            face_edges.push([k, side_edge, (k + 1) % n]);
            positions.push([Complex64::new(0.0, 0.0), corner(k), corner(k + 1)]);
        }
        DiskComplex {
            vertex_count: 2,
            faces,
            face_edges,
            edge_count: n + 2 * genus,
            positions,
        }
    }

    fn first_sides(&self) -> Vec<(usize, usize)> {
        let mut first = vec![(usize::MAX, 0); self.edge_count];
        for (f, sides) in self.face_edges.iter().enumerate() {
            for s in 0..3 {
                if first[sides[s]].0 == usize::MAX {
                    first[sides[s]] = (f, s);
                }
            }
        }
        first
    }

    fn subdivide(&self) -> Self {
        let first = self.first_sides();
        let base_edges = 2 * self.edge_count;
        let mid = |e: usize| self.vertex_count + e;
        let mut faces = Vec::with_capacity(4 * self.faces.len());
        let mut face_edges = Vec::with_capacity(4 * self.faces.len());
        let mut positions = Vec::with_capacity(4 * self.faces.len());

        for (f, tri) in self.faces.iter().enumerate() {
            let p = self.positions[f];
            let e = self.face_edges[f];
            // (segment from side origin to midpoint, segment from midpoint to side target)
            let seg = |s: usize| {
                if first[e[s]] == (f, s) {
                    (2 * e[s], 2 * e[s] + 1)
                } else {
                    (2 * e[s] + 1, 2 * e[s])
                }
            };
            let (s0a, s0b) = seg(0);
            let (s1a, s1b) = seg(1);
            let (s2a, s2b) = seg(2);
            let inner = |t: usize| base_edges + 3 * f + t;
            let (m0, m1, m2) = (mid(e[0]), mid(e[1]), mid(e[2]));
            let q0 = disk_midpoint(p[0], p[1]);
            let q1 = disk_midpoint(p[1], p[2]);
            let q2 = disk_midpoint(p[2], p[0]);

            faces.push([tri[0], m0, m2]);
            face_edges.push([s0a, inner(0), s2b]);
            positions.push([p[0], q0, q2]);

            faces.push([m0, tri[1], m1]);
            face_edges.push([s0b, s1a, inner(1)]);
            positions.push([q0, p[1], q1]);

            faces.push([m2, m1, tri[2]]);
            face_edges.push([inner(2), s1b, s2a]);
            positions.push([q2, q1, p[2]]);

            faces.push([m0, m1, m2]);
            face_edges.push([inner(1), inner(2), inner(0)]);
            positions.push([q0, q1, q2]);
        }
        DiskComplex {
            vertex_count: self.vertex_count + self.edge_count,
            faces,
            face_edges,
            edge_count: base_edges + 3 * self.faces.len(),
            positions,
        }
    }

    fn edge_lengths(&self) -> Vec<f64> {
        let mut lengths = vec![f64::NAN; self.edge_count];
        for (f, sides) in self.face_edges.iter().enumerate() {
            let p = self.positions[f];
            for s in 0..3 {
                let l = disk_distance(p[s], p[(s + 1) % 3]);
                let slot = &mut lengths[sides[s]];
                if slot.is_nan() {
                    *slot = l;
                } else {
                    debug_assert!((*slot - l).abs() <= 1e-9 * l, "side pairing is not isometric");
                }
            }
        }
        lengths
    }
}

/// Regular hyperbolic 4γ-gon with the standard side pairing, fanned from its
/// center and midpoint-refined `subdivision` times in the Poincaré disk.
pub fn build_fuchsian_mesh(genus: usize, subdivision: usize) -> Result<SurfaceMesh, MeshError> {
    if genus < 2 {
        return Err(MeshError::GenusTooSmall { chi: 2 - 2 * genus as i64 });
    }
    let mut complex = DiskComplex::fuchsian_fan(genus);
    for _ in 0..subdivision {
        complex = complex.subdivide();
    }
    let lengths = complex.edge_lengths();
    SurfaceMesh::from_gluing(complex.vertex_count, complex.faces, complex.face_edges, lengths)
}

// ---------------------------------------------------------------------------
// ITRI text format

/// Serializes a mesh as ITRI text.
pub fn to_itri(mesh: &SurfaceMesh) -> String {
    let mut out = String::new();
    out.push_str("ITRI 1\n");
    let _ = writeln!(out, "{} {} {}", mesh.vertex_count(), mesh.face_count(), mesh.genus());
    for (f, tri) in mesh.faces().iter().enumerate() {
        let l = mesh.face_edges()[f].map(|e| mesh.edge_lengths()[e]);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            tri[0], tri[1], tri[2], l[0], l[1], l[2]
        );
    }
    out
}

pub fn write_mesh(mesh: &SurfaceMesh, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, to_itri(mesh)).map_err(|e| MeshError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_mesh(path: &Path) -> Result<SurfaceMesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|e| MeshError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_itri(&text)
}

/// Parses ITRI text and reconstructs the edge gluing.
///
/// Sides between the same two vertices are glued in opposite orientation.
/// When a vertex pair carries several edges, every consistent pairing is
/// tried and exactly one must yield a closed surface with single-cycle
/// vertex links.
pub fn parse_itri(text: &str) -> Result<SurfaceMesh, MeshError> {
    let malformed = |line: usize, msg: &str| MeshError::Malformed { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let (n, magic) = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
    if magic.trim() != "ITRI 1" {
        return Err(malformed(n + 1, "expected header `ITRI 1`"));
    }
    let (n, counts) = lines.next().ok_or_else(|| malformed(2, "missing counts line"))?;
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| malformed(n + 1, "expected `<V> <F> <genus>`"))?;
    if counts.len() != 3 {
        return Err(malformed(n + 1, "expected `<V> <F> <genus>`"));
    }
    let (vertex_count, face_count, declared_genus) = (counts[0], counts[1], counts[2]);

    let mut faces = Vec::with_capacity(face_count);
    let mut side_lengths = Vec::with_capacity(face_count);
    for (n, line) in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(malformed(n + 1, "expected `<i> <j> <k> <l_ij> <l_jk> <l_ki>`"));
        }
        let mut tri = [0usize; 3];
        for s in 0..3 {
            tri[s] = tok[s].parse().map_err(|_| malformed(n + 1, "bad vertex index"))?;
            if tri[s] >= vertex_count {
                return Err(malformed(n + 1, "vertex index out of range"));
            }
        }
        let mut l = [0.0f64; 3];
        for s in 0..3 {
            l[s] = tok[3 + s].parse().map_err(|_| malformed(n + 1, "bad edge length"))?;
            if !(l[s] > 0.0) || !l[s].is_finite() {
                return Err(MeshError::NonpositiveLength { face: faces.len(), length: l[s] });
            }
        }
        faces.push(tri);
        side_lengths.push(l);
    }
    if faces.len() != face_count {
        return Err(malformed(0, &format!("declared {face_count} faces, found {}", faces.len())));
    }

    let chi_from_counts = |edges: usize| vertex_count as i64 - edges as i64 + face_count as i64;
    if 3 * face_count % 2 != 0 {
        return Err(MeshError::NonManifold("odd number of face sides".into()));
    }
    let chi = chi_from_counts(3 * face_count / 2);
    if chi > -2 {
        return Err(MeshError::GenusTooSmall { chi });
    }

    let face_edges = reconstruct_gluing(&faces, &side_lengths)?;
    let edge_count = 3 * face_count / 2;
    let mut lengths = vec![0.0; edge_count];
    for (f, sides) in face_edges.iter().enumerate() {
        for s in 0..3 {
            lengths[sides[s]] = side_lengths[f][s];
        }
    }
    let mesh = SurfaceMesh::from_gluing(vertex_count, faces, face_edges, lengths)?;
    if mesh.genus() != declared_genus {
        return Err(malformed(
            2,
            &format!("declared genus {declared_genus}, Euler characteristic gives {}", mesh.genus()),
        ));
    }
    mesh.check_hyperbolic_structure(FLAT_TOL)?;
    Ok(mesh)
}

fn lengths_agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= DUPLICATE_LENGTH_RTOL * a.max(b)
}

/// Pairs face sides into edges; see [`parse_itri`].
fn reconstruct_gluing(
    faces: &[[usize; 3]],
    side_lengths: &[[f64; 3]],
) -> Result<Vec<[usize; 3]>, MeshError> {
    use std::collections::BTreeMap;

    let ends = |h: usize| (faces[h / 3][h % 3], faces[h / 3][(h % 3 + 1) % 3]);
    let len = |h: usize| side_lengths[h / 3][h % 3];

    // Group sides by unordered vertex pair, split by direction.
    let mut groups: BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for h in 0..3 * faces.len() {
        let (a, b) = ends(h);
        let entry = groups.entry((a.min(b), a.max(b))).or_default();
        if a <= b {
            entry.0.push(h);
        } else {
            entry.1.push(h);
        }
    }

    // Each group is resolved to a list of candidate pairings.
    let mut candidates: Vec<Vec<Vec<(usize, usize)>>> = Vec::new();
    for (&(a, b), (fwd, bwd)) in &groups {
        let options = if a == b {
            loop_pairings(fwd, &len)
        } else {
            if fwd.len() != bwd.len() {
                return Err(MeshError::NonManifold(format!(
                    "sides between vertices {a} and {b} are not glued in opposite orientation"
                )));
            }
            bijections(fwd, bwd, &len)
        };
        if options.is_empty() {
            let (h0, h1) = (fwd[0], if a == b { fwd[1 % fwd.len()] } else { bwd[0] });
            return Err(MeshError::InconsistentLength { a, b, first: len(h0), second: len(h1) });
        }
        candidates.push(options);
    }

    let total: usize = candidates
        .iter()
        .try_fold(1usize, |acc, c| acc.checked_mul(c.len()))
        .filter(|&t| t <= MAX_GLUING_CANDIDATES)
        .ok_or_else(|| MeshError::AmbiguousGluing("too many candidate pairings".into()))?;

    let mut found: Option<Vec<[usize; 3]>> = None;
    let mut choice = vec![0usize; candidates.len()];
    for _ in 0..total {
        let mut twin = vec![usize::MAX; 3 * faces.len()];
        for (g, &c) in choice.iter().enumerate() {
            for &(x, y) in &candidates[g][c] {
                twin[x] = y;
                twin[y] = x;
            }
        }
        if links_are_cycles(faces, &twin) {
            if found.is_some() {
                return Err(MeshError::AmbiguousGluing(
                    "several pairings give a closed surface".into(),
                ));
            }
            let mut face_edges = vec![[0usize; 3]; faces.len()];
            let mut next_id = 0;
            let mut id = vec![usize::MAX; twin.len()];
            for h in 0..twin.len() {
                if id[h] == usize::MAX {
                    id[h] = next_id;
                    id[twin[h]] = next_id;
                    next_id += 1;
                }
                face_edges[h / 3][h % 3] = id[h];
            }
            found = Some(face_edges);
        }
        // Odometer increment.
        for g in 0..choice.len() {
            choice[g] += 1;
            if choice[g] < candidates[g].len() {
                break;
            }
            choice[g] = 0;
        }
    }
    found.ok_or_else(|| MeshError::NonManifold("no pairing of face sides gives a closed surface".into()))
}

fn bijections(
    fwd: &[usize],
    bwd: &[usize],
    len: &dyn Fn(usize) -> f64,
) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        i: usize,
        fwd: &[usize],
        bwd: &[usize],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
        len: &dyn Fn(usize) -> f64,
    ) {
        if out.len() > MAX_GLUING_CANDIDATES {
            return;
        }
        if i == fwd.len() {
            out.push(cur.clone());
            return;
        }
        for j in 0..bwd.len() {
            if !used[j] && lengths_agree(len(fwd[i]), len(bwd[j])) {
                used[j] = true;
                cur.push((fwd[i], bwd[j]));
                rec(i + 1, fwd, bwd, used, cur, out, len);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, fwd, bwd, &mut vec![false; bwd.len()], &mut Vec::new(), &mut out, len);
    out
}

fn loop_pairings(sides: &[usize], len: &dyn Fn(usize) -> f64) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        rest: Vec<usize>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
        len: &dyn Fn(usize) -> f64,
    ) {
        if out.len() > MAX_GLUING_CANDIDATES {
            return;
        }
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        let x = rest[0];
        for k in 1..rest.len() {
            if lengths_agree(len(x), len(rest[k])) {
                let mut remaining = rest.clone();
                remaining.remove(k);
                remaining.remove(0);
                cur.push((x, rest[k]));
                rec(remaining, cur, out, len);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    if sides.len().is_multiple_of(2) {
        rec(sides.to_vec(), &mut Vec::new(), &mut out, len);
    }
    out
}

fn links_are_cycles(faces: &[[usize; 3]], twin: &[usize]) -> bool {
    let vertex_count = faces.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut degree = vec![0usize; vertex_count];
    let mut first = vec![usize::MAX; vertex_count];
    for h in 0..twin.len() {
        let v = faces[h / 3][h % 3];
        degree[v] += 1;
        if first[v] == usize::MAX {
            first[v] = h;
        }
    }
    let prev = |h: usize| 3 * (h / 3) + (h % 3 + 2) % 3;
    (0..vertex_count).all(|v| {
        if first[v] == usize::MAX {
            return true;
        }
        let start = first[v];
        let mut count = 1;
        let mut h = twin[prev(start)];
        while h != start && count <= degree[v] {
            count += 1;
            h = twin[prev(h)];
        }
        count == degree[v]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_has_expected_counts() {
        let m = build_fuchsian_mesh(2, 0).unwrap();
        assert_eq!((m.vertex_count(), m.edge_count(), m.face_count()), (2, 12, 8));
        assert_eq!(m.euler_characteristic(), -2);
        assert_eq!(m.genus(), 2);
        assert!((m.total_area() - 4.0 * PI).abs() < 1e-8);
        assert!(!m.is_simplicial());
    }

    #[test]
    fn rejects_small_genus() {
        assert!(matches!(build_fuchsian_mesh(1, 0), Err(MeshError::GenusTooSmall { .. })));
        assert!(matches!(build_fuchsian_mesh(0, 2), Err(MeshError::GenusTooSmall { .. })));
    }

    #[test]
    fn equilateral_triangle_area_is_angle_deficit() {
        // Side length of the equilateral triangle with angles 2π/7:
        // cosh a = cos α (1 + cos α) / sin² α.
        let alpha = 2.0 * PI / 7.0;
        let a = (alpha.cos() * (1.0 + alpha.cos()) / alpha.sin().powi(2)).acosh();
        let angle = corner_angle(a, a, a);
        assert!((angle - alpha).abs() < 1e-12);
        assert!((PI - 3.0 * angle - PI / 7.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_is_equidistant() {
        let z = Complex64::new(0.3, -0.2);
        let w = Complex64::new(-0.5, 0.6);
        let m = disk_midpoint(z, w);
        let d = disk_distance(z, w);
        assert!((disk_distance(z, m) - 0.5 * d).abs() < 1e-12);
        assert!((disk_distance(m, w) - 0.5 * d).abs() < 1e-12);
    }

    #[test]
    fn stiffness_kills_constants() {
        let m = build_fuchsian_mesh(2, 1).unwrap();
        let lp = laplace_pair(&m);
        let ones = DVector::from_element(m.vertex_count(), 1.0);
        assert!((&lp.stiffness * ones).amax() < 1e-12);
        assert!((lp.mass.sum() - 4.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn parse_rejects_bad_header() {
        assert!(matches!(parse_itri("ITRI 2\n1 1 2\n"), Err(MeshError::Malformed { .. })));
    }
}
