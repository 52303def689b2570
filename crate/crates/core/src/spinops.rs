//! Spin structures, the discrete Dirac operator, and its spectral calculus.
//!
//! Spinors live on vertices with fiber ℍ ≅ ℝ⁴. Every vertex carries a
//! reference frame given by its lowest-numbered outgoing half-edge; edge
//! directions are measured counter-clockwise from it. The operator is
//!
//! ```text
//! (Dψ)(v) = 1/A_v Σ_{h: v→w} c_e ε_e σ(ê_h) T_h ψ(w)
//! ```
//!
//! with `σ(ê)` left multiplication by the unit edge direction `cos φ i +
//! sin φ j`, `T_h = exp(δ_h k / 2)` the spinor lift of the Levi–Civita
//! transport from `w` to `v`, and `ε_e = ±1` the spin structure. The volume
//! element is left multiplication by `k`, and right multiplication by unit
//! quaternions commutes with everything above.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::hypmesh::{HalfEdge, SurfaceMesh};
use crate::quat::{self, Quat};

/// Minimum distance of ρ from the spectrum.
pub const EXCEPTIONAL_MARGIN: f64 = 1e-9;

/// Relative gap below which neighbouring eigenvalues form one cluster.
pub const CLUSTER_GAP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpinError {
    #[error("no sign assignment satisfies the face holonomy condition at face {face} (mesh orientation bug)")]
    NoBaseAssignment { face: usize },
    #[error("spin structure does not match the mesh: {0}")]
    Mismatch(String),
    #[error("exceptional rho: {rho} is within {margin:e} of eigenvalue {nearest}")]
    ExceptionalRho { rho: f64, nearest: f64, margin: f64 },
    #[error("nontrivial kernel of dimension {dim}")]
    NontrivialKernel { dim: usize },
    #[error("mesh has {vertices} vertices, above the dense eigensolver cap {cap}")]
    TooLarge { vertices: usize, cap: usize },
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("quaternion is not a unit (norm {0})")]
    NonUnitQuaternion(f64),
}

/// Discrete Levi–Civita connection data.
#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    /// Angle of each half-edge at its origin, in the origin's frame.
    pub direction: Vec<f64>,
    /// Rotation taking the target frame to the origin frame; antisymmetric.
    pub transport: Vec<f64>,
    /// Total frame rotation around each vertex star (2π on a flat cone).
    pub vertex_holonomy: Vec<f64>,
}

impl Connection {
    pub fn transport(&self, h: HalfEdge) -> f64 {
        self.transport[h]
    }
}

pub fn transport_angles(mesh: &SurfaceMesh) -> Connection {
    let nh = mesh.half_edge_count();
    let mut direction = vec![0.0; nh];
    let mut vertex_holonomy = vec![0.0; mesh.vertex_count()];
    for v in 0..mesh.vertex_count() {
        let mut phi = 0.0;
        for h in mesh.outgoing(v) {
            direction[h] = phi;
            phi += mesh.angle_at_origin(h);
        }
        vertex_holonomy[v] = phi;
    }
    let mut transport = vec![0.0; nh];
    for e in 0..mesh.edge_count() {
        let [h0, h1] = mesh.edge_halves(e);
        let delta = direction[h0] - direction[h1] + PI;
        transport[h0] = delta;
        transport[h1] = -delta;
    }
    Connection { direction, transport, vertex_holonomy }
}

/// One spin structure: edge signs plus the connection they lift.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinStructure {
    pub edge_signs: Vec<i8>,
    pub connection: Connection,
    pub class_index: usize,
}

impl SpinStructure {
    pub fn sign(&self, h: HalfEdge, mesh: &SurfaceMesh) -> f64 {
        f64::from(self.edge_signs[mesh.edge(h)])
    }

    /// Flips the signs of all edges at `v`; loops are flipped twice.
    pub fn gauge_flip(&self, mesh: &SurfaceMesh, v: usize) -> SpinStructure {
        let mut out = self.clone();
        for e in 0..mesh.edge_count() {
            let h = mesh.edge_halves(e)[0];
            let hits = usize::from(mesh.origin(h) == v) + usize::from(mesh.target(h) == v);
            if hits % 2 == 1 {
                out.edge_signs[e] = -out.edge_signs[e];
            }
        }
        out
    }
}

/// Tree–cotree decomposition used to parametrize spin structures.
#[derive(Debug, Clone)]
pub struct SpinTopology {
    tree_parent: Vec<Option<HalfEdge>>,
    in_tree: Vec<bool>,
    dual_parent: Vec<Option<usize>>,
    face_order: Vec<usize>,
    generators: Vec<usize>,
    face_parity: Vec<bool>,
}

impl SpinTopology {
    pub fn new(mesh: &SurfaceMesh, connection: &Connection) -> Result<Self, SpinError> {
        let nv = mesh.vertex_count();
        let ne = mesh.edge_count();
        let nf = mesh.face_count();

        // Primal spanning tree, breadth first from vertex 0, lowest edge first.
        let mut tree_parent = vec![None; nv];
        let mut visited = vec![false; nv];
        let mut in_tree = vec![false; ne];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(v) = queue.pop_front() {
            let mut out = mesh.outgoing(v);
            out.sort_by_key(|&h| (mesh.edge(h), h));
            for h in out {
                let w = mesh.target(h);
                if !visited[w] {
                    visited[w] = true;
                    in_tree[mesh.edge(h)] = true;
                    tree_parent[w] = Some(mesh.twin(h));
                    queue.push_back(w);
                }
            }
        }

        // Dual spanning tree across non-tree edges.
        let mut dual_parent = vec![None; nf];
        let mut seen = vec![false; nf];
        let mut in_cotree = vec![false; ne];
        let mut face_order = Vec::with_capacity(nf);
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(f) = queue.pop_front() {
            face_order.push(f);
            for s in 0..3 {
                let h = 3 * f + s;
                let e = mesh.edge(h);
                let g = mesh.twin(h) / 3;
                if !in_tree[e] && !seen[g] {
                    seen[g] = true;
                    in_cotree[e] = true;
                    dual_parent[g] = Some(e);
                    queue.push_back(g);
                }
            }
        }

        let generators: Vec<usize> =
            (0..ne).filter(|&e| !in_tree[e] && !in_cotree[e]).collect();
        debug_assert_eq!(generators.len(), 2 * mesh.genus());

        let mut face_parity = Vec::with_capacity(nf);
        for f in 0..nf {
            let total: f64 = (0..3).map(|s| connection.transport[3 * f + s]).sum();
            let turns = (total - mesh.face_areas()[f]) / (2.0 * PI);
            let m = turns.round();
            if (turns - m).abs() > 0.25 {
                return Err(SpinError::NoBaseAssignment { face: f });
            }
            face_parity.push((m as i64).rem_euclid(2) == 1);
        }

        Ok(SpinTopology {
            tree_parent,
            in_tree,
            dual_parent,
            face_order,
            generators,
            face_parity,
        })
    }

    pub fn generators(&self) -> &[usize] {
        &self.generators
    }

    pub fn class_count(&self) -> usize {
        1usize << self.generators.len()
    }

    /// Required parity of the sign product around each face.
    pub fn face_parity(&self) -> &[bool] {
        &self.face_parity
    }

    /// Signs for the class whose generator bits are `class_index`, in the
    /// gauge where spanning-tree edges carry `+1`.
    pub fn signs_for_class(&self, mesh: &SurfaceMesh, class_index: usize) -> Result<Vec<i8>, SpinError> {
        let ne = mesh.edge_count();
        let mut bit: Vec<Option<bool>> = vec![None; ne];
        for e in 0..ne {
            if self.in_tree[e] {
                bit[e] = Some(false);
            }
        }
        for (i, &g) in self.generators.iter().enumerate() {
            bit[g] = Some((class_index >> i) & 1 == 1);
        }
        for &f in self.face_order.iter().rev() {
            let Some(pe) = self.dual_parent[f] else { continue };
            let mut acc = self.face_parity[f];
            for s in 0..3 {
                let e = mesh.edge(3 * f + s);
                if e != pe {
                    acc ^= bit[e].expect("children are solved before parents");
                }
            }
            bit[pe] = Some(acc);
        }
        let bits: Vec<bool> = bit.into_iter().map(|b| b.unwrap_or(false)).collect();
        let root = self.face_order[0];
        let root_parity = (0..3).fold(false, |acc, s| acc ^ bits[mesh.edge(3 * root + s)]);
        if root_parity != self.face_parity[root] {
            return Err(SpinError::NoBaseAssignment { face: root });
        }
        Ok(bits.into_iter().map(|b| if b { -1 } else { 1 }).collect())
    }

    /// Gauge-invariant class label: sign products around the cycles
    /// closed by each generator through the spanning tree.
    pub fn signature(&self, mesh: &SurfaceMesh, signs: &[i8]) -> usize {
        let to_root = |mut v: usize| {
            let mut parity = false;
            while let Some(h) = self.tree_parent[v] {
                parity ^= signs[mesh.edge(h)] < 0;
                v = mesh.target(h);
            }
            parity
        };
        let mut index = 0;
        for (i, &g) in self.generators.iter().enumerate() {
            let h = mesh.edge_halves(g)[0];
            let parity = (signs[g] < 0) ^ to_root(mesh.origin(h)) ^ to_root(mesh.target(h));
            if parity {
                index |= 1 << i;
            }
        }
        index
    }

    /// Whether the signs lift the transport correctly around every face.
    pub fn holonomy_condition_holds(&self, mesh: &SurfaceMesh, signs: &[i8]) -> bool {
        (0..mesh.face_count()).all(|f| {
            let parity = (0..3).fold(false, |acc, s| acc ^ (signs[mesh.edge(3 * f + s)] < 0));
            parity == self.face_parity[f]
        })
    }
}

pub fn enumerate_spin_classes(mesh: &SurfaceMesh) -> Result<Vec<SpinStructure>, SpinError> {
    let connection = transport_angles(mesh);
    let topo = SpinTopology::new(mesh, &connection)?;
    (0..topo.class_count())
        .map(|class_index| {
            Ok(SpinStructure {
                edge_signs: topo.signs_for_class(mesh, class_index)?,
                connection: connection.clone(),
                class_index,
            })
        })
        .collect()
}

/// Self-adjoint discrete Dirac operator `D = M⁻¹ K` with `K` symmetric.
#[derive(Debug, Clone)]
pub struct DiracOperator {
    weak: DMatrix<f64>,
    mass: DVector<f64>,
}

impl DiracOperator {
    pub fn dimension(&self) -> usize {
        self.mass.len()
    }

    /// The symmetric matrix `K = M D`.
    pub fn weak_form(&self) -> &DMatrix<f64> {
        &self.weak
    }

    /// Vertex areas, repeated once per real fiber component.
    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn apply(&self, psi: &DVector<f64>) -> DVector<f64> {
        (&self.weak * psi).component_div(&self.mass)
    }

    pub fn volume_element(&self, psi: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(quat::left_act(psi.as_slice(), quat::K))
    }

    pub fn l2_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.component_mul(&self.mass).dot(b)
    }
}

pub fn assemble_dirac(mesh: &SurfaceMesh, spin: &SpinStructure) -> Result<DiracOperator, SpinError> {
    if spin.edge_signs.len() != mesh.edge_count()
        || spin.connection.transport.len() != mesh.half_edge_count()
    {
        return Err(SpinError::Mismatch("edge counts differ".into()));
    }
    let topo = SpinTopology::new(mesh, &spin.connection)?;
    if !topo.holonomy_condition_holds(mesh, &spin.edge_signs) {
        return Err(SpinError::Mismatch("signs violate the face holonomy condition".into()));
    }

    let n = 4 * mesh.vertex_count();
    let mut weak = DMatrix::zeros(n, n);
    for h in 0..mesh.half_edge_count() {
        let (v, w) = (mesh.origin(h), mesh.target(h));
        let e = mesh.edge(h);
        let weight = 0.5 * mesh.cotan_weight(e) * mesh.edge_lengths()[e] * spin.sign(h, mesh);
        let a: Quat = quat::mul(
            quat::direction(spin.connection.direction[h]),
            quat::spin_rotation(spin.connection.transport[h]),
        );
        let block = quat::left_matrix(a) * weight;
        let mut view = weak.view_mut((4 * v, 4 * w), (4, 4));
        view += block;
    }
    let sym = (&weak + weak.transpose()) * 0.5;
    let mass = DVector::from_iterator(
        n,
        mesh.vertex_areas().iter().flat_map(|&a| std::iter::repeat_n(a, 4)),
    );
    Ok(DiracOperator { weak: sym, mass })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenConfig {
    pub max_vertices: usize,
    pub kernel_tol: f64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig { max_vertices: 2000, kernel_tol: 1e-6 }
    }
}

/// Full spectrum with an L²-orthonormal eigenbasis.
///
/// Columns are sorted by eigenvalue. Labels follow the ℤ∖{0} convention:
/// `-1, -2, …` walk down from the negative eigenvalue closest to zero and
/// `1, 2, …` walk up; kernel modes get label 0.
#[derive(Debug, Clone)]
pub struct DiracSpectrum {
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    mass: DVector<f64>,
    kernel_dim: usize,
    labels: Vec<i64>,
}

pub fn eigendecompose(d: &DiracOperator, cfg: &EigenConfig) -> Result<DiracSpectrum, SpinError> {
    let n = d.dimension();
    if n / 4 > cfg.max_vertices {
        return Err(SpinError::TooLarge { vertices: n / 4, cap: cfg.max_vertices });
    }
    let inv_sqrt = d.mass.map(|m| 1.0 / m.sqrt());
    let mut scaled = d.weak.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let eig = SymmetricEigen::try_new(scaled, f64::EPSILON, 100 * n.max(10))
        .ok_or(SpinError::NoConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&c| eig.eigenvalues[c]));
    let mut basis = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src).component_mul(&inv_sqrt);
        basis.set_column(dst, &col);
    }

    let kernel_dim = eigenvalues.iter().filter(|l| l.abs() < cfg.kernel_tol).count();
    let n_neg = eigenvalues.iter().filter(|&&l| l <= -cfg.kernel_tol).count();
    let labels = (0..n)
        .map(|c| {
            let l = eigenvalues[c];
            if l.abs() < cfg.kernel_tol {
                0
            } else if l < 0.0 {
                -((n_neg - c) as i64)
            } else {
                (c - n_neg - kernel_dim + 1) as i64
            }
        })
        .collect();

    Ok(DiracSpectrum { eigenvalues, basis, mass: d.mass.clone(), kernel_dim, labels })
}

impl DiracSpectrum {
    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.dimension() / 4
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenspinors as columns, in vertex layout.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel_dim
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Column of the eigenvalue with ℤ∖{0} label `label`.
    pub fn column_of(&self, label: i64) -> Option<usize> {
        if label == 0 {
            return None;
        }
        self.labels.iter().position(|&l| l == label)
    }

    /// `λ_label`.
    pub fn lambda(&self, label: i64) -> Option<f64> {
        self.column_of(label).map(|c| self.eigenvalues[c])
    }

    pub fn min_abs(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn l2_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.component_mul(&self.mass).dot(b)
    }

    /// Coefficients `a_j = ⟨ψ, Ψ_j⟩_{L²}`.
    pub fn coefficients(&self, psi: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(&psi.component_mul(&self.mass))
    }

    /// `Σ_j a_j Ψ_j`.
    pub fn synthesize(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.basis * coeffs
    }

    /// Start and length of each eigenvalue cluster.
    pub fn clusters(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for c in 0..self.dimension() {
            let l = self.eigenvalues[c];
            match out.last_mut() {
                Some((start, len))
                    if (l - self.eigenvalues[*start + *len - 1]).abs()
                        <= CLUSTER_GAP * l.abs().max(1.0) =>
                {
                    *len += 1
                }
                _ => out.push((c, 1)),
            }
        }
        out
    }

    /// `max_j |λ_j + λ_{n-1-j}| / max |λ|`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.dimension();
        let scale = self.eigenvalues.amax().max(f64::MIN_POSITIVE);
        (0..n)
            .map(|j| (self.eigenvalues[j] + self.eigenvalues[n - 1 - j]).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Sorted positive eigenvalues as `λ_1 ≤ λ_2 ≤ …`.
    pub fn positive_eigenvalues(&self) -> Vec<f64> {
        (0..self.dimension())
            .filter(|&c| self.labels[c] > 0)
            .map(|c| self.eigenvalues[c])
            .collect()
    }
}

/// Column indices of the three spectral pieces for a given ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSplit {
    pub rho: f64,
    pub neg: Vec<usize>,
    pub pos_b: Vec<usize>,
    pub pos_a: Vec<usize>,
}

impl SpectralSplit {
    pub fn positive(&self) -> Vec<usize> {
        let mut p = self.pos_b.clone();
        p.extend_from_slice(&self.pos_a);
        p
    }
}

pub fn spectral_split(spec: &DiracSpectrum, rho: f64) -> Result<SpectralSplit, SpinError> {
    if spec.kernel_dim > 0 {
        return Err(SpinError::NontrivialKernel { dim: spec.kernel_dim });
    }
    let nearest = spec
        .eigenvalues
        .iter()
        .copied()
        .min_by(|a, b| (a - rho).abs().total_cmp(&(b - rho).abs()))
        .unwrap_or(f64::INFINITY);
    if (nearest - rho).abs() < EXCEPTIONAL_MARGIN {
        return Err(SpinError::ExceptionalRho { rho, nearest, margin: EXCEPTIONAL_MARGIN });
    }
    let mut split = SpectralSplit { rho, neg: vec![], pos_b: vec![], pos_a: vec![] };
    for (c, &l) in spec.eigenvalues.iter().enumerate() {
        if l < 0.0 {
            split.neg.push(c);
        } else if l < rho {
            split.pos_b.push(c);
        } else {
            split.pos_a.push(c);
        }
    }
    Ok(split)
}

/// `Σ_j (1 + |λ_j|^{2s}) a_j b_j` on coefficient vectors.
pub fn sobolev_inner_coeffs(spec: &DiracSpectrum, a: &DVector<f64>, b: &DVector<f64>, s: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .zip(spec.eigenvalues.iter())
        .map(|((x, y), l)| (1.0 + l.abs().powf(2.0 * s)) * x * y)
        .sum()
}

/// `⟨ψ, φ⟩_{L²} + ⟨|D|^s ψ, |D|^s φ⟩_{L²}`.
pub fn sobolev_inner(
    spec: &DiracSpectrum,
    psi: &DVector<f64>,
    phi: &DVector<f64>,
    s: f64,
) -> Result<f64, SpinError> {
    if s != 0.0 && spec.kernel_dim > 0 {
        return Err(SpinError::NontrivialKernel { dim: spec.kernel_dim });
    }
    let a = spec.coefficients(psi);
    let b = spec.coefficients(phi);
    let frac: f64 = a
        .iter()
        .zip(b.iter())
        .zip(spec.eigenvalues.iter())
        .map(|((x, y), l)| l.abs().powf(2.0 * s) * x * y)
        .sum();
    Ok(spec.l2_inner(psi, phi) + frac)
}

pub fn check_unit(q: Quat) -> Result<(), SpinError> {
    let n = quat::norm(q);
    if (n - 1.0).abs() > 1e-12 {
        return Err(SpinError::NonUnitQuaternion(n));
    }
    Ok(())
}

/// Right multiplication of both spinor fields by the unit quaternion `q`.
pub fn quaternion_act(
    psi: (&DVector<f64>, &DVector<f64>),
    q: Quat,
) -> Result<(DVector<f64>, DVector<f64>), SpinError> {
    check_unit(q)?;
    Ok((
        DVector::from_vec(quat::right_act(psi.0.as_slice(), q)),
        DVector::from_vec(quat::right_act(psi.1.as_slice(), q)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypmesh::build_fuchsian_mesh;

    #[test]
    fn transport_is_antisymmetric() {
        let mesh = build_fuchsian_mesh(2, 1).unwrap();
        let c = transport_angles(&mesh);
        for h in 0..mesh.half_edge_count() {
            assert_eq!(c.transport[h], -c.transport[mesh.twin(h)]);
        }
    }

    #[test]
    fn every_class_satisfies_the_holonomy_condition() {
        let mesh = build_fuchsian_mesh(2, 1).unwrap();
        let classes = enumerate_spin_classes(&mesh).unwrap();
        assert_eq!(classes.len(), 16);
        let topo = SpinTopology::new(&mesh, &classes[0].connection).unwrap();
        for s in &classes {
            assert!(topo.holonomy_condition_holds(&mesh, &s.edge_signs));
            assert_eq!(topo.signature(&mesh, &s.edge_signs), s.class_index);
        }
    }

    #[test]
    fn exceptional_rho_is_rejected() {
        let mesh = build_fuchsian_mesh(2, 1).unwrap();
        let classes = enumerate_spin_classes(&mesh).unwrap();
        let cfg = EigenConfig::default();
        let spec = classes
            .iter()
            .map(|s| eigendecompose(&assemble_dirac(&mesh, s).unwrap(), &cfg).unwrap())
            .find(|sp| sp.kernel_dim() == 0)
            .unwrap();
        let l1 = spec.lambda(1).unwrap();
        assert!(matches!(spectral_split(&spec, l1), Err(SpinError::ExceptionalRho { .. })));
        assert!(spectral_split(&spec, 0.5 * l1).unwrap().pos_b.is_empty());
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let psi = DVector::zeros(8);
        assert!(quaternion_act((&psi, &psi), [1.0, 1.0, 0.0, 0.0]).is_err());
    }
}
