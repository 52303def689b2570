//! The action functional, its derivatives, the Euler–Lagrange residuals and
//! the Nehari manifold.
//!
//! Discretely,
//!
//! ```text
//! J(u, ψ) = ½ Σ_jk (A⁻¹)_jk u_jᵀ S u_k + Σ_j Σ_v m_v (e^{2u_j} − 1 − 2u_j)
//!         + Σ_j [ Σ_k λ_k a_jk² − ρ Σ_v m_v e^{u_j} |ψ_j(v)|² ]
//! ```
//!
//! with `S` the cotangent stiffness, `m` the lumped vertex areas and `a_j`
//! the eigenbasis coefficients of `ψ_j`. Spinor variations are carried in
//! coefficient space; the H-inner product is `(S + M)` on scalar fields and
//! `diag(1 + |λ|)` on coefficients.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use thiserror::Error;

use crate::hypmesh::{laplace_pair, SurfaceMesh};
use crate::quat::{self, Quat};
use crate::spinops::{spectral_split, DiracSpectrum, SpectralSplit, SpinError};

/// Scalar fields above this value abort evaluation.
pub const OVERFLOW_LIMIT: f64 = 300.0;

/// Gaussian curvature of the reference metric.
pub const GAUSS_CURVATURE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariationalError {
    #[error("field out of numeric range: u{field}[{vertex}] = {value}")]
    OutOfRange { field: usize, vertex: usize, value: f64 },
    #[error("invalid cartan matrix: {0}")]
    InvalidCartan(String),
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error("state does not match the problem: {0}")]
    Mismatch(String),
    #[error("restricted quadratic form is not negative definite")]
    NotConcave,
    #[error("internal linear algebra failure: {0}")]
    Internal(String),
}

type Result<T> = std::result::Result<T, VariationalError>;

/// Symmetric, strictly diagonally dominant 2×2 coupling matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cartan {
    m: Matrix2<f64>,
    inv: Matrix2<f64>,
}

impl Cartan {
    pub fn new(entries: [[f64; 2]; 2]) -> Result<Self> {
        let [[a, b], [c, d]] = entries;
        if ![a, b, c, d].iter().all(|x| x.is_finite()) {
            return Err(VariationalError::InvalidCartan("non-finite entry".into()));
        }
        if b != c {
            return Err(VariationalError::InvalidCartan("not symmetric".into()));
        }
        if a <= 0.0 || d <= 0.0 {
            return Err(VariationalError::InvalidCartan("diagonal must be positive".into()));
        }
        if b.abs() >= a || b.abs() >= d {
            return Err(VariationalError::InvalidCartan("not strictly diagonally dominant".into()));
        }
        let m = Matrix2::new(a, b, c, d);
        let inv = m.try_inverse().expect("dominant matrices are invertible");
        Ok(Cartan { m, inv })
    }

    pub fn su3() -> Self {
        Cartan::new([[2.0, -1.0], [-1.0, 2.0]]).expect("valid")
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.m[(j, k)]
    }

    pub fn inverse(&self, j: usize, k: usize) -> f64 {
        self.inv[(j, k)]
    }

    pub fn row_sum(&self, j: usize) -> f64 {
        self.m[(j, 0)] + self.m[(j, 1)]
    }

    pub fn entries(&self) -> [[f64; 2]; 2] {
        [[self.m[(0, 0)], self.m[(0, 1)]], [self.m[(1, 0)], self.m[(1, 1)]]]
    }
}

impl Default for Cartan {
    fn default() -> Self {
        Cartan::su3()
    }
}

/// `(u₁, u₂, ψ₁, ψ₂)` with spinors in both vertex and spectral form.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub u: [DVector<f64>; 2],
    pub psi: [DVector<f64>; 2],
    pub coeffs: [DVector<f64>; 2],
}

impl FieldState {
    pub fn trivial(vertex_count: usize) -> Self {
        let z = DVector::zeros(vertex_count);
        let s = DVector::zeros(4 * vertex_count);
        FieldState { u: [z.clone(), z], psi: [s.clone(), s.clone()], coeffs: [s.clone(), s] }
    }

    pub fn from_coeffs(spec: &DiracSpectrum, u: [DVector<f64>; 2], coeffs: [DVector<f64>; 2]) -> Self {
        let psi = [spec.synthesize(&coeffs[0]), spec.synthesize(&coeffs[1])];
        FieldState { u, psi, coeffs }
    }

    pub fn from_vertex(spec: &DiracSpectrum, u: [DVector<f64>; 2], psi: [DVector<f64>; 2]) -> Self {
        let coeffs = [spec.coefficients(&psi[0]), spec.coefficients(&psi[1])];
        FieldState { u, psi, coeffs }
    }

    pub fn vertex_count(&self) -> usize {
        self.u[0].len()
    }

    /// Largest disagreement between `psi` and the synthesis of `coeffs`.
    pub fn synthesis_defect(&self, spec: &DiracSpectrum) -> f64 {
        (0..2)
            .map(|j| (spec.synthesize(&self.coeffs[j]) - &self.psi[j]).amax())
            .fold(0.0, f64::max)
    }

    pub fn psi_l2_norm(&self, spec: &DiracSpectrum) -> f64 {
        (0..2).map(|j| spec.l2_inner(&self.psi[j], &self.psi[j])).sum::<f64>().sqrt()
    }

    /// Right multiplication of both spinors by a unit quaternion.
    pub fn quaternion_act(&self, spec: &DiracSpectrum, q: Quat) -> Result<Self> {
        let (p0, p1) = crate::spinops::quaternion_act((&self.psi[0], &self.psi[1]), q)?;
        Ok(FieldState::from_vertex(spec, self.u.clone(), [p0, p1]))
    }

    pub fn add(&self, spec: &DiracSpectrum, dir: &Variation, t: f64) -> Self {
        let u = [&self.u[0] + &dir.u[0] * t, &self.u[1] + &dir.u[1] * t];
        let a = [&self.coeffs[0] + &dir.a[0] * t, &self.coeffs[1] + &dir.a[1] * t];
        FieldState::from_coeffs(spec, u, a)
    }
}

/// A tangent vector or covector in `(u, a)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub u: [DVector<f64>; 2],
    pub a: [DVector<f64>; 2],
}

impl Variation {
    pub fn zeros(vertex_count: usize) -> Self {
        let z = DVector::zeros(vertex_count);
        let s = DVector::zeros(4 * vertex_count);
        Variation { u: [z.clone(), z], a: [s.clone(), s] }
    }

    pub fn dot(&self, other: &Variation) -> f64 {
        (0..2).map(|j| self.u[j].dot(&other.u[j]) + self.a[j].dot(&other.a[j])).sum()
    }

    pub fn scaled(&self, t: f64) -> Variation {
        Variation { u: [&self.u[0] * t, &self.u[1] * t], a: [&self.a[0] * t, &self.a[1] * t] }
    }

    pub fn axpy(&mut self, t: f64, x: &Variation) {
        for j in 0..2 {
            self.u[j].axpy(t, &x.u[j], 1.0);
            self.a[j].axpy(t, &x.a[j], 1.0);
        }
    }

    /// Flattened as `[u₁, u₂, a₁, a₂]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let parts = [&self.u[0], &self.u[1], &self.a[0], &self.a[1]];
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        )
    }

    pub fn from_vector(v: &DVector<f64>, vertex_count: usize) -> Variation {
        let n = vertex_count;
        let s = 4 * n;
        Variation {
            u: [v.rows(0, n).into_owned(), v.rows(n, n).into_owned()],
            a: [v.rows(2 * n, s).into_owned(), v.rows(2 * n + s, s).into_owned()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub j: f64,
    pub f: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualNorms {
    /// Dual H¹ norm of the scalar (sT) blocks.
    pub s_t_u: f64,
    /// Dual H^{1/2} norm of the spinor (sT) blocks.
    pub s_t_psi: f64,
    /// Dual H¹ norm of the (sT′) blocks.
    pub s_tprime: f64,
}

impl ResidualNorms {
    pub fn max(&self) -> f64 {
        self.s_t_u.max(self.s_t_psi).max(self.s_tprime)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub s_t_u: [DVector<f64>; 2],
    pub s_t_psi: [DVector<f64>; 2],
    pub s_tprime: [DVector<f64>; 2],
    pub norms: ResidualNorms,
}

/// `e^{2u} − 1 − 2u` without cancellation near zero.
pub fn potential(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        let u2 = u * u;
        u2 * (2.0 + u * (4.0 / 3.0 + u * (2.0 / 3.0 + u * (4.0 / 15.0))))
    } else {
        (2.0 * u).exp_m1() - 2.0 * u
    }
}

/// Everything fixed during a solve: geometry, spectrum, ρ and the coupling.
#[derive(Debug, Clone)]
pub struct Problem {
    stiffness: DMatrix<f64>,
    mass: DVector<f64>,
    h1: Cholesky<f64, Dyn>,
    spec: DiracSpectrum,
    split: SpectralSplit,
    rho: f64,
    cartan: Cartan,
    h_weight: DVector<f64>,
    neg_basis: DMatrix<f64>,
}

impl Problem {
    pub fn new(mesh: &SurfaceMesh, spec: DiracSpectrum, rho: f64, cartan: Cartan) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(VariationalError::InvalidRho(rho));
        }
        if spec.vertex_count() != mesh.vertex_count() {
            return Err(VariationalError::Mismatch("spectrum and mesh sizes differ".into()));
        }
        let split = spectral_split(&spec, rho)?;
        let lp = laplace_pair(mesh);
        let h1 = Cholesky::new(&lp.stiffness + DMatrix::from_diagonal(&lp.mass))
            .ok_or_else(|| VariationalError::Internal("S + M not positive definite".into()))?;
        let h_weight = spec.eigenvalues().map(|l| 1.0 + l.abs());
        let neg_basis = spec.basis().select_columns(&split.neg);
        Ok(Problem {
            stiffness: lp.stiffness,
            mass: lp.mass,
            h1,
            spec,
            split,
            rho,
            cartan,
            h_weight,
            neg_basis,
        })
    }

    pub fn spectrum(&self) -> &DiracSpectrum {
        &self.spec
    }

    pub fn split(&self) -> &SpectralSplit {
        &self.split
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn cartan(&self) -> &Cartan {
        &self.cartan
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    pub fn trivial_state(&self) -> FieldState {
        FieldState::trivial(self.vertex_count())
    }

    fn check(&self, state: &FieldState) -> Result<()> {
        let n = self.vertex_count();
        for j in 0..2 {
            if state.u[j].len() != n || state.psi[j].len() != 4 * n || state.coeffs[j].len() != 4 * n {
                return Err(VariationalError::Mismatch("field lengths".into()));
            }
            if let Some((v, &x)) = state.u[j].iter().enumerate().find(|(_, x)| !(**x <= OVERFLOW_LIMIT)) {
                return Err(VariationalError::OutOfRange { field: j + 1, vertex: v, value: x });
            }
        }
        Ok(())
    }

    /// `Σ_jk (A⁻¹)_jk S u_k`, the first variation of the Dirichlet part.
    fn dirichlet_gradient(&self, u: &[DVector<f64>; 2]) -> [DVector<f64>; 2] {
        let su = [&self.stiffness * &u[0], &self.stiffness * &u[1]];
        let c = &self.cartan;
        [
            &su[0] * c.inverse(0, 0) + &su[1] * c.inverse(0, 1),
            &su[0] * c.inverse(1, 0) + &su[1] * c.inverse(1, 1),
        ]
    }

    /// Per-fiber weights `m_v e^{u(v)}`, repeated four times.
    fn fiber_weight(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            4 * u.len(),
            u.iter()
                .zip(self.mass.iter())
                .flat_map(|(x, m)| std::iter::repeat_n(m * x.exp(), 4)),
        )
    }

    fn pointwise_norm_sq(psi: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(psi.len() / 4, psi.as_slice().chunks_exact(4).map(|c| c.iter().map(|x| x * x).sum()))
    }

    /// `⟨e^{u}ψ, Ψ_k⟩_{L²}` for all `k`.
    fn weighted_coefficients(&self, u: &DVector<f64>, psi: &DVector<f64>) -> DVector<f64> {
        self.spec.basis().tr_mul(&self.fiber_weight(u).component_mul(psi))
    }

    pub fn evaluate_j(&self, state: &FieldState) -> Result<Energy> {
        self.check(state)?;
        let du = self.dirichlet_gradient(&state.u);
        let mut f = 0.5 * (state.u[0].dot(&du[0]) + state.u[1].dot(&du[1]));
        let mut q = 0.0;
        for j in 0..2 {
            f += state.u[j].iter().zip(self.mass.iter()).map(|(&x, m)| m * potential(x)).sum::<f64>();
            let spectral: f64 = state.coeffs[j]
                .iter()
                .zip(self.spec.eigenvalues().iter())
                .map(|(a, l)| l * a * a)
                .sum();
            let coupling: f64 = Self::pointwise_norm_sq(&state.psi[j])
                .iter()
                .zip(state.u[j].iter().zip(self.mass.iter()))
                .map(|(p, (x, m))| m * x.exp() * p)
                .sum();
            q += spectral - self.rho * coupling;
        }
        Ok(Energy { j: f + q, f, q })
    }

    /// First variation `dJ` in `(u, a)` coordinates.
    pub fn differential(&self, state: &FieldState) -> Result<Variation> {
        self.check(state)?;
        let du = self.dirichlet_gradient(&state.u);
        let mut out = Variation::zeros(self.vertex_count());
        for j in 0..2 {
            let p2 = Self::pointwise_norm_sq(&state.psi[j]);
            out.u[j] = DVector::from_fn(self.vertex_count(), |v, _| {
                let x = state.u[j][v];
                du[j][v]
                    + self.mass[v]
                        * (2.0 * (2.0 * x).exp_m1() - self.rho * x.exp() * p2[v])
            });
            let w = self.weighted_coefficients(&state.u[j], &state.psi[j]);
            out.a[j] = (state.coeffs[j].component_mul(self.spec.eigenvalues()) - w * self.rho) * 2.0;
        }
        Ok(out)
    }

    /// Riesz map from covectors to vectors in the H-inner product.
    pub fn riesz(&self, cov: &Variation) -> Variation {
        Variation {
            u: [self.h1.solve(&cov.u[0]), self.h1.solve(&cov.u[1])],
            a: [cov.a[0].component_div(&self.h_weight), cov.a[1].component_div(&self.h_weight)],
        }
    }

    pub fn h_inner(&self, x: &Variation, y: &Variation) -> f64 {
        let s = &self.stiffness;
        (0..2)
            .map(|j| {
                x.u[j].dot(&(s * &y.u[j] + y.u[j].component_mul(&self.mass)))
                    + x.a[j].component_mul(&self.h_weight).dot(&y.a[j])
            })
            .sum()
    }

    pub fn h_norm(&self, x: &Variation) -> f64 {
        self.h_inner(x, x).max(0.0).sqrt()
    }

    /// H-norm of a state, with `u` in H¹ and spinors in H^{1/2}.
    pub fn state_norm(&self, state: &FieldState) -> f64 {
        self.h_norm(&Variation { u: state.u.clone(), a: state.coeffs.clone() })
    }

    /// `‖g‖_{H⁻¹} = sqrt(gᵀ (S + M)⁻¹ g)` for a covector `g`.
    pub fn dual_h1_norm(&self, g: &DVector<f64>) -> f64 {
        g.dot(&self.h1.solve(g)).max(0.0).sqrt()
    }

    /// `sqrt(Σ b_k² / (1 + |λ_k|))` for spectral covector coefficients `b`.
    pub fn dual_half_norm(&self, b: &DVector<f64>) -> f64 {
        b.component_mul(b).component_div(&self.h_weight).sum().max(0.0).sqrt()
    }

    /// H-gradient of `J`.
    pub fn gradient_j(&self, state: &FieldState) -> Result<Variation> {
        Ok(self.riesz(&self.differential(state)?))
    }

    pub fn el_residual(&self, state: &FieldState) -> Result<Residuals> {
        self.check(state)?;
        let n = self.vertex_count();
        let lap: [DVector<f64>; 2] = [
            -(&self.stiffness * &state.u[0]).component_div(&self.mass),
            -(&self.stiffness * &state.u[1]).component_div(&self.mass),
        ];
        let c = &self.cartan;
        let k2 = 2.0 * GAUSS_CURVATURE;
        let p2 = [Self::pointwise_norm_sq(&state.psi[0]), Self::pointwise_norm_sq(&state.psi[1])];
        // 2e^{2u_j} − ρ e^{u_j}|ψ_j|², without the constant
        let source = |j: usize, v: usize| {
            let x = state.u[j][v];
            2.0 * (2.0 * x).exp() - self.rho * x.exp() * p2[j][v]
        };

        let s_t_u: [DVector<f64>; 2] = std::array::from_fn(|j| {
            DVector::from_fn(n, |v, _| {
                -(c.inverse(j, 0) * lap[0][v] + c.inverse(j, 1) * lap[1][v]) + k2 + source(j, v)
            })
        });
        let s_tprime: [DVector<f64>; 2] = std::array::from_fn(|j| {
            DVector::from_fn(n, |v, _| {
                c.get(j, 0) * source(0, v) + c.get(j, 1) * source(1, v) + k2 * c.row_sum(j) - lap[j][v]
            })
        });
        let mut s_t_psi: [DVector<f64>; 2] = [DVector::zeros(0), DVector::zeros(0)];
        let mut psi_norm_sq = 0.0;
        for j in 0..2 {
            let b = state.coeffs[j].component_mul(self.spec.eigenvalues())
                - self.weighted_coefficients(&state.u[j], &state.psi[j]) * self.rho;
            psi_norm_sq += self.dual_half_norm(&b).powi(2);
            let eu = DVector::from_iterator(4 * n, state.u[j].iter().flat_map(|x| std::iter::repeat_n(x.exp(), 4)));
            s_t_psi[j] = self.spec.synthesize(&state.coeffs[j].component_mul(self.spec.eigenvalues()))
                - eu.component_mul(&state.psi[j]) * self.rho;
        }
        let dual = |r: &[DVector<f64>; 2]| {
            (0..2)
                .map(|j| self.dual_h1_norm(&r[j].component_mul(&self.mass)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let norms = ResidualNorms {
            s_t_u: dual(&s_t_u),
            s_t_psi: psi_norm_sq.sqrt(),
            s_tprime: dual(&s_tprime),
        };
        Ok(Residuals { s_t_u, s_t_psi, s_tprime, norms })
    }

    /// `g_jk = (1 + |λ_k|)⁻¹ [λ_k a_jk − ρ ⟨e^{u_j} ψ_j, Ψ_k⟩]` over negative `k`.
    pub fn nehari_constraint(&self, state: &FieldState) -> Result<[DVector<f64>; 2]> {
        self.check(state)?;
        let ev = self.spec.eigenvalues();
        Ok(std::array::from_fn(|j| {
            let w = self.neg_basis.tr_mul(&self.fiber_weight(&state.u[j]).component_mul(&state.psi[j]));
            DVector::from_fn(self.split.neg.len(), |i, _| {
                let k = self.split.neg[i];
                (ev[k] * state.coeffs[j][k] - self.rho * w[i]) / (1.0 + ev[k].abs())
            })
        }))
    }

    /// Same as [`Problem::nehari_constraint`] without the `(1 + |λ|)⁻¹` smoothing.
    pub fn nehari_constraint_raw(&self, state: &FieldState) -> Result<[DVector<f64>; 2]> {
        let g = self.nehari_constraint(state)?;
        let ev = self.spec.eigenvalues();
        Ok(std::array::from_fn(|j| {
            DVector::from_fn(g[j].len(), |i, _| g[j][i] * (1.0 + ev[self.split.neg[i]].abs()))
        }))
    }

    pub fn constraint_norm(&self, state: &FieldState) -> Result<f64> {
        let g = self.nehari_constraint(state)?;
        Ok((g[0].norm_squared() + g[1].norm_squared()).sqrt())
    }

    /// Solves for the coefficients on `free` that make `J` stationary in
    /// those directions, keeping all other coefficients.
    ///
    /// The system is `(Λ − ρ M_u)_{FF} a_F = ρ (M_u)_{F,·} a_rest`, where
    /// `(M_u)_{km} = ⟨e^u Ψ_m, Ψ_k⟩`. It must be negative definite.
    fn stationary_coefficients(&self, u: &DVector<f64>, a: &DVector<f64>, free: &[usize]) -> Result<DVector<f64>> {
        let mut a = a.clone();
        if free.is_empty() {
            return Ok(a);
        }
        for &k in free {
            a[k] = 0.0;
        }
        if u.iter().all(|&x| x == u[0]) {
            // e^{u} constant acts diagonally in the eigenbasis.
            let e = u[0].exp();
            for &k in free {
                let l = self.spec.eigenvalues()[k];
                if l - self.rho * e >= 0.0 {
                    return Err(VariationalError::NotConcave);
                }
            }
            return Ok(a);
        }
        let basis_f = self.spec.basis().select_columns(free);
        let w = self.fiber_weight(u);
        let rest = self.spec.synthesize(&a).component_mul(&w);
        let rhs = basis_f.tr_mul(&rest) * self.rho;
        let mut wb = basis_f.clone();
        for (r, mut row) in wb.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let mut sys = basis_f.tr_mul(&wb) * (-self.rho);
        for (i, &k) in free.iter().enumerate() {
            sys[(i, i)] += self.spec.eigenvalues()[k];
        }
        let neg = -(&sys + sys.transpose()) * 0.5;
        let chol = Cholesky::new(neg).ok_or(VariationalError::NotConcave)?;
        let sol = -chol.solve(&rhs);
        for (i, &k) in free.iter().enumerate() {
            a[k] = sol[i];
        }
        Ok(a)
    }

    /// Places `(u, ψ⁺)` on the Nehari manifold by solving for `ψ⁻`.
    ///
    /// Negative-index entries of `a_plus` are ignored.
    pub fn nehari_project(&self, u: [DVector<f64>; 2], a_plus: [DVector<f64>; 2]) -> Result<FieldState> {
        let n = self.vertex_count();
        for j in 0..2 {
            if u[j].len() != n || a_plus[j].len() != 4 * n {
                return Err(VariationalError::Mismatch("field lengths".into()));
            }
            if let Some((v, &x)) = u[j].iter().enumerate().find(|(_, x)| !(**x <= OVERFLOW_LIMIT)) {
                return Err(VariationalError::OutOfRange { field: j + 1, vertex: v, value: x });
            }
        }
        let a = [
            self.stationary_coefficients(&u[0], &a_plus[0], &self.split.neg)
                .map_err(|_| VariationalError::Internal("negative block not definite".into()))?,
            self.stationary_coefficients(&u[1], &a_plus[1], &self.split.neg)
                .map_err(|_| VariationalError::Internal("negative block not definite".into()))?,
        ];
        Ok(FieldState::from_coeffs(&self.spec, u, a))
    }

    /// Maximizes over the negative and `(0, ρ)` modes jointly; the inner
    /// step of the linking scheme. Fails when that block is not concave.
    pub fn maximize_inner(&self, state: &FieldState) -> Result<FieldState> {
        let mut free = self.split.neg.clone();
        free.extend_from_slice(&self.split.pos_b);
        let a = [
            self.stationary_coefficients(&state.u[0], &state.coeffs[0], &free)?,
            self.stationary_coefficients(&state.u[1], &state.coeffs[1], &free)?,
        ];
        Ok(FieldState::from_coeffs(&self.spec, state.u.clone(), a))
    }

    /// Jacobian of field `j`'s constraint: `(∂g/∂u_j, ∂g/∂a_j)`.
    pub fn constraint_jacobian(&self, state: &FieldState, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.vertex_count();
        let ev = self.spec.eigenvalues();
        let w = self.fiber_weight(&state.u[j]);
        let mut wb = self.spec.basis().clone();
        for (r, mut row) in wb.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let mut da = self.neg_basis.tr_mul(&wb) * (-self.rho);
        let mut du = DMatrix::zeros(self.split.neg.len(), n);
        for (i, &k) in self.split.neg.iter().enumerate() {
            da[(i, k)] += ev[k];
            let s = 1.0 / (1.0 + ev[k].abs());
            da.row_mut(i).scale_mut(s);
            for v in 0..n {
                let dot: f64 = (0..4).map(|c| self.neg_basis[(4 * v + c, i)] * state.psi[j][4 * v + c]).sum();
                du[(i, v)] = -s * self.rho * w[4 * v] * dot;
            }
        }
        (du, da)
    }

    /// H-gradient projected onto the tangent space of the Nehari manifold.
    pub fn tangent_gradient(&self, state: &FieldState) -> Result<Variation> {
        let mut g = self.gradient_j(state)?;
        if self.split.neg.is_empty() {
            return Ok(g);
        }
        for j in 0..2 {
            let (du, da) = self.constraint_jacobian(state, j);
            // Columns of H⁻¹ dGᵀ.
            let ru = self.h1.solve(&du.transpose());
            let mut ra = da.transpose();
            for (r, mut row) in ra.row_iter_mut().enumerate() {
                row /= self.h_weight[r];
            }
            let gram = &du * &ru + &da * &ra;
            let rhs = &du * &g.u[j] + &da * &g.a[j];
            let mu = Cholesky::new(gram)
                .ok_or_else(|| VariationalError::Internal("singular multiplier system".into()))?
                .solve(&rhs);
            g.u[j] -= &ru * &mu;
            g.a[j] -= &ra * &mu;
        }
        Ok(g)
    }

    /// Second variation of `J` in flattened `[u₁, u₂, a₁, a₂]` coordinates.
    pub fn hessian(&self, state: &FieldState) -> Result<DMatrix<f64>> {
        self.check(state)?;
        let n = self.vertex_count();
        let s4 = 4 * n;
        let dim = 2 * n + 2 * s4;
        let mut h = DMatrix::zeros(dim, dim);
        let basis = self.spec.basis();
        let ev = self.spec.eigenvalues();
        for j in 0..2 {
            for k in 0..2 {
                let mut blk = h.view_mut((j * n, k * n), (n, n));
                blk += &self.stiffness * self.cartan.inverse(j, k);
            }
            let p2 = Self::pointwise_norm_sq(&state.psi[j]);
            for v in 0..n {
                let x = state.u[j][v];
                h[(j * n + v, j * n + v)] +=
                    self.mass[v] * (4.0 * (2.0 * x).exp() - self.rho * x.exp() * p2[v]);
            }
            let w = self.fiber_weight(&state.u[j]);
            let off = 2 * n + j * s4;
            // ∂²/∂u_j(v)∂a_jm = −2ρ m_v e^{u_j(v)} ⟨ψ_j(v), Ψ_m(v)⟩
            for m in 0..s4 {
                for v in 0..n {
                    let dot: f64 = (0..4).map(|c| basis[(4 * v + c, m)] * state.psi[j][4 * v + c]).sum();
                    let val = -2.0 * self.rho * w[4 * v] * dot;
                    h[(j * n + v, off + m)] = val;
                    h[(off + m, j * n + v)] = val;
                }
            }
            let mut wb = basis.clone();
            for (r, mut row) in wb.row_iter_mut().enumerate() {
                row *= w[r];
            }
            let mut blk = basis.tr_mul(&wb) * (-2.0 * self.rho);
            for m in 0..s4 {
                blk[(m, m)] += 2.0 * ev[m];
            }
            let sym = (&blk + blk.transpose()) * 0.5;
            h.view_mut((off, off), (s4, s4)).copy_from(&sym);
        }
        Ok(h)
    }

    /// Coefficient vectors of `ψ_j·i, ψ_j·j, ψ_j·k`, the tangent directions
    /// of the quaternionic symmetry orbit of field `j`.
    pub fn symmetry_tangents(&self, state: &FieldState, j: usize) -> [DVector<f64>; 3] {
        [quat::I, quat::J, quat::K].map(|q| {
            self.spec.coefficients(&DVector::from_vec(quat::right_act(state.psi[j].as_slice(), q)))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn su3_inverse() {
        let c = Cartan::su3();
        assert!((c.inverse(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.inverse(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.row_sum(1), 1.0);
        assert_eq!(Cartan::new(c.entries()).unwrap(), c);
    }

    #[test]
    fn cartan_rejects_asymmetry_and_weak_diagonal() {
        assert!(Cartan::new([[2.0, -1.0], [-0.5, 2.0]]).is_err());
        assert!(Cartan::new([[2.0, -2.0], [-2.0, 2.0]]).is_err());
        assert!(Cartan::new([[-2.0, 0.0], [0.0, 2.0]]).is_err());
        assert!(Cartan::new([[f64::NAN, 0.0], [0.0, 2.0]]).is_err());
    }

    #[test]
    fn potential_is_convex_with_zero_minimum() {
        assert_eq!(potential(0.0), 0.0);
        for x in [-3.0, -1e-3, -1e-5, 1e-5, 1e-3, 2.0] {
            assert!(potential(x) > 0.0);
        }
        // Derivative 2(e^{2u} − 1) across the series switch.
        let h = 1e-6;
        let d = (potential(1e-4 + h) - potential(1e-4 - h)) / (2.0 * h);
        assert!((d - 2.0 * (2e-4f64).exp_m1()).abs() < 1e-9);
    }

    #[test]
    fn variation_flattening_round_trips() {
        let mut v = Variation::zeros(3);
        v.u[1][2] = 1.5;
        v.a[0][7] = -2.0;
        v.a[1][11] = 4.0;
        let flat = v.to_vector();
        assert_eq!(flat.len(), 2 * 3 + 2 * 12);
        assert_eq!(Variation::from_vector(&flat, 3), v);
        let mut w = v.scaled(2.0);
        w.axpy(-2.0, &v);
        assert_eq!(w.dot(&w), 0.0);
    }
}
