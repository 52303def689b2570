//! Critical point search on the Nehari manifold.
//!
//! A path from the trivial state to a constant-`u` endpoint with negative
//! action is deformed by moving its highest point down the constrained
//! gradient; for `ρ > λ₁` every path point is first maximized over the
//! finitely many modes with `0 < λ < ρ`. The resulting approximate saddle is
//! polished by Newton's method on the full Euler–Lagrange system, bordered
//! by the tangent directions of the quaternionic symmetry orbit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::hypmesh::SurfaceMesh;
use crate::spinops::DiracSpectrum;
use crate::variational::{
    Cartan, FieldState, Problem, ResidualNorms, Variation, VariationalError,
};

/// Constrained gradient norm at which the path search stops.
pub const PATH_GRADIENT_TOL: f64 = 1e-8;

/// Consecutive near-trivial maxima before giving up.
pub const TRIVIAL_PATIENCE: usize = 100;

pub const MAX_NEWTON_STEPS: usize = 50;

/// Upper bound on the number of path points after refinement.
pub const MAX_PATH_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaddleError {
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("no negative endpoint within 50 amplitude doublings")]
    NoNegativeEndpoint,
    #[error("mode label {0} is not available for this seed")]
    BadMode(i64),
}

type Result<T> = std::result::Result<T, SaddleError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub rho: f64,
    /// Ball radius `R`.
    pub r_ball: f64,
    /// Cone parameter `τ`.
    pub tau: f64,
    pub path_points: usize,
    pub max_deform_steps: usize,
    pub step_size: f64,
    pub newton_tol: f64,
    /// Minimum L² norm of the spinor pair for a nontrivial state.
    pub nontrivial_floor: f64,
    pub rng_seed: u64,
}

impl SolverConfig {
    pub fn with_rho(rho: f64) -> Self {
        SolverConfig {
            rho,
            r_ball: 0.5,
            tau: 4.0,
            path_points: 64,
            max_deform_steps: 5000,
            step_size: 1e-2,
            newton_tol: 1e-10,
            nontrivial_floor: 1e-3,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SaddleError::Config(m.into()));
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.tau > 1.0) {
            return bad("tau must exceed 1");
        }
        if !(self.r_ball > 0.0 && self.r_ball < 1.0) {
            return bad("R must lie in (0, 1)");
        }
        if self.path_points < 3 {
            return bad("path_points must be at least 3");
        }
        if !(self.step_size > 0.0 && self.newton_tol > 0.0 && self.nontrivial_floor > 0.0) {
            return bad("tolerances and step size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    TrivialAttractor,
    MaxIters,
    NumericFailure,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::TrivialAttractor => "trivial_attractor",
            Outcome::MaxIters => "max_iters",
            Outcome::NumericFailure => "numeric_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    pub step: usize,
    pub j: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub outcome: Outcome,
    pub j_value: f64,
    pub residuals: ResidualNorms,
    pub constraint_norm: f64,
    pub linking_level_estimate: f64,
    pub iterate_log: Vec<IterateRecord>,
    pub symmetry_checked: bool,
    pub efimov_flag: bool,
    pub steps: usize,
    pub seed: u64,
    pub psi_norm: f64,
    /// Largest rise of the path maximum over one accepted deformation step.
    pub path_max_increase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeedMode {
    /// `u = 0`, `ψ₁ = ψ₂ = ε Ψ_k`.
    Bifurcation { k: i64, eps: f64 },
    /// `u = (c, c)`, `ψ₁ = ψ₂ = t Ψ_k`, with `t` doubled until `J < 0`.
    Endpoint { c: f64, k: i64, t: f64 },
}

fn mode_coeffs(problem: &Problem, k: i64, amp: f64) -> Result<[DVector<f64>; 2]> {
    let spec = problem.spectrum();
    let col = spec.column_of(k).ok_or(SaddleError::BadMode(k))?;
    let mut a = DVector::zeros(spec.dimension());
    a[col] = amp;
    Ok([a.clone(), a])
}

pub fn seed_state(problem: &Problem, mode: SeedMode) -> Result<FieldState> {
    let n = problem.vertex_count();
    match mode {
        SeedMode::Bifurcation { k, eps } => {
            if k <= 0 {
                return Err(SaddleError::BadMode(k));
            }
            let a = mode_coeffs(problem, k, eps)?;
            Ok(problem.nehari_project([DVector::zeros(n), DVector::zeros(n)], a)?)
        }
        SeedMode::Endpoint { c, k, t } => {
            let u = DVector::from_element(n, c);
            let mut t = t;
            for _ in 0..=50 {
                let s = problem.nehari_project([u.clone(), u.clone()], mode_coeffs(problem, k, t)?)?;
                if problem.evaluate_j(&s)?.j < 0.0 {
                    return Ok(s);
                }
                t *= 2.0;
            }
            Err(SaddleError::NoNegativeEndpoint)
        }
    }
}

/// Endpoint on the first mode above ρ, with `ρ e^c = 2 λ_k`.
pub fn default_endpoint(problem: &Problem) -> Result<FieldState> {
    let spec = problem.spectrum();
    let col = *problem.split().pos_a.first().ok_or(SaddleError::BadMode(0))?;
    let k = spec.labels()[col];
    let lambda = spec.eigenvalues()[col];
    let c = (2.0 * lambda / problem.rho()).ln();
    seed_state(problem, SeedMode::Endpoint { c, k, t: 1.0 })
}

fn check_problem(problem: &Problem, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.rho != problem.rho() {
        return Err(SaddleError::Config(format!(
            "config rho {} differs from problem rho {}",
            cfg.rho,
            problem.rho()
        )));
    }
    Ok(())
}

/// Re-solves the constrained modes of a point given its free coordinates.
fn place(problem: &Problem, state: &FieldState) -> Result<FieldState> {
    if problem.split().pos_b.is_empty() {
        Ok(problem.nehari_project(state.u.clone(), state.coeffs.clone())?)
    } else {
        match problem.maximize_inner(state) {
            Ok(s) => Ok(s),
            Err(VariationalError::NotConcave) => {
                Ok(problem.nehari_project(state.u.clone(), state.coeffs.clone())?)
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn lerp(problem: &Problem, a: &FieldState, b: &FieldState, s: f64) -> Result<FieldState> {
    let spec = problem.spectrum();
    let mix = |x: &DVector<f64>, y: &DVector<f64>| x * (1.0 - s) + y * s;
    let u = [mix(&a.u[0], &b.u[0]), mix(&a.u[1], &b.u[1])];
    let c = [mix(&a.coeffs[0], &b.coeffs[0]), mix(&a.coeffs[1], &b.coeffs[1])];
    place(problem, &FieldState::from_coeffs(spec, u, c))
}

fn difference(a: &FieldState, b: &FieldState) -> Variation {
    Variation {
        u: [&a.u[0] - &b.u[0], &a.u[1] - &b.u[1]],
        a: [&a.coeffs[0] - &b.coeffs[0], &a.coeffs[1] - &b.coeffs[1]],
    }
}

fn is_trivial(problem: &Problem, state: &FieldState, j: f64) -> bool {
    j.abs() < 1e-12 && state.psi_l2_norm(problem.spectrum()) < 1e-6
}

fn report_for(
    problem: &Problem,
    state: &FieldState,
    cfg: &SolverConfig,
    outcome: Outcome,
    log: Vec<IterateRecord>,
    level: f64,
) -> Result<SolverReport> {
    let res = problem.el_residual(state)?;
    let psi_norm = state.psi_l2_norm(problem.spectrum());
    Ok(SolverReport {
        outcome,
        j_value: problem.evaluate_j(state)?.j,
        residuals: res.norms,
        constraint_norm: problem.constraint_norm(state)?,
        linking_level_estimate: level,
        steps: log.len(),
        iterate_log: log,
        symmetry_checked: false,
        efimov_flag: efimov(problem, state, cfg.nontrivial_floor),
        seed: cfg.rng_seed,
        psi_norm,
        path_max_increase: 0.0,
    })
}

pub fn mountain_pass_search(problem: &Problem, cfg: &SolverConfig) -> Result<(FieldState, SolverReport)> {
    check_problem(problem, cfg)?;
    let end = default_endpoint(problem)?;
    mountain_pass_between(problem, cfg, &problem.trivial_state(), &end)
}

/// Path deformation between two fixed endpoints.
pub fn mountain_pass_between(
    problem: &Problem,
    cfg: &SolverConfig,
    start: &FieldState,
    end: &FieldState,
) -> Result<(FieldState, SolverReport)> {
    check_problem(problem, cfg)?;
    let m = cfg.path_points;
    let mut path = Vec::with_capacity(m);
    for i in 0..m {
        path.push(lerp(problem, start, end, i as f64 / (m - 1) as f64)?);
    }
    let mut values: Vec<f64> = path
        .iter()
        .map(|p| problem.evaluate_j(p).map(|e| e.j))
        .collect::<std::result::Result<_, _>>()?;

    let mut log = Vec::new();
    let mut h = cfg.step_size;
    let mut trivial_run = 0;
    let mut outcome = Outcome::MaxIters;
    let mut best = 0;
    let mut max_increase = f64::NEG_INFINITY;

    for step in 0..cfg.max_deform_steps {
        let imax = argmax(&values);
        best = imax;
        let jmax = values[imax];
        if imax == 0 || imax == path.len() - 1 {
            // The path already lies below the endpoint levels; resolve the
            // first segment, where a mountain must sit.
            if path.len() >= MAX_PATH_POINTS {
                outcome = Outcome::NumericFailure;
                break;
            }
            let seg = if imax == 0 { 0 } else { path.len() - 2 };
            let mid = lerp(problem, &path[seg], &path[seg + 1], 0.5)?;
            let jm = problem.evaluate_j(&mid)?.j;
            path.insert(seg + 1, mid);
            values.insert(seg + 1, jm);
            if is_trivial(problem, &path[imax], jmax) {
                trivial_run += 1;
                if trivial_run >= TRIVIAL_PATIENCE {
                    outcome = Outcome::TrivialAttractor;
                    break;
                }
            }
            log.push(IterateRecord { step, j: jmax, grad_norm: 0.0 });
            continue;
        }

        let g = problem.tangent_gradient(&path[imax])?;
        let gn = problem.h_norm(&g);
        log.push(IterateRecord { step, j: jmax, grad_norm: gn });
        if is_trivial(problem, &path[imax], jmax) {
            trivial_run += 1;
            if trivial_run >= TRIVIAL_PATIENCE {
                outcome = Outcome::TrivialAttractor;
                break;
            }
        } else {
            trivial_run = 0;
            if gn <= PATH_GRADIENT_TOL {
                outcome = Outcome::Converged;
                break;
            }
        }
        if gn == 0.0 {
            continue;
        }

        let mut accepted = false;
        while h > 1e-14 {
            let trial = place(problem, &path[imax].add(problem.spectrum(), &g, -h))?;
            match problem.evaluate_j(&trial) {
                Ok(e) if e.j < jmax => {
                    path[imax] = trial;
                    values[imax] = e.j;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(VariationalError::OutOfRange { .. }) => h *= 0.5,
                Err(e) => return Err(e.into()),
            }
        }
        if !accepted {
            outcome = Outcome::MaxIters;
            break;
        }
        max_increase = max_increase.max(values[argmax(&values)] - jmax);
        h = (h * 1.5).min(1e3 * cfg.step_size);
        refine_around(problem, &mut path, &mut values, imax)?;
    }

    let best = if matches!(outcome, Outcome::MaxIters | Outcome::Converged) { argmax(&values) } else { best };
    let state = path[best].clone();
    let level = values[argmax(&values)];
    let mut report = report_for(problem, &state, cfg, outcome, log, level)?;
    if max_increase == f64::NEG_INFINITY {
        report.path_max_increase = 0.0;
    } else {
        report.path_max_increase = max_increase;
    }
    Ok((state, report))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Inserts midpoints next to `i` when a neighbouring gap is much longer
/// than the typical spacing.
fn refine_around(problem: &Problem, path: &mut Vec<FieldState>, values: &mut Vec<f64>, i: usize) -> Result<()> {
    if path.len() >= MAX_PATH_POINTS {
        return Ok(());
    }
    let gaps: Vec<f64> = path
        .windows(2)
        .map(|w| problem.h_norm(&difference(&w[1], &w[0])))
        .collect();
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let typical = sorted[sorted.len() / 2];
    for seg in [i, i.saturating_sub(1)] {
        if seg + 1 < path.len() && gaps[seg] > 2.0 * typical && path.len() < MAX_PATH_POINTS {
            let mid = lerp(problem, &path[seg], &path[seg + 1], 0.5)?;
            let j = problem.evaluate_j(&mid)?.j;
            path.insert(seg + 1, mid);
            values.insert(seg + 1, j);
        }
    }
    Ok(())
}

fn efimov(problem: &Problem, state: &FieldState, floor: f64) -> bool {
    let area = problem.mass().sum();
    let flat = state.u.iter().all(|u| {
        let mean = u.dot(problem.mass()) / area;
        let var = u.iter().zip(problem.mass().iter()).map(|(x, m)| m * (x - mean).powi(2)).sum::<f64>() / area;
        var.sqrt() <= 1e-6
    });
    flat && state.psi_l2_norm(problem.spectrum()) >= floor
}

/// Newton's method on `dJ = 0`, bordered by the symmetry tangents of every
/// spinor field that is not negligible.
pub fn newton_refine(problem: &Problem, state: &FieldState, cfg: &SolverConfig) -> Result<(FieldState, SolverReport)> {
    check_problem(problem, cfg)?;
    let spec = problem.spectrum();
    let n = problem.vertex_count();
    let mut x = state.clone();
    let mut log = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut outcome = Outcome::MaxIters;

    for step in 0..=MAX_NEWTON_STEPS {
        let res = problem.el_residual(&x)?.norms.max();
        let j = problem.evaluate_j(&x)?.j;
        log.push(IterateRecord { step, j, grad_norm: res });
        if !res.is_finite() {
            outcome = Outcome::NumericFailure;
            break;
        }
        if res <= cfg.newton_tol {
            outcome = Outcome::Converged;
            break;
        }
        if history.len() >= 10 && res > history[history.len() - 10] {
            outcome = Outcome::NumericFailure;
            break;
        }
        history.push(res);
        if step == MAX_NEWTON_STEPS {
            break;
        }

        let g = problem.differential(&x)?.to_vector();
        let h = problem.hessian(&x)?;
        let mut border: Vec<DVector<f64>> = Vec::new();
        for jf in 0..2 {
            if x.psi_l2_norm(spec) == 0.0 || x.coeffs[jf].norm() <= 1e-8 * x.coeffs[0].norm().max(x.coeffs[1].norm()) {
                continue;
            }
            for t in problem.symmetry_tangents(&x, jf) {
                let mut full = DVector::zeros(g.len());
                full.rows_mut(2 * n + jf * 4 * n, 4 * n).copy_from(&(&t / t.norm()));
                border.push(full);
            }
        }
        let dim = g.len();
        let b = border.len();
        let mut sys = DMatrix::zeros(dim + b, dim + b);
        sys.view_mut((0, 0), (dim, dim)).copy_from(&h);
        for (c, t) in border.iter().enumerate() {
            sys.view_mut((0, dim + c), (dim, 1)).copy_from(t);
            sys.view_mut((dim + c, 0), (1, dim)).copy_from(&t.transpose());
        }
        let mut rhs = DVector::zeros(dim + b);
        rhs.rows_mut(0, dim).copy_from(&(-&g));
        let Some(sol) = sys.lu().solve(&rhs) else {
            outcome = Outcome::NumericFailure;
            break;
        };
        if !sol.iter().all(|v| v.is_finite()) {
            outcome = Outcome::NumericFailure;
            break;
        }
        let dir = Variation::from_vector(&sol.rows(0, dim).into_owned(), n);

        let mut t = 1.0;
        let mut next = None;
        while t >= 1.0 / 1024.0 {
            let trial = x.add(spec, &dir, t);
            if let Ok(r) = problem.el_residual(&trial) {
                if r.norms.max() < res {
                    next = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        match next {
            Some(s) => x = s,
            None => {
                outcome = Outcome::NumericFailure;
                break;
            }
        }
    }

    let level = problem.evaluate_j(&x)?.j;
    let report = report_for(problem, &x, cfg, outcome, log, level)?;
    Ok((x, report))
}

/// Mountain-pass search followed by Newton polishing.
pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<(FieldState, SolverReport)> {
    let (s0, r0) = mountain_pass_search(problem, cfg)?;
    if matches!(r0.outcome, Outcome::TrivialAttractor | Outcome::NumericFailure) {
        return Ok((s0, r0));
    }
    let (s1, mut r1) = newton_refine(problem, &s0, cfg)?;
    let mut log = r0.iterate_log.clone();
    let offset = log.len();
    log.extend(r1.iterate_log.iter().map(|r| IterateRecord { step: r.step + offset, ..*r }));
    r1.iterate_log = log;
    r1.steps = r1.iterate_log.len();
    r1.linking_level_estimate = r0.linking_level_estimate;
    r1.path_max_increase = r0.path_max_increase;
    if r1.outcome == Outcome::Converged {
        if r1.psi_norm < cfg.nontrivial_floor {
            r1.outcome = Outcome::TrivialAttractor;
        } else {
            let v = verify_solution(problem, &s1, cfg)?;
            r1.symmetry_checked = v.symmetry_checked;
        }
    }
    Ok((s1, r1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    NotASolution,
    Trivial,
    MountainPass,
    Linking,
}

impl Classification {
    pub fn verdict(&self) -> &'static str {
        match self {
            Classification::NotASolution => "not a solution",
            Classification::Trivial => "trivial solution",
            Classification::MountainPass => "mountain-pass solution",
            Classification::Linking => "linking solution",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub residuals: ResidualNorms,
    pub constraint_norm: f64,
    pub scalar_ok: bool,
    pub spinor_ok: bool,
    pub constraint_ok: bool,
    pub nontrivial: bool,
    pub efimov_flag: bool,
    pub symmetry_checked: bool,
    pub j_value: f64,
    pub psi_norm: f64,
    pub classification: Classification,
}

pub fn verify_solution(problem: &Problem, state: &FieldState, cfg: &SolverConfig) -> Result<Verdict> {
    let res = problem.el_residual(state)?.norms;
    let tol = 100.0 * cfg.newton_tol;
    let scalar_ok = res.s_t_u <= tol && res.s_tprime <= tol;
    let spinor_ok = res.s_t_psi <= tol;
    let constraint_norm = problem.constraint_norm(state)?;
    let constraint_ok = constraint_norm <= 1e-8;
    let psi_norm = state.psi_l2_norm(problem.spectrum());
    let nontrivial = psi_norm >= cfg.nontrivial_floor;
    let efimov_flag = efimov(problem, state, cfg.nontrivial_floor);
    let j_value = problem.evaluate_j(state)?.j;
    let solved = scalar_ok && spinor_ok && constraint_ok;
    let classification = match (solved, nontrivial) {
        (false, _) => Classification::NotASolution,
        (true, false) => Classification::Trivial,
        (true, true) if problem.split().pos_b.is_empty() => Classification::MountainPass,
        (true, true) => Classification::Linking,
    };
    let symmetry_checked = solved && nontrivial && {
        let q = [0.5, 0.5, -0.5, 0.5];
        let moved = state.quaternion_act(problem.spectrum(), q)?;
        let r = problem.el_residual(&moved)?.norms;
        r.max() <= tol && (problem.evaluate_j(&moved)?.j - j_value).abs() <= 1e-10 * j_value.abs().max(1.0)
    };
    Ok(Verdict {
        residuals: res,
        constraint_norm,
        scalar_ok,
        spinor_ok,
        constraint_ok,
        nontrivial,
        efimov_flag,
        symmetry_checked,
        j_value,
        psi_norm,
        classification,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub rho: f64,
    /// `#{k : 0 < λ_k < ρ}`.
    pub pos_b_dim: usize,
    /// Change of `pos_b_dim` relative to the previous grid point.
    pub dim_jump: usize,
    pub result: std::result::Result<(FieldState, SolverReport), String>,
}

/// Solves along an increasing ρ grid, warm-starting from the last
/// converged nontrivial state.
pub fn continuation_sweep(
    mesh: &SurfaceMesh,
    spec: &DiracSpectrum,
    rho_grid: &[f64],
    cfg: &SolverConfig,
    cartan: Cartan,
) -> Result<Vec<SweepEntry>> {
    if rho_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SaddleError::Config("rho grid must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(rho_grid.len());
    let mut warm: Option<FieldState> = None;
    let mut prev_dim: Option<usize> = None;
    for &rho in rho_grid {
        let dim = spec.positive_eigenvalues().iter().filter(|&&l| l < rho).count();
        let dim_jump = prev_dim.map_or(0, |p| dim - p);
        prev_dim = Some(dim);
        let c = SolverConfig { rho, ..*cfg };
        let attempt = || -> Result<(FieldState, SolverReport)> {
            let problem = Problem::new(mesh, spec.clone(), rho, cartan)?;
            if let Some(w) = &warm {
                let (s, r) = newton_refine(&problem, w, &c)?;
                if r.outcome == Outcome::Converged && r.psi_norm >= c.nontrivial_floor {
                    return Ok((s, r));
                }
            }
            solve(&problem, &c)
        };
        let result = attempt().map_err(|e| e.to_string());
        if let Ok((s, r)) = &result {
            if r.outcome == Outcome::Converged {
                warm = Some(s.clone());
            }
        }
        out.push(SweepEntry { rho, pos_b_dim: dim, dim_jump, result });
    }
    Ok(out)
}

/// Sampled check of `J ≥ c ‖·‖²` on the sphere of radius `R` in the
/// Nehari manifold, outside the cone around the `(0, ρ)` modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeDiagnostic {
    pub tau: f64,
    pub r_ball: f64,
    /// Samples outside the cone.
    pub samples: usize,
    /// Samples rejected for lying inside the cone.
    pub rejected: usize,
    /// `min J / ‖·‖²` over the samples.
    pub c: f64,
    pub n_rho_samples: usize,
    /// `max J` over random states `(0, ψ_b)`.
    pub max_j_on_n_rho: f64,
}

impl ConeDiagnostic {
    pub fn accepted(&self) -> bool {
        self.c > 0.0 && self.max_j_on_n_rho <= 0.0
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random free coordinates: `u` with a random mean and `ψ⁺` with modes
/// weighted evenly in H^{1/2}. The `(0, ρ)` modes get a random log-normal
/// boost so that samples reach the cone boundary.
fn random_direction(problem: &Problem, rng: &mut ChaCha8Rng, with_b: bool) -> FieldState {
    let spec = problem.spectrum();
    let n = problem.vertex_count();
    let ev = spec.eigenvalues();
    let split = problem.split();
    let boost = (1.5 * normal(rng)).exp() * 3.0;
    let u: [DVector<f64>; 2] = std::array::from_fn(|_| {
        let offset = normal(rng);
        DVector::from_fn(n, |_, _| offset + normal(rng))
    });
    let a: [DVector<f64>; 2] = std::array::from_fn(|_| {
        let mut a = DVector::zeros(spec.dimension());
        for &k in &split.pos_a {
            a[k] = normal(rng) / (1.0 + ev[k].abs()).sqrt();
        }
        if with_b {
            for &k in &split.pos_b {
                a[k] = boost * normal(rng) / (1.0 + ev[k].abs()).sqrt();
            }
        }
        a
    });
    FieldState::from_coeffs(spec, u, a)
}

/// Scales free coordinates by `s` and projects onto the Nehari manifold.
fn scaled_on_manifold(problem: &Problem, dir: &FieldState, s: f64) -> Result<FieldState> {
    Ok(problem.nehari_project(
        [&dir.u[0] * s, &dir.u[1] * s],
        [&dir.coeffs[0] * s, &dir.coeffs[1] * s],
    )?)
}

/// Radial search onto `‖·‖ = radius` within the Nehari manifold:
/// secant steps safeguarded by a bracketing interval.
fn on_sphere(problem: &Problem, dir: &FieldState, radius: f64) -> Result<FieldState> {
    let f = |s: f64| -> Result<(f64, FieldState)> {
        let st = scaled_on_manifold(problem, dir, s)?;
        Ok((problem.state_norm(&st) - radius, st))
    };
    let (mut lo, mut flo) = (0.0, -radius);
    let mut hi = radius / problem.state_norm(dir).max(f64::MIN_POSITIVE);
    let (mut fhi, mut best) = f(hi)?;
    let mut grow = 0;
    while fhi < 0.0 {
        (lo, flo) = (hi, fhi);
        hi *= 2.0;
        (fhi, best) = f(hi)?;
        grow += 1;
        if grow > 60 {
            return Err(SaddleError::Config("radial search diverged".into()));
        }
    }
    for _ in 0..100 {
        if fhi.abs() <= 1e-13 * radius {
            return Ok(best);
        }
        let mut s = hi - fhi * (hi - lo) / (fhi - flo);
        if !(s > lo && s < hi) || (hi - lo) < 1e-15 * hi {
            s = 0.5 * (lo + hi);
        }
        let (fs, st) = f(s)?;
        if fs.abs() <= 1e-13 * radius {
            return Ok(st);
        }
        if fs < 0.0 {
            (lo, flo) = (s, fs);
        } else {
            (hi, fhi, best) = (s, fs, st);
        }
    }
    Ok(best)
}

fn part_norm_sq(problem: &Problem, state: &FieldState, idx: &[usize]) -> f64 {
    let ev = problem.spectrum().eigenvalues();
    (0..2)
        .map(|j| idx.iter().map(|&k| (1.0 + ev[k].abs()) * state.coeffs[j][k].powi(2)).sum::<f64>())
        .sum()
}

pub fn in_cone(problem: &Problem, state: &FieldState, tau: f64) -> bool {
    let split = problem.split();
    let u = Variation { u: state.u.clone(), a: [DVector::zeros(0), DVector::zeros(0)] };
    let u_sq: f64 = (0..2)
        .map(|j| u.u[j].dot(&(problem.stiffness() * &u.u[j] + u.u[j].component_mul(problem.mass()))))
        .sum();
    let rest = u_sq + part_norm_sq(problem, state, &split.neg) + part_norm_sq(problem, state, &split.pos_a);
    rest < tau * part_norm_sq(problem, state, &split.pos_b)
}

pub fn cone_sampling(problem: &Problem, tau: f64, r_ball: f64, samples: usize, seed: u64) -> Result<ConeDiagnostic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = f64::INFINITY;
    let mut taken = 0;
    let mut rejected = 0;
    while taken < samples {
        let dir = random_direction(problem, &mut rng, true);
        let s = on_sphere(problem, &dir, r_ball)?;
        if in_cone(problem, &s, tau) {
            rejected += 1;
            if rejected > 100 * samples {
                break;
            }
            continue;
        }
        let norm = problem.state_norm(&s);
        c = c.min(problem.evaluate_j(&s)?.j / (norm * norm));
        taken += 1;
    }
    let spec = problem.spectrum();
    let mut max_j = f64::NEG_INFINITY;
    let n_rho_samples = samples;
    for _ in 0..n_rho_samples {
        let a: [DVector<f64>; 2] = std::array::from_fn(|_| {
            let mut a = DVector::zeros(spec.dimension());
            for &k in &problem.split().pos_b {
                a[k] = normal(&mut rng);
            }
            a
        });
        let s = problem.nehari_project([DVector::zeros(problem.vertex_count()), DVector::zeros(problem.vertex_count())], a)?;
        max_j = max_j.max(problem.evaluate_j(&s)?.j);
    }
    Ok(ConeDiagnostic { tau, r_ball, samples: taken, rejected, c, n_rho_samples, max_j_on_n_rho: max_j })
}

/// Searches `(τ, R)` from the configured values, alternately doubling `τ`
/// and halving `R` until the sampled lower bound is positive.
pub fn search_cone_parameters(problem: &Problem, cfg: &SolverConfig, samples: usize) -> Result<ConeDiagnostic> {
    let (mut tau, mut r) = (cfg.tau, cfg.r_ball);
    let mut last = None;
    for attempt in 0..8 {
        let d = cone_sampling(problem, tau, r, samples, cfg.rng_seed)?;
        if d.accepted() && d.samples == samples {
            return Ok(d);
        }
        last = Some(d);
        if attempt % 2 == 0 {
            tau *= 2.0;
        } else {
            r *= 0.5;
        }
    }
    Ok(last.expect("at least one attempt"))
}

/// Number of negative eigenvalues of the second variation at the trivial
/// state, restricted to the tangent space `(u, ψ⁺)` of the Nehari manifold.
pub fn trivial_hessian_index(problem: &Problem) -> Result<usize> {
    let n = problem.vertex_count();
    let h = problem.hessian(&problem.trivial_state())?;
    let positive = problem.split().positive();
    let mut idx: Vec<usize> = (0..2 * n).collect();
    for j in 0..2 {
        idx.extend(positive.iter().map(|&k| 2 * n + j * 4 * n + k));
    }
    let restricted = h.select_rows(&idx).select_columns(&idx);
    let eig = SymmetricEigen::new(restricted);
    Ok(eig.eigenvalues.iter().filter(|&&l| l < 0.0).count())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeBound {
    pub samples: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// Monte Carlo estimate of `sup ‖ψ⁻‖_{H^{1/2}} / (ρ ‖ψ⁺‖_{H^{1/2}})` over
/// `‖u‖_{H¹} ≤ R`.
pub fn negative_part_ratio(problem: &Problem, r_ball: f64, samples: usize, seed: u64) -> Result<NegativeBound> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = problem.split();
    let positive = split.positive();
    let mut max_ratio: f64 = 0.0;
    let mut sum = 0.0;
    for _ in 0..samples {
        let dir = random_direction(problem, &mut rng, true);
        let u_norm = problem.h_norm(&Variation {
            u: dir.u.clone(),
            a: [DVector::zeros(dir.coeffs[0].len()), DVector::zeros(dir.coeffs[0].len())],
        });
        let scale_u = r_ball * rng.gen::<f64>() / u_norm;
        let plus = part_norm_sq(problem, &dir, &positive).sqrt();
        let s = problem.nehari_project(
            [&dir.u[0] * scale_u, &dir.u[1] * scale_u],
            [&dir.coeffs[0] / plus, &dir.coeffs[1] / plus],
        )?;
        let ratio = part_norm_sq(problem, &s, &split.neg).sqrt() / problem.rho();
        max_ratio = max_ratio.max(ratio);
        sum += ratio;
    }
    Ok(NegativeBound { samples, max_ratio, mean_ratio: sum / samples.max(1) as f64 })
}
