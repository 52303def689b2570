//! Command-line pipeline: mesh → spin classes → spectrum → solve → verify.

pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;
use toda_core::hypmesh::{build_fuchsian_mesh, load_mesh, to_itri, write_mesh, SurfaceMesh};
use toda_core::saddle::{continuation_sweep, solve, verify_solution, SolverConfig};
use toda_core::spinops::{
    assemble_dirac, eigendecompose, enumerate_spin_classes, DiracSpectrum, EigenConfig, SpinStructure,
};
use toda_core::variational::{Cartan, FieldState, Problem};

use config::{MeshSource, RhoSpec, RhoValue, RunConfig, Scan, SolverSection, SpinChoice};
use io::{RunWriter, StateSidecar};

/// Smallest `|λ|` accepted when a spin class is picked automatically.
pub const SCAN_MIN_ABS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

fn domain<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "super-toda", version, about = "Super Toda saddle points on hyperbolic surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a regular-polygon mesh and write it as ITRI.
    Mesh {
        #[arg(long)]
        genus: usize,
        #[arg(long, default_value_t = 0)]
        subdivision: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dirac spectra for one spin class or all of them.
    Spectrum {
        #[arg(long)]
        mesh: PathBuf,
        /// Class index or `scan`.
        #[arg(long, default_value = "scan")]
        spin_class: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Mountain-pass or linking search followed by Newton refinement.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        spin_class: Option<String>,
        /// Number or `<f>x-lambda<k>`.
        #[arg(long)]
        rho: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_deform_steps: Option<usize>,
    },
    /// Continuation over an increasing ρ grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-check a stored state.
    Verify {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Defaults to the state path with a `.json` extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Mesh { genus, subdivision, out } => {
            let mesh = build_fuchsian_mesh(genus, subdivision).map_err(domain)?;
            write_mesh(&mesh, &out).map_err(domain)?;
            println!(
                "wrote {} (V={} E={} F={} genus={})",
                out.display(),
                mesh.vertex_count(),
                mesh.edge_count(),
                mesh.face_count(),
                mesh.genus()
            );
            Ok(())
        }
        Command::Spectrum { mesh, spin_class, out_dir } => {
            let choice = parse_spin_flag(&spin_class)?;
            spectrum_command(&MeshSource::Path(mesh), choice, &out_dir)
        }
        Command::Solve { config, mesh, spin_class, rho, out_dir, seed, max_deform_steps } => {
            let mut cfg = match &config {
                Some(p) => config::read_config(p)?,
                None => RunConfig {
                    mesh: MeshSource::Path(mesh.clone().ok_or_else(|| usage("solve needs --mesh or --config"))?),
                    spin_class: SpinChoice::Scan(Scan::Scan),
                    rho: RhoSpec::Single(RhoValue::parse_flag(
                        rho.as_deref().ok_or_else(|| usage("solve needs --rho or --config"))?,
                    )),
                    solver: SolverSection::default(),
                    cartan: [[2.0, -1.0], [-1.0, 2.0]],
                    output_dir: out_dir.clone().ok_or_else(|| usage("solve needs --out-dir or --config"))?,
                },
            };
            if let Some(m) = mesh {
                cfg.mesh = MeshSource::Path(m);
            }
            if let Some(s) = spin_class {
                cfg.spin_class = parse_spin_flag(&s)?;
            }
            if let Some(r) = rho {
                cfg.rho = RhoSpec::Single(RhoValue::parse_flag(&r));
            }
            if let Some(o) = out_dir {
                cfg.output_dir = o;
            }
            if seed.is_some() {
                cfg.solver.rng_seed = seed;
            }
            if max_deform_steps.is_some() {
                cfg.solver.max_deform_steps = max_deform_steps;
            }
            solve_command(&cfg)
        }
        Command::Sweep { config, out_dir } => {
            let mut cfg = config::read_config(&config)?;
            if let Some(o) = out_dir {
                cfg.output_dir = o;
            }
            sweep_command(&cfg)
        }
        Command::Verify { mesh, state, sidecar } => verify_command(&mesh, &state, sidecar.as_deref()),
    }
}

fn usage(msg: &str) -> CliError {
    CliError::Usage(msg.to_string())
}

fn parse_spin_flag(s: &str) -> Result<SpinChoice, CliError> {
    if s == "scan" {
        return Ok(SpinChoice::Scan(Scan::Scan));
    }
    s.parse()
        .map(SpinChoice::Class)
        .map_err(|_| usage(&format!("--spin-class must be an integer or `scan`, got `{s}`")))
}

fn load_source(src: &MeshSource) -> Result<SurfaceMesh, CliError> {
    match src {
        MeshSource::Generator { genus, subdivision } => build_fuchsian_mesh(*genus, *subdivision).map_err(domain),
        MeshSource::Path(p) => load_mesh(p).map_err(domain),
    }
}

pub fn mesh_hash(mesh: &SurfaceMesh) -> String {
    io::sha256_hex(to_itri(mesh).as_bytes())
}

/// Worker pool sized by `TODA_SPIN_THREADS` when set.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("TODA_SPIN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(&format!("TODA_SPIN_THREADS must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(domain)
}

fn spectrum_of(mesh: &SurfaceMesh, spin: &SpinStructure) -> Result<DiracSpectrum, CliError> {
    let d = assemble_dirac(mesh, spin).map_err(domain)?;
    eigendecompose(&d, &EigenConfig::default()).map_err(domain)
}

/// Resolves the spin class; `scan` picks the kernel-free class with the
/// largest smallest `|λ|`, which must be at least [`SCAN_MIN_ABS`].
fn pick_class(mesh: &SurfaceMesh, choice: SpinChoice) -> Result<(SpinStructure, DiracSpectrum), CliError> {
    let classes = enumerate_spin_classes(mesh).map_err(domain)?;
    match choice {
        SpinChoice::Class(i) => {
            let spin = classes
                .get(i)
                .cloned()
                .ok_or_else(|| CliError::Domain(format!("spin class {i} out of range 0..{}", classes.len())))?;
            let spec = spectrum_of(mesh, &spin)?;
            Ok((spin, spec))
        }
        SpinChoice::Scan(_) => {
            // Widest spectral gap; near-ties go to the lower index.
            let mut best: Option<(SpinStructure, DiracSpectrum)> = None;
            for spin in classes {
                let spec = spectrum_of(mesh, &spin)?;
                if spec.kernel_dim() > 0 || spec.min_abs() < SCAN_MIN_ABS {
                    continue;
                }
                if best.as_ref().is_none_or(|(_, b)| spec.min_abs() > b.min_abs() * (1.0 + 1e-9)) {
                    best = Some((spin, spec));
                }
            }
            best.ok_or_else(|| CliError::Domain("nontrivial kernel: no kernel-free spin class found".into()))
        }
    }
}

#[derive(serde::Serialize)]
struct KernelRow {
    class: usize,
    kernel_dim: usize,
    min_abs_lambda: f64,
    lambda1: Option<f64>,
}

fn spectrum_command(src: &MeshSource, choice: SpinChoice, out_dir: &Path) -> Result<(), CliError> {
    let mesh = load_source(src)?;
    let classes = enumerate_spin_classes(&mesh).map_err(domain)?;
    let selected: Vec<SpinStructure> = match choice {
        SpinChoice::Class(i) => vec![classes
            .get(i)
            .cloned()
            .ok_or_else(|| CliError::Domain(format!("spin class {i} out of range 0..{}", classes.len())))?],
        SpinChoice::Scan(_) => classes,
    };
    let pool = thread_pool()?;
    let spectra: Vec<Result<DiracSpectrum, CliError>> =
        pool.install(|| selected.par_iter().map(|s| spectrum_of(&mesh, s)).collect());
    let mut w = RunWriter::new(out_dir);
    let mut table = Vec::new();
    for (spin, spec) in selected.iter().zip(spectra) {
        let spec = spec?;
        w.write(&format!("spectrum_class_{}.csv", spin.class_index), io::spectrum_csv(&spec).as_bytes())?;
        table.push(KernelRow {
            class: spin.class_index,
            kernel_dim: spec.kernel_dim(),
            min_abs_lambda: spec.min_abs(),
            lambda1: spec.lambda(1),
        });
    }
    w.write("kernel_table.json", &io::to_json(&table))?;
    let hash = mesh_hash(&mesh);
    let config_hash = io::sha256_hex(format!("spectrum {choice:?}").as_bytes());
    let class = match choice {
        SpinChoice::Class(i) => Some(i),
        SpinChoice::Scan(_) => None,
    };
    w.finish(config_hash, hash, class)?;
    println!("wrote {} spectra to {}", table.len(), out_dir.display());
    Ok(())
}

fn solve_command(cfg: &RunConfig) -> Result<(), CliError> {
    let mesh = load_source(&cfg.mesh)?;
    let (spin, spec) = pick_class(&mesh, cfg.spin_class)?;
    let rho = match &cfg.rho {
        RhoSpec::Single(v) => v.resolve(&spec)?,
        RhoSpec::Grid(_) => return Err(usage("solve takes a single rho; use sweep for grids")),
    };
    let cartan = Cartan::new(cfg.cartan).map_err(|e| usage(&e.to_string()))?;
    let solver = cfg.solver.resolve(rho);
    solver.validate().map_err(|e| usage(&e.to_string()))?;
    let problem = Problem::new(&mesh, spec, rho, cartan).map_err(domain)?;
    let (state, report) = solve(&problem, &solver).map_err(domain)?;
    let verdict = verify_solution(&problem, &state, &solver).map_err(domain)?;

    let mut w = RunWriter::new(&cfg.output_dir);
    write_run(&mut w, cfg, &mesh, &spin, &problem, &state, &report, &verdict)?;
    let config_json = io::to_json(cfg);
    w.write("config.json", &config_json)?;
    w.finish(io::sha256_hex(&config_json), mesh_hash(&mesh), Some(spin.class_index))?;
    println!(
        "outcome={} J={} residual={:e} verdict={}",
        report.outcome.as_str(),
        report.j_value,
        report.residuals.max(),
        verdict.classification.verdict()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_run(
    w: &mut RunWriter,
    cfg: &RunConfig,
    mesh: &SurfaceMesh,
    spin: &SpinStructure,
    problem: &Problem,
    state: &FieldState,
    report: &toda_core::saddle::SolverReport,
    verdict: &toda_core::saddle::Verdict,
) -> Result<(), CliError> {
    let json = io::ReportJson::new(report, problem.rho(), spin.class_index, &spin.edge_signs, Some(verdict));
    w.write("report.json", &io::to_json(&json))?;
    w.write("iterates.csv", io::iterates_csv(report).as_bytes())?;
    w.write("state.csv", io::state_csv(state).as_bytes())?;
    let sidecar = StateSidecar {
        rho: problem.rho(),
        mesh_hash: mesh_hash(mesh),
        spin_class: spin.class_index,
        cartan: cfg.cartan,
    };
    w.write("state.json", &io::to_json(&sidecar))?;
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepRow {
    rho: f64,
    pos_b_dim: usize,
    dim_jump: usize,
    outcome: Option<String>,
    #[serde(rename = "J")]
    j: Option<f64>,
    error: Option<String>,
}

fn sweep_command(cfg: &RunConfig) -> Result<(), CliError> {
    let mesh = load_source(&cfg.mesh)?;
    let (spin, spec) = pick_class(&mesh, cfg.spin_class)?;
    let grid: Vec<f64> = cfg.rho.values().iter().map(|v| v.resolve(&spec)).collect::<Result<_, _>>()?;
    let cartan = Cartan::new(cfg.cartan).map_err(|e| usage(&e.to_string()))?;
    let base = cfg.solver.resolve(grid.first().copied().unwrap_or(1.0));
    base.validate().map_err(|e| usage(&e.to_string()))?;
    let entries = continuation_sweep(&mesh, &spec, &grid, &base, cartan).map_err(domain)?;

    let mut w = RunWriter::new(&cfg.output_dir);
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.dim_jump > 0 {
            println!("rho={}: dim of (0, rho) modes jumps by {} to {}", e.rho, e.dim_jump, e.pos_b_dim);
        }
        let mut row = SweepRow { rho: e.rho, pos_b_dim: e.pos_b_dim, dim_jump: e.dim_jump, outcome: None, j: None, error: None };
        match &e.result {
            Ok((state, report)) => {
                let problem = Problem::new(&mesh, spec.clone(), e.rho, cartan).map_err(domain)?;
                let c = SolverConfig { rho: e.rho, ..base };
                let verdict = verify_solution(&problem, state, &c).map_err(domain)?;
                let mut sub = RunWriter::new(&cfg.output_dir.join(format!("rho_{i:03}")));
                write_run(&mut sub, cfg, &mesh, &spin, &problem, state, report, &verdict)?;
                sub.finish(io::sha256_hex(&io::to_json(cfg)), mesh_hash(&mesh), Some(spin.class_index))?;
                row.outcome = Some(report.outcome.as_str().to_string());
                row.j = Some(report.j_value);
            }
            Err(msg) => row.error = Some(msg.clone()),
        }
        rows.push(row);
    }
    w.write("sweep.json", &io::to_json(&rows))?;
    let config_json = io::to_json(cfg);
    w.write("config.json", &config_json)?;
    w.finish(io::sha256_hex(&config_json), mesh_hash(&mesh), Some(spin.class_index))?;
    println!("swept {} rho values into {}", rows.len(), cfg.output_dir.display());
    Ok(())
}

fn verify_command(mesh_path: &Path, state_path: &Path, sidecar: Option<&Path>) -> Result<(), CliError> {
    let mesh = load_mesh(mesh_path).map_err(domain)?;
    let sidecar_path = sidecar.map(Path::to_path_buf).unwrap_or_else(|| state_path.with_extension("json"));
    let side: StateSidecar = serde_json::from_str(&io::read_file(&sidecar_path)?)
        .map_err(|e| CliError::Domain(format!("{}: {e}", sidecar_path.display())))?;
    if side.mesh_hash != mesh_hash(&mesh) {
        return Err(CliError::Domain("state was computed on a different mesh (hash mismatch)".into()));
    }
    let (_, spec) = pick_class(&mesh, SpinChoice::Class(side.spin_class))?;
    let cartan = Cartan::new(side.cartan).map_err(domain)?;
    let problem = Problem::new(&mesh, spec, side.rho, cartan).map_err(domain)?;
    let (u, psi) = io::parse_state_csv(&io::read_file(state_path)?)?;
    if u[0].len() != mesh.vertex_count() {
        return Err(CliError::Domain("state has the wrong number of vertices".into()));
    }
    let state = FieldState::from_vertex(problem.spectrum(), u, psi);
    let verdict = verify_solution(&problem, &state, &SolverConfig::with_rho(side.rho)).map_err(domain)?;
    let out = state_path.with_file_name("verdict.json");
    io::write_file(&out, &io::to_json(&io::VerdictJson::from(&verdict)))?;
    println!("verdict: {}", verdict.classification.verdict());
    Ok(())
}
