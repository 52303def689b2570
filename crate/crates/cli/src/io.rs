//! Artifact formats: state CSV and sidecar, spectrum CSV, report JSON,
//! iterate log and run manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! reload reproduces every value bit for bit and fixed inputs give
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toda_core::nalgebra::DVector;
use toda_core::saddle::{SolverReport, Verdict};
use toda_core::spinops::DiracSpectrum;
use toda_core::variational::FieldState;

use crate::CliError;

pub const STATE_HEADER: &str = "vertex,u1,u2,p1w,p1x,p1y,p1z,p2w,p2x,p2y,p2z";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Domain(format!("{}: {e}", path.display()))
}

pub fn state_csv(state: &FieldState) -> String {
    let mut s = String::from(STATE_HEADER);
    s.push('\n');
    for v in 0..state.vertex_count() {
        write!(s, "{v},{},{}", state.u[0][v], state.u[1][v]).unwrap();
        for j in 0..2 {
            for c in 0..4 {
                write!(s, ",{}", state.psi[j][4 * v + c]).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

/// Parses a state CSV into `(u, ψ)` vertex arrays.
pub fn parse_state_csv(text: &str) -> Result<([DVector<f64>; 2], [DVector<f64>; 2]), CliError> {
    let bad = |line: usize, msg: &str| CliError::Domain(format!("state csv line {line}: {msg}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(STATE_HEADER) {
        return Err(bad(1, "expected header"));
    }
    let mut u = [Vec::new(), Vec::new()];
    let mut psi = [Vec::new(), Vec::new()];
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(bad(i + 2, "expected 11 columns"));
        }
        let v: usize = fields[0].trim().parse().map_err(|_| bad(i + 2, "bad vertex id"))?;
        if v != u[0].len() {
            return Err(bad(i + 2, "vertices must be listed in order"));
        }
        let x: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(i + 2, "bad number"))?;
        u[0].push(x[0]);
        u[1].push(x[1]);
        psi[0].extend_from_slice(&x[2..6]);
        psi[1].extend_from_slice(&x[6..10]);
    }
    let [u0, u1] = u;
    let [p0, p1] = psi;
    Ok((
        [DVector::from_vec(u0), DVector::from_vec(u1)],
        [DVector::from_vec(p0), DVector::from_vec(p1)],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSidecar {
    pub rho: f64,
    pub mesh_hash: String,
    pub spin_class: usize,
    pub cartan: [[f64; 2]; 2],
}

pub fn spectrum_csv(spec: &DiracSpectrum) -> String {
    let mut s = String::from("index,lambda\n");
    for (l, x) in spec.labels().iter().zip(spec.eigenvalues().iter()) {
        writeln!(s, "{l},{x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    #[serde(rename = "sT_u")]
    pub s_t_u: f64,
    #[serde(rename = "sT_psi")]
    pub s_t_psi: f64,
    #[serde(rename = "sTprime")]
    pub s_tprime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub outcome: String,
    #[serde(rename = "J")]
    pub j: f64,
    pub residuals: ResidualSummary,
    pub constraint_norm: f64,
    pub linking_level: f64,
    pub steps: usize,
    pub seed: u64,
    pub efimov_flag: bool,
    pub psi_l2_norm: f64,
    pub symmetry_checked: bool,
    pub path_max_increase: f64,
    pub rho: f64,
    pub spin_class: usize,
    pub edge_signs: Vec<i8>,
    pub verdict: Option<String>,
}

impl ReportJson {
    pub fn new(r: &SolverReport, rho: f64, spin_class: usize, edge_signs: &[i8], verdict: Option<&Verdict>) -> Self {
        ReportJson {
            outcome: r.outcome.as_str().to_string(),
            j: r.j_value,
            residuals: ResidualSummary {
                s_t_u: r.residuals.s_t_u,
                s_t_psi: r.residuals.s_t_psi,
                s_tprime: r.residuals.s_tprime,
            },
            constraint_norm: r.constraint_norm,
            linking_level: r.linking_level_estimate,
            steps: r.steps,
            seed: r.seed,
            efimov_flag: r.efimov_flag,
            psi_l2_norm: r.psi_norm,
            symmetry_checked: r.symmetry_checked,
            path_max_increase: r.path_max_increase,
            rho,
            spin_class,
            edge_signs: edge_signs.to_vec(),
            verdict: verdict.map(|v| v.classification.verdict().to_string()),
        }
    }
}

pub fn iterates_csv(r: &SolverReport) -> String {
    let mut s = String::from("step,J,grad_norm\n");
    for it in &r.iterate_log {
        writeln!(s, "{},{},{}", it.step, it.j, it.grad_norm).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictJson {
    pub verdict: String,
    pub residuals: ResidualSummary,
    pub constraint_norm: f64,
    pub scalar_ok: bool,
    pub spinor_ok: bool,
    pub constraint_ok: bool,
    pub nontrivial: bool,
    pub efimov_flag: bool,
    pub symmetry_checked: bool,
    #[serde(rename = "J")]
    pub j: f64,
    pub psi_l2_norm: f64,
}

impl From<&Verdict> for VerdictJson {
    fn from(v: &Verdict) -> Self {
        VerdictJson {
            verdict: v.classification.verdict().to_string(),
            residuals: ResidualSummary {
                s_t_u: v.residuals.s_t_u,
                s_t_psi: v.residuals.s_t_psi,
                s_tprime: v.residuals.s_tprime,
            },
            constraint_norm: v.constraint_norm,
            scalar_ok: v.scalar_ok,
            spinor_ok: v.spinor_ok,
            constraint_ok: v.constraint_ok,
            nontrivial: v.nontrivial,
            efimov_flag: v.efimov_flag,
            symmetry_checked: v.symmetry_checked,
            j: v.j_value,
            psi_l2_norm: v.psi_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_hash: String,
    pub mesh_hash: String,
    pub spin_class: Option<usize>,
    /// sha256 of every artifact written in the run directory.
    pub files: BTreeMap<String, String>,
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Collects artifacts for one run directory and writes them with a manifest.
pub struct RunWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunWriter {
    pub fn new(dir: &Path) -> Self {
        RunWriter { dir: dir.to_path_buf(), files: BTreeMap::new() }
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_file(&path, contents)?;
        self.files.insert(name.to_string(), sha256_hex(contents));
        Ok(path)
    }

    pub fn finish(self, config_hash: String, mesh_hash: String, spin_class: Option<usize>) -> Result<(), CliError> {
        let m = Manifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            mesh_hash,
            spin_class,
            files: self.files,
        };
        write_file(&self.dir.join("manifest.json"), &to_json(&m))
    }
}
