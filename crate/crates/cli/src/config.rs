//! Run configuration: a strict JSON schema plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toda_core::saddle::SolverConfig;
use toda_core::spinops::DiracSpectrum;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    Generator { genus: usize, subdivision: usize },
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpinChoice {
    Class(usize),
    Scan(Scan),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scan {
    Scan,
}

/// Either an absolute value or `"<f>x-lambda<k>"`, meaning `f·λ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoValue {
    Absolute(f64),
    Relative(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    Single(RhoValue),
    Grid(RhoGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoGrid {
    pub grid: Vec<RhoValue>,
}

/// Solver settings; every field is optional and defaults as documented on
/// [`SolverConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(rename = "R")]
    pub r_ball: Option<f64>,
    pub tau: Option<f64>,
    pub path_points: Option<usize>,
    pub max_deform_steps: Option<usize>,
    pub step_size: Option<f64>,
    pub newton_tol: Option<f64>,
    pub nontrivial_floor: Option<f64>,
    pub rng_seed: Option<u64>,
}

impl SolverSection {
    pub fn resolve(&self, rho: f64) -> SolverConfig {
        let d = SolverConfig::with_rho(rho);
        SolverConfig {
            rho,
            r_ball: self.r_ball.unwrap_or(d.r_ball),
            tau: self.tau.unwrap_or(d.tau),
            path_points: self.path_points.unwrap_or(d.path_points),
            max_deform_steps: self.max_deform_steps.unwrap_or(d.max_deform_steps),
            step_size: self.step_size.unwrap_or(d.step_size),
            newton_tol: self.newton_tol.unwrap_or(d.newton_tol),
            nontrivial_floor: self.nontrivial_floor.unwrap_or(d.nontrivial_floor),
            rng_seed: self.rng_seed.unwrap_or(d.rng_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshSource,
    #[serde(default = "default_spin")]
    pub spin_class: SpinChoice,
    pub rho: RhoSpec,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default = "default_cartan")]
    pub cartan: [[f64; 2]; 2],
    pub output_dir: PathBuf,
}

fn default_spin() -> SpinChoice {
    SpinChoice::Scan(Scan::Scan)
}

fn default_cartan() -> [[f64; 2]; 2] {
    [[2.0, -1.0], [-1.0, 2.0]]
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Usage(format!("config schema error at `{path}`: {}", e.into_inner()))
    })
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

impl RhoValue {
    pub fn resolve(&self, spec: &DiracSpectrum) -> Result<f64, CliError> {
        match self {
            RhoValue::Absolute(x) => Ok(*x),
            RhoValue::Relative(s) => {
                let bad = || CliError::Usage(format!("rho `{s}` is neither a number nor of the form <f>x-lambda<k>"));
                let (f, k) = s.split_once("x-lambda").ok_or_else(bad)?;
                let f: f64 = f.parse().map_err(|_| bad())?;
                let k: i64 = k.parse().map_err(|_| bad())?;
                if k <= 0 {
                    return Err(bad());
                }
                let l = spec
                    .lambda(k)
                    .ok_or_else(|| CliError::Domain(format!("spectrum has no eigenvalue lambda{k}")))?;
                Ok(f * l)
            }
        }
    }

    pub fn parse_flag(s: &str) -> RhoValue {
        match s.parse::<f64>() {
            Ok(x) => RhoValue::Absolute(x),
            Err(_) => RhoValue::Relative(s.to_string()),
        }
    }
}

impl RhoSpec {
    pub fn values(&self) -> Vec<RhoValue> {
        match self {
            RhoSpec::Single(v) => vec![v.clone()],
            RhoSpec::Grid(g) => g.grid.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(r#"{"mesh": {"generator": {"genus": 2, "subdivision": 1}}, "rho": 0.1, "output_dir": "o"}"#)
            .unwrap();
        assert_eq!(c.solver.resolve(0.1), SolverConfig::with_rho(0.1));
        assert_eq!(c.spin_class, SpinChoice::Scan(Scan::Scan));
        assert_eq!(c.cartan, default_cartan());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = parse_config(
            r#"{"mesh": {"path": "m.itri"}, "rho": 0.1, "output_dir": "o", "solver": {"gamma_factor": 2}}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gamma_factor"), "{msg}");
        assert!(msg.contains("solver"), "{msg}");
    }

    #[test]
    fn grid_and_relative_rho_parse() {
        let c = parse_config(
            r#"{"mesh": {"path": "m.itri"}, "spin_class": 3, "rho": {"grid": [0.1, "0.5x-lambda1"]}, "output_dir": "o"}"#,
        )
        .unwrap();
        assert_eq!(c.spin_class, SpinChoice::Class(3));
        assert_eq!(
            c.rho.values(),
            vec![RhoValue::Absolute(0.1), RhoValue::Relative("0.5x-lambda1".into())]
        );
    }
}
