//! Run configuration: a TOML document, dotted-path overrides, and the
//! resolution of the problem it names.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use smp_core::constrained::ConstrainedSpec;
use smp_core::mollify::{MollifierSpec, NearOptimalSpec, PathFunctionalSpec, DEFAULT_EPSILONS};
use smp_core::mp::{CheckSpec, OptimizerSpec, SufficiencySpec};
use smp_core::problem::{builtin_problem, AnalyticSolution, Constraint, ConstraintSpec, ProblemSpec};
use smp_core::regression::RegressionSpec;

pub const DEFAULT_PATHS: usize = 10_000;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Name of a built-in problem.
    pub builtin: Option<String>,
    /// An inline problem; exclusive with `builtin`.
    pub spec: Option<ProblemSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    /// Declared Lipschitz constant of the terminal cost.
    pub lipschitz: Option<f64>,
    pub epsilons: Vec<f64>,
    /// Probe lattice `[probe_min, probe_max]^arity` with `probe_points` per axis.
    pub probe_min: f64,
    pub probe_max: f64,
    pub probe_points: usize,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            lipschitz: None,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            probe_min: -2.0,
            probe_max: 2.0,
            probe_points: 41,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NearOptimalSection {
    pub checkpoints: usize,
    pub probe_paths: usize,
}

impl Default for NearOptimalSection {
    fn default() -> Self {
        let d = NearOptimalSpec::default();
        NearOptimalSection {
            checkpoints: d.checkpoints,
            probe_paths: d.probe_paths,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Scalar control levels; when absent, the uniform grid of the control
    /// box with `resolution` points per component.
    pub levels: Option<Vec<f64>>,
    pub resolution: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            levels: None,
            resolution: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    /// Paths written to path and adjoint dumps.
    pub max_paths: usize,
    pub gzip: bool,
}

impl Default for DumpSection {
    fn default() -> Self {
        DumpSection {
            max_paths: 10,
            gzip: false,
        }
    }
}

/// Everything a run depends on. Only `seed` and `problem` are mandatory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Monte Carlo paths for every sampled quantity (overrides the `paths`
    /// of the optimizer sections).
    pub paths: Option<usize>,
    /// Re-grids the problem, keeping horizon and checkpoint times.
    pub steps: Option<usize>,
    /// `analytic`, `reference`, `zero`, `midpoint`, `constant:a,b`,
    /// `oracle` or `file:PATH`.
    pub candidate: Option<String>,
    /// Use the exact binomial tree instead of sampled paths.
    pub tree: bool,
    pub output: Option<PathBuf>,
    pub problem: ProblemSection,
    /// Expectation constraints; default to the built-in's own.
    pub constraints: Option<Vec<Constraint>>,
    pub regression: RegressionSpec,
    pub check: CheckSpec,
    pub sufficiency: SufficiencySpec,
    pub optimizer: OptimizerSpec,
    pub constrained: ConstrainedSpec,
    pub mollifier: MollifierSpec,
    pub path_functional: Option<PathFunctionalSpec>,
    pub near_optimal: NearOptimalSection,
    pub scan: ScanSection,
    pub oracle: OracleSection,
    pub dump: DumpSection,
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed override key `{path}`");
    }
    let mut cur = table;
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{path}`: `{}` is not a section", keys[..=i].join(".")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// A `key.path=value` override.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))?;
    Ok((key.trim().to_string(), parse_value(raw.trim())))
}

/// Reads the config file (line diagnostics come from parsing the file as
/// written), then applies the overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("malformed config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut table = toml::Table::try_from(&base).context("cannot re-encode the config")?;
    for (key, value) in overrides {
        set_dotted(&mut table, key, value.clone())?;
    }
    RunConfig::deserialize(toml::Value::Table(table)).context("invalid override")
}

/// The problem a config names, with its built-in extras.
#[derive(Debug, Clone)]
pub struct ResolvedProblem {
    pub spec: ProblemSpec,
    pub constraints: Option<ConstraintSpec>,
    pub analytic: Option<AnalyticSolution>,
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| anyhow!("a seed is required (set `seed` in the config or pass --seed)"))
    }

    pub fn paths(&self) -> usize {
        self.paths.unwrap_or(DEFAULT_PATHS)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn problem(&self) -> Result<ResolvedProblem> {
        let mut resolved = match (&self.problem.builtin, &self.problem.spec) {
            (Some(_), Some(_)) => bail!("[problem] sets both `builtin` and `spec`"),
            (None, None) => bail!("missing [problem] section: set `problem.builtin` or `problem.spec`"),
            (Some(name), None) => {
                let b = builtin_problem(name)?;
                ResolvedProblem {
                    spec: b.spec,
                    constraints: b.constraints,
                    analytic: b.analytic,
                }
            }
            (None, Some(spec)) => ResolvedProblem {
                spec: spec.clone(),
                constraints: None,
                analytic: None,
            },
        };
        if let Some(steps) = self.steps {
            resolved.spec.grid = resolved.spec.grid.with_steps(steps)?;
        }
        if let Some(items) = &self.constraints {
            resolved.constraints = Some(ConstraintSpec::new(items.clone()));
        }
        Ok(resolved)
    }

    /// Optimizer settings with the run's path count.
    pub fn optimizer(&self) -> OptimizerSpec {
        OptimizerSpec {
            paths: self.paths(),
            ..self.optimizer
        }
    }

    pub fn constrained(&self) -> ConstrainedSpec {
        let mut spec = self.constrained;
        spec.optimizer.paths = self.paths();
        spec
    }

    pub fn near_optimal(&self) -> NearOptimalSpec {
        NearOptimalSpec {
            checkpoints: self.near_optimal.checkpoints,
            mollifier: self.mollifier,
            optimizer: self.optimizer(),
            probe_paths: self.near_optimal.probe_paths,
        }
    }

    /// Canonical TOML of the effective config, without the output location.
    pub fn canonical(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = None;
        let table = toml::Table::try_from(&c)?;
        Ok(toml::to_string(&table)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_parse_as_toml_or_strings() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("[0, 0.5]").as_array().map(Vec::len), Some(2));
        assert_eq!(parse_value("example1"), toml::Value::String("example1".into()));
    }

    #[test]
    fn overrides_reach_nested_sections() {
        let cfg = load(
            None,
            &[
                parse_override("optimizer.max_iterations=7").unwrap(),
                parse_override("problem.builtin=example1").unwrap(),
                parse_override("seed=3").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.max_iterations, 7);
        assert_eq!(cfg.problem.builtin.as_deref(), Some("example1"));
        assert_eq!(cfg.seed().unwrap(), 3);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = load(None, &[parse_override("optimizer.iterations=7").unwrap()]).unwrap_err();
        assert!(format!("{err:#}").contains("iterations"), "{err:#}");
    }

    #[test]
    fn malformed_files_report_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\n[problem]\nbuiltin = \n").unwrap();
        let err = format!("{:#}", load(Some(&path), &[]).unwrap_err());
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_seed_and_problem_are_errors() {
        let cfg = RunConfig::default();
        assert!(cfg.seed().is_err());
        assert!(cfg.problem().is_err());
    }

    #[test]
    fn canonical_form_ignores_the_output_directory() {
        let a = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.canonical().unwrap(), b.canonical().unwrap());
    }
}
