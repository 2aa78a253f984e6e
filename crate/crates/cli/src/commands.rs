//! The subcommands: each turns a resolved run into a report, its artifacts
//! and a verdict.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use smp_core::adjoint::{duality_residual, solve_adjoint, write_adjoint_csv, AdjointBatch};
use smp_core::constrained::{solve_constrained_with, write_stage_csv};
use smp_core::forward::{
    estimate_cost, simulate_state, simulate_variational, write_paths_csv, BrownianBatch, ControlProcess, StateBatch,
};
use smp_core::mollify::{mollify_error_scan, near_optimal_pipeline, probe_lattice};
use smp_core::mp::{brute_force_oracle, check_necessary, check_sufficient, optimize_control_with, tree_cost, TraceEntry};
use smp_core::problem::{lq_smooth_reference, ValidatedProblem};

use crate::artifacts::Artifact;
use crate::config::{ResolvedProblem, RunConfig};

/// Largest probe lattice a scan will evaluate.
const MAX_PROBES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Adjoint,
    VerifyMp,
    VerifySufficient,
    Optimize,
    Constrained,
    MollifyScan,
    NearOptimal,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Adjoint => "adjoint",
            Command::VerifyMp => "verify-mp",
            Command::VerifySufficient => "verify-sufficient",
            Command::Optimize => "optimize",
            Command::Constrained => "constrained",
            Command::MollifyScan => "mollify-scan",
            Command::NearOptimal => "near-optimal",
            Command::Oracle => "oracle",
        }
    }
}

/// What a subcommand produced.
#[derive(Debug)]
pub struct Outcome {
    pub report: String,
    pub artifacts: Vec<Artifact>,
    /// False on a verification failure (exit status 1).
    pub passed: bool,
}

/// A config with its problem validated.
pub struct Run {
    pub cfg: RunConfig,
    pub resolved: ResolvedProblem,
    pub problem: ValidatedProblem,
    pub seed: u64,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Run> {
        let seed = cfg.seed()?;
        let resolved = cfg.problem()?;
        let problem = resolved.spec.validate().context("invalid problem")?;
        Ok(Run {
            cfg,
            resolved,
            problem,
            seed,
        })
    }

    /// Path count as recorded in artifact headers.
    pub fn paths_label(&self, command: Command) -> String {
        let tree = || {
            let n = self.problem.grid().steps() * self.problem.brownian_dim();
            format!("binomial tree (2^{n})")
        };
        match command {
            Command::Oracle => tree(),
            Command::MollifyScan => "0 (deterministic scan)".into(),
            _ if self.cfg.tree => tree(),
            _ => self.cfg.paths().to_string(),
        }
    }

    fn batch(&self) -> BrownianBatch {
        let grid = self.problem.grid();
        let d = self.problem.brownian_dim();
        if self.cfg.tree {
            BrownianBatch::binomial_tree(grid, d)
        } else {
            BrownianBatch::sample(grid, d, self.cfg.paths(), self.seed)
        }
    }

    fn midpoint(&self) -> ControlProcess {
        let ubox = self.problem.control_box();
        let mid: Vec<f64> = ubox.lower().iter().zip(ubox.upper()).map(|(l, u)| 0.5 * (l + u)).collect();
        ControlProcess::constant(self.problem.grid(), ubox, &mid)
    }

    fn oracle_levels(&self) -> Result<Vec<Vec<f64>>> {
        let ubox = self.problem.control_box();
        match &self.cfg.oracle.levels {
            Some(levels) => {
                if ubox.dim() != 1 {
                    bail!("oracle.levels lists scalar levels, but the control has {} components", ubox.dim());
                }
                Ok(levels.iter().map(|&v| vec![v]).collect())
            }
            None => Ok(ubox.grid(self.cfg.oracle.resolution)),
        }
    }

    /// The candidate named by `candidate`, or `default` when unset.
    pub fn candidate(&self, default: &str) -> Result<(String, ControlProcess)> {
        let name = self.cfg.candidate.clone().unwrap_or_else(|| default.to_string());
        let grid = self.problem.grid();
        let ubox = self.problem.control_box();
        let u = match name.as_str() {
            "analytic" => {
                let sol = self
                    .resolved
                    .analytic
                    .as_ref()
                    .ok_or_else(|| anyhow!("the problem has no closed-form candidate"))?;
                ControlProcess::from_fn(grid, ubox, |t| vec![sol.control(grid, t)])
            }
            "reference" => {
                if self.resolved.spec.name != "lq_smooth" {
                    bail!("the `reference` candidate exists only for lq_smooth");
                }
                ControlProcess::clamped(grid, ubox, lq_smooth_reference(grid).control)?
            }
            "zero" => ControlProcess::clamped(grid, ubox, vec![0.0; grid.steps() * ubox.dim()])?,
            "midpoint" => self.midpoint(),
            "oracle" => brute_force_oracle(&self.problem, &self.oracle_levels()?)?.control,
            other => {
                if let Some(list) = other.strip_prefix("constant:") {
                    let value = parse_list(list)?;
                    if value.len() != ubox.dim() {
                        bail!("constant candidate has {} components, expected {}", value.len(), ubox.dim());
                    }
                    ControlProcess::constant(grid, ubox, &value)
                } else if let Some(path) = other.strip_prefix("file:") {
                    read_control_csv(Path::new(path), grid.steps(), ubox.dim())?
                } else {
                    bail!(
                        "unknown candidate `{other}` (expected analytic, reference, zero, midpoint, oracle, constant:a,b or file:PATH)"
                    );
                }
            }
        };
        Ok((name, u))
    }

    pub fn execute(&self, command: Command) -> Result<Outcome> {
        let mut outcome = match command {
            Command::Simulate => self.simulate(),
            Command::Adjoint => self.adjoint(),
            Command::VerifyMp => self.verify_mp(),
            Command::VerifySufficient => self.verify_sufficient(),
            Command::Optimize => self.optimize(),
            Command::Constrained => self.constrained(),
            Command::MollifyScan => self.mollify_scan(),
            Command::NearOptimal => self.near_optimal(),
            Command::Oracle => self.oracle(),
        }?;
        let mut head = format!(
            "[run]\nsubcommand: {}\nproblem: {}\nseed: {}\npaths: {}\n",
            command.name(),
            self.resolved.spec.name,
            self.seed,
            self.paths_label(command)
        );
        for a in self.problem.advisories() {
            let _ = writeln!(head, "advisory: {a}");
        }
        let _ = writeln!(head, "verdict: {}", if outcome.passed { "pass" } else { "fail" });
        outcome.report = head + &outcome.report;
        outcome.artifacts.push(Artifact::new("report.txt", outcome.report.clone().into_bytes()));
        Ok(outcome)
    }

    fn state_and_adjoint(&self, u: &ControlProcess) -> Result<(BrownianBatch, StateBatch, AdjointBatch)> {
        let wb = self.batch();
        let sb = simulate_state(&self.problem, u, &wb)?;
        let ab = solve_adjoint(&self.problem, &sb, &wb, &self.cfg.regression, None)?;
        Ok((wb, sb, ab))
    }

    fn simulate(&self) -> Result<Outcome> {
        let (name, u) = self.candidate("midpoint")?;
        let wb = self.batch();
        let sb = simulate_state(&self.problem, &u, &wb)?;
        let cost = estimate_cost(&self.problem, &sb);
        let report = format!(
            "[simulate]\ncandidate: {name}\ncost: {} (stderr {:e})\ndumped paths: {}\n",
            cost.mean,
            cost.stderr,
            sb.paths().min(self.cfg.dump.max_paths)
        );
        let paths = Artifact::written("paths.csv", |out| {
            write_paths_csv(out, &self.problem, &sb, self.cfg.dump.max_paths)
        })?
        .gzipped(self.cfg.dump.gzip);
        Ok(Outcome {
            report,
            artifacts: vec![paths, control_artifact(&self.problem, &u)?],
            passed: true,
        })
    }

    fn adjoint(&self) -> Result<Outcome> {
        let (name, u) = self.candidate("midpoint")?;
        let (wb, sb, ab) = self.state_and_adjoint(&u)?;
        let mut report = format!(
            "[adjoint]\ncandidate: {name}\nregression degree: {}\nridge: {:e}\n",
            self.cfg.regression.degree, self.cfg.regression.ridge
        );
        if let (Some(sol), "analytic") = (&self.resolved.analytic, name.as_str()) {
            let grid = self.problem.grid();
            let first = grid.checkpoints()[0];
            let (mut dp, mut np, mut dq, mut nq) = (0.0, 0.0, 0.0, 0.0);
            for path in 0..ab.paths() {
                let w = wb.cumulative(path);
                for k in 0..first {
                    let p = sol.adjoint_p(grid, k, &w, None).0;
                    let q = sol.adjoint_q(grid, k);
                    dp += (ab.p(path, k)[0] - p).powi(2);
                    np += p * p;
                    dq += (ab.q(path, k)[0] - q).powi(2);
                    nq += q * q;
                }
            }
            let rel = |d: f64, n: f64| if n > 0.0 { (d / n).sqrt() } else { d.sqrt() };
            let _ = write!(
                report,
                "[closed form]\nrelative rmse p before the first checkpoint: {:.6}\nrelative rmse q before the first checkpoint: {:.6}\n",
                rel(dp, np),
                rel(dq, nq)
            );
        }
        let direction = self.midpoint().minus(&u);
        let _ = writeln!(report, "[duality]");
        let vb = simulate_variational(&self.problem, &sb, &direction, &wb)?;
        match duality_residual(&self.problem, &ab, &sb, &direction, &vb, None) {
            Ok(d) => {
                let _ = write!(
                    report,
                    "direction: midpoint - candidate\nresidual: {:e}\ncombined stderr: {:e}\n",
                    d.residual(),
                    d.combined_stderr()
                );
            }
            Err(e) => {
                let _ = writeln!(report, "n/a: {e}");
            }
        }
        let csv = Artifact::written("adjoint.csv", |out| {
            write_adjoint_csv(out, &self.problem, &ab, self.cfg.dump.max_paths)
        })?
        .gzipped(self.cfg.dump.gzip);
        Ok(Outcome {
            report,
            artifacts: vec![csv],
            passed: true,
        })
    }

    fn verify_mp(&self) -> Result<Outcome> {
        let default = if self.resolved.analytic.is_some() { "analytic" } else { "midpoint" };
        let (name, u) = self.candidate(default)?;
        let (_, sb, ab) = self.state_and_adjoint(&u)?;
        let report = check_necessary(&self.problem, &u, &ab, &sb, &self.cfg.check)?;
        Ok(Outcome {
            report: format!("candidate: {name}\n{}", report.summary()),
            artifacts: vec![Artifact::written("mp.csv", |out| report.write_csv(out))?],
            passed: report.pass,
        })
    }

    fn verify_sufficient(&self) -> Result<Outcome> {
        let default = if self.resolved.analytic.is_some() { "analytic" } else { "midpoint" };
        let (name, u) = self.candidate(default)?;
        let (_, sb, ab) = self.state_and_adjoint(&u)?;
        let spec = smp_core::mp::SufficiencySpec {
            seed: self.seed,
            ..self.cfg.sufficiency
        };
        let r = check_sufficient(&self.problem, &u, &ab, &sb, &spec)?;
        let csv = Artifact::written("sufficiency.csv", |out| {
            writeln!(out, "test,pass,samples,worst_violation")?;
            for (test, v) in [
                ("terminal_convexity", &r.terminal_convexity),
                ("hamiltonian_concavity", &r.hamiltonian_concavity),
                ("hamiltonian_maximum", &r.hamiltonian_maximum),
            ] {
                writeln!(out, "{test},{},{},{}", u8::from(v.pass), v.samples, v.worst_violation)?;
            }
            Ok(())
        })?;
        Ok(Outcome {
            report: format!("candidate: {name}\n{}", r.summary()),
            artifacts: vec![csv],
            passed: r.certified,
        })
    }

    fn optimize(&self) -> Result<Outcome> {
        let (name, init) = self.candidate("midpoint")?;
        let mut spec = self.cfg.optimizer();
        if let Some(levels) = &self.cfg.oracle.levels {
            // A level list restricts the v-grid; it must be the uniform grid
            // of the box so the optimizer and the oracle search the same set.
            let axis = self.problem.control_box().axis(0, levels.len().max(2));
            if self.problem.control_dim() != 1
                || levels.len() != axis.len()
                || levels.iter().zip(&axis).any(|(a, b)| (a - b).abs() > 1e-12)
            {
                bail!("optimize accepts only the uniform grid of the control box as levels, e.g. {axis:?}");
            }
            spec.resolution = levels.len();
            spec.polish = true;
        }
        let wb = self.batch();
        let res = optimize_control_with(&self.problem, &init, &spec, &wb)?;
        let mut report = format!(
            "[optimize]\ninitial control: {name}\nmethod: {:?}\nvalue: {}\ngap: {:e}\niterations: {}\nconverged: {}\nstalled: {}\npolished: {}\nflat steps: {}\n",
            spec.method,
            res.value,
            res.gap,
            res.iterations,
            res.converged,
            res.stalled,
            res.polished,
            res.flat_steps.len()
        );
        if self.cfg.tree {
            let _ = writeln!(report, "exact tree cost: {}", tree_cost(&self.problem, &res.control)?);
        }
        let trace = Artifact::written("trace.csv", |out| write_trace_csv(out, &res.trace))?;
        Ok(Outcome {
            report,
            artifacts: vec![control_artifact(&self.problem, &res.control)?, trace],
            passed: true,
        })
    }

    fn constrained(&self) -> Result<Outcome> {
        let constraints = self
            .resolved
            .constraints
            .as_ref()
            .ok_or_else(|| anyhow!("constrained needs [[constraints]] or a built-in with constraints"))?
            .validate(&self.problem)?;
        let (name, init) = self.candidate("midpoint")?;
        let spec = self.cfg.constrained();
        let wb = if self.cfg.tree {
            self.batch()
        } else {
            BrownianBatch::sample(self.problem.grid(), self.problem.brownian_dim(), spec.optimizer.paths, self.seed)
        };
        let sol = solve_constrained_with(&self.problem, &constraints, &init, &spec, &wb)?;
        let mut report = format!("initial control: {name}\n{}", sol.summary());
        if let Some(r) = &sol.report {
            report.push_str(&r.summary());
        }
        let stages = Artifact::written("stages.csv", |out| write_stage_csv(out, &sol))?;
        Ok(Outcome {
            report,
            artifacts: vec![control_artifact(&self.problem, &sol.control)?, stages],
            passed: sol.report.as_ref().is_none_or(|r| r.pass),
        })
    }

    fn mollify_scan(&self) -> Result<Outcome> {
        let scan = &self.cfg.scan;
        let lipschitz = scan
            .lipschitz
            .ok_or_else(|| anyhow!("mollify-scan needs scan.lipschitz, the Lipschitz constant of the terminal cost"))?;
        let arity = self.problem.terminal_vars().len();
        let count = scan.probe_points.checked_pow(arity as u32).filter(|&c| c <= MAX_PROBES);
        if count.is_none() {
            bail!("a lattice of {}^{arity} probes exceeds {MAX_PROBES}; lower scan.probe_points", scan.probe_points);
        }
        let probes = probe_lattice(arity, scan.probe_points, scan.probe_min, scan.probe_max);
        let result = mollify_error_scan(
            self.problem.terminal_expr(),
            self.problem.terminal_vars(),
            self.problem.state_dim(),
            lipschitz,
            &scan.epsilons,
            &probes,
            &self.cfg.mollifier,
        )?;
        Ok(Outcome {
            report: format!(
                "[mollifier scan]\nprobes: {} on [{}, {}]^{arity}\n{}",
                probes.len(),
                scan.probe_min,
                scan.probe_max,
                result.summary()
            ),
            artifacts: vec![Artifact::written("scan.csv", |out| result.write_csv(out))?],
            passed: result.pass,
        })
    }

    fn near_optimal(&self) -> Result<Outcome> {
        let pf = self
            .cfg
            .path_functional
            .as_ref()
            .ok_or_else(|| anyhow!("near-optimal needs a [path_functional] section"))?;
        let init = match &self.cfg.candidate {
            Some(_) => Some(self.candidate("midpoint")?.1),
            None => None,
        };
        let r = near_optimal_pipeline(&self.resolved.spec, pf, &self.cfg.near_optimal(), init.as_ref(), self.seed)?;
        let rows = Artifact::written("certificate.csv", |out| r.certificate.write_csv(out))?;
        let control = Artifact::written("control.csv", |out| {
            write_control_csv(out, self.problem.grid().dt(), &r.control)
        })?;
        Ok(Outcome {
            report: r.summary(),
            artifacts: vec![control, rows],
            passed: r.certificate.pass,
        })
    }

    fn oracle(&self) -> Result<Outcome> {
        let levels = self.oracle_levels()?;
        let r = brute_force_oracle(&self.problem, &levels)?;
        let report = format!(
            "[oracle]\nlevels: {:?}\nvalue: {}\nsequences evaluated: {}\nnear ties: {}\ncontrol: {:?}\n",
            levels,
            r.value,
            r.evaluated,
            r.near_ties,
            r.control.values()
        );
        Ok(Outcome {
            report,
            artifacts: vec![control_artifact(&self.problem, &r.control)?],
            passed: true,
        })
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("`{v}` is not a number")))
        .collect()
}

/// Parses a comma-separated list of levels (the `--ugrid` flag).
pub fn parse_levels(s: &str) -> Result<Vec<f64>> {
    parse_list(s)
}

fn control_artifact(problem: &ValidatedProblem, u: &ControlProcess) -> Result<Artifact> {
    Artifact::written("control.csv", |out| write_control_csv(out, problem.grid().dt(), u))
}

/// Columns `step, time, u1..`.
pub fn write_control_csv(out: &mut dyn Write, dt: f64, u: &ControlProcess) -> std::io::Result<()> {
    let cols: Vec<String> = (1..=u.dim()).map(|j| format!("u{j}")).collect();
    writeln!(out, "step,time,{}", cols.join(","))?;
    for k in 0..u.steps() {
        write!(out, "{k},{}", k as f64 * dt)?;
        for v in u.value(k) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn write_trace_csv(out: &mut dyn Write, trace: &[TraceEntry]) -> std::io::Result<()> {
    writeln!(out, "iteration,cost,gap,step")?;
    for t in trace {
        writeln!(out, "{},{},{},{}", t.iteration, t.cost, t.gap, t.step)?;
    }
    Ok(())
}

/// Reads a control written by [`write_control_csv`]; `#` lines are skipped.
pub fn read_control_csv(path: &Path, steps: usize, dim: usize) -> Result<ControlProcess> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read control {}", path.display()))?;
    let mut values = Vec::with_capacity(steps * dim);
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            bail!("{}:{}: expected {} columns, found {}", path.display(), i + 1, dim + 2, fields.len());
        }
        for f in &fields[2..] {
            values.push(f.trim().parse::<f64>().with_context(|| format!("{}:{}: bad value `{f}`", path.display(), i + 1))?);
        }
        rows += 1;
    }
    if rows != steps {
        bail!("{} has {rows} control rows, the grid has {steps} steps", path.display());
    }
    Ok(ControlProcess::from_values(steps, dim, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_csv_round_trips() {
        let u = ControlProcess::from_values(3, 2, vec![0.0, 1.0, 0.5, -0.25, 2.0, 1e-17]).unwrap();
        let mut body = b"# header\n".to_vec();
        write_control_csv(&mut body, 0.1, &u).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, &body).unwrap();
        assert_eq!(read_control_csv(&path, 3, 2).unwrap(), u);
        assert!(read_control_csv(&path, 4, 2).is_err());
        assert!(read_control_csv(&path, 3, 1).is_err());
    }

    #[test]
    fn level_lists_parse() {
        assert_eq!(parse_levels("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_levels("0,a").is_err());
    }
}
