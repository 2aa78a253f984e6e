//! `smp`: simulate, verify and optimize controlled SDEs from a TOML run
//! config.
//!
//! Exit status: 0 on success or a passed verification, 1 on a failed
//! verification, 2 on input errors.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::artifacts::{run_dir, sha256_hex, write_all, Header};
use crate::commands::{parse_levels, Command, Run};

#[derive(Parser)]
#[command(name = "smp", version, about = "Stochastic maximum principle toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate the state under a candidate control and dump paths.
    Simulate(Flags),
    /// Solve the adjoint equation along a candidate and dump it.
    Adjoint(Flags),
    /// Check the first-order (necessary) condition at a candidate.
    VerifyMp(Flags),
    /// Run the sampled sufficiency check at a candidate.
    VerifySufficient(Flags),
    /// Minimize the cost over open-loop controls.
    Optimize(Flags),
    /// Solve the expectation-constrained problem with Ekeland stages.
    Constrained(Flags),
    /// Measure the mollification error of the terminal cost across ε.
    MollifyScan(Flags),
    /// Discretize, mollify and optimize a path-dependent cost.
    NearOptimal(Flags),
    /// Exhaustive search over level sequences on the binomial tree.
    Oracle(Flags),
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in problem (example1, example2_transformed, linear_terminal, lq_smooth).
    #[arg(long)]
    builtin: Option<String>,
    /// Candidate control: analytic, reference, zero, midpoint, oracle, constant:a,b or file:PATH.
    #[arg(long)]
    candidate: Option<String>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Seed of every random draw (mandatory here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Re-grid the problem to this many steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated scalar control levels for the oracle (and the
    /// optimizer's v-grid).
    #[arg(long)]
    ugrid: Option<String>,
    /// Use the exact binomial tree instead of sampled paths.
    #[arg(long)]
    tree: bool,
    /// Mollifier width.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Root of the run directories (default `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `optimizer.max_iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Flags {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>> {
        let mut o: Vec<(String, toml::Value)> = Vec::new();
        let mut put = |k: &str, v: toml::Value| o.push((k.to_string(), v));
        if let Some(b) = &self.builtin {
            put("problem.builtin", b.clone().into());
        }
        if let Some(c) = &self.candidate {
            put("candidate", c.clone().into());
        }
        if let Some(p) = self.paths {
            put("paths", int(p as u64)?);
        }
        if let Some(s) = self.seed {
            put("seed", int(s)?);
        }
        if let Some(s) = self.steps {
            put("steps", int(s as u64)?);
        }
        if let Some(g) = &self.ugrid {
            let levels = parse_levels(g)?;
            put("oracle.levels", toml::Value::Array(levels.into_iter().map(toml::Value::Float).collect()));
        }
        if self.tree {
            put("tree", true.into());
        }
        if let Some(e) = self.epsilon {
            put("mollifier.epsilon", e.into());
        }
        if let Some(out) = &self.out {
            put("output", out.display().to_string().into());
        }
        for s in &self.sets {
            o.push(config::parse_override(s)?);
        }
        Ok(o)
    }
}

fn int(v: u64) -> Result<toml::Value> {
    Ok(toml::Value::Integer(i64::try_from(v).context("value too large")?))
}

fn split(sub: Sub) -> (Command, Flags) {
    match sub {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Adjoint(f) => (Command::Adjoint, f),
        Sub::VerifyMp(f) => (Command::VerifyMp, f),
        Sub::VerifySufficient(f) => (Command::VerifySufficient, f),
        Sub::Optimize(f) => (Command::Optimize, f),
        Sub::Constrained(f) => (Command::Constrained, f),
        Sub::MollifyScan(f) => (Command::MollifyScan, f),
        Sub::NearOptimal(f) => (Command::NearOptimal, f),
        Sub::Oracle(f) => (Command::Oracle, f),
    }
}

fn run(command: Command, flags: &Flags) -> Result<bool> {
    if let Some(n) = flags.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let cfg = config::load(flags.config.as_deref(), &flags.overrides()?)?;
    let root = cfg.output_dir();
    let hash = sha256_hex(&format!("{}\n{}", command.name(), cfg.canonical()?));
    let run = Run::new(cfg)?;
    let outcome = run.execute(command)?;
    let header = Header {
        subcommand: command.name().to_string(),
        problem: run.resolved.spec.name.clone(),
        seed: run.seed,
        grid: run.problem.grid().clone(),
        paths: run.paths_label(command),
        config_hash: hash.clone(),
    };
    let dir = run_dir(&root, command.name(), &hash);
    let mut artifacts = outcome.artifacts;
    artifacts.push(artifacts::Artifact::new("config.toml", run.cfg.canonical()?.into_bytes()));
    write_all(&dir, &header, &artifacts)?;
    print!("{}", outcome.report);
    println!("artifacts: {}", dir.display());
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = split(cli.command);
    match run(command, &flags) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
