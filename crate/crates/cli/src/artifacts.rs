//! Run directories and artifact files with their provenance header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flate2::write::GzEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};
use smp_core::problem::TimeGrid;

/// Provenance shared by every artifact of one run.
#[derive(Debug, Clone)]
pub struct Header {
    pub subcommand: String,
    pub problem: String,
    pub seed: u64,
    pub grid: TimeGrid,
    pub paths: String,
    pub config_hash: String,
}

impl Header {
    /// `#`-prefixed lines: tool version, subcommand, problem, seed, grid,
    /// paths and config hash. No timestamp, so reruns are byte-identical.
    pub fn render(&self) -> String {
        format!(
            "# smp {}\n# subcommand: {}\n# problem: {}\n# seed: {}\n# grid: horizon={} steps={} checkpoints={:?}\n# paths: {}\n# config-sha256: {}\n",
            env!("CARGO_PKG_VERSION"),
            self.subcommand,
            self.problem,
            self.seed,
            self.grid.horizon(),
            self.grid.steps(),
            self.grid.checkpoint_times(),
            self.paths,
            self.config_hash
        )
    }
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// `<root>/<subcommand>-<first 16 hex digits of the config hash>`.
pub fn run_dir(root: &Path, subcommand: &str, config_hash: &str) -> PathBuf {
    root.join(format!("{subcommand}-{}", &config_hash[..16]))
}

/// One file of a run: a body with the header prepended on write.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub body: Vec<u8>,
    pub gzip: bool,
}

impl Artifact {
    pub fn new(name: &str, body: Vec<u8>) -> Self {
        Artifact {
            name: name.to_string(),
            body,
            gzip: false,
        }
    }

    /// Builds the body with a writer callback.
    pub fn written(name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<Self> {
        let mut body = Vec::new();
        f(&mut body).with_context(|| format!("cannot render {name}"))?;
        Ok(Artifact::new(name, body))
    }

    pub fn gzipped(mut self, gzip: bool) -> Self {
        self.gzip = gzip;
        self
    }

    pub fn file_name(&self) -> String {
        if self.gzip {
            format!("{}.gz", self.name)
        } else {
            self.name.clone()
        }
    }
}

/// Writes every artifact into `dir` (created if needed).
pub fn write_all(dir: &Path, header: &Header, artifacts: &[Artifact]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let head = header.render();
    for a in artifacts {
        let path = dir.join(a.file_name());
        let file = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut out: Box<dyn Write> = if a.gzip {
            Box::new(GzEncoder::new(file, Compression::default()))
        } else {
            Box::new(std::io::BufWriter::new(file))
        };
        out.write_all(head.as_bytes())?;
        out.write_all(&a.body)?;
        out.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn header_lines_are_comments() {
        let h = Header {
            subcommand: "simulate".into(),
            problem: "example1".into(),
            seed: 7,
            grid: TimeGrid::new(1.0, 4, &[0.5, 1.0]).unwrap(),
            paths: "10".into(),
            config_hash: "ab".repeat(32),
        };
        let text = h.render();
        assert!(text.lines().all(|l| l.starts_with("# ")));
        assert!(text.contains("seed: 7") && text.contains("steps=4") && text.contains("paths: 10"));
    }
}
