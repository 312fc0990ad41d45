//! JSON run reports. Field order is the struct declaration order, so reports
//! diff cleanly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Envelope shared by every command's report.
#[derive(Debug, Serialize)]
pub struct RunReport<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub inputs: Vec<InputDigest>,
    pub wall_time_s: f64,
    pub result: T,
}

pub struct Run {
    started: Instant,
    command: Vec<String>,
    inputs: Vec<InputDigest>,
}

impl Run {
    pub fn start() -> Self {
        Run {
            started: Instant::now(),
            command: std::env::args().collect(),
            inputs: Vec::new(),
        }
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> std::io::Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        self.inputs.push(InputDigest::of(path, &bytes));
        Ok(bytes)
    }

    pub fn finish<T: Serialize>(self, result: T) -> RunReport<T> {
        RunReport {
            tool: "sconv",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            inputs: self.inputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            result,
        }
    }
}

/// Writes the report to `path`, or pretty-prints it to stdout.
pub fn emit<T: Serialize>(report: &RunReport<T>, path: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing report {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
