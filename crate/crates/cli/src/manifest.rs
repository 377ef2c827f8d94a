use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use pgdvae_core::train::write_atomic;

/// Record of one invocation, written next to its outputs.
#[derive(Serialize)]
pub struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    version: &'static str,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION"),
        })
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| {
            serde_json::to_writer_pretty(&mut *out, self)?;
            std::io::Write::write_all(out, b"\n")?;
            Ok(())
        })
        .with_context(|| format!("writing manifest {}", path.display()))
    }

    /// Writes `<output>.manifest.json`.
    pub fn write_beside(&self, output: &Path) -> Result<()> {
        let mut name = output.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        self.write_to(&output.with_file_name(name))
    }
}
