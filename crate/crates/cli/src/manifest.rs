use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Run-level facts that vary between identical invocations.
#[derive(Serialize)]
struct RunInfo {
    started_unix_secs: u64,
    duration_secs: f64,
    jobs: Option<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: String,
    command: &'a str,
    version: &'static str,
    seed: Option<u64>,
    config: &'a Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    run: RunInfo,
}

pub struct Recorder {
    command: String,
    seed: Option<u64>,
    jobs: Option<usize>,
    started: SystemTime,
    clock: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn display(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

impl Recorder {
    pub fn start(command: &str, seed: Option<u64>, jobs: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            seed,
            jobs,
            started: SystemTime::now(),
            clock: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<artifact>.manifest.json` next to every recorded output.
    pub fn finish(self, config: &impl Serialize) -> anyhow::Result<()> {
        let config = serde_json::to_value(config)?;
        let duration_secs = self.clock.elapsed().as_secs_f64();
        let started_unix_secs = self
            .started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        for artifact in &self.outputs {
            let m = Manifest {
                artifact: artifact.display().to_string(),
                command: &self.command,
                version: env!("CARGO_PKG_VERSION"),
                seed: self.seed,
                config: &config,
                inputs: display(&self.inputs),
                outputs: display(&self.outputs),
                run: RunInfo {
                    started_unix_secs,
                    duration_secs,
                    jobs: self.jobs,
                },
            };
            let path = manifest_path(artifact);
            let mut text = serde_json::to_string_pretty(&m)?;
            text.push('\n');
            std::fs::write(&path, text).with_context(|| format!("{}", path.display()))?;
        }
        Ok(())
    }
}
