use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use wm_core::CoreError;

/// Environment variable that relocates relative output paths.
pub const OUT_DIR_ENV: &str = "WM3_OUT_DIR";

/// Resolves an output path against `WM3_OUT_DIR` when it is relative.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub wm3: &'static str,
    pub dataset_format: String,
}

/// Record of one artifact-producing run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            versions: Versions {
                wm3: env!("CARGO_PKG_VERSION"),
                dataset_format: format!(
                    "{} v{}",
                    String::from_utf8_lossy(wm_core::data::MAGIC),
                    wm_core::data::VERSION
                ),
            },
            outputs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    /// Writes `<file>.manifest.json`, or `manifest.json` inside a directory.
    pub fn write_for(mut self, primary: &Path, took: Duration) -> Result<PathBuf, CoreError> {
        self.wall_time_s = took.as_secs_f64();
        let path = if primary.is_dir() {
            primary.join("manifest.json")
        } else {
            let mut name = primary.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        };
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
