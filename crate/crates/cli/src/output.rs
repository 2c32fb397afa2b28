//! Run directories: every invocation writes into its own directory with a
//! copy of the resolved config and a manifest.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::ExperimentConfig;

pub const OUT_ENV: &str = "SPECDIFF_OUT";
const DEFAULT_ROOT: &str = "runs";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    version: &'a str,
    created_unix: u64,
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Uses `explicit` when given, otherwise `$SPECDIFF_OUT/<command>-<millis>`.
    pub fn create(explicit: Option<&Path>, command: &str, config: &ExperimentConfig) -> Result<Self> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_ROOT.into());
                root.join(format!("{command}-{}", now.as_millis()))
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let dir = Self { path };
        dir.write_json("config.json", config)?;
        dir.write_json(
            "manifest.json",
            &Manifest {
                command,
                args: std::env::args().collect(),
                seed: config.seed,
                version: env!("CARGO_PKG_VERSION"),
                created_unix: now.as_secs(),
            },
        )?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.file(name), text + "\n").with_context(|| format!("writing {name}"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.file(name), text).with_context(|| format!("writing {name}"))
    }

    /// One CSV with a header row taken from the record's field names.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.file(name)).with_context(|| format!("creating {name}"))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Samples as `x0,x1,...` columns.
    pub fn write_samples(&self, name: &str, samples: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.file(name)).with_context(|| format!("creating {name}"))?;
        let d = samples.first().map_or(0, Vec::len);
        w.write_record((0..d).map(|i| format!("x{i}")))?;
        for s in samples {
            w.write_record(s.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
