//! Run directories and self-describing CSV tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// `reinrec <version> (<git describe>)` of the producing build.
pub fn version_string() -> String {
    format!(
        "reinrec {} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("REINREC_GIT_DESCRIBE").unwrap_or("unknown")
    )
}

/// Refuses to reuse a non-empty directory unless `force` is set, then
/// creates it.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied {
            return Err(Error::Config(format!(
                "output {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Refuses to replace an existing file unless `force` is set.
pub fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Config(format!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// A CSV table preceded by a comment line naming the producing version,
/// the config hash and what the table holds.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub description: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(description: impl Into<String>, columns: &[&str]) -> Self {
        CsvTable {
            description: description.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_string(&self, config_hash: &str) -> Result<String> {
        let mut out = format!(
            "# {} | config_hash={config_hash} | {}\n",
            version_string(),
            self.description
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        out.push_str(std::str::from_utf8(&bytes).expect("csv output is UTF-8"));
        Ok(out)
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_string(config_hash)?)?;
        Ok(())
    }
}

/// Formats an optional float, leaving the cell empty for `None`.
pub fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Layout of a run directory. The config snapshot is always written first.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl RunArtifact {
    pub const CONFIG: &'static str = "config.toml";
    pub const DIAGNOSTICS: &'static str = "diagnostics.jsonl";
    pub const CHECKPOINT: &'static str = "checkpoint.bin";
    pub const METRICS: &'static str = "metrics.csv";
    pub const RANK_CDF: &'static str = "rank_cdf.csv";
    pub const DATA: &'static str = "data.csv";

    pub fn create(dir: &Path, cfg: &ExperimentConfig, force: bool) -> Result<Self> {
        prepare_output_dir(dir, force)?;
        std::fs::write(dir.join(Self::CONFIG), cfg.to_toml())?;
        Ok(RunArtifact {
            dir: dir.to_path_buf(),
            config_hash: cfg.hash(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_table(&self, name: &str, table: &CsvTable) -> Result<()> {
        table.write(&self.path(name), &self.config_hash)
    }
}

/// Streams one JSON object per line.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::Data(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
