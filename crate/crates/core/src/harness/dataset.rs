//! Line-delimited logged-data files.
//!
//! ```text
//! # reinrec-dataset v1 env=3f2a9c0d1e4b5a67 seed=42 behavior=zipf(1.5)
//! trajectory_id,step,action,reward,behavior_prob
//! 0,0,3,0,0.0734
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the batch bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grad::{LoggedEvent, Trajectory, TrajectoryBatch};

pub const DATASET_MAGIC: &str = "reinrec-dataset";
pub const DATASET_VERSION: u32 = 1;
const COLUMNS: [&str; 5] = ["trajectory_id", "step", "action", "reward", "behavior_prob"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub env_fingerprint: String,
    pub seed: u64,
    pub behavior: String,
}

impl DatasetHeader {
    fn to_line(&self) -> String {
        format!(
            "# {DATASET_MAGIC} v{DATASET_VERSION} env={} seed={} behavior={}",
            self.env_fingerprint, self.seed, self.behavior
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Data(format!("bad dataset header ({why}): {line}"));
        let rest = line
            .strip_prefix("# ")
            .and_then(|l| l.strip_prefix(DATASET_MAGIC))
            .ok_or_else(|| bad("missing magic"))?;
        let mut parts = rest.trim_start().splitn(4, ' ');
        let version = parts.next().ok_or_else(|| bad("missing version"))?;
        if version != format!("v{DATASET_VERSION}") {
            return Err(bad("unsupported version"));
        }
        let mut field = |key: &str| -> Result<String> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|p| p.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(key))
        };
        let env_fingerprint = field("env")?;
        let seed = field("seed")?.parse().map_err(|_| bad("seed"))?;
        let behavior = field("behavior")?;
        Ok(DatasetHeader {
            env_fingerprint,
            seed,
            behavior,
        })
    }
}

#[derive(Deserialize)]
struct Row {
    trajectory_id: u64,
    step: usize,
    action: usize,
    reward: f64,
    behavior_prob: f64,
}

pub fn dataset_to_string(header: &DatasetHeader, batch: &TrajectoryBatch) -> String {
    let mut out = String::with_capacity(32 * batch.num_events() + 128);
    out.push_str(&header.to_line());
    out.push('\n');
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for traj in &batch.trajectories {
        for e in &traj.events {
            writeln!(
                out,
                "{},{},{},{},{}",
                traj.id, e.step, e.action, e.reward, e.behavior_prob
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, batch: &TrajectoryBatch) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, dataset_to_string(header, batch))?;
    Ok(())
}

pub fn parse_dataset(text: &str) -> Result<(DatasetHeader, TrajectoryBatch)> {
    let first = text.lines().next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
    let header = DatasetHeader::parse(first)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if columns != COLUMNS {
        return Err(Error::Data(format!(
            "expected columns {}, found {}",
            COLUMNS.join(","),
            columns.join(",")
        )));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row?;
        let event = LoggedEvent {
            step: row.step,
            action: row.action,
            reward: row.reward,
            behavior_prob: row.behavior_prob,
        };
        match trajectories.last_mut() {
            Some(t) if t.id == row.trajectory_id => {
                if row.step != t.events.len() {
                    return Err(Error::Data(format!(
                        "record {}: trajectory {} step {} out of order",
                        line + 1,
                        row.trajectory_id,
                        row.step
                    )));
                }
                t.events.push(event);
            }
            _ => {
                if trajectories.iter().any(|t| t.id == row.trajectory_id) {
                    return Err(Error::Data(format!(
                        "record {}: trajectory {} is not contiguous",
                        line + 1,
                        row.trajectory_id
                    )));
                }
                if row.step != 0 {
                    return Err(Error::Data(format!(
                        "record {}: trajectory {} starts at step {}",
                        line + 1,
                        row.trajectory_id,
                        row.step
                    )));
                }
                trajectories.push(Trajectory {
                    id: row.trajectory_id,
                    events: vec![event],
                });
            }
        }
    }
    if trajectories.is_empty() {
        return Err(Error::Data("dataset has no records".into()));
    }
    let batch = TrajectoryBatch::new(trajectories, header.behavior.clone());
    Ok((header, batch))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, TrajectoryBatch)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text)
}
