//! Report envelopes, long-format CSV and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const REPORT_FORMAT: &str = "contrastlab-report/1";
pub const MANIFEST_FORMAT: &str = "contrastlab-manifest/1";

/// JSON Schema every report file validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/report.schema.json");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Identity stamped on every output file.
#[derive(Clone, Debug)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

pub fn report_json(
    stamp: &Stamp,
    command: &str,
    report: &impl Serialize,
) -> Result<String, CliError> {
    let value = json!({
        "format": REPORT_FORMAT,
        "command": command,
        "config_hash": stamp.config_hash,
        "seed": stamp.seed,
        "report": report,
    });
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

/// Long-format CSV: `header` plus `config_hash,seed` on every row.
pub fn stamped_csv(stamp: &Stamp, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",") + ",config_hash,seed\n";
    for row in rows {
        out.push_str(&row.join(","));
        out.push_str(&format!(",{},{}\n", stamp.config_hash, stamp.seed));
    }
    out
}

/// Collects written files for the manifest.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

pub struct ManifestInfo<'a> {
    pub command: &'a str,
    pub stamp: &'a Stamp,
    pub stage_seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
}

/// Records this run in `run_manifest.json`, keyed by command so that
/// several commands sharing an output directory keep their entries.
pub fn write_manifest(artifacts: &Artifacts, info: &ManifestInfo<'_>) -> Result<PathBuf, CliError> {
    let mut entries = Vec::new();
    for path in artifacts.files() {
        let bytes = fs::read(path)?;
        let rel = path.strip_prefix(artifacts.dir()).unwrap_or(path);
        entries.push(json!({
            "path": rel.to_string_lossy(),
            "sha256": hex::encode(Sha256::digest(&bytes)),
            "bytes": bytes.len(),
        }));
    }
    let run = json!({
        "config_hash": info.stamp.config_hash,
        "seed": info.stamp.seed,
        "stage_seeds": info.stage_seeds,
        "artifacts": entries,
        "wall_clock_seconds": info.wall_clock_seconds,
    });
    let path = artifacts.dir().join("run_manifest.json");
    let mut runs = fs::read_to_string(&path)
        .ok()
        .and_then(|text| serde_json::from_str::<Value>(&text).ok())
        .filter(|v| v["format"] == MANIFEST_FORMAT)
        .and_then(|v| v.get("runs").cloned())
        .filter(Value::is_object)
        .unwrap_or_else(|| json!({}));
    runs[info.command] = run;
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "versions": {
            "contrastlab": env!("CARGO_PKG_VERSION"),
            "report_format": REPORT_FORMAT,
            "checkpoint_format": contrastlab_core::train::CHECKPOINT_FORMAT,
        },
        "runs": runs,
    });
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Shortest round-tripping decimal form.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
