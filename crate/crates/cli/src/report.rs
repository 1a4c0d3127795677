//! Report envelope, run manifest and plot-ready CSV series.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Significant digits kept for every float in a report.
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub version: String,
    /// Only filled in with `--timing`, so that default reports stay reproducible.
    pub wall_clock_ms: Option<u64>,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: Vec<String>, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            args,
            seeds: BTreeMap::from([("seed".to_string(), seed)]),
            inputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_ms: None,
        }
    }

    /// Hashes `path` (and its dictionary sidecar, when present) into the manifest.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.push_digest(path)?;
        let side = embleak_core::trace::dictionary_sidecar(path);
        if side.exists() {
            self.push_digest(&side)?;
        }
        Ok(())
    }

    fn push_digest(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }
}

/// Columns of numbers written as a headed CSV.
#[derive(Debug, Clone)]
pub struct Series {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Series {
    pub fn new(header: &[&'static str]) -> Self {
        Series { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: impl IntoIterator<Item = Option<f64>>) {
        let row: Vec<_> = row.into_iter().collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| format_number(round_sig(x))).unwrap_or_default())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// What a subcommand hands back for writing.
pub struct Outcome {
    pub result: Value,
    pub series: Option<Series>,
}

impl Outcome {
    pub fn new(result: impl Serialize) -> Result<Self> {
        Ok(Outcome { result: serde_json::to_value(result)?, series: None })
    }

    pub fn with_series(mut self, series: Series) -> Self {
        self.series = Some(series);
        self
    }
}

pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().expect("formatted float parses")
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn render(manifest: &RunManifest, result: Value) -> Result<String> {
    let mut doc = json!({ "manifest": manifest, "result": result });
    round_value(&mut doc);
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// Writes to `path`, or to stdout when there is none.
pub fn emit(path: Option<&PathBuf>, contents: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes()).map_err(|e| CliError::io("<stdout>", e))?;
            out.flush().map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
