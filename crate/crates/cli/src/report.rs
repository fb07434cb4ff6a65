// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

//! Report and plot-table output. Reports hold no timestamps or timings, so
//! identical configurations give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const REPORT_SCHEMA: &str = "nvcs-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Plot table: one header row, then numeric rows of the same width.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Outcome of one subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub suite: String,
    pub family: String,
    pub config_sha256: String,
    pub tolerance_scale: f64,
    pub pass: bool,
    pub table: String,
    pub notes: Vec<String>,
    /// Constant factors and other values reported without a pass/fail
    /// decision, e.g. measured measure prefactors.
    pub audit: BTreeMap<String, f64>,
    pub checks: Vec<CheckRecord>,
    #[serde(skip)]
    pub plot: Table,
}

impl Report {
    pub fn failing(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Write `<stem>.toml` and `<stem>.csv` into `dir`.
    pub fn write(&mut self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let toml_path = dir.join(format!("{stem}.toml"));
        self.table = format!("{stem}.csv");
        write_csv(&csv_path, &self.plot)?;
        let text = toml::to_string(self).map_err(|e| CliError::Io(format!("serializing report: {e}")))?;
        fs::write(&toml_path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", toml_path.display())))?;
        Ok((toml_path, csv_path))
    }
}

/// Floats are written with `Debug`, the shortest representation that reads
/// back to the same value.
fn write_csv(path: &Path, table: &Table) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}
