// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

//! On-disk spectrum cache keyed by a SHA-256 digest of the model parameters
//! and truncation. Entries are TOML documents stamped with a schema version;
//! a file with another version is rejected rather than reinterpreted.

use std::fs;
use std::path::{Path, PathBuf};

use nvcs::spectrum::OracleReport;
use nvcs::{ModelParams, SpectralData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Bump whenever `SpectralData`, `OracleReport` or the key derivation changes.
pub const CACHE_SCHEMA: u32 = 1;

/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "NVCS_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedSpectrum {
    pub schema: u32,
    pub key: String,
    pub n_max: usize,
    pub n_report: usize,
    pub params: ModelParams,
    pub oracle: OracleReport,
    pub spectral: SpectralData,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the schema version, the serialized parameters and the sizes.
pub fn cache_key(params: &ModelParams, n_max: usize, n_report: usize) -> Result<String, CliError> {
    let text = toml::to_string(params).map_err(|e| CliError::Io(format!("serializing parameters: {e}")))?;
    let mut h = Sha256::new();
    h.update(format!("nvcs-spectrum/{CACHE_SCHEMA}\n{n_max}\n{n_report}\n").as_bytes());
    h.update(text.as_bytes());
    Ok(hex(&h.finalize()))
}

pub fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("spectrum-{key}.toml"))
}

/// Write through a temporary file and rename, so readers never see a partial entry.
pub fn cache_spectrum(dir: &Path, entry: &CachedSpectrum) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let text = toml::to_string(entry).map_err(|e| CliError::Io(format!("serializing spectrum: {e}")))?;
    let path = entry_path(dir, &entry.key);
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, text).map_err(|e| CliError::Io(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, &path).map_err(|e| CliError::Io(format!("renaming to {}: {e}", path.display())))?;
    Ok(path)
}

pub fn load_spectrum(path: &Path) -> Result<CachedSpectrum, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Cache(format!("{}: {e}", path.display())))?;
    match value.get("schema").and_then(toml::Value::as_integer) {
        Some(v) if v == CACHE_SCHEMA as i64 => {}
        other => {
            return Err(CliError::Cache(format!("{}: schema {other:?}, expected {CACHE_SCHEMA}", path.display())));
        }
    }
    toml::from_str(&text).map_err(|e| CliError::Cache(format!("{}: {e}", path.display())))
}

/// Cached entry for these parameters, if present and compatible.
pub fn lookup(dir: &Path, params: &ModelParams, n_max: usize, n_report: usize) -> Result<Option<CachedSpectrum>, CliError> {
    let key = cache_key(params, n_max, n_report)?;
    let path = entry_path(dir, &key);
    if !path.exists() {
        return Ok(None);
    }
    let entry = load_spectrum(&path)?;
    if entry.key != key || entry.params != *params {
        return Err(CliError::Cache(format!("{}: key mismatch", path.display())));
    }
    Ok(Some(entry))
}
