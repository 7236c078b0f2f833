//! Output artifacts: atomic writes, provenance headers and JSONL/CSV helpers.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub fn version() -> String {
    format!("{}-{}", env!("CARGO_PKG_VERSION"), env!("MEDRECALL_GIT_DESCRIBE"))
}

/// Resolved configuration and tool version embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &str, config: Value) -> Self {
        Provenance { command: command.to_string(), version: version(), config }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn jsonl_bytes<T: Serialize>(provenance: &Provenance, rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{}", json!({ "_provenance": provenance })).expect("write to vec");
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(r).expect("row serializes")).expect("write to vec");
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, rows: &[T]) -> Result<()> {
    atomic_write(path, &jsonl_bytes(provenance, rows))
}

/// Reads JSONL rows, skipping blank lines and any provenance header.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        if value.get("_provenance").is_some() {
            continue;
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

/// CSV with `#`-prefixed provenance comment lines before the header.
pub fn csv_bytes(provenance: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "# command: {}", provenance.command).expect("write to vec");
    writeln!(out, "# version: {}", provenance.version).expect("write to vec");
    writeln!(out, "# config: {}", provenance.config).expect("write to vec");
    writeln!(out, "{}", header.join(",")).expect("write to vec");
    for r in rows {
        writeln!(out, "{}", r.join(",")).expect("write to vec");
    }
    out
}

pub fn write_csv(path: &Path, provenance: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, &csv_bytes(provenance, header, rows))
}

/// Fails with an actionable error when an input artifact is absent.
pub fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { path: path.to_path_buf(), hint: hint.to_string() })
    }
}
