//! Line-oriented JSON input/output. Readers report the offending line
//! number; writers emit one compact JSON document per line with a trailing
//! newline, which keeps reruns byte-comparable.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read `{}`: {e}", path.display())))
}

/// Strict JSONL reader: every non-empty line must deserialize.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            CliError::data(format!("{}:{}: malformed record: {e}", path.display(), i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Serializes each record onto its own line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::data(format!("cannot serialize record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::data(format!("cannot create `{}`: {e}", parent.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write `{}`: {e}", path.display())))
}

/// Reads a JSON (not JSONL) document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid JSON in `{}`: {e}", path.display())))
}
