//! Output files. Every file starts with the scenario hash: a `# scenario`
//! line for CSV and text, the leading `scenario_hash` field for JSON.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::pomdp::HsviResult;

use super::HarnessError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn header(hash: &str) -> String {
    format!("# scenario {hash}\n")
}

pub fn csv_string<T: Serialize>(hash: &str, rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(header(hash) + &String::from_utf8(body).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, hash: &str, rows: &[T]) -> Result<(), HarnessError> {
    std::fs::write(path, csv_string(hash, rows)?).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| io_err(path, e))
}

/// Line-delimited iteration records of each solve, prefixed by the hash.
pub fn solver_log(hash: &str, solves: &[(String, &HsviResult)]) -> String {
    let mut out = header(hash);
    for (name, r) in solves {
        out.push_str(&format!("# solve {name} converged={} iterations={}\n", r.converged, r.iterations));
        for rec in &r.log {
            out.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
