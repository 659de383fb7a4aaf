//! Small CSV helpers shared by the table writers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CoreError;

fn csv_error(path: &Path, e: csv::Error) -> CoreError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CoreError::io(path, io),
        other => CoreError::schema(path, format!("{other:?}")),
    }
}

/// Writes serializable rows with a header line.
pub fn write_rows<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), CoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads every row, failing on the first malformed one.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CoreError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CoreError::schema(path, format!("line {line}: {e}"))
        })?;
        out.push(row);
    }
    Ok(out)
}
