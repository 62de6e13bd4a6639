//! Small helpers for the CSV reports the commands emit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::errors::{CliError, CliResult};

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let file =
        File::create(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

pub fn finish(mut writer: BufWriter<File>, path: &Path) -> CliResult<()> {
    writer
        .flush()
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Shortest round-trip decimal for a float cell; empty cell for NaN.
pub fn cell(value: f64) -> String {
    if value.is_nan() { String::new() } else { format!("{value}") }
}
