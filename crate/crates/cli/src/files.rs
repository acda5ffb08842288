//! CSV helpers shared by the subcommands. Lines starting with `#` are
//! metadata comments (seed/config provenance) and are skipped on read.

use sam_core::{Result, SamError};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn write_csv(
    path: &Path,
    comments: &[String],
    header: &str,
    rows: &[String],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Reads a CSV, validates the header, returns the split data rows.
pub fn read_csv(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let f = std::fs::File::open(path)?;
    let mut header_seen = false;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !header_seen {
            if trimmed != expected_header {
                return Err(SamError::Format(format!(
                    "{}: expected header `{expected_header}`, got `{trimmed}`",
                    path.display()
                )));
            }
            header_seen = true;
            continue;
        }
        rows.push(trimmed.split(',').map(|s| s.trim().to_string()).collect());
    }
    if !header_seen {
        return Err(SamError::Format(format!(
            "{}: missing header `{expected_header}`",
            path.display()
        )));
    }
    Ok(rows)
}

pub fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| SamError::Format(format!("bad {what}: `{s}`")))
}

pub fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| SamError::Format(format!("bad {what}: `{s}`")))?;
    if !v.is_finite() {
        return Err(SamError::Format(format!("non-finite {what}: `{s}`")));
    }
    Ok(v)
}

pub fn expect_fields<'a>(row: &'a [String], n: usize, what: &str) -> Result<&'a [String]> {
    if row.len() != n {
        return Err(SamError::Format(format!(
            "{what}: expected {n} fields, got {} in `{}`",
            row.len(),
            row.join(",")
        )));
    }
    Ok(row)
}
