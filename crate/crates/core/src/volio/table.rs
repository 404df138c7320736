//! Comma-separated tables for metrics and learning curves. No quoting:
//! fields must not contain commas or newlines (names here never do).

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width != header width");
        self.rows.push(row);
    }

    pub fn to_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            debug_assert!(row.iter().all(|f| !f.contains(',') && !f.contains('\n')));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty table"))?
            .split(',')
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::parse(
                    path,
                    format!(
                        "line {}: {} columns, header has {}",
                        lineno + 2,
                        row.len(),
                        header.len()
                    ),
                ));
            }
            rows.push(row);
        }
        Ok(CsvTable { header, rows })
    }

    /// Column index by name.
    pub fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Canonical float formatting for metrics files: 6 decimal places.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_disk() {
        let mut t = CsvTable::new(&["case", "task", "dice"]);
        t.push(vec!["case000".into(), "core".into(), fmt_f64(0.5)]);
        t.push(vec!["case001".into(), "core".into(), fmt_f64(1.0)]);
        let path = std::env::temp_dir().join(format!("table-{}.csv", std::process::id()));
        t.write(&path).unwrap();
        let back = CsvTable::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(back, t);
    }

    #[test]
    fn six_decimal_places() {
        assert_eq!(fmt_f64(0.5), "0.500000");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let path = std::env::temp_dir().join(format!("ragged-{}.csv", std::process::id()));
        std::fs::write(&path, "a,b\n1,2\n1,2,3\n").unwrap();
        let e = CsvTable::read(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(e.to_string().contains("columns"), "{e}");
    }
}
