//! CSV input and output. Header row required, comma separated, no missing values.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// A CSV file held as text cells.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CliError::io(path, e))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::io(path, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.is_empty() || headers.iter().any(String::is_empty) {
            return Err(CliError::usage(format!("{}: header row has empty column names", path.display())));
        }
        for (i, h) in headers.iter().enumerate() {
            if headers[..i].contains(h) {
                return Err(CliError::usage(format!("{}: duplicate column `{h}`", path.display())));
            }
        }
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::io(path, e))?;
            let row: Vec<String> = record.iter().map(|c| c.trim().to_string()).collect();
            if let Some(j) = row.iter().position(String::is_empty) {
                return Err(CliError::usage(format!(
                    "{}: missing value in column `{}` on data row {}",
                    path.display(),
                    headers[j],
                    line + 1
                )));
            }
            rows.push(row);
        }
        Ok(Table { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::usage(format!("column `{name}` not found")))
    }

    /// Numeric matrix of the named columns, in the given order.
    pub fn numeric(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let idx = names.iter().map(|n| self.column_index(n)).collect::<CliResult<Vec<_>>>()?;
        let mut m = DMatrix::zeros(self.rows.len(), idx.len());
        for (i, row) in self.rows.iter().enumerate() {
            for (j, &k) in idx.iter().enumerate() {
                let v: f64 = row[k].parse().map_err(|_| {
                    CliError::usage(format!("column `{}` row {}: `{}` is not a number", names[j], i + 1, row[k]))
                })?;
                if !v.is_finite() {
                    return Err(CliError::usage(format!("column `{}` row {}: non-finite value", names[j], i + 1)));
                }
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn labels(&self, name: &str) -> CliResult<Vec<i64>> {
        let k = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[k].parse::<i64>().map_err(|_| {
                    CliError::usage(format!("column `{name}` row {}: `{}` is not an integer label", i + 1, row[k]))
                })
            })
            .collect()
    }
}

/// Writes a CSV with a header; floats use shortest round-trip formatting.
pub fn write_csv(path: &Path, headers: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    writer.write_record(headers).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        writer.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn matrix_rows(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..m.nrows()).map(move |i| m.row(i).iter().map(|v| v.to_string()).collect())
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}
