//! CSV ingestion and output helpers.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use gpml_core::{Dataset, Error as CoreError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Data loading failures. `code()` gives a stable identifier per kind.
#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },

    #[error("malformed CSV: {0}")]
    Malformed(String),

    #[error("outcome column '{0}' not found in header")]
    MissingColumn(String),

    #[error("row {row}: column '{column}' is empty")]
    MissingValue { row: usize, column: String },

    #[error("row {row}: column '{column}' has non-numeric value '{value}'")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("row {row}: negative outcome {value}")]
    NegativeOutcome { row: usize, value: f64 },

    #[error("invalid dataset: {0}")]
    Invalid(String),
}

impl LoadError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Unreadable { .. } => "unreadable",
            Self::Malformed(_) => "malformed_csv",
            Self::MissingColumn(_) => "missing_column",
            Self::MissingValue { .. } => "missing_value",
            Self::NonNumeric { .. } => "non_numeric",
            Self::NegativeOutcome { .. } => "negative_outcome",
            Self::Invalid(_) => "invalid_dataset",
        }
    }
}

/// Reads a headed CSV: `outcome` becomes `y`, every other column becomes a
/// covariate in header order. Rows are numbered from 1 after the header.
pub fn load_csv(path: &Path, outcome: &str) -> Result<Dataset, LoadError> {
    let file = File::open(path).map_err(|e| LoadError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_csv(file, outcome)
}

pub fn read_csv(input: impl std::io::Read, outcome: &str) -> Result<Dataset, LoadError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| LoadError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let y_col = header
        .iter()
        .position(|h| h == outcome)
        .ok_or_else(|| LoadError::MissingColumn(outcome.to_string()))?;
    let x_cols: Vec<usize> = (0..header.len()).filter(|&j| j != y_col).collect();
    if x_cols.is_empty() {
        return Err(LoadError::Invalid("no covariate columns".into()));
    }

    let mut y = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| LoadError::Malformed(format!("row {row}: {e}")))?;
        let parse = |j: usize| -> Result<f64, LoadError> {
            let cell = record.get(j).unwrap_or("");
            if cell.is_empty() {
                return Err(LoadError::MissingValue {
                    row,
                    column: header[j].clone(),
                });
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(LoadError::NonNumeric {
                    row,
                    column: header[j].clone(),
                    value: cell.to_string(),
                }),
            }
        };
        let yi = parse(y_col)?;
        if yi < 0.0 {
            return Err(LoadError::NegativeOutcome { row, value: yi });
        }
        y.push(yi);
        for &j in &x_cols {
            values.push(parse(j)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(LoadError::Invalid("no data rows".into()));
    }
    let x = DMatrix::from_row_slice(n, x_cols.len(), &values);
    let names = x_cols.iter().map(|&j| header[j].clone()).collect();
    Dataset::new(DVector::from_vec(y), x)
        .and_then(|d| d.with_feature_names(names))
        .map_err(|e| match e {
            CoreError::NegativeOutcome { row, value } => LoadError::NegativeOutcome { row: row + 1, value },
            other => LoadError::Invalid(other.to_string()),
        })
}

/// Writes `y` and the covariates as a headed CSV using shortest round-trip float formatting.
pub fn write_dataset(out: &mut dyn Write, data: &Dataset, outcome: &str) -> std::io::Result<()> {
    let names: Vec<String> = match data.feature_names() {
        Some(n) => n.to_vec(),
        None => (1..=data.d()).map(|j| format!("x{j}")).collect(),
    };
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec![outcome.to_string()];
    header.extend(names);
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut record = vec![data.y()[i].to_string()];
        record.extend((0..data.d()).map(|j| data.x()[(i, j)].to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()
}

/// Serializes rows as a headed CSV.
pub fn write_rows<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
