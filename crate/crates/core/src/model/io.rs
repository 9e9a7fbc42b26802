//! CSV task input and prediction output.
//!
//! Train files carry a header and put the label in the last column. Test
//! files carry a header and feature columns only. Categorical features must
//! already be ordinal integers.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Matrix, PredictiveDistribution};

fn open(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

/// Parses every data row into floats, checking each row has `width` fields
/// (or the header's width when `None`).
fn read_rows(path: &Path, width: Option<usize>) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut reader = open(path)?;
    let header_width = reader.headers().map_err(|e| Error::csv(path, e))?.len();
    let width = width.unwrap_or(header_width);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                path: path.into(),
                line,
                detail: format!("expected {width} columns, found {}", record.len()),
            });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        path: path.into(),
                        line,
                        detail: format!("column {}: `{field}` is not a finite number", col + 1),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            detail: "no data rows".into(),
        });
    }
    Ok((width, rows))
}

/// Features and labels from a train CSV whose last column is the label.
pub fn read_train_csv(path: impl AsRef<Path>) -> Result<(Matrix, Vec<f64>)> {
    let path = path.as_ref();
    let (width, rows) = read_rows(path, None)?;
    if width < 2 {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            detail: "train file needs at least one feature column and a label column".into(),
        });
    }
    let labels = rows.iter().map(|r| r[width - 1]).collect();
    let features: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|mut r| {
            r.pop();
            r
        })
        .collect();
    Ok((Matrix::from_rows(&features)?, labels))
}

/// Test features; every row must have `num_features` columns.
pub fn read_test_csv(path: impl AsRef<Path>, num_features: usize) -> Result<Matrix> {
    let path = path.as_ref();
    let (_, rows) = read_rows(path, Some(num_features))?;
    Matrix::from_rows(&rows)
}

/// Writes `p0..p{C-1}` columns for classification or a single `mean`
/// column for regression. Values use shortest round-trip formatting.
pub fn write_predictions(path: impl AsRef<Path>, preds: &PredictiveDistribution) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    match preds {
        PredictiveDistribution::Classification { probs } => {
            let width = probs.first().map_or(0, Vec::len);
            let header: Vec<String> = (0..width).map(|c| format!("p{c}")).collect();
            out.push_str(&header.join(","));
            out.push('\n');
            for row in probs {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        PredictiveDistribution::Regression { mean } => {
            out.push_str("mean\n");
            for v in mean {
                out.push_str(&format!("{v}\n"));
            }
        }
    }
    File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
