//! CSV data files and JSON fit reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fem::FitReport;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    /// n×m, one observation per row.
    pub data: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
    pub header: Option<Vec<String>>,
}

fn parse_records(text: &str) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parses CSV text. A first line containing any non-numeric field is taken
/// as a header. With `has_labels` the last column holds integer labels.
pub fn parse_csv(text: &str, has_labels: bool) -> Result<DataSet> {
    let mut records = parse_records(text)?;
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }
    let header = if records[0].iter().any(|f| f.parse::<f64>().is_err()) {
        Some(records.remove(0).iter().map(str::to_owned).collect::<Vec<_>>())
    } else {
        None
    };
    let first_row = if header.is_some() { 2 } else { 1 };
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }
    let width = header.as_ref().map_or(records[0].len(), Vec::len);
    let m = if has_labels { width.saturating_sub(1) } else { width };
    if m == 0 {
        return Err(Error::Config("no feature columns".into()));
    }
    let n = records.len();
    let mut data = DMatrix::zeros(n, m);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    for (i, rec) in records.iter().enumerate() {
        let row = i + first_row;
        if rec.len() != width {
            return Err(Error::RaggedRow { row, expected: width, found: rec.len() });
        }
        for (j, field) in rec.iter().enumerate().take(m) {
            let v: f64 = field.parse().map_err(|_| Error::NonNumeric {
                row,
                col: j + 1,
                value: field.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: j + 1 });
            }
            data[(i, j)] = v;
        }
        if has_labels {
            let field = &rec[m];
            let label = field
                .parse::<i64>()
                .or_else(|_| match field.parse::<f64>() {
                    Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
                    _ => Err(()),
                })
                .map_err(|_| Error::NonNumeric { row, col: m + 1, value: field.to_owned() })?;
            labels.push(label);
        }
    }
    Ok(DataSet { data, labels: has_labels.then_some(labels), header })
}

pub fn load_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<DataSet> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, has_labels)
}

/// Reads a single column of integer labels (the last column of each row).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = parse_records(&text)?;
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }
    let first_row = if records[0].iter().last().is_some_and(|f| f.parse::<f64>().is_err()) {
        records.remove(0);
        2
    } else {
        1
    };
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let field = rec.iter().last().unwrap_or("");
            field.parse::<i64>().map_err(|_| Error::NonNumeric {
                row: i + first_row,
                col: rec.len(),
                value: field.to_owned(),
            })
        })
        .collect()
}

/// Writes `x1..xm[,label]` with a header line.
pub fn write_dataset(path: impl AsRef<Path>, data: &DMatrix<f64>, labels: Option<&[i64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let m = data.ncols();
    let mut head: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        head.push("label".into());
    }
    w.write_record(&head)?;
    for i in 0..data.nrows() {
        let mut row: Vec<String> = data.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[i64]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "label")?;
    for l in labels {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// JSON form of a fit: labels, model (scatter matrices flattened row-major),
/// likelihood trace and diagnostics.
pub fn report_json(report: &FitReport) -> Value {
    let model = &report.model;
    json!({
        "schema": 1,
        "labels": report.labels,
        "model": {
            "k": model.k(),
            "m": model.dim(),
            "pi": model.pi,
            "mu": model.mu.iter().map(|v| v.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "sigma": model.sigma.iter().map(row_major).collect::<Vec<_>>(),
        },
        "loglik_trace": report.loglik_trace,
        "em_iters": report.em_iters,
        "converged": report.converged,
        "diagnostics": {
            "fp_iters": report.diagnostics.fp_iters,
            "monotonicity_violations": report.diagnostics.monotonicity_violations,
            "reinitializations": report.diagnostics.reinitializations,
            "warnings": report.diagnostics.warnings,
        },
    })
}

pub fn write_report(path: impl AsRef<Path>, report: &FitReport) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &report_json(report))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}
