//! Plain CSV for raw task data: header `x1..xp[,t],y`, one row per sample.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::TaskDataset;
use crate::error::{Error, Result};

pub fn read_dataset_csv(path: impl AsRef<Path>, task_id: usize) -> Result<TaskDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();

    let mut x_cols: Vec<(usize, usize)> = Vec::new();
    let (mut t_col, mut y_col) = (None, None);
    for (pos, name) in headers.iter().enumerate() {
        match name {
            "t" => t_col = Some(pos),
            "y" => y_col = Some(pos),
            _ => {
                if let Some(k) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    x_cols.push((k, pos));
                }
            }
        }
    }
    let y_col = y_col.ok_or_else(|| Error::MissingColumn("y".into()))?;
    x_cols.sort_unstable();
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("x1".into()));
    }
    for (expected, &(k, _)) in (1..).zip(&x_cols) {
        if k != expected {
            return Err(Error::MissingColumn(format!("x{expected}")));
        }
    }

    let width = headers.len();
    let p = x_cols.len();
    let (mut xs, mut ts, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let cell = |pos: usize| -> Result<f64> {
            let raw = &record[pos];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    message: format!("column `{}`: `{raw}` is not a finite number", &headers[pos]),
                }),
            }
        };
        for &(_, pos) in &x_cols {
            xs.push(cell(pos)?);
        }
        if let Some(pos) = t_col {
            ts.push(cell(pos)?);
        }
        ys.push(cell(y_col)?);
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::Parse { row: 0, message: "no data rows".into() });
    }
    let x = DMatrix::from_row_slice(n, p, &xs);
    let t = t_col.map(|_| DVector::from_vec(ts));
    TaskDataset::new(task_id, x, t, DVector::from_vec(ys))
}

/// Writes with shortest round-trip float formatting, so reading the file
/// back reproduces every finite value bit for bit.
pub fn write_dataset_csv(data: &TaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header: Vec<String> = (1..=data.p()).map(|k| format!("x{k}")).collect();
    if data.t().is_some() {
        header.push("t".into());
    }
    header.push("y".into());
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut fields: Vec<String> = data.x().row(i).iter().map(|v| v.to_string()).collect();
        if let Some(t) = data.t() {
            fields.push(t[i].to_string());
        }
        fields.push(data.y()[i].to_string());
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}
