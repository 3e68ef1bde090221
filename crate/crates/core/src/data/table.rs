//! Tabular regression data.
//!
//! Comma-separated, UTF-8, with a header row. Recognised columns:
//!
//! | column      | required | meaning                                 |
//! |-------------|----------|-----------------------------------------|
//! | `unique_id` | yes      | object identity (rows may share it)     |
//! | `size_mm`   | yes      | regression target in millimetres       |
//! | `sample_id` | no       | row identity, defaults to `row{n}`      |
//! | `fold`      | no       | pre-assigned fold index                 |
//!
//! Every other column is a numeric feature, in header order.

use std::path::Path;

use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::tensor::Array;

const RESERVED: [&str; 4] = ["unique_id", "size_mm", "sample_id", "fold"];

/// Rows are numbered from 1 for the first data row; header problems are row 0.
pub fn load_csv_regression(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let err = |row: usize, msg: String| Error::Parse {
        path: shown.clone(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(err(0, "empty file".into()));
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let uid_col = col("unique_id").ok_or_else(|| err(0, "missing column `unique_id`".into()))?;
    let size_col = col("size_mm").ok_or_else(|| err(0, "missing column `size_mm`".into()))?;
    let sid_col = col("sample_id");
    let fold_col = col("fold");
    if col("image_path").is_some() {
        return Err(err(0, "image_path columns are not supported; provide feature columns".into()));
    }
    let features: Vec<usize> = (0..headers.len())
        .filter(|&i| !RESERVED.contains(&&headers[i]))
        .collect();
    if features.is_empty() {
        return Err(err(0, "no feature columns".into()));
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| err(row, e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let float = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(row, format!("`{}` = {:?} is not a number", &headers[c], field(c))))
        };
        let unique_id = field(uid_col).to_string();
        if unique_id.is_empty() {
            return Err(err(row, "empty unique_id".into()));
        }
        let fold = match fold_col.map(field) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<usize>()
                    .map_err(|_| err(row, format!("`fold` = {s:?} is not a non-negative integer")))?,
            ),
        };
        let input = features.iter().map(|&c| float(c)).collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            unique_id,
            sample_id: sid_col
                .map(|c| field(c).to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("row{row}")),
            input: Array::vector(&input),
            target: Target::SizeMm(float(size_col)?),
            fold,
        });
    }
    if out.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    Ok(out)
}

/// Writes samples with vector inputs using the schema read by
/// [`load_csv_regression`]; features are named `f0, f1, ...`.
pub fn write_csv_regression(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let width = samples.first().map_or(0, |s| s.input.numel());
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["unique_id".to_string(), "sample_id".into(), "size_mm".into(), "fold".into()];
    header.extend((0..width).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for s in samples {
        let y = s
            .size_mm()
            .ok_or_else(|| Error::Data("regression CSV needs size targets".into()))?;
        if s.input.numel() != width {
            return Err(Error::Data("samples have different feature counts".into()));
        }
        let mut row = vec![
            s.unique_id.clone(),
            s.sample_id.clone(),
            format!("{y:?}"),
            s.fold.map(|f| f.to_string()).unwrap_or_default(),
        ];
        row.extend(s.input.data().iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
