//! Tab-separated feature tables: one header line `label f0 f1 …`, then one
//! record per line with the label (`-1` when unknown) and the feature values.

use std::fmt::Write as _;
use std::path::Path;

use super::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the pre-computed image features.
pub const FEATURE_DIM: usize = 2048;

/// Loads a table of [`FEATURE_DIM`]-wide records.
pub fn load_feature_table(path: impl AsRef<Path>) -> Result<DomainDataset> {
    load_feature_table_with_dim(path, Some(FEATURE_DIM))
}

/// Loads a table whose width is `dim`, or whatever the header declares when
/// `dim` is `None`. Labels are dropped when every record is `-1`; a mix of
/// known and unknown labels is rejected.
pub fn load_feature_table_with_dim(path: impl AsRef<Path>, dim: Option<usize>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| fail(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split('\t').collect();
    if columns.first() != Some(&"label") {
        return Err(fail(1, "header must start with `label`".into()));
    }
    let width = columns.len() - 1;
    let dim = dim.unwrap_or(width);
    if width != dim {
        return Err(fail(1, format!("header declares {width} features, expected {dim}")));
    }

    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut first_mismatch = None;
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != dim + 1 {
            return Err(fail(
                line_no,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let label: i64 = fields[0]
            .parse()
            .map_err(|_| fail(line_no, format!("bad label `{}`", fields[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(fail(line_no, format!("label {l} is negative"))),
        };
        if first_mismatch.is_none() && labels.first().is_some_and(|l: &Option<usize>| l.is_some() != label.is_some()) {
            first_mismatch = Some(line_no);
        }
        labels.push(label);
        for (col, field) in fields[1..].iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| fail(line_no, format!("bad value `{field}` in column {}", col + 1)))?;
            if !v.is_finite() {
                return Err(fail(line_no, format!("non-finite value in column {}", col + 1)));
            }
            data.push(v);
        }
    }

    if let Some(line) = first_mismatch {
        return Err(fail(line, "mixes labeled and unlabeled records".into()));
    }
    let rows = labels.len();
    let labels = if rows > 0 && labels[0].is_none() {
        None
    } else {
        Some(labels.into_iter().map(|l| l.expect("all known")).collect())
    };
    DomainDataset::new(0, Split::Train, Tensor::new(vec![rows, dim], data)?, labels)
}

/// Writes `[N × D]` samples with their labels (or `-1` when `labels` is `None`).
pub fn write_feature_table(path: impl AsRef<Path>, samples: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let path = path.as_ref();
    if samples.shape().len() != 2 {
        return Err(Error::invalid(
            "write_feature_table",
            format!("expected [N×D] samples, got {:?}", samples.shape()),
        ));
    }
    let (rows, dim) = (samples.shape()[0], samples.shape()[1]);
    if labels.is_some_and(|l| l.len() != rows) {
        return Err(Error::invalid("write_feature_table", "label count differs from row count"));
    }
    let mut out = String::from("label");
    for c in 0..dim {
        let _ = write!(out, "\tf{c}");
    }
    out.push('\n');
    for r in 0..rows {
        match labels {
            Some(l) => {
                let _ = write!(out, "{}", l[r]);
            }
            None => out.push_str("-1"),
        }
        for v in samples.row(r) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
