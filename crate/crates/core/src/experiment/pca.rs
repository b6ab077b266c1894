use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::load_feature_table_with_dim;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores on the top two principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Top two eigenvalues of the sample covariance (`n−1` normalization).
    pub eigenvalues: [f64; 2],
}

/// Each axis is oriented so that its largest-magnitude score is positive.
pub fn pca_top2(data: &Tensor) -> Result<Projection> {
    let shape = data.shape();
    if shape.len() != 2 || shape[0] < 3 {
        return Err(Error::invalid("pca", format!("need an [N×D] table with N ≥ 3, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let scale = data.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = DMatrix::from_row_slice(n, d, data.data());
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let denom = (n - 1) as f64;

    // The n×n Gram matrix is the cheaper eigenproblem when rows are fewer
    // than columns; its eigenvectors scaled by √λ are the scores directly.
    let (values, scores) = if n <= d {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = descending(&eig.eigenvalues);
        let mut scores = DMatrix::zeros(n, 2);
        let mut values = [0.0; 2];
        for (k, &i) in order.iter().take(2).enumerate() {
            let lambda = eig.eigenvalues[i].max(0.0);
            values[k] = lambda / denom;
            scores.set_column(k, &(eig.eigenvectors.column(i) * lambda.sqrt()));
        }
        (values, scores)
    } else {
        let eig = SymmetricEigen::new(x.transpose() * &x / denom);
        let order = descending(&eig.eigenvalues);
        let mut scores = DMatrix::zeros(n, 2);
        let mut values = [0.0; 2];
        for (k, &i) in order.iter().take(2).enumerate() {
            values[k] = eig.eigenvalues[i].max(0.0);
            scores.set_column(k, &(&x * eig.eigenvectors.column(i)));
        }
        (values, scores)
    };
    // Variance at round-off level relative to the raw magnitudes counts as none.
    if values[0] <= (scale * 1e-12).powi(2) {
        return Err(Error::invalid("pca", "data has rank 0 after centering"));
    }

    let mut coords = vec![[0.0; 2]; n];
    for k in 0..2 {
        let col = scores.column(k);
        let mut pivot = 0;
        for i in 0..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * col[i];
        }
    }
    Ok(Projection {
        coords,
        eigenvalues: values,
    })
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Projects a feature table onto its top two principal axes and writes
/// `x,y,label` rows (`-1` for unlabeled tables).
pub fn pca_project(table_path: impl AsRef<Path>, out_path: impl AsRef<Path>) -> Result<()> {
    let ds = load_feature_table_with_dim(table_path, None)?;
    let proj = pca_top2(ds.samples())?;
    let path = out_path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["x", "y", "label"]).map_err(io)?;
    for (i, [x, y]) in proj.coords.iter().enumerate() {
        let label = ds.labels().map(|l| l[i] as i64).unwrap_or(-1);
        w.write_record([x.to_string(), y.to_string(), label.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
