use std::path::Path;

use super::Method;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub message: String,
}

/// Accuracies of the replications of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub method: Method,
    pub target: String,
    pub lambda: f64,
    pub seed: u64,
    /// Successful replications, in replication order.
    pub accuracies: Vec<f64>,
    pub failures: Vec<ReplicationFailure>,
    /// Per successful replication, the per-epoch target entropy.
    pub entropy_histories: Vec<Vec<f64>>,
    pub mean: f64,
    pub standard_error: f64,
}

impl ResultRecord {
    pub fn new(
        method: Method,
        target: String,
        lambda: f64,
        seed: u64,
        accuracies: Vec<f64>,
        failures: Vec<ReplicationFailure>,
        entropy_histories: Vec<Vec<f64>>,
    ) -> Self {
        let (mean, standard_error) = mean_and_stderr(&accuracies);
        ResultRecord {
            method,
            target,
            lambda,
            seed,
            accuracies,
            failures,
            entropy_histories,
            mean,
            standard_error,
        }
    }
}

/// Mean and `s/√n` with the `n−1` sample deviation. One value has zero
/// standard error; no values give `NaN` for both.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `(adapted − baseline) / baseline`.
pub fn relative_gain(baseline: f64, adapted: f64) -> f64 {
    (adapted - baseline) / baseline
}

/// Signed percentage with two decimals, e.g. `+30.64%`.
pub fn format_gain(gain: f64) -> String {
    format!("{:+.2}%", gain * 100.0)
}

/// Writes one CSV row per record. An aligned row gets a relative gain over
/// the first baseline row with the same target and seed, when there is one.
pub fn emit_results(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "method",
        "target",
        "mean",
        "stderr",
        "replications",
        "lambda",
        "seed",
        "relative_gain",
        "failed",
    ])
    .map_err(io)?;
    for r in records {
        let gain = match r.method {
            Method::Msdial => records
                .iter()
                .find(|b| b.method == Method::Src && b.target == r.target && b.seed == r.seed)
                .map(|b| format_gain(relative_gain(b.mean, r.mean)))
                .unwrap_or_default(),
            _ => String::new(),
        };
        w.write_record([
            r.method.to_string(),
            r.target.clone(),
            r.mean.to_string(),
            r.standard_error.to_string(),
            r.accuracies.len().to_string(),
            r.lambda.to_string(),
            r.seed.to_string(),
            gain,
            r.failures.len().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
