//! Leave-one-domain-out training runs, replications, the λ sweep, and the
//! export/projection helpers used to look at learned features.

mod config;
mod pca;
mod report;

pub use config::{default_batch_size, DataFormat, DomainFiles, DomainSource, ExperimentConfig, Method, DEFAULT_LAMBDA_GRID};
pub use pca::{pca_project, pca_top2, Projection};
pub use report::{emit_results, format_gain, mean_and_stderr, relative_gain, ReplicationFailure, ResultRecord};

use std::path::Path;

use log::{debug, info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{
    load_feature_table_with_dim, load_idx, subsample, synth_labeled_domains, write_feature_table,
    BatchStream, DomainBatch, DomainDataset, GroundTruth, Split,
};
use crate::error::{Error, Result};
use crate::graph::{build_digit_model, build_feature_mlp, insert_ms_dial, ArchitectureSpec, ModelGraph, Routing, Task};
use crate::losses::{source_ce, target_entropy, total_loss, Reduction};
use crate::optim::Adadelta;
use crate::tensor::Tensor;

/// Rows per forward pass at evaluation and export time.
const EVAL_CHUNK: usize = 1000;

/// Training inputs for one held-out target. Sources are numbered `0..M` in
/// configuration order and the target is domain `M`; target splits never
/// carry labels, which travel in the `*_truth` fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub sources: Vec<DomainDataset>,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
    pub target_train_truth: Option<GroundTruth>,
    pub target_test_truth: GroundTruth,
}

impl ExperimentData {
    /// Splits `(train, test)` pairs into labeled sources and the target.
    pub fn from_domains(domains: Vec<(DomainDataset, DomainDataset)>, target: usize) -> Result<Self> {
        if target >= domains.len() {
            return Err(Error::Config(format!("target {target} out of {} domains", domains.len())));
        }
        let m = domains.len() - 1;
        let mut sources = Vec::with_capacity(m);
        let mut target_pair = None;
        for (d, (train, test)) in domains.into_iter().enumerate() {
            if d == target {
                target_pair = Some((train, test));
            } else {
                if !train.is_labeled() {
                    return Err(Error::Config(format!("source domain {d} has no labels")));
                }
                sources.push(train.with_domain_id(sources.len()));
            }
        }
        let (train, test) = target_pair.expect("index checked");
        let (target_train, target_train_truth) = train.with_domain_id(m).withhold_labels();
        let (target_test, truth) = test.with_domain_id(m).withhold_labels();
        let target_test_truth =
            truth.ok_or_else(|| Error::Config("the target test split needs labels for evaluation".into()))?;
        Ok(ExperimentData {
            sources,
            target_train,
            target_test,
            target_train_truth,
            target_test_truth,
        })
    }

    fn check_labels(&self, classes: usize) -> Result<()> {
        for s in &self.sources {
            s.check_labels(classes)?;
        }
        if let Some(l) = self.target_test_truth.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("target test label {l} outside [0, {classes})")));
        }
        Ok(())
    }
}

/// Seed of replication `r`: the `r`-th stream of the experiment seed.
pub fn replication_seed(seed: u64, replication: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng.next_u64()
}

fn load_files(cfg: &ExperimentConfig) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    let DomainSource::Files(files) = &cfg.domains else {
        unreachable!("called for file-backed configs only");
    };
    let mut out = Vec::with_capacity(files.len());
    for (d, f) in files.iter().enumerate() {
        let load = |paths: &[std::path::PathBuf], split: Split| -> Result<DomainDataset> {
            let ds = match f.format {
                DataFormat::Table => load_feature_table_with_dim(&paths[0], None)?,
                DataFormat::Idx => load_idx(&paths[0], &paths[1])?,
            };
            let n = match split {
                Split::Train => cfg.train_samples,
                Split::Test => cfg.test_samples,
            };
            let ds = match n {
                Some(n) => subsample(&ds, n, cfg.seed.wrapping_add(2 * d as u64 + (split == Split::Test) as u64))?,
                None => ds,
            };
            let mut ds = ds.with_domain_id(d);
            ds.split = split;
            Ok(ds)
        };
        out.push((load(&f.train, Split::Train)?, load(&f.test, Split::Test)?));
    }
    Ok(out)
}

/// Data for one replication. Synthetic domains are redrawn from the
/// replication seed; file-backed domains are loaded as configured.
pub fn prepare_data(cfg: &ExperimentConfig, replication_seed: u64) -> Result<ExperimentData> {
    cfg.validate()?;
    let target = cfg.target_index()?;
    let domains = match &cfg.domains {
        DomainSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = replication_seed;
            spec.target = target;
            synth_labeled_domains(&spec)?
        }
        DomainSource::Files(_) => load_files(cfg)?,
    };
    let data = ExperimentData::from_domains(domains, target)?;
    data.check_labels(cfg.classes)?;
    Ok(data)
}

/// The plain (unaligned) model for the configured task.
pub fn build_model<R: rand::Rng + ?Sized>(cfg: &ExperimentConfig, sample_shape: &[usize], rng: &mut R) -> Result<ModelGraph> {
    let sources = cfg.domain_count() - 1;
    match cfg.task {
        Task::Features => {
            let [dim] = sample_shape else {
                return Err(Error::Config(format!("features task needs vector samples, got {sample_shape:?}")));
            };
            let mut spec = ArchitectureSpec::features(cfg.classes, sources)
                .with_input_dim(*dim)
                .with_dropout(cfg.conv_dropout, cfg.fc_dropout)
                .with_batchnorm(cfg.batchnorm);
            if let Some(h) = &cfg.hidden {
                spec = spec.with_hidden(h.clone());
            }
            build_feature_mlp(&spec, rng)
        }
        Task::Digits => {
            let &[channels, h, w] = sample_shape else {
                return Err(Error::Config(format!("digits task needs [C×H×W] samples, got {sample_shape:?}")));
            };
            if h != w {
                return Err(Error::Config(format!("digits task needs square images, got {h}×{w}")));
            }
            let mut spec = ArchitectureSpec::digits(cfg.classes, sources)
                .with_dropout(cfg.conv_dropout, cfg.fc_dropout)
                .with_batchnorm(cfg.batchnorm);
            spec.input_channels = channels;
            spec.image_size = h;
            if let Some(hidden) = &cfg.hidden {
                spec = spec.with_hidden(hidden.clone());
            }
            build_digit_model(&spec, rng)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ModelGraph,
    /// Domain whose statistics route inference on target rows.
    pub eval_domain: usize,
    /// Per epoch, the mean per-row entropy of the target blocks (aligned runs only).
    pub entropy_history: Vec<f64>,
    /// Per epoch, the mean training loss.
    pub loss_history: Vec<f64>,
}

fn per_row(value: f64, rows: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => value,
        Reduction::Sum => value / rows as f64,
    }
}

/// Trains one model for `cfg.method`. Target labels are only read under
/// `Method::Tar`.
pub fn train<R: rand::Rng>(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    replication: usize,
    rng: &mut R,
) -> Result<TrainedModel> {
    let per_domain = cfg.per_domain();
    let m = data.sources.len();
    let plain = build_model(cfg, data.target_train.sample_shape(), rng)?;

    let labeled_target;
    let (mut model, mut stream, eval_domain) = match cfg.method {
        Method::Msdial => (
            insert_ms_dial(&plain, m + 1)?,
            BatchStream::new(data.sources.iter().collect(), Some(&data.target_train), per_domain)?,
            m,
        ),
        Method::Src => (plain, BatchStream::new(data.sources.iter().collect(), None, per_domain)?, 0),
        Method::Tar => {
            let truth = data.target_train_truth.as_ref().ok_or_else(|| {
                Error::Config("method tar needs the target's training labels".into())
            })?;
            labeled_target = DomainDataset::new(
                0,
                Split::Train,
                data.target_train.samples().clone(),
                Some(truth.labels.clone()),
            )?;
            labeled_target.check_labels(cfg.classes)?;
            (plain, BatchStream::new(vec![&labeled_target], None, per_domain)?, 0)
        }
    };

    let mut opt = Adadelta::new(cfg.optimizer);
    let mut entropy_history = Vec::new();
    let mut loss_history = Vec::new();
    for epoch in 0..cfg.epochs {
        stream.start_epoch(rng);
        let (mut loss_sum, mut entropy_sum, mut steps) = (0.0, 0.0, 0usize);
        while let Some(batch) = stream.next_batch() {
            let (loss, entropy) = step(cfg, &mut model, &mut opt, batch, per_domain, rng)?;
            if !loss.is_finite() || !model.parameters().iter().all(|p| p.all_finite()) {
                return Err(Error::Diverged {
                    replication,
                    epoch: epoch + 1,
                    loss,
                });
            }
            loss_sum += loss;
            entropy_sum += entropy.unwrap_or(0.0);
            steps += 1;
        }
        let loss = loss_sum / steps.max(1) as f64;
        loss_history.push(loss);
        if cfg.method == Method::Msdial {
            entropy_history.push(entropy_sum / steps.max(1) as f64);
        }
        debug!(
            "replication {replication} epoch {}: loss {loss:.6}{}",
            epoch + 1,
            entropy_history.last().map(|h| format!(", target entropy {h:.6}")).unwrap_or_default()
        );
    }
    Ok(TrainedModel {
        model,
        eval_domain,
        entropy_history,
        loss_history,
    })
}

/// One optimizer step; returns the loss and, for aligned runs, the mean
/// per-row target entropy.
fn step<R: rand::Rng>(
    cfg: &ExperimentConfig,
    model: &mut ModelGraph,
    opt: &mut Adadelta,
    batch: DomainBatch,
    per_domain: usize,
    rng: &mut R,
) -> Result<(f64, Option<f64>)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.data);
    let pass = model.forward(&mut tape, x, Routing::Train(&batch.segments), rng)?;
    let log_probs = tape.log_softmax(pass.logits)?;
    let rows = tape.shape(log_probs)[0];

    let labeled = if batch.labeled_rows == rows {
        log_probs
    } else {
        tape.slice_rows(log_probs, 0, batch.labeled_rows)?
    };
    let ls = source_ce(&mut tape, labeled, &batch.source_labels, cfg.loss.source_reduction)?;
    let (loss, entropy) = if cfg.method == Method::Msdial {
        let target = tape.slice_rows(log_probs, batch.labeled_rows, rows - batch.labeled_rows)?;
        let lt = target_entropy(&mut tape, target, cfg.loss.target_reduction)?;
        let h = per_row(tape.scalar(lt), per_domain, cfg.loss.target_reduction);
        (total_loss(&mut tape, ls, lt, &cfg.loss)?, Some(h))
    } else {
        (ls, None)
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok((value, entropy));
    }
    tape.backward(loss)?;
    pass.params.absorb(&tape, model.parameters_mut())?;
    opt.step(model.parameters_mut())?;
    Ok((value, entropy))
}

/// Row-wise argmax with ties going to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn eval_chunks(
    model: &mut ModelGraph,
    samples: &Tensor,
    domain: usize,
    boundary: Option<usize>,
) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = samples.rows();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let x = tape.constant(samples.select_rows(&rows));
        let y = match boundary {
            Some(b) => model.forward_to(&mut tape, x, Routing::Eval(domain), &mut rng, b)?,
            None => model.forward(&mut tape, x, Routing::Eval(domain), &mut rng)?.logits,
        };
        out.push(tape.value(y).clone());
        start = end;
    }
    Ok(out)
}

pub fn predict(model: &mut ModelGraph, samples: &Tensor, domain: usize) -> Result<Vec<usize>> {
    Ok(eval_chunks(model, samples, domain, None)?
        .iter()
        .flat_map(argmax_rows)
        .collect())
}

/// Top-1 accuracy against `truth`.
pub fn accuracy(model: &mut ModelGraph, samples: &Tensor, truth: &[usize], domain: usize) -> Result<f64> {
    if samples.rows() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(
            "accuracy",
            format!("{} samples against {} labels", samples.rows(), truth.len()),
        ));
    }
    let predicted = predict(model, samples, domain)?;
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Training randomness of a replication, kept apart from the streams that
/// draw synthetic data from the same seed.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Data and trained model of replication `r`, as [`run_experiment`] builds them.
pub fn train_replication(cfg: &ExperimentConfig, replication: usize) -> Result<(TrainedModel, ExperimentData)> {
    let seed = replication_seed(cfg.seed, replication);
    let data = prepare_data(cfg, seed)?;
    let trained = train(cfg, &data, replication, &mut training_rng(seed))?;
    Ok((trained, data))
}

#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub accuracy: f64,
    pub entropy_history: Vec<f64>,
    pub loss_history: Vec<f64>,
}

/// Trains and evaluates one replication on prepared data.
pub fn run_replication(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    replication: usize,
    seed: u64,
) -> Result<ReplicationOutcome> {
    let mut trained = train(cfg, data, replication, &mut training_rng(seed))?;
    let accuracy = accuracy(
        &mut trained.model,
        data.target_test.samples(),
        &data.target_test_truth.labels,
        trained.eval_domain,
    )?;
    Ok(ReplicationOutcome {
        accuracy,
        entropy_history: trained.entropy_history,
        loss_history: trained.loss_history,
    })
}

/// All replications of one configuration. A diverged replication is
/// recorded as a failure; any other error aborts the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    cfg.validate()?;
    let files = match cfg.domains {
        DomainSource::Files(_) => Some(prepare_data(cfg, 0)?),
        DomainSource::Synthetic(_) => None,
    };
    let mut accuracies = Vec::new();
    let mut failures = Vec::new();
    let mut entropy_histories = Vec::new();
    for r in 0..cfg.replications {
        let seed = replication_seed(cfg.seed, r);
        let data = match &files {
            Some(d) => d.clone(),
            None => prepare_data(cfg, seed)?,
        };
        match run_replication(cfg, &data, r, seed) {
            Ok(outcome) => {
                info!(
                    "{} target={} lambda={} replication {r}: accuracy {:.4}",
                    cfg.method, cfg.target, cfg.loss.lambda, outcome.accuracy
                );
                accuracies.push(outcome.accuracy);
                entropy_histories.push(outcome.entropy_history);
            }
            Err(e @ Error::Diverged { .. }) => {
                warn!("{e}");
                failures.push(ReplicationFailure {
                    replication: r,
                    message: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ResultRecord::new(
        cfg.method,
        cfg.target.clone(),
        cfg.loss.lambda,
        cfg.seed,
        accuracies,
        failures,
        entropy_histories,
    ))
}

/// One run per λ, ordered by λ.
pub fn lambda_sweep(cfg: &ExperimentConfig, values: &[f64]) -> Result<Vec<ResultRecord>> {
    if values.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values
        .into_iter()
        .map(|lambda| {
            let mut c = cfg.clone();
            c.loss.lambda = lambda;
            run_experiment(&c)
        })
        .collect()
}

/// Writes the activations at node boundary `layer_index` (flattened per
/// row) with `labels` as a feature table.
pub fn export_features(
    model: &mut ModelGraph,
    samples: &Tensor,
    labels: Option<&[usize]>,
    domain: usize,
    layer_index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let width: usize = model
        .shape_at(layer_index)
        .map_err(|_| {
            Error::invalid(
                "export_features",
                format!("layer index {layer_index} is not a boundary of a {}-node model", model.nodes().len()),
            )
        })?
        .iter()
        .product();
    let mut data = Vec::with_capacity(samples.rows() * width);
    for chunk in eval_chunks(model, samples, domain, Some(layer_index))? {
        data.extend_from_slice(chunk.data());
    }
    let features = Tensor::new(vec![samples.rows(), width], data)?;
    write_feature_table(path, &features, labels)
}
