//! Per-domain datasets, multi-domain batch composition, and loaders.

mod idx;
mod synth;
mod table;

pub use idx::{load_idx, write_idx};
pub use synth::{
    synth_affine_domains, synth_labeled_domains, AffineMap, SyntheticDomains, SyntheticShiftSpec,
    MAX_CONDITION,
};
pub use table::{load_feature_table, load_feature_table_with_dim, write_feature_table, FEATURE_DIM};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{DomainSegments, Segment};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Samples of one domain and split. Target-domain training data carries no
/// labels; its ground truth, when known, travels separately as [`GroundTruth`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub split: Split,
    samples: Tensor,
    labels: Option<Vec<usize>>,
}

/// Labels withheld from a dataset, for evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub domain_id: usize,
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        split: Split,
        samples: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if samples.shape().is_empty() {
            return Err(Error::invalid("dataset", "samples need a leading row axis"));
        }
        if let Some(l) = &labels {
            if l.len() != samples.rows() {
                return Err(Error::invalid(
                    "dataset",
                    format!("{} labels for {} samples", l.len(), samples.rows()),
                ));
            }
        }
        Ok(DomainDataset {
            domain_id,
            split,
            samples,
            labels,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn with_domain_id(mut self, domain_id: usize) -> Self {
        self.domain_id = domain_id;
        self
    }

    /// Errors unless every label lies in `[0, classes)`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Strips the labels, returning them separately.
    pub fn withhold_labels(self) -> (DomainDataset, Option<GroundTruth>) {
        let truth = self.labels.map(|labels| GroundTruth {
            domain_id: self.domain_id,
            labels,
        });
        let ds = DomainDataset {
            labels: None,
            ..self
        };
        (ds, truth)
    }

    pub fn select(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id,
            split: self.split,
            samples: self.samples.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// `n` rows drawn uniformly without replacement, in draw order.
pub fn subsample(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset> {
    if n > ds.len() {
        return Err(Error::invalid(
            "subsample",
            format!("asked for {n} rows from a dataset of {}", ds.len()),
        ));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    Ok(ds.select(&picked))
}

/// One training batch: per-domain row blocks plus the labels of the labeled blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub data: Tensor,
    pub segments: DomainSegments,
    /// Labels of the rows in the labeled blocks, in row order.
    pub source_labels: Vec<usize>,
    /// Rows covered by the labeled blocks; unlabeled rows follow.
    pub labeled_rows: usize,
}

/// Epoch-wise sampler over a fixed list of labeled domains, optionally
/// followed by one unlabeled domain. Every batch takes `per_domain` rows from
/// each domain, always in the same domain order; an epoch ends when the
/// smallest domain is exhausted.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    labeled: Vec<&'a DomainDataset>,
    unlabeled: Option<&'a DomainDataset>,
    per_domain: usize,
    orders: Vec<Vec<usize>>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        labeled: Vec<&'a DomainDataset>,
        unlabeled: Option<&'a DomainDataset>,
        per_domain: usize,
    ) -> Result<Self> {
        if per_domain < 2 {
            return Err(Error::invalid(
                "compose_batch",
                format!("per_domain must be at least 2, got {per_domain}"),
            ));
        }
        if labeled.is_empty() && unlabeled.is_none() {
            return Err(Error::invalid("compose_batch", "no domains"));
        }
        if let Some(i) = labeled.iter().position(|d| !d.is_labeled()) {
            return Err(Error::invalid(
                "compose_batch",
                format!("labeled domain {i} carries no labels"),
            ));
        }
        if unlabeled.is_some_and(|d| d.is_labeled()) {
            return Err(Error::invalid(
                "compose_batch",
                "the unlabeled domain must have its labels withheld",
            ));
        }
        let mut all = labeled.clone();
        all.extend(unlabeled);
        let shape = all[0].sample_shape();
        if let Some(d) = all.iter().find(|d| d.sample_shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "compose_batch",
                left: shape.to_vec(),
                right: d.sample_shape().to_vec(),
            });
        }
        if let Some(d) = all.iter().find(|d| d.len() < per_domain) {
            return Err(Error::invalid(
                "compose_batch",
                format!(
                    "domain {} has {} rows, fewer than per_domain = {per_domain}",
                    d.domain_id,
                    d.len()
                ),
            ));
        }
        let orders = all.iter().map(|d| (0..d.len()).collect()).collect();
        Ok(BatchStream {
            labeled,
            unlabeled,
            per_domain,
            orders,
            cursor: 0,
        })
    }

    fn domains(&self) -> impl Iterator<Item = &'a DomainDataset> + '_ {
        self.labeled.iter().copied().chain(self.unlabeled)
    }

    pub fn domain_count(&self) -> usize {
        self.orders.len()
    }

    pub fn batch_rows(&self) -> usize {
        self.per_domain * self.domain_count()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.domains().map(|d| d.len()).min().unwrap_or(0) / self.per_domain
    }

    /// Reshuffles every domain and rewinds.
    pub fn start_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for order in &mut self.orders {
            order.sort_unstable();
            order.shuffle(rng);
        }
        self.cursor = 0;
    }

    /// The next batch of the epoch, or `None` once the smallest domain is used up.
    pub fn next_batch(&mut self) -> Option<DomainBatch> {
        if self.cursor >= self.steps_per_epoch() {
            return None;
        }
        let lo = self.cursor * self.per_domain;
        let hi = lo + self.per_domain;
        self.cursor += 1;

        let mut parts = Vec::with_capacity(self.domain_count());
        let mut source_labels = Vec::with_capacity(self.labeled.len() * self.per_domain);
        let domains: Vec<&DomainDataset> = self.domains().collect();
        for (d, ds) in domains.iter().enumerate() {
            let picked = &self.orders[d][lo..hi];
            parts.push(ds.samples.select_rows(picked));
            if let Some(labels) = &ds.labels {
                source_labels.extend(picked.iter().map(|&i| labels[i]));
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let data = Tensor::concat_rows(&refs).expect("shapes checked on construction");
        let segments = DomainSegments::new(
            (0..domains.len())
                .map(|d| Segment {
                    domain: d,
                    start: d * self.per_domain,
                    rows: self.per_domain,
                })
                .collect(),
        )
        .expect("equal contiguous blocks");
        Some(DomainBatch {
            data,
            segments,
            labeled_rows: self.labeled.len() * self.per_domain,
            source_labels,
        })
    }
}

/// A single batch of `per_domain` fresh rows from each source, in index
/// order, followed by `per_domain` target rows.
pub fn compose_batch<R: Rng + ?Sized>(
    sources: &[DomainDataset],
    target: &DomainDataset,
    per_domain: usize,
    rng: &mut R,
) -> Result<DomainBatch> {
    let mut stream = BatchStream::new(sources.iter().collect(), Some(target), per_domain)?;
    stream.start_epoch(rng);
    Ok(stream.next_batch().expect("every domain holds at least per_domain rows"))
}
