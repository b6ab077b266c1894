//! Gaussian class mixtures pushed through a per-domain affine map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DomainDataset, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted condition number of a domain's linear part.
pub const MAX_CONDITION: f64 = 1e3;

/// `x = A·z + b` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        AffineMap::diagonal(&vec![1.0; dim], &vec![0.0; dim])
    }

    pub fn diagonal(scales: &[f64], offset: &[f64]) -> Self {
        let d = scales.len();
        let mut matrix = vec![0.0; d * d];
        for (i, &s) in scales.iter().enumerate() {
            matrix[i * d + i] = s;
        }
        AffineMap {
            matrix,
            offset: offset.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Ratio of the extreme singular values of `A`; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        let d = self.dim();
        let sv = DMatrix::from_row_slice(d, d, &self.matrix).singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    fn apply(&self, z: &[f64], out: &mut Vec<f64>) {
        let d = self.dim();
        for i in 0..d {
            let row = &self.matrix[i * d..(i + 1) * d];
            out.push(row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + self.offset[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShiftSpec {
    pub latent_dim: usize,
    pub class_count: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// One map per domain; domain `d` is the `d`-th entry.
    pub domains: Vec<AffineMap>,
    /// Index into `domains` of the unlabeled target.
    pub target: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub seed: u64,
}

impl SyntheticShiftSpec {
    /// Two classes at `±2e₁`, three sources with mild diagonal shifts and a
    /// target stretched by 3 and moved by 10 along every axis.
    pub fn shift_benchmark(seed: u64) -> Self {
        let dim = 4;
        SyntheticShiftSpec {
            latent_dim: dim,
            class_count: 2,
            separation: 2.0,
            domains: vec![
                AffineMap::identity(dim),
                AffineMap::diagonal(&[0.5, 2.0, 1.0, 1.5], &[-3.0, 1.0, 0.0, 2.0]),
                AffineMap::diagonal(&[2.0, 0.7, 1.3, 0.8], &[4.0, -2.0, 1.0, -1.0]),
                AffineMap::diagonal(&[3.0; 4], &[10.0; 4]),
            ],
            target: 3,
            train_per_domain: 2000,
            test_per_domain: 4000,
            seed,
        }
    }

    /// [`shift_benchmark`](Self::shift_benchmark) with every map the identity.
    pub fn no_shift_control(seed: u64) -> Self {
        let mut spec = SyntheticShiftSpec::shift_benchmark(seed);
        spec.domains = vec![AffineMap::identity(spec.latent_dim); spec.domains.len()];
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("synth_affine_domains", "need at least 2 classes"));
        }
        if self.latent_dim == 0 || (self.class_count > 2 && self.latent_dim < 2) {
            return Err(Error::invalid(
                "synth_affine_domains",
                "more than two classes need a latent space of at least 2 dimensions",
            ));
        }
        if self.target >= self.domains.len() {
            return Err(Error::invalid(
                "synth_affine_domains",
                format!("target {} out of {} domains", self.target, self.domains.len()),
            ));
        }
        for (d, map) in self.domains.iter().enumerate() {
            let dim = self.latent_dim;
            if map.offset.len() != dim || map.matrix.len() != dim * dim {
                return Err(Error::invalid(
                    "synth_affine_domains",
                    format!("domain {d}: map is not {dim}-dimensional"),
                ));
            }
            let cond = map.condition_number();
            if !(cond < MAX_CONDITION) {
                return Err(Error::invalid(
                    "synth_affine_domains",
                    format!("domain {d}: condition number {cond:.3e} is not below {MAX_CONDITION:e}"),
                ));
            }
        }
        Ok(())
    }

    /// Class means: `±separation·e₁` for two classes, otherwise evenly
    /// spaced on a circle in the first two latent axes.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let c = self.class_count;
        (0..c)
            .map(|k| {
                let mut m = vec![0.0; self.latent_dim];
                if c == 2 {
                    m[0] = if k == 0 { self.separation } else { -self.separation };
                } else {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                    m[0] = self.separation * angle.cos();
                    m[1] = self.separation * angle.sin();
                }
                m
            })
            .collect()
    }
}

/// Generated domains. The target's datasets carry no labels; the labels
/// drawn for them are kept in `target_train_truth` and `target_test_truth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomains {
    pub train: Vec<DomainDataset>,
    pub test: Vec<DomainDataset>,
    pub target: usize,
    pub target_train_truth: GroundTruth,
    pub target_test_truth: GroundTruth,
}

impl SyntheticDomains {
    pub fn sources(&self) -> Vec<&DomainDataset> {
        self.train
            .iter()
            .filter(|d| d.domain_id != self.target)
            .collect()
    }
}

fn sample_split<R: Rng>(
    spec: &SyntheticShiftSpec,
    map: &AffineMap,
    means: &[Vec<f64>],
    domain: usize,
    split: Split,
    n: usize,
    rng: &mut R,
) -> Result<DomainDataset> {
    let dim = spec.latent_dim;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; dim];
    for _ in 0..n {
        let label = rng.random_range(0..spec.class_count);
        for (zi, mi) in z.iter_mut().zip(&means[label]) {
            *zi = mi + rng.sample::<f64, _>(StandardNormal);
        }
        map.apply(&z, &mut data);
        labels.push(label);
    }
    DomainDataset::new(domain, split, Tensor::new(vec![n, dim], data)?, Some(labels))
}

/// Every domain's labeled train and test splits, target included.
pub fn synth_labeled_domains(spec: &SyntheticShiftSpec) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    spec.validate()?;
    let means = spec.class_means();
    spec.domains
        .iter()
        .enumerate()
        .map(|(d, map)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(d as u64);
            let train = sample_split(spec, map, &means, d, Split::Train, spec.train_per_domain, &mut rng)?;
            let test = sample_split(spec, map, &means, d, Split::Test, spec.test_per_domain, &mut rng)?;
            Ok((train, test))
        })
        .collect()
}

pub fn synth_affine_domains(spec: &SyntheticShiftSpec) -> Result<SyntheticDomains> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut truths = None;
    for (d, (tr, te)) in synth_labeled_domains(spec)?.into_iter().enumerate() {
        if d == spec.target {
            let (tr, a) = tr.withhold_labels();
            let (te, b) = te.withhold_labels();
            truths = Some((a.expect("generated with labels"), b.expect("generated with labels")));
            train.push(tr);
            test.push(te);
        } else {
            train.push(tr);
            test.push(te);
        }
    }
    let (target_train_truth, target_test_truth) = truths.expect("target validated");
    Ok(SyntheticDomains {
        train,
        test,
        target: spec.target,
        target_train_truth,
        target_test_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_numbers() {
        assert!((AffineMap::identity(3).condition_number() - 1.0).abs() < 1e-12);
        let m = AffineMap::diagonal(&[2.0, 0.5], &[0.0, 0.0]);
        assert!((m.condition_number() - 4.0).abs() < 1e-12);
        assert!(AffineMap::diagonal(&[1.0, 0.0], &[0.0, 0.0]).condition_number().is_infinite());
    }

    #[test]
    fn ill_conditioned_map_is_rejected() {
        let mut spec = SyntheticShiftSpec::shift_benchmark(0);
        spec.domains[1] = AffineMap::diagonal(&[1.0, 1.0, 1.0, 1e-4], &[0.0; 4]);
        assert!(synth_affine_domains(&spec).is_err());
        spec.domains[1] = AffineMap::diagonal(&[1.0, 1.0, 1.0, 0.0011], &[0.0; 4]);
        assert!(synth_affine_domains(&spec).is_ok());
    }

    #[test]
    fn target_labels_are_withheld() {
        let mut spec = SyntheticShiftSpec::shift_benchmark(1);
        spec.train_per_domain = 50;
        spec.test_per_domain = 30;
        let out = synth_affine_domains(&spec).unwrap();
        assert_eq!(out.train.len(), 4);
        assert!(!out.train[3].is_labeled() && !out.test[3].is_labeled());
        assert!(out.train[..3].iter().all(|d| d.is_labeled()));
        assert_eq!(out.target_train_truth.labels.len(), 50);
        assert_eq!(out.target_test_truth.labels.len(), 30);
        assert_eq!(out.sources().len(), 3);
        assert_eq!(out, synth_affine_domains(&spec).unwrap());
    }

    #[test]
    fn spec_checks() {
        let mut spec = SyntheticShiftSpec::shift_benchmark(0);
        spec.class_count = 1;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticShiftSpec::shift_benchmark(0);
        spec.target = 4;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticShiftSpec::shift_benchmark(0);
        spec.class_count = 5;
        let means = spec.class_means();
        assert!(means.iter().all(|m| ((m[0] * m[0] + m[1] * m[1]).sqrt() - 2.0).abs() < 1e-12));
    }
}
