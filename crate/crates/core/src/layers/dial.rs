//! Domain alignment layer.
//!
//! Each domain's rows are standardized with that domain's own batch
//! statistics, which maps every domain onto the same canonical distribution.
//! One shared `(gamma, beta)` pair is then applied to the whole batch. At
//! inference a single domain is routed through its running statistics, which
//! is plain batch normalization.

use super::batchnorm::{
    check_channels, normalize_with_running, shared_affine, BatchNorm, NormOutput, NormStats,
    DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use super::{DomainSegments, ParamBindings};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DialLayer {
    /// One entry per domain: sources by index, target last.
    pub per_domain: Vec<NormStats>,
    pub shared_gamma: Tensor,
    pub shared_beta: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl DialLayer {
    pub fn new(channels: usize, domain_count: usize) -> Result<Self> {
        if domain_count == 0 {
            return Err(Error::invalid("dial", "domain_count must be at least 1"));
        }
        Ok(DialLayer {
            per_domain: (0..domain_count).map(|_| NormStats::new(channels)).collect(),
            shared_gamma: Tensor::full(&[channels], 1.0).with_grad(),
            shared_beta: Tensor::zeros(&[channels]).with_grad(),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        })
    }

    /// Takes over a batch-norm layer's affine pair and hyper-parameters.
    /// Every domain starts from that layer's running statistics.
    pub fn from_batchnorm(bn: &BatchNorm, domain_count: usize) -> Result<Self> {
        if domain_count == 0 {
            return Err(Error::invalid("dial", "domain_count must be at least 1"));
        }
        Ok(DialLayer {
            per_domain: vec![bn.stats.clone(); domain_count],
            shared_gamma: bn.gamma.clone(),
            shared_beta: bn.beta.clone(),
            momentum: bn.momentum,
            eps: bn.eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.shared_gamma.len()
    }

    pub fn domain_count(&self) -> usize {
        self.per_domain.len()
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        segments: &DomainSegments,
        params: &mut ParamBindings,
    ) -> Result<NormOutput> {
        check_channels("dial", tape.shape(x), self.channels())?;
        let rows = tape.shape(x)[0];
        if segments.total_rows() != rows {
            return Err(Error::invalid(
                "dial",
                format!(
                    "segments cover {} rows but the batch has {rows}",
                    segments.total_rows()
                ),
            ));
        }
        segments.require_domains(self.domain_count())?;
        let (normalized, stats) = tape.standardize(x, &segments.ranges(), self.eps)?;
        for (group, seg) in segments.iter().enumerate() {
            self.per_domain[seg.domain].update(
                stats.group_mean(group),
                stats.group_var(group),
                stats.count[group],
                self.momentum,
            );
        }
        let output = shared_affine(
            tape,
            normalized,
            &self.shared_gamma,
            &self.shared_beta,
            params,
        )?;
        Ok(NormOutput { output, normalized })
    }

    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        x: Var,
        domain: usize,
        params: &mut ParamBindings,
    ) -> Result<NormOutput> {
        check_channels("dial", tape.shape(x), self.channels())?;
        let stats = self.per_domain.get(domain).ok_or_else(|| {
            Error::invalid(
                "dial",
                format!("domain {domain} out of range for {} domains", self.domain_count()),
            )
        })?;
        if stats.num_batches_seen == 0 {
            return Err(Error::UnseenDomain { domain });
        }
        let normalized = normalize_with_running(tape, x, stats, self.eps)?;
        let output = shared_affine(
            tape,
            normalized,
            &self.shared_gamma,
            &self.shared_beta,
            params,
        )?;
        Ok(NormOutput { output, normalized })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, Segment};

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn run_train(layer: &mut DialLayer, input: &Tensor, seg: &DomainSegments) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let out = layer
            .forward_train(&mut tape, x, seg, &mut ParamBindings::default())
            .unwrap();
        tape.value(out.output).data().to_vec()
    }

    #[test]
    fn segments_collapse_to_canonical_superposition() {
        let mut layer = DialLayer::new(1, 2).unwrap();
        let seg = DomainSegments::ordered(&[2, 2]).unwrap();
        let y = run_train(&mut layer, &column(&[0.0, 2.0, 10.0, 14.0]), &seg);
        // var(A) = 1, var(B) = 4
        let a = 1.0 / (1.0f64 + 1e-5).sqrt();
        let b = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!((y[0] + a).abs() < 1e-12 && (y[1] - a).abs() < 1e-12);
        assert!((y[2] + b).abs() < 1e-12 && (y[3] - b).abs() < 1e-12);
        for v in &y {
            assert!((v.abs() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shared_affine_applies_to_every_segment() {
        let mut layer = DialLayer::new(1, 2).unwrap();
        layer.shared_gamma = Tensor::vector(&[2.0]).with_grad();
        layer.shared_beta = Tensor::vector(&[1.0]).with_grad();
        let seg = DomainSegments::ordered(&[2, 2]).unwrap();
        let y = run_train(&mut layer, &column(&[0.0, 2.0, 10.0, 14.0]), &seg);
        for (v, e) in y.iter().zip([-1.0, 3.0, -1.0, 3.0]) {
            assert!((v - e).abs() < 1e-4, "{y:?}");
        }
    }

    #[test]
    fn training_errors() {
        let mut layer = DialLayer::new(1, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&column(&[0.0, 1.0, 2.0, 3.0]));
        let two = DomainSegments::ordered(&[2, 2]).unwrap();
        assert!(matches!(
            layer.forward_train(&mut tape, x, &two, &mut ParamBindings::default()),
            Err(Error::MissingDomainSegment { domain: 2 })
        ));
        let mut layer = DialLayer::new(1, 2).unwrap();
        let lopsided = DomainSegments::ordered(&[3, 1]).unwrap();
        assert!(matches!(
            layer.forward_train(&mut tape, x, &lopsided, &mut ParamBindings::default()),
            Err(Error::SegmentTooSmall { domain: 1, rows: 1 })
        ));
    }

    #[test]
    fn eval_requires_seen_domain() {
        let layer = DialLayer::new(1, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&column(&[1.0, 2.0]));
        assert!(matches!(
            layer.forward_eval(&mut tape, x, 1, &mut ParamBindings::default()),
            Err(Error::UnseenDomain { domain: 1 })
        ));
        assert!(layer
            .forward_eval(&mut tape, x, 5, &mut ParamBindings::default())
            .is_err());
    }

    #[test]
    fn eval_with_identity_stats_is_identity() {
        let mut layer = DialLayer::new(1, 2).unwrap();
        layer.per_domain[1] = NormStats::from_parts(vec![0.0], vec![1.0], 1);
        let mut tape = Tape::new();
        let input = [3.0, -4.0];
        let x = tape.leaf(&column(&input));
        let out = layer
            .forward_eval(&mut tape, x, 1, &mut ParamBindings::default())
            .unwrap();
        for (y, x) in tape.value(out.output).data().iter().zip(input) {
            assert!((y - x).abs() <= x.abs() * 1e-5);
        }
    }

    #[test]
    fn eval_matches_batchnorm_bitwise() {
        let stats = NormStats::from_parts(vec![0.3, -1.0], vec![2.0, 0.5], 4);
        let mut bn = BatchNorm::new(2);
        bn.stats = stats.clone();
        bn.gamma = Tensor::vector(&[1.5, -0.5]).with_grad();
        bn.beta = Tensor::vector(&[0.1, 0.2]).with_grad();
        let mut layer = DialLayer::from_batchnorm(&bn, 3).unwrap();
        layer.per_domain[2] = stats;

        let input = Tensor::new(vec![3, 2], vec![0.1, 0.7, -3.0, 2.0, 5.5, 1e-3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let a = bn
            .forward(&mut tape, x, Mode::Eval, &mut ParamBindings::default())
            .unwrap();
        let b = layer
            .forward_eval(&mut tape, x, 2, &mut ParamBindings::default())
            .unwrap();
        assert_eq!(tape.value(a.output).data(), tape.value(b.output).data());
    }

    #[test]
    fn one_momentum_update_from_zero_init() {
        let mut layer = DialLayer::new(1, 2).unwrap();
        let seg = DomainSegments::ordered(&[3, 2]).unwrap();
        run_train(&mut layer, &column(&[1.0, 2.0, 6.0, -4.0, 0.0]), &seg);
        // domain 0 batch mean 3, domain 1 batch mean −2
        assert!((layer.per_domain[0].running_mean[0] - 0.3).abs() < 1e-15);
        assert!((layer.per_domain[1].running_mean[0] + 0.2).abs() < 1e-15);
        // domain 0 unbiased var = ((−2)² + (−1)² + 3²)/2 = 7
        assert!((layer.per_domain[0].running_var[0] - (0.9 + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn block_order_does_not_change_segment_outputs() {
        let mut a = DialLayer::new(1, 2).unwrap();
        let mut b = a.clone();
        let ordered = DomainSegments::ordered(&[2, 3]).unwrap();
        let swapped = DomainSegments::new(vec![
            Segment { domain: 1, start: 0, rows: 3 },
            Segment { domain: 0, start: 3, rows: 2 },
        ])
        .unwrap();
        let ya = run_train(&mut a, &column(&[1.0, 4.0, 9.0, 7.0, 2.0]), &ordered);
        let yb = run_train(&mut b, &column(&[9.0, 7.0, 2.0, 1.0, 4.0]), &swapped);
        assert_eq!(&ya[..2], &yb[3..]);
        assert_eq!(&ya[2..], &yb[..3]);
        assert_eq!(a.per_domain, b.per_domain);
    }
}
