//! Source cross-entropy, target entropy, and their λ-weighted sum.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped here before taking the log inside the entropy,
/// so `0·log 0` evaluates to 0.
pub const ENTROPY_CLAMP: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub source_reduction: Reduction,
    pub target_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            source_reduction: Reduction::Mean,
            target_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {lambda}")));
        }
        Ok(LossConfig {
            lambda,
            ..LossConfig::default()
        })
    }
}

fn reduce(tape: &mut Tape, total: Var, rows: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / rows.max(1) as f64),
    }
}

/// `−Σ log p[row, label]` over the source rows.
pub fn source_ce(
    tape: &mut Tape,
    log_probs: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let picked = tape.gather(log_probs, labels)?;
    let total = tape.sum(picked);
    let total = tape.neg(total)?;
    Ok(reduce(tape, total, labels.len(), reduction))
}

/// `−Σ_k Σ_c p·log p` over the target rows.
pub fn target_entropy(tape: &mut Tape, log_probs: Var, reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(log_probs);
    if shape.len() != 2 {
        return Err(Error::invalid(
            "target_entropy",
            format!("expected [N×C] log-probabilities, got {shape:?}"),
        ));
    }
    let rows = shape[0];
    let p = tape.exp(log_probs)?;
    let log_p = tape.clamp_min(log_probs, ENTROPY_CLAMP.ln());
    let plogp = tape.mul(p, log_p)?;
    let total = tape.sum(plogp);
    let total = tape.neg(total)?;
    Ok(reduce(tape, total, rows, reduction))
}

/// `ls + λ·lt`.
pub fn total_loss(tape: &mut Tape, source: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = tape.scale(target, cfg.lambda);
    tape.add(source, weighted)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    const LN10: f64 = std::f64::consts::LN_10;

    fn log_probs(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        let x = tape.leaf(&Tensor::from_rows(rows).unwrap());
        tape.log_softmax(x).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let lp = t.leaf(&Tensor::new(vec![1, 3], vec![0.0, -1e3, -1e3]).unwrap());
        let l = source_ce(&mut t, lp, &[0], Reduction::Sum).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let lp = log_probs(&mut t, &[vec![0.0; 10]]);
        let l = source_ce(&mut t, lp, &[3], Reduction::Sum).unwrap();
        assert!((t.scalar(l) - LN10).abs() < 1e-12);

        let rows = vec![vec![0.5f64.ln(), 0.5f64.ln()], vec![0.25f64.ln(), 0.75f64.ln()]];
        let lp = t.leaf(&Tensor::from_rows(&rows).unwrap());
        let l = source_ce(&mut t, lp, &[0, 0], Reduction::Sum).unwrap();
        assert!((t.scalar(l) - 2.079442).abs() < 1e-6);
        let l = source_ce(&mut t, lp, &[0, 0], Reduction::Mean).unwrap();
        assert!((t.scalar(l) - 2.079442 / 2.0).abs() < 1e-6);

        assert!(matches!(
            source_ce(&mut t, lp, &[0, 2], Reduction::Sum),
            Err(Error::LabelOutOfRange { row: 1, label: 2, classes: 2 })
        ));
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::new();
        let lp = t.leaf(&Tensor::new(vec![1, 3], vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
        let h = target_entropy(&mut t, lp, Reduction::Sum).unwrap();
        assert_eq!(t.scalar(h), 0.0);

        let lp = log_probs(&mut t, &[vec![0.0; 10]]);
        let h = target_entropy(&mut t, lp, Reduction::Sum).unwrap();
        assert!((t.scalar(h) - LN10).abs() < 1e-12);

        let lp = log_probs(&mut t, &[vec![0.0, 0.0]]);
        let h = target_entropy(&mut t, lp, Reduction::Mean).unwrap();
        assert!((t.scalar(h) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let mut t = Tape::new();
        let ls = t.leaf(&Tensor::scalar(1.0));
        let lt = t.leaf(&Tensor::scalar(2.302585));
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda, 0.001);
        let total = total_loss(&mut t, ls, lt, &cfg).unwrap();
        assert!((t.scalar(total) - 1.002302585).abs() < 1e-15);

        let zero = LossConfig::with_lambda(0.0).unwrap();
        let total = total_loss(&mut t, ls, lt, &zero).unwrap();
        assert_eq!(t.scalar(total), 1.0);
        assert!(LossConfig::with_lambda(-1.0).is_err());
    }

    #[test]
    fn lambda_derivative_is_target_term() {
        let mut t = Tape::new();
        let ls = t.leaf(&Tensor::scalar(0.7));
        let lt = t.leaf(&Tensor::scalar(1.3));
        let a = LossConfig::with_lambda(0.25).unwrap();
        let b = LossConfig::with_lambda(0.75).unwrap();
        let ta = total_loss(&mut t, ls, lt, &a).unwrap();
        let tb = total_loss(&mut t, ls, lt, &b).unwrap();
        assert!(((t.scalar(tb) - t.scalar(ta)) / 0.5 - 1.3).abs() < 1e-14);
    }

    #[test]
    fn entropy_step_sharpens_a_free_row() {
        let logits = Tensor::new(vec![1, 4], vec![0.3, -0.1, 0.2, 0.05]).unwrap();
        let entropy_of = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(x);
            let lp = t.log_softmax(v).unwrap();
            let h = target_entropy(&mut t, lp, Reduction::Mean).unwrap();
            t.scalar(h)
        };
        let mut t = Tape::new();
        let v = t.leaf(&logits.clone().with_grad());
        let lp = t.log_softmax(v).unwrap();
        let h = target_entropy(&mut t, lp, Reduction::Mean).unwrap();
        let zero = t.constant(Tensor::scalar(0.0));
        let loss = total_loss(&mut t, zero, h, &LossConfig::with_lambda(0.5).unwrap()).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(v).unwrap().to_vec();
        let mut stepped = logits.clone();
        stepped.data_mut().iter_mut().zip(&g).for_each(|(x, g)| *x -= 0.1 * g);
        assert!(entropy_of(&stepped) < entropy_of(&logits));
    }

    proptest! {
        #[test]
        fn entropy_is_bounded_by_log_classes(row in prop::collection::vec(-20.0f64..20.0, 2..12)) {
            let c = row.len();
            let mut t = Tape::new();
            let lp = log_probs(&mut t, &[row]);
            let h = target_entropy(&mut t, lp, Reduction::Sum).unwrap();
            let h = t.scalar(h);
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (c as f64).ln() + 1e-12);
        }
    }
}
