//! Layer kit: linear, convolution, dropout, batch normalization and the
//! domain alignment layer.

mod batchnorm;
mod dial;
mod segments;

pub use batchnorm::{recompute_group_stats, BatchNorm, NormOutput, NormStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use dial::DialLayer;
pub use segments::{DomainSegments, Segment};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles of the parameters used during one forward pass, in the
/// order they were bound.
#[derive(Debug, Default, Clone)]
pub struct ParamBindings {
    vars: Vec<Var>,
}

impl ParamBindings {
    pub fn bind(&mut self, tape: &mut Tape, param: &Tensor) -> Var {
        let v = tape.leaf(param);
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Adds each bound leaf's tape gradient into the matching parameter.
    pub fn absorb(&self, tape: &Tape, params: Vec<&mut Tensor>) -> Result<()> {
        if params.len() != self.vars.len() {
            return Err(Error::invalid(
                "absorb",
                format!("{} parameters for {} bindings", params.len(), self.vars.len()),
            ));
        }
        for (p, &v) in params.into_iter().zip(&self.vars) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.len()])?,
            }
        }
        Ok(())
    }
}

/// Glorot-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::uniform(&[inputs, outputs], glorot_bound(inputs, outputs), rng)
                .with_grad(),
            bias: Tensor::zeros(&[outputs]).with_grad(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &mut ParamBindings) -> Result<Var> {
        let w = params.bind(tape, &self.weight);
        let b = params.bind(tape, &self.bias);
        let y = tape.matmul(x, w)?;
        let b = tape.reshape(b, vec![1, self.outputs()])?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[Cout × Cin × kh × kw]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        let bound = glorot_bound(in_channels * area, out_channels * area);
        Conv2d {
            weight: Tensor::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng)
                .with_grad(),
            bias: Tensor::zeros(&[out_channels]).with_grad(),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Spatial extent after this layer.
    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &mut ParamBindings) -> Result<Var> {
        let w = params.bind(tape, &self.weight);
        let b = params.bind(tape, &self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Inverted dropout: survivors are scaled by `1/(1−p)` in training, eval is identity.
pub fn dropout_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(
            "dropout",
            format!("probability {p} outside [0, 1)"),
        ));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0, 3.0]));
        assert_eq!(dropout_forward(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout_forward(&mut tape, x, 0.0, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(dropout_forward(&mut tape, x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        assert!(dropout_forward(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout_forward(&mut tape, x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let input: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&input));
        let y = dropout_forward(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y).data();
        let survivors = out.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        let mean_in = input.iter().sum::<f64>() / n as f64;
        let mean_out = out.iter().sum::<f64>() / n as f64;
        assert!((mean_out / mean_in - 1.0).abs() < 0.01, "{mean_in} {mean_out}");
    }

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(3, 2, &mut rng);
        lin.bias = Tensor::vector(&[1.0, -1.0]).with_grad();
        lin.weight = Tensor::zeros(&[3, 2]).with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[4, 3], 2.0));
        let mut params = ParamBindings::default();
        let y = lin.forward(&mut tape, x, &mut params).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        assert_eq!(&tape.value(y).data()[..2], &[1.0, -1.0]);
        assert_eq!(params.len(), 2);
    }

    #[test]
    fn glorot_init_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(3, 8, 5, 2, 2, &mut rng);
        let bound = glorot_bound(75, 200);
        assert!(conv.weight.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(conv.output_extent(32), 16);
    }
}
