//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep. Leaves marked `requires_grad` accumulate their adjoints
//! across sweeps until [`Tape::zero_grad`] is called.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport};

use kernels::{ChannelLayout, ConvGeometry};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Log,
    Exp,
    Neg,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Relu => "relu",
            Elementwise::Log => "log",
            Elementwise::Exp => "exp",
            Elementwise::Neg => "neg",
        }
    }
}

/// Per-group statistics produced by a standardization op, laid out `[group][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub channels: usize,
    pub mean: Vec<f64>,
    /// Biased (divide-by-m) variance.
    pub var: Vec<f64>,
    /// Elements that contributed to each statistic.
    pub count: Vec<usize>,
}

impl GroupStats {
    pub fn group_mean(&self, group: usize) -> &[f64] {
        &self.mean[group * self.channels..(group + 1) * self.channels]
    }

    pub fn group_var(&self, group: usize) -> &[f64] {
        &self.var[group * self.channels..(group + 1) * self.channels]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Elementwise,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Sum {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    LogSoftmax {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Gather {
        a: Var,
        indices: Vec<usize>,
    },
    Standardize {
        x: Var,
        groups: Vec<(usize, usize)>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated adjoint; only kept for leaves.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf. Participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("tensor shape already validated");
        self.push_leaf(value, requires_grad)
    }

    /// Records an owned constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push_leaf(value, false)
    }

    /// Records an owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it has received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// On/off state of every kink (ReLU, clamp) on the tape, in record order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary {
                    kind: Elementwise::Relu,
                    a,
                } => pattern.extend(self.nodes[a.0].value.data().iter().map(|&v| v > 0.0)),
                Op::ClampMin { a, min } => {
                    pattern.extend(self.nodes[a.0].value.data().iter().map(|&v| v > min))
                }
                _ => {}
            }
        }
        pattern
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(Error::invalid(kind.name(), "binary op needs two operands")),
            (false, Some(_)) => Err(Error::invalid(kind.name(), "unary op takes one operand")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Neg, a)
    }

    fn broadcast_shape(kind: Elementwise, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::ShapeMismatch {
            op: kind.name(),
            left: a.to_vec(),
            right: b.to_vec(),
        };
        if a.len() != b.len() {
            return Err(mismatch());
        }
        a.iter()
            .zip(b)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(mismatch()),
            })
            .collect()
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = Self::broadcast_shape(kind, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let data = if ta.shape() == tb.shape() {
            match kind {
                Elementwise::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
                Elementwise::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
                _ => da.iter().zip(db).map(|(x, y)| x * y).collect(),
            }
        } else {
            let sa = kernels::broadcast_strides(ta.shape(), &out_shape);
            let sb = kernels::broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                out[o] = match kind {
                    Elementwise::Add => da[i] + db[j],
                    Elementwise::Sub => da[i] - db[j],
                    _ => da[i] * db[j],
                }
            });
            out
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = match kind {
            Elementwise::Relu => ta.data().iter().map(|&v| v.max(0.0)).collect(),
            Elementwise::Log => {
                if let Some(pos) = ta.data().iter().position(|&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive input {} at index {pos}", ta.data()[pos]),
                    });
                }
                ta.data().iter().map(|v| v.ln()).collect()
            }
            Elementwise::Exp => ta.data().iter().map(|v| v.exp()).collect(),
            Elementwise::Neg => ta.data().iter().map(|v| -v).collect(),
            _ => unreachable!("binary kinds are routed through binary()"),
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Unary { kind, a }, &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    /// `max(a, min)` elementwise; the gradient is zero on clamped entries.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&v| v.max(min)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::ClampMin { a, min }, &[a])
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Direct 2-D convolution: `x[N×Cin×H×W]`, `w[Cout×Cin×kh×kw]`, `b[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if sw[2] > sx[2] + 2 * padding || sw[3] > sx[3] + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    sw[2],
                    sw[3],
                    sx[2] + 2 * padding,
                    sx[3] + 2 * padding
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![sw[0]],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let geo = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let data = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geo,
        );
        let value = Tensor::new(vec![geo.batch, geo.out_channels, geo.out_h(), geo.out_w()], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.shape()[1] < 2 {
            return Err(Error::invalid(
                "log_softmax",
                format!("expected [N×C] with C ≥ 2, got {:?}", ta.shape()),
            ));
        }
        let data = kernels::log_softmax(ta.data(), ta.shape()[1]);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if numel(&shape) != ta.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, ta.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Rows `[start, start + count)` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() || start + count > ta.shape()[0] {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of {:?}", start + count, ta.shape()),
            ));
        }
        let w = ta.row_len();
        let mut shape = ta.shape().to_vec();
        shape[0] = count;
        let value = Tensor::new(shape, ta.data()[start * w..(start + count) * w].to_vec())?;
        Ok(self.push(value, Op::SliceRows { a, start }, &[a]))
    }

    /// `out[r] = a[r, indices[r]]` for a `[N×C]` input.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: s.to_vec(),
                right: vec![indices.len()],
            });
        }
        let c = s[1];
        if let Some((row, &label)) = indices.iter().enumerate().find(|(_, &i)| i >= c) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: c,
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| ta.data()[r * c + i])
            .collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// Standardizes each channel within each row group using that group's own
    /// batch mean and biased variance. `groups` are `(start_row, rows)` ranges
    /// that must partition the leading axis; they may be listed in any order.
    /// Channels live on axis 1; trailing axes are pooled into the statistics.
    pub fn standardize(
        &mut self,
        x: Var,
        groups: &[(usize, usize)],
        eps: f64,
    ) -> Result<(Var, GroupStats)> {
        let tx = self.value(x);
        if tx.shape().len() < 2 {
            return Err(Error::invalid(
                "standardize",
                format!("expected a channel axis, got {:?}", tx.shape()),
            ));
        }
        let rows = tx.shape()[0];
        let mut sorted = groups.to_vec();
        sorted.sort_unstable();
        let mut next = 0;
        for &(start, count) in &sorted {
            if start != next || count == 0 {
                return Err(Error::invalid(
                    "standardize",
                    format!("groups {groups:?} do not partition {rows} rows"),
                ));
            }
            next = start + count;
        }
        if next != rows {
            return Err(Error::invalid(
                "standardize",
                format!("groups {groups:?} do not partition {rows} rows"),
            ));
        }
        let layout = ChannelLayout::of(tx.shape());
        let (data, mean, var, inv_std) = kernels::standardize(tx.data(), layout, groups, eps);
        let stats = GroupStats {
            channels: layout.channels,
            mean,
            var,
            count: groups.iter().map(|&(_, n)| n * layout.spatial).collect(),
        };
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let v = self.push(
            value,
            Op::Standardize {
                x,
                groups: groups.to_vec(),
                inv_std,
            },
            &[x],
        );
        Ok((v, stats))
    }

    /// `x·scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() < 2 || tx.shape()[1] != scale.len() || scale.len() != shift.len() {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: tx.shape().to_vec(),
                right: vec![scale.len()],
            });
        }
        let layout = ChannelLayout::of(tx.shape());
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(layout.row_len()) {
            for (ch, block) in row.chunks_mut(layout.spatial).enumerate() {
                block
                    .iter_mut()
                    .for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `root`, accumulating into every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let zeros = |v: Var| vec![0.0; nodes[v.0].value.len()];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out_shape = node.value.shape();
                let sa = kernels::broadcast_strides(ta.shape(), out_shape);
                let sb = kernels::broadcast_strides(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                if wants(*a) {
                    let mut ga = zeros(*a);
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        ga[i] += match kind {
                            Elementwise::Mul => g[o] * db[j],
                            _ => g[o],
                        }
                    });
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = zeros(*b);
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        gb[j] += match kind {
                            Elementwise::Mul => g[o] * da[i],
                            Elementwise::Sub => -g[o],
                            _ => g[o],
                        }
                    });
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, a } => {
                let x = nodes[a.0].value.data();
                let y = node.value.data();
                let ga = (0..x.len())
                    .map(|i| match kind {
                        Elementwise::Relu => {
                            if x[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Log => g[i] / x[i],
                        Elementwise::Exp => g[i] * y[i],
                        Elementwise::Neg => -g[i],
                        _ => unreachable!("binary kinds are recorded as Op::Binary"),
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|v| v * factor).collect())),
            Op::ClampMin { a, min } => {
                let x = nodes[a.0].value.data();
                let ga = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > *min { gi } else { 0.0 })
                    .collect();
                out.push((*a, ga));
            }
            Op::Sum { a } => out.push((*a, vec![g[0]; nodes[a.0].value.len()])),
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = zeros(*a);
                    kernels::matmul_backward(ta.data(), tb.data(), g, m, k, n, Some(&mut ga), None);
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = zeros(*b);
                    kernels::matmul_backward(ta.data(), tb.data(), g, m, k, n, None, Some(&mut gb));
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, w, b, geo } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut gx = wants(*x).then(|| zeros(*x));
                let mut gw = wants(*w).then(|| zeros(*w));
                let mut gb = b.filter(|b| wants(*b)).map(zeros);
                kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g,
                    geo,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gw.map(|v| (*w, v)));
                if let (Some(b), Some(v)) = (b, gb) {
                    out.push((*b, v));
                }
            }
            Op::LogSoftmax { a } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(yrow).map(|(gi, yi)| gi - yi.exp() * total));
                }
                out.push((*a, ga));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::SliceRows { a, start } => {
                let mut ga = zeros(*a);
                let w = nodes[a.0].value.row_len();
                ga[start * w..start * w + g.len()].copy_from_slice(g);
                out.push((*a, ga));
            }
            Op::Gather { a, indices } => {
                let mut ga = zeros(*a);
                let c = nodes[a.0].value.shape()[1];
                for (r, &i) in indices.iter().enumerate() {
                    ga[r * c + i] += g[r];
                }
                out.push((*a, ga));
            }
            Op::Standardize { x, groups, inv_std } => {
                let mut gx = zeros(*x);
                let layout = ChannelLayout::of(node.value.shape());
                kernels::standardize_backward(
                    node.value.data(),
                    g,
                    layout,
                    groups,
                    inv_std,
                    &mut gx,
                );
                out.push((*x, gx));
            }
            Op::ChannelAffine { x, scale } => {
                let layout = ChannelLayout::of(node.value.shape());
                let mut gx = Vec::with_capacity(g.len());
                for grow in g.chunks(layout.row_len()) {
                    for (ch, block) in grow.chunks(layout.spatial).enumerate() {
                        gx.extend(block.iter().map(|v| v * scale[ch]));
                    }
                }
                out.push((*x, gx));
            }
        }
        for (v, contribution) in out {
            if !wants(v) {
                continue;
            }
            match &mut adj[v.0] {
                Some(acc) => acc
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn relu_add_log_values() {
        let mut t = Tape::new();
        let x = t.leaf(&vec_tensor(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let a = t.leaf(&vec_tensor(&[1.0, 2.0]));
        let b = t.leaf(&vec_tensor(&[3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let one = t.leaf(&vec_tensor(&[1.0]));
        let l = t.log(one).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
    }

    #[test]
    fn elementwise_errors_are_structured() {
        let mut t = Tape::new();
        let a = t.leaf(&vec_tensor(&[1.0, 2.0]));
        let b = t.leaf(&vec_tensor(&[1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let z = t.leaf(&vec_tensor(&[1.0, 0.0]));
        assert!(matches!(t.log(z), Err(Error::Domain { op: "log", .. })));
        assert!(t.elementwise(Elementwise::Add, a, None).is_err());
    }

    #[test]
    fn broadcast_length_one_axis() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(&Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let d = t.mul(b, a).unwrap();
        assert_eq!(t.value(d).data(), &[10.0, 40.0, 30.0, 80.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = t.leaf(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
        assert!(t.matmul(r, r).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = t.leaf(&Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
        let w = t.leaf(&Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = t.leaf(&Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(t.value(y).data(), data.as_slice());

        let x = t.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = t.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);

        let big = t.leaf(&Tensor::full(&[1, 1, 5, 5], 1.0));
        assert!(matches!(
            t.conv2d(x, big, None, 1, 0),
            Err(Error::InvalidArgument { op: "conv2d", .. })
        ));
        assert!(t.conv2d(x, big, None, 1, 1).is_ok());
    }

    #[test]
    fn log_softmax_examples() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = t.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for v in t.value(y).data() {
            assert!((v + ln2).abs() < 1e-15);
        }
        let x = t.leaf(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = t.log_softmax(x).unwrap();
        let d = t.value(y).data();
        assert!(d[0].abs() < 1e-12 && (d[1] + 1000.0).abs() < 1e-9);
        let one_col = t.leaf(&Tensor::zeros(&[3, 1]));
        assert!(t.log_softmax(one_col).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(&vec_tensor(&[1.0, 2.0, 3.0]).with_grad());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(&vec_tensor(&[1.0, 2.0]).with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
        // no reset: accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());

        assert!(matches!(t.backward(sq), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&vec_tensor(&[1.0, 2.0]).with_grad());
        let c = t.constant(vec_tensor(&[3.0, 3.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 3.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn standardize_rejects_bad_groups() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(&[4, 2]));
        assert!(t.standardize(x, &[(0, 2)], 1e-5).is_err());
        assert!(t.standardize(x, &[(0, 2), (1, 3)], 1e-5).is_err());
        assert!(t.standardize(x, &[(2, 2), (0, 2)], 1e-5).is_ok());
    }
}
