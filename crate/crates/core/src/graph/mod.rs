//! Ordered layer graphs, the two reference classifiers, and the pass that
//! embeds domain alignment layers into them.

mod builders;
mod insertion;

pub use builders::{build_digit_model, build_feature_mlp, AlignmentBranch, ArchitectureSpec, Task};
pub use insertion::{insert_dial_layers, insert_ms_dial};

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    dropout_forward, BatchNorm, Conv2d, DialLayer, DomainSegments, Linear, Mode, ParamBindings,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Fc(Linear),
    Relu,
    Dropout { p: f64 },
    BatchNorm(BatchNorm),
    Dial(DialLayer),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Fc(_) => "fc",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Dial(_) => "dial",
            Layer::Flatten => "flatten",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Fc(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Dial(d) => vec![&d.shared_gamma, &d.shared_beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Fc(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Dial(d) => vec![&mut d.shared_gamma, &mut d.shared_beta],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub layer: Layer,
    pub is_final_classifier: bool,
}

impl LayerNode {
    pub fn new(layer: Layer) -> Self {
        LayerNode {
            layer,
            is_final_classifier: false,
        }
    }

    pub fn classifier(layer: Layer) -> Self {
        LayerNode {
            layer,
            is_final_classifier: true,
        }
    }
}

/// How normalization layers see a batch.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Training on a batch laid out in per-domain blocks.
    Train(&'a DomainSegments),
    /// Inference on rows that all come from one domain.
    Eval(usize),
}

impl Routing<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Routing::Train(_) => Mode::Train,
            Routing::Eval(_) => Mode::Eval,
        }
    }
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Activations entering the final classifier.
    pub features: Var,
    pub params: ParamBindings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    /// Per-sample input shape (without the batch axis).
    input_shape: Vec<usize>,
    pub spec: ArchitectureSpec,
    dropout_enabled: bool,
}

impl ModelGraph {
    pub fn new(nodes: Vec<LayerNode>, input_shape: Vec<usize>, spec: ArchitectureSpec) -> Result<Self> {
        let finals = nodes.iter().filter(|n| n.is_final_classifier).count();
        if finals != 1 {
            return Err(Error::invalid(
                "model",
                format!("expected exactly one final classifier, found {finals}"),
            ));
        }
        let graph = ModelGraph {
            nodes,
            input_shape,
            spec,
            dropout_enabled: true,
        };
        graph.output_shape()?;
        Ok(graph)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn count(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.layer.kind() == kind).count()
    }

    pub fn final_classifier_index(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| n.is_final_classifier)
            .expect("validated on construction")
    }

    /// Index of the boundary whose activations feed the final classifier,
    /// skipping the dropout placed right before it.
    pub fn feature_boundary(&self) -> usize {
        let mut idx = self.final_classifier_index();
        while idx > 0 && matches!(self.nodes[idx - 1].layer, Layer::Dropout { .. }) {
            idx -= 1;
        }
        idx
    }

    pub fn set_dropout_enabled(&mut self, enabled: bool) {
        self.dropout_enabled = enabled;
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_enabled
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.layer.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes
            .iter_mut()
            .flat_map(|n| n.layer.params_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn dial_layers(&self) -> impl Iterator<Item = &DialLayer> {
        self.nodes.iter().filter_map(|n| match &n.layer {
            Layer::Dial(d) => Some(d),
            _ => None,
        })
    }

    /// Per-sample shape after every node, checking that consecutive layers fit.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.shape_at(self.nodes.len())
    }

    /// Per-sample shape after the first `boundary` nodes.
    pub fn shape_at(&self, boundary: usize) -> Result<Vec<usize>> {
        if boundary > self.nodes.len() {
            return Err(Error::invalid(
                "model",
                format!("boundary {boundary} beyond {} nodes", self.nodes.len()),
            ));
        }
        let mut shape = self.input_shape.clone();
        for (i, node) in self.nodes[..boundary].iter().enumerate() {
            let mismatch = |expected: Vec<usize>, got: &[usize]| Error::ShapeMismatch {
                op: "model",
                left: expected,
                right: got.to_vec(),
            };
            shape = match &node.layer {
                Layer::Conv(c) => {
                    if shape.len() != 3 || shape[0] != c.in_channels() {
                        return Err(mismatch(vec![c.in_channels()], &shape));
                    }
                    if c.kernel() > shape[1] + 2 * c.padding || c.kernel() > shape[2] + 2 * c.padding {
                        return Err(Error::invalid(
                            "model",
                            format!("node {i}: kernel larger than padded input"),
                        ));
                    }
                    vec![c.out_channels(), c.output_extent(shape[1]), c.output_extent(shape[2])]
                }
                Layer::Fc(l) => {
                    if shape != [l.inputs()] {
                        return Err(mismatch(vec![l.inputs()], &shape));
                    }
                    vec![l.outputs()]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::BatchNorm(bn) => {
                    if shape[0] != bn.channels() {
                        return Err(mismatch(vec![bn.channels()], &shape));
                    }
                    shape
                }
                Layer::Dial(d) => {
                    if shape[0] != d.channels() {
                        return Err(mismatch(vec![d.channels()], &shape));
                    }
                    shape
                }
                Layer::Relu | Layer::Dropout { .. } => shape,
            };
        }
        Ok(shape)
    }

    /// Runs every node and splits out the classifier input as `features`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: Var,
        routing: Routing<'_>,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let boundary = self.feature_boundary();
        let mut params = ParamBindings::default();
        let features = self.run_nodes(tape, batch, routing, rng, 0..boundary, &mut params)?;
        let logits =
            self.run_nodes(tape, features, routing, rng, boundary..self.nodes.len(), &mut params)?;
        Ok(ForwardPass {
            logits,
            features,
            params,
        })
    }

    /// Activations after the first `boundary` nodes.
    pub fn forward_to<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: Var,
        routing: Routing<'_>,
        rng: &mut R,
        boundary: usize,
    ) -> Result<Var> {
        if boundary > self.nodes.len() {
            return Err(Error::invalid(
                "forward_to",
                format!("boundary {boundary} beyond {} nodes", self.nodes.len()),
            ));
        }
        let mut params = ParamBindings::default();
        self.run_nodes(tape, batch, routing, rng, 0..boundary, &mut params)
    }

    fn run_nodes<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        mut x: Var,
        routing: Routing<'_>,
        rng: &mut R,
        range: std::ops::Range<usize>,
        params: &mut ParamBindings,
    ) -> Result<Var> {
        let mode = routing.mode();
        for node in &mut self.nodes[range] {
            x = match &mut node.layer {
                Layer::Conv(c) => c.forward(tape, x, params)?,
                Layer::Fc(l) => l.forward(tape, x, params)?,
                Layer::Relu => tape.relu(x)?,
                Layer::Dropout { p } => {
                    let p = if self.dropout_enabled { *p } else { 0.0 };
                    dropout_forward(tape, x, p, mode, rng)?
                }
                Layer::BatchNorm(bn) => bn.forward(tape, x, mode, params)?.output,
                Layer::Dial(d) => match routing {
                    Routing::Train(segments) => d.forward_train(tape, x, segments, params)?.output,
                    Routing::Eval(domain) => d.forward_eval(tape, x, domain, params)?.output,
                },
                Layer::Flatten => {
                    let shape = tape.shape(x);
                    let rows = shape[0];
                    let width = shape[1..].iter().product();
                    tape.reshape(x, vec![rows, width])?
                }
            };
        }
        Ok(x)
    }

    /// Line-oriented description, one node per line: kind, dims, flags.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let _ = match &node.layer {
                Layer::Conv(c) => write!(
                    out,
                    "conv {}->{} k={} s={} p={}",
                    c.in_channels(),
                    c.out_channels(),
                    c.kernel(),
                    c.stride,
                    c.padding
                ),
                Layer::Fc(l) => write!(out, "fc {}->{}", l.inputs(), l.outputs()),
                Layer::Relu => write!(out, "relu"),
                Layer::Dropout { p } => write!(out, "dropout p={p}"),
                Layer::BatchNorm(bn) => write!(out, "batchnorm c={}", bn.channels()),
                Layer::Dial(d) => write!(out, "dial c={} domains={}", d.channels(), d.domain_count()),
                Layer::Flatten => write!(out, "flatten"),
            };
            if node.is_final_classifier {
                out.push_str(" final");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny(rng: &mut ChaCha8Rng) -> ModelGraph {
        let nodes = vec![
            LayerNode::new(Layer::Fc(Linear::new(3, 4, rng))),
            LayerNode::new(Layer::Relu),
            LayerNode::new(Layer::Dropout { p: 0.5 }),
            LayerNode::classifier(Layer::Fc(Linear::new(4, 2, rng))),
        ];
        ModelGraph::new(nodes, vec![3], ArchitectureSpec::features(2, 1).with_input_dim(3).with_hidden(vec![4])).unwrap()
    }

    #[test]
    fn construction_validates_shapes_and_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ArchitectureSpec::features(2, 1);
        let bad = vec![
            LayerNode::new(Layer::Fc(Linear::new(3, 4, &mut rng))),
            LayerNode::classifier(Layer::Fc(Linear::new(5, 2, &mut rng))),
        ];
        assert!(ModelGraph::new(bad, vec![3], spec.clone()).is_err());
        let no_final = vec![LayerNode::new(Layer::Fc(Linear::new(3, 2, &mut rng)))];
        assert!(ModelGraph::new(no_final, vec![3], spec).is_err());
        let g = tiny(&mut rng);
        assert_eq!(g.output_shape().unwrap(), vec![2]);
        assert_eq!(g.feature_boundary(), 2);
    }

    #[test]
    fn forward_splits_features_and_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = tiny(&mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[5, 3], 0.5));
        let pass = g.forward(&mut tape, x, Routing::Eval(0), &mut rng).unwrap();
        assert_eq!(tape.shape(pass.features), &[5, 4]);
        assert_eq!(tape.shape(pass.logits), &[5, 2]);
        assert_eq!(pass.params.len(), g.parameters().len());
        assert!(g.forward_to(&mut tape, x, Routing::Eval(0), &mut rng, 9).is_err());
    }

    #[test]
    fn describe_lists_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = tiny(&mut rng);
        assert_eq!(g.describe(), "fc 3->4\nrelu\ndropout p=0.5\nfc 4->2 final\n");
    }
}
