use rand::Rng;

use super::{Layer, LayerNode, ModelGraph};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Digits,
    Features,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digits" => Ok(Task::Digits),
            "features" => Ok(Task::Features),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Shape of the per-method feature-alignment streams (R streams with H
/// hidden and O output units). Recorded as metadata only; no stream is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentBranch {
    pub count: usize,
    pub hidden: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub task: Task,
    /// Output units of the classifier.
    pub classes: usize,
    /// Number of source domains.
    pub sources: usize,
    /// Input width of the feature MLP.
    pub input_dim: usize,
    pub input_channels: usize,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    /// Hidden FC widths ahead of the final classifier.
    pub hidden: Vec<usize>,
    pub conv_dropout: f64,
    pub fc_dropout: f64,
    /// Place a batch-norm layer after every conv/FC layer except the classifier.
    pub batchnorm: bool,
    pub alignment: Option<AlignmentBranch>,
}

impl ArchitectureSpec {
    pub fn digits(classes: usize, sources: usize) -> Self {
        ArchitectureSpec {
            task: Task::Digits,
            classes,
            sources,
            input_dim: 0,
            input_channels: 3,
            image_size: 32,
            conv_channels: vec![64, 64, 128],
            kernel: 5,
            conv_stride: 2,
            conv_padding: 2,
            hidden: vec![3072, 2048],
            conv_dropout: 0.2,
            fc_dropout: 0.5,
            batchnorm: false,
            alignment: None,
        }
    }

    pub fn features(classes: usize, sources: usize) -> Self {
        ArchitectureSpec {
            task: Task::Features,
            classes,
            sources,
            input_dim: 2048,
            input_channels: 0,
            image_size: 0,
            conv_channels: Vec::new(),
            kernel: 0,
            conv_stride: 1,
            conv_padding: 0,
            hidden: vec![1000, 500, 100],
            conv_dropout: 0.2,
            fc_dropout: 0.5,
            batchnorm: false,
            alignment: None,
        }
    }

    pub fn with_input_dim(mut self, dim: usize) -> Self {
        self.input_dim = dim;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    pub fn with_dropout(mut self, conv: f64, fc: f64) -> Self {
        self.conv_dropout = conv;
        self.fc_dropout = fc;
        self
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::invalid(
                "architecture",
                format!("expected a {task:?} spec, got {:?}", self.task),
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid("architecture", "need at least 2 classes"));
        }
        if self.sources < 1 {
            return Err(Error::invalid("architecture", "need at least 1 source domain"));
        }
        Ok(())
    }
}

fn push_dropout(nodes: &mut Vec<LayerNode>, p: f64) {
    if p > 0.0 {
        nodes.push(LayerNode::new(Layer::Dropout { p }));
    }
}

/// Dropout → layer → [batch norm] → ReLU for every FC width, then the classifier.
fn push_classifier<R: Rng + ?Sized>(
    nodes: &mut Vec<LayerNode>,
    spec: &ArchitectureSpec,
    mut width: usize,
    rng: &mut R,
) {
    for &h in &spec.hidden {
        push_dropout(nodes, spec.fc_dropout);
        nodes.push(LayerNode::new(Layer::Fc(Linear::new(width, h, rng))));
        if spec.batchnorm {
            nodes.push(LayerNode::new(Layer::BatchNorm(BatchNorm::new(h))));
        }
        nodes.push(LayerNode::new(Layer::Relu));
        width = h;
    }
    push_dropout(nodes, spec.fc_dropout);
    nodes.push(LayerNode::classifier(Layer::Fc(Linear::new(
        width,
        spec.classes,
        rng,
    ))));
}

/// Convolutional feature extractor followed by an FC classifier.
pub fn build_digit_model<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Result<ModelGraph> {
    spec.validate(Task::Digits)?;
    let mut nodes = Vec::new();
    let mut channels = spec.input_channels;
    let mut extent = spec.image_size;
    for &out in &spec.conv_channels {
        push_dropout(&mut nodes, spec.conv_dropout);
        let conv = Conv2d::new(
            channels,
            out,
            spec.kernel,
            spec.conv_stride,
            spec.conv_padding,
            rng,
        );
        extent = conv.output_extent(extent);
        nodes.push(LayerNode::new(Layer::Conv(conv)));
        if spec.batchnorm {
            nodes.push(LayerNode::new(Layer::BatchNorm(BatchNorm::new(out))));
        }
        nodes.push(LayerNode::new(Layer::Relu));
        channels = out;
    }
    nodes.push(LayerNode::new(Layer::Flatten));
    push_classifier(&mut nodes, spec, channels * extent * extent, rng);
    ModelGraph::new(
        nodes,
        vec![spec.input_channels, spec.image_size, spec.image_size],
        spec.clone(),
    )
}

/// FC stack over pre-computed feature vectors.
pub fn build_feature_mlp<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Result<ModelGraph> {
    spec.validate(Task::Features)?;
    let mut nodes = Vec::new();
    push_classifier(&mut nodes, spec, spec.input_dim, rng);
    ModelGraph::new(nodes, vec![spec.input_dim], spec.clone())
}
