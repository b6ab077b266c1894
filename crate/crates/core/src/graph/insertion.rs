use super::{Layer, LayerNode, ModelGraph};
use crate::error::{Error, Result};
use crate::layers::DialLayer;

/// Embeds domain alignment layers for `domain_count` domains (sources + target).
///
/// Batch-norm layers, when present, are each replaced by an alignment layer
/// that inherits their affine pair. Otherwise an alignment layer follows
/// every conv and FC layer except the final classifier. A graph that already
/// contains alignment layers for the same domain count is returned unchanged.
pub fn insert_ms_dial(model: &ModelGraph, domain_count: usize) -> Result<ModelGraph> {
    if domain_count < 2 {
        return Err(Error::invalid(
            "insert_ms_dial",
            format!("{domain_count} domain(s) reduce to plain batch normalization"),
        ));
    }
    insert_dial_layers(model, domain_count)
}

/// [`insert_ms_dial`] without the two-domain floor; one domain yields layers
/// that behave exactly like batch normalization.
pub fn insert_dial_layers(model: &ModelGraph, domain_count: usize) -> Result<ModelGraph> {
    if domain_count == 0 {
        return Err(Error::invalid("insert_dial_layers", "domain_count must be positive"));
    }
    if let Some(existing) = model.dial_layers().next() {
        if existing.domain_count() != domain_count {
            return Err(Error::invalid(
                "insert_dial_layers",
                format!(
                    "model already aligned for {} domains, asked for {domain_count}",
                    existing.domain_count()
                ),
            ));
        }
        return Ok(model.clone());
    }

    let has_batchnorm = model.count("batchnorm") > 0;
    let mut nodes = Vec::with_capacity(model.nodes().len() * 2);
    for node in model.nodes() {
        match &node.layer {
            Layer::BatchNorm(bn) if has_batchnorm => {
                nodes.push(LayerNode {
                    layer: Layer::Dial(DialLayer::from_batchnorm(bn, domain_count)?),
                    is_final_classifier: node.is_final_classifier,
                });
            }
            Layer::Conv(c) if !has_batchnorm && !node.is_final_classifier => {
                let channels = c.out_channels();
                nodes.push(node.clone());
                nodes.push(LayerNode::new(Layer::Dial(DialLayer::new(channels, domain_count)?)));
            }
            Layer::Fc(l) if !has_batchnorm && !node.is_final_classifier => {
                let channels = l.outputs();
                nodes.push(node.clone());
                nodes.push(LayerNode::new(Layer::Dial(DialLayer::new(channels, domain_count)?)));
            }
            _ => nodes.push(node.clone()),
        }
    }
    let mut rewritten = ModelGraph::new(nodes, model.input_shape().to_vec(), model.spec.clone())?;
    rewritten.set_dropout_enabled(model.dropout_enabled());
    Ok(rewritten)
}
