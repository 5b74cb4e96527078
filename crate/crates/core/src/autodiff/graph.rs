//! Layer-sequence graph descriptions and the forward entry point.

use super::ops::ActivationKind;
use super::tape::{NodeId, Tape, TapeBuilder};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// One layer of a feed-forward stack. Affine layers name the indices of
/// their weight and bias tensors in the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Affine { weight: usize, bias: usize },
    Activation(ActivationKind),
    Dropout { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub layers: Vec<LayerSpec>,
}

impl Graph {
    /// Record the layer stack on `tb`, returning the output node.
    /// `dropout_rng` of `None` means eval mode: dropout layers are identity.
    pub fn record(
        &self,
        tb: &mut TapeBuilder,
        x: NodeId,
        params: &[NodeId],
        mut dropout_rng: Option<&mut dyn FnMut(usize, f64, &mut TapeBuilder, NodeId) -> Result<NodeId>>,
    ) -> Result<NodeId> {
        let mut cur = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Affine { weight, bias } => {
                    let (w, b) = match (params.get(*weight), params.get(*bias)) {
                        (Some(&w), Some(&b)) => (w, b),
                        _ => {
                            return Err(Error::Layer {
                                layer: idx,
                                detail: format!(
                                    "parameter index out of range (weight {weight}, bias {bias}, have {})",
                                    params.len()
                                ),
                            })
                        }
                    };
                    tb.affine(cur, w, b).map_err(|e| Error::Layer {
                        layer: idx,
                        detail: e.to_string(),
                    })?
                }
                LayerSpec::Activation(kind) => {
                    tb.activation(cur, *kind).map_err(|e| Error::Layer {
                        layer: idx,
                        detail: e.to_string(),
                    })?
                }
                LayerSpec::Dropout { rate } => match dropout_rng.as_mut() {
                    Some(f) => f(idx, *rate, tb, cur)?,
                    None => cur,
                },
            };
        }
        Ok(cur)
    }
}

/// Run a layer sequence over `inputs[0]`, recording a tape sufficient for
/// one backward pass. Dropout layers are identity (eval mode).
pub fn forward(graph: &Graph, inputs: &[Tensor], params: &[Tensor]) -> Result<(Tensor, Tape)> {
    forward_inner(graph, inputs, params, None)
}

/// Like [`forward`] but with dropout active, masks drawn from `rng`.
pub fn forward_train(
    graph: &Graph,
    inputs: &[Tensor],
    params: &[Tensor],
    rng: &mut impl Rng,
) -> Result<(Tensor, Tape)> {
    let mut record =
        |idx: usize, rate: f64, tb: &mut TapeBuilder, cur: NodeId| -> Result<NodeId> {
            tb.dropout(cur, rate, rng).map_err(|e| Error::Layer {
                layer: idx,
                detail: e.to_string(),
            })
        };
    forward_inner_dyn(graph, inputs, params, Some(&mut record))
}

fn forward_inner(
    graph: &Graph,
    inputs: &[Tensor],
    params: &[Tensor],
    dropout: Option<&mut dyn FnMut(usize, f64, &mut TapeBuilder, NodeId) -> Result<NodeId>>,
) -> Result<(Tensor, Tape)> {
    forward_inner_dyn(graph, inputs, params, dropout)
}

fn forward_inner_dyn(
    graph: &Graph,
    inputs: &[Tensor],
    params: &[Tensor],
    dropout: Option<&mut dyn FnMut(usize, f64, &mut TapeBuilder, NodeId) -> Result<NodeId>>,
) -> Result<(Tensor, Tape)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("forward needs at least one input".into()));
    }
    let mut tb = TapeBuilder::new();
    let input_ids: Vec<NodeId> = inputs.iter().map(|t| tb.input(t.clone())).collect();
    let param_ids: Vec<NodeId> = params.iter().map(|t| tb.param(t.clone())).collect();
    let out = graph.record(&mut tb, input_ids[0], &param_ids, dropout)?;
    let value = tb.value(out).clone();
    Ok((value, tb.finish(out)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_affine_layer() {
        let graph = Graph {
            layers: vec![LayerSpec::Affine { weight: 0, bias: 1 }],
        };
        let x = Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let (y, _) = forward(&graph, &[x], &[w, b]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_values() {
        let graph = Graph {
            layers: vec![LayerSpec::Activation(ActivationKind::Relu)],
        };
        let x = Tensor::from_rows(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, _) = forward(&graph, &[x], &[]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_decay_layer_value() {
        let graph = Graph {
            layers: vec![LayerSpec::Activation(ActivationKind::ReluDecay(0.1))],
        };
        let x = Tensor::from_rows(1, 1, vec![3.0]).unwrap();
        let (y, _) = forward(&graph, &[x], &[]).unwrap();
        approx::assert_relative_eq!(y.data()[0], 1.5789473684210527, epsilon = 1e-15);
    }

    #[test]
    fn shape_error_names_layer() {
        let graph = Graph {
            layers: vec![
                LayerSpec::Activation(ActivationKind::Relu),
                LayerSpec::Affine { weight: 0, bias: 1 },
            ],
        };
        let x = Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let err = match forward(&graph, &[x], &[w, b]) {
            Err(e) => e,
            Ok(_) => panic!("expected layer error"),
        };
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn eval_mode_dropout_is_identity() {
        let graph = Graph {
            layers: vec![LayerSpec::Dropout { rate: 0.9 }],
        };
        let x = Tensor::from_rows(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = forward(&graph, &[x.clone()], &[]).unwrap();
        assert_eq!(y, x);
    }
}
