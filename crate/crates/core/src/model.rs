//! Configurable feed-forward classifiers with a width-scale knob and
//! optional extra depth.

use crate::autodiff::{
    forward, smoothed_labels, softmax, ActivationKind, Graph, LayerSpec, TapeBuilder, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Base hidden widths before the width multiplier is applied.
    pub hidden_widths: Vec<usize>,
    /// Width multiplier: realized width = max(1, round(rho * base)).
    pub rho: f64,
    /// Additional square hidden layers appended at the last realized width.
    pub extra_blocks: usize,
    pub activation: ActivationKind,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    /// Uniform label smoothing of the model's training cost. Gradient-based
    /// attacks differentiate this same cost, so the value rides with the
    /// model rather than the training run.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 784 -> [512, 256] -> 10 relu classifier used by the digit runs.
    pub fn mnist_default() -> Self {
        ModelConfig {
            input_dim: 784,
            num_classes: 10,
            hidden_widths: vec![512, 256],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 1e-4,
            label_smoothing: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.extra_blocks > 0 && self.hidden_widths.is_empty() {
            return Err(Error::Config(
                "extra_blocks requires at least one hidden layer".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        self.activation.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Hidden widths after applying rho and appending extra blocks.
    pub fn realized_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = self
            .hidden_widths
            .iter()
            .map(|&w| ((self.rho * w as f64).round() as usize).max(1))
            .collect();
        if let Some(&last) = widths.last() {
            for _ in 0..self.extra_blocks {
                widths.push(last);
            }
        }
        widths
    }

    /// (fan_in, fan_out) of each affine layer, input to logits.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for w in self.realized_widths() {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fi, fo)| fi * fo + fo)
            .sum()
    }

    /// Parameter names in storage order: w0, b0, w1, b1, ...
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layer_dims().len())
            .flat_map(|i| [format!("w{i}"), format!("b{i}")])
            .collect()
    }

    /// Layer-sequence description: affine + activation per hidden layer
    /// (dropout after each activation when enabled), final affine to logits.
    pub fn graph(&self) -> Graph {
        let n_affine = self.layer_dims().len();
        let mut layers = Vec::new();
        for i in 0..n_affine {
            layers.push(LayerSpec::Affine {
                weight: 2 * i,
                bias: 2 * i + 1,
            });
            if i + 1 < n_affine {
                layers.push(LayerSpec::Activation(self.activation));
                if self.dropout_rate > 0.0 {
                    layers.push(LayerSpec::Dropout {
                        rate: self.dropout_rate,
                    });
                }
            }
        }
        Graph { layers }
    }
}

/// A classifier: config plus its parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    pub train_steps_done: u64,
}

impl Model {
    /// Initialize with scaled-uniform fan-in weights
    /// (bound = sqrt(6/(fan_in+fan_out))) and zero biases. Deterministic
    /// in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = stream(config.seed, Purpose::Init, 0);
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data)?);
            params.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Model {
            config,
            params,
            train_steps_done: 0,
        })
    }

    /// Rebuild a model from a config and externally supplied parameters
    /// (checkpoint loading). Shapes are validated against the config.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>, train_steps_done: u64) -> Result<Model> {
        config.validate()?;
        let dims = config.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        for (i, (fi, fo)) in dims.iter().enumerate() {
            if params[2 * i].shape() != [*fi, *fo] {
                return Err(Error::Shape(format!(
                    "w{i} has shape {:?}, expected [{fi}, {fo}]",
                    params[2 * i].shape()
                )));
            }
            if params[2 * i + 1].shape() != [*fo] {
                return Err(Error::Shape(format!(
                    "b{i} has shape {:?}, expected [{fo}]",
                    params[2 * i + 1].shape()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            train_steps_done,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stamp the training cost's smoothing onto the model (see
    /// [`ModelConfig::label_smoothing`]).
    pub fn set_label_smoothing(&mut self, smoothing: f64) -> Result<()> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0,1), got {smoothing}"
            )));
        }
        self.config.label_smoothing = smoothing;
        Ok(())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.config
            .param_names()
            .into_iter()
            .zip(self.params.iter())
            .collect()
    }

    /// Indices into `params()` of the weight matrices (biases excluded).
    pub fn weight_indices(&self) -> Vec<usize> {
        (0..self.params.len()).step_by(2).collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Deterministic logits, dropout off. Shape [batch, num_classes].
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let (logits, _) = forward(&self.config.graph(), &[batch.clone()], &self.params)?;
        Ok(logits)
    }

    /// Softmax of [`Model::predict`].
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        softmax(&self.predict(batch)?)
    }

    /// Argmax class per example; ties resolve to the lowest index.
    pub fn predict_classes(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(batch)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Record logits on a fresh tape in eval mode (dropout off), returning
    /// the builder and node id so a loss head can be attached.
    pub fn record_logits(&self, batch: &Tensor) -> Result<(TapeBuilder, crate::autodiff::NodeId)> {
        self.check_batch(batch)?;
        let mut tb = TapeBuilder::new();
        let x = tb.input(batch.clone());
        let param_ids: Vec<_> = self.params.iter().map(|t| tb.param(t.clone())).collect();
        let out = self.config.graph().record(&mut tb, x, &param_ids, None)?;
        Ok((tb, out))
    }

    /// Gradient of the summed training cost sum_i J(x_i, y_i) with respect
    /// to the input batch, where J is cross-entropy against the model's
    /// (possibly smoothed) label distribution. Rows are per-example
    /// gradients.
    pub fn input_gradient(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let q = smoothed_labels(labels, self.config.num_classes, self.config.label_smoothing)?;
        let (mut tb, logits) = self.record_logits(batch)?;
        let losses = tb.softmax_xent(logits, q)?;
        let n = tb.value(losses).numel();
        let root = tb.weighted_sum(losses, vec![1.0; n])?;
        let tape = tb.finish(root);
        let grads = tape.backward(&Tensor::scalar(1.0))?;
        Ok(grads.into_parts().0.remove(0))
    }

    /// Gradient of the summed prediction-entropy sum_i H(softmax(z_i))
    /// with respect to the input batch.
    pub fn entropy_input_gradient(&self, batch: &Tensor) -> Result<Tensor> {
        let (mut tb, logits) = self.record_logits(batch)?;
        let ent = tb.entropy(logits)?;
        let n = tb.value(ent).numel();
        let root = tb.weighted_sum(ent, vec![1.0; n])?;
        let tape = tb.finish(root);
        let grads = tape.backward(&Tensor::scalar(1.0))?;
        Ok(grads.into_parts().0.remove(0))
    }

    /// Like [`Model::record_logits`] but with dropout layers active,
    /// masks drawn from `rng`. Used by the training step.
    pub fn record_logits_train(
        &self,
        batch: &Tensor,
        rng: &mut impl rand::Rng,
    ) -> Result<(TapeBuilder, crate::autodiff::NodeId)> {
        self.check_batch(batch)?;
        let mut tb = TapeBuilder::new();
        let x = tb.input(batch.clone());
        let param_ids: Vec<_> = self.params.iter().map(|t| tb.param(t.clone())).collect();
        let mut record =
            |idx: usize, rate: f64, tb: &mut TapeBuilder, cur: crate::autodiff::NodeId| {
                tb.dropout(cur, rate, rng).map_err(|e| Error::Layer {
                    layer: idx,
                    detail: e.to_string(),
                })
            };
        let out = self
            .config
            .graph()
            .record(&mut tb, x, &param_ids, Some(&mut record))?;
        Ok((tb, out))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exact count of scalars across all parameter tensors of `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config.param_count()
}
