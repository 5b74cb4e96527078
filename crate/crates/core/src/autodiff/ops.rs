//! Elementwise nonlinearities and the stabilized softmax kernels shared by
//! the tape ops and the attack code.

use crate::error::{Error, Result};
use crate::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Supported activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Relu6,
    Tanh,
    /// relu(x) / (1 + beta * relu(x)^2)
    ReluDecay(f64),
    Elu,
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        if let ActivationKind::ReluDecay(beta) = self {
            if !(*beta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "relu_decay requires beta > 0, got {beta}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Relu6 => x.max(0.0).min(6.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::ReluDecay(beta) => {
                if x > 0.0 {
                    x / (1.0 + beta * x * x)
                } else {
                    0.0
                }
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Pointwise derivative. Kinks take the subgradient 0: relu and
    /// relu_decay at x=0, relu6 at both x=0 and x=6.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::ReluDecay(beta) => {
                if x > 0.0 {
                    let d = 1.0 + beta * x * x;
                    (1.0 - beta * x * x) / (d * d)
                } else {
                    0.0
                }
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::Relu6 => write!(f, "relu6"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::ReluDecay(beta) => write!(f, "relu_decay:{beta}"),
            ActivationKind::Elu => write!(f, "elu"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "relu" => ActivationKind::Relu,
            "relu6" => ActivationKind::Relu6,
            "tanh" => ActivationKind::Tanh,
            "elu" => ActivationKind::Elu,
            _ => {
                if let Some(beta) = s.strip_prefix("relu_decay:") {
                    let beta: f64 = beta.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad relu_decay beta in {s:?}"))
                    })?;
                    let k = ActivationKind::ReluDecay(beta);
                    k.validate()?;
                    k
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "unknown activation {s:?} (expected relu, relu6, tanh, elu, relu_decay:BETA)"
                    )));
                }
            }
        };
        Ok(kind)
    }
}

/// Row-wise stabilized softmax of a [n, c] tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax expects [n, classes], got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.rows(), logits.cols());
    if c == 0 {
        return Err(Error::Shape("zero-length class axis".into()));
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Per-example cross-entropy -sum(q * log softmax(z)), computed via the
/// max-subtracted log-sum-exp so large logits cannot overflow.
pub fn softmax_xent_values(logits: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    if logits.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "logits shape {:?} vs label distribution shape {:?}",
            logits.shape(),
            q.shape()
        )));
    }
    let (n, c) = (logits.rows(), logits.cols());
    if c == 0 {
        return Err(Error::Shape("zero-length class axis".into()));
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = logits.row(i);
        let qrow = q.row(i);
        let qsum: f64 = qrow.iter().sum();
        if (qsum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "label distribution of example {i} sums to {qsum}, expected 1"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        out[i] = qrow
            .iter()
            .zip(row)
            .map(|(&qj, &zj)| qj * (lse - zj))
            .sum();
    }
    Ok(out)
}

/// Per-example entropy of softmax(z).
pub fn entropy_values(logits: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if c < 2 {
        return Err(Error::Shape(format!(
            "entropy needs at least 2 classes, got {c}"
        )));
    }
    let p = softmax(logits)?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = -p
            .row(i)
            .iter()
            .map(|&pi| if pi > 0.0 { pi * pi.ln() } else { 0.0 })
            .sum::<f64>();
    }
    Ok((out, p))
}

/// One-hot label distribution with optional uniform smoothing
/// q = (1-s) * onehot + s / num_classes.
pub fn smoothed_labels(labels: &[usize], num_classes: usize, smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing must be in [0,1), got {smoothing}"
        )));
    }
    let base = smoothing / num_classes as f64;
    let mut data = vec![base; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + y] += 1.0 - smoothing;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// 1/(1-rate).
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0,1), got {rate}"
        )));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Standalone dropout: zeroes units with probability `rate` and rescales
/// survivors in train mode; identity in eval mode.
pub fn dropout(x: &Tensor, rate: f64, mode: DropoutMode, rng: &mut impl Rng) -> Result<Tensor> {
    match mode {
        DropoutMode::Eval => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!(
                    "dropout rate must be in [0,1), got {rate}"
                )));
            }
            Ok(x.clone())
        }
        DropoutMode::Train => {
            let mask = dropout_mask(x.numel(), rate, rng)?;
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}
