//! Adversarial example generators: one-step and iterative gradient-sign
//! methods, gradient-value methods, and random-noise baselines, all sharing
//! one clipping/budget engine.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Pixel-unit scale: epsilon of 16 on the conventional [0,255] pixel scale
/// is 16/255 in normalized data units.
pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    FgsmPred,
    FastEntropy,
    FastGradL2,
    FastGradLinf,
    StepRnd,
    StepLl,
    IterBasic,
    IterLl,
    NoiseSign,
    NoiseTruncnormal,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 11] = [
        AttackMethod::Fgsm,
        AttackMethod::FgsmPred,
        AttackMethod::FastEntropy,
        AttackMethod::FastGradL2,
        AttackMethod::FastGradLinf,
        AttackMethod::StepRnd,
        AttackMethod::StepLl,
        AttackMethod::IterBasic,
        AttackMethod::IterLl,
        AttackMethod::NoiseSign,
        AttackMethod::NoiseTruncnormal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::FgsmPred => "fgsm_pred",
            AttackMethod::FastEntropy => "fast_entropy",
            AttackMethod::FastGradL2 => "fast_grad_l2",
            AttackMethod::FastGradLinf => "fast_grad_linf",
            AttackMethod::StepRnd => "step_rnd",
            AttackMethod::StepLl => "step_ll",
            AttackMethod::IterBasic => "iter_basic",
            AttackMethod::IterLl => "iter_ll",
            AttackMethod::NoiseSign => "noise_sign",
            AttackMethod::NoiseTruncnormal => "noise_truncnormal",
        }
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self, AttackMethod::IterBasic | AttackMethod::IterLl)
    }

    /// Methods whose construction reads the true label.
    pub fn uses_true_label(&self) -> bool {
        matches!(
            self,
            AttackMethod::Fgsm
                | AttackMethod::FastGradL2
                | AttackMethod::FastGradLinf
                | AttackMethod::IterBasic
        )
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = AttackMethod::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown attack method {s:?}; valid methods: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Everything needed to run one adversarial generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    /// Perturbation budget in data units (pixel value / 255).
    pub epsilon: f64,
    /// Iterative step size in data units. Default one pixel unit.
    pub alpha: f64,
    /// Explicit iteration count; `None` applies the epsilon-based rule.
    pub iters: Option<usize>,
    pub rng_seed: u64,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, epsilon: f64) -> Self {
        AttackSpec {
            method,
            epsilon,
            alpha: 1.0 / PIXEL_SCALE,
            iters: None,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.method.is_iterative() {
            if !(self.alpha > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha must be positive, got {}",
                    self.alpha
                )));
            }
            if self.alpha > self.epsilon {
                return Err(Error::InvalidArgument(format!(
                    "iterative methods require alpha <= epsilon, got alpha {} > epsilon {}",
                    self.alpha, self.epsilon
                )));
            }
        }
        Ok(())
    }

    /// Iteration count in effect: explicit override, or the pixel-unit rule.
    pub fn resolved_iters(&self) -> Result<usize> {
        match self.iters {
            Some(n) => Ok(n.max(1)),
            None => iteration_count(self.epsilon * PIXEL_SCALE),
        }
    }
}

/// Valid data range for generated examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DataRange {
    fn default() -> Self {
        DataRange { lo: 0.0, hi: 1.0 }
    }
}

impl DataRange {
    pub fn validate(&self) -> Result<()> {
        if self.lo > self.hi {
            return Err(Error::InvalidArgument(format!(
                "data range lo {} > hi {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// A generated batch: clean inputs, their adversarial counterparts, and the
/// labels involved.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub clean: Tensor,
    pub adv: Tensor,
    pub true_labels: Vec<usize>,
    pub target_labels: Option<Vec<usize>>,
    pub spec: AttackSpec,
}

/// sign with sign(0) = 0, so zero-gradient components stay untouched.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise clip of `a` to [max(lo, center-eps), min(hi, center+eps)].
pub fn clip_box(a: &Tensor, center: &Tensor, epsilon: f64, range: DataRange) -> Result<Tensor> {
    range.validate()?;
    if a.shape() != center.shape() {
        return Err(Error::Shape(format!(
            "clip_box shapes differ: {:?} vs {:?}",
            a.shape(),
            center.shape()
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| {
            let lo = (c - epsilon).max(range.lo);
            let hi = (c + epsilon).min(range.hi);
            v.min(hi).max(lo)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Number of iterations for the pixel-unit budget: ceil(min(eps+4, 1.25 eps)),
/// at least 1.
pub fn iteration_count(epsilon_pixel: f64) -> Result<usize> {
    if epsilon_pixel < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon_pixel}"
        )));
    }
    let raw = (epsilon_pixel + 4.0).min(1.25 * epsilon_pixel);
    Ok((raw.ceil() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    LeastLikely,
    Random,
}

/// Target classes per example: the least-likely predicted class (ties to the
/// lowest index), or a uniform random class excluding the predicted argmax.
pub fn select_target(
    model: &Model,
    x: &Tensor,
    policy: TargetPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let logits = model.predict(x)?;
    let classes = logits.cols();
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "target selection needs at least 2 classes".into(),
        ));
    }
    let mut targets = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        match policy {
            TargetPolicy::LeastLikely => {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v < row[best] {
                        best = j;
                    }
                }
                targets.push(best);
            }
            TargetPolicy::Random => {
                let top = argmax(row);
                let mut pick = rng.gen_range(0..classes - 1);
                if pick >= top {
                    pick += 1;
                }
                targets.push(pick);
            }
        }
    }
    Ok(targets)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// One ascent step x + eps*sign(grad J(x, y)), clipped to the box.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    y_true: &[usize],
    epsilon: f64,
    range: DataRange,
) -> Result<Tensor> {
    check_labels(y_true, x.rows(), model.config().num_classes)?;
    let grad = model.input_gradient(x, y_true)?;
    signed_step(x, &grad, epsilon, range)
}

/// One descent step x - eps*sign(grad J(x, y_target)), clipped to the box.
pub fn one_step_target(
    model: &Model,
    x: &Tensor,
    y_target: &[usize],
    epsilon: f64,
    range: DataRange,
) -> Result<Tensor> {
    check_labels(y_target, x.rows(), model.config().num_classes)?;
    let grad = model.input_gradient(x, y_target)?;
    signed_step(x, &grad, -epsilon, range)
}

/// x + step*sign(grad), then clip_box around x. `step` may be negative.
fn signed_step(x: &Tensor, grad: &Tensor, step: f64, range: DataRange) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| v + step * sign(g))
        .collect();
    let moved = Tensor::new(x.shape().to_vec(), data)?;
    clip_box(&moved, x, step.abs(), range)
}

/// N steps of signed ascent on J(., y_true), each clipped to the epsilon-box
/// around the original input and the data range.
pub fn iter_basic(
    model: &Model,
    x: &Tensor,
    y_true: &[usize],
    epsilon: f64,
    alpha: f64,
    iters: usize,
    range: DataRange,
) -> Result<Tensor> {
    check_labels(y_true, x.rows(), model.config().num_classes)?;
    if alpha > epsilon {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} > epsilon {epsilon}"
        )));
    }
    let mut adv = x.clone();
    for _ in 0..iters {
        let grad = model.input_gradient(&adv, y_true)?;
        let data = adv
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| v + alpha * sign(g))
            .collect();
        let moved = Tensor::new(adv.shape().to_vec(), data)?;
        adv = clip_box(&moved, x, epsilon, range)?;
    }
    Ok(adv)
}

/// N steps of signed descent on J(., y_LL), the least-likely class computed
/// once from the clean input.
pub fn iter_ll(
    model: &Model,
    x: &Tensor,
    epsilon: f64,
    alpha: f64,
    iters: usize,
    range: DataRange,
) -> Result<(Tensor, Vec<usize>)> {
    if alpha > epsilon {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} > epsilon {epsilon}"
        )));
    }
    let mut dummy = stream(0, Purpose::Attack, 0);
    let targets = select_target(model, x, TargetPolicy::LeastLikely, &mut dummy)?;
    let mut adv = x.clone();
    for _ in 0..iters {
        let grad = model.input_gradient(&adv, &targets)?;
        let data = adv
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| v - alpha * sign(g))
            .collect();
        let moved = Tensor::new(adv.shape().to_vec(), data)?;
        adv = clip_box(&moved, x, epsilon, range)?;
    }
    Ok((adv, targets))
}

/// Gradient-direction one-step variants: predicted-label sign step, entropy
/// ascent, and the L2/Linf-normalized gradient-value steps. Zero gradient
/// rows return the clean example unchanged.
pub fn fast_variant(
    model: &Model,
    x: &Tensor,
    y_true: &[usize],
    epsilon: f64,
    kind: AttackMethod,
    range: DataRange,
) -> Result<Tensor> {
    match kind {
        AttackMethod::FgsmPred => {
            let pred = model.predict_classes(x)?;
            fgsm(model, x, &pred, epsilon, range)
        }
        AttackMethod::FastEntropy => {
            let grad = model.entropy_input_gradient(x)?;
            signed_step(x, &grad, epsilon, range)
        }
        AttackMethod::FastGradL2 | AttackMethod::FastGradLinf => {
            check_labels(y_true, x.rows(), model.config().num_classes)?;
            let grad = model.input_gradient(x, y_true)?;
            let (n, d) = (x.rows(), x.cols());
            let mut data = x.data().to_vec();
            for i in 0..n {
                let grow = &grad.data()[i * d..(i + 1) * d];
                let norm = match kind {
                    AttackMethod::FastGradL2 => grow.iter().map(|g| g * g).sum::<f64>().sqrt(),
                    _ => grow.iter().fold(0.0_f64, |m, &g| m.max(g.abs())),
                };
                if norm == 0.0 {
                    continue;
                }
                for (dst, &g) in data[i * d..(i + 1) * d].iter_mut().zip(grow) {
                    *dst += epsilon * g / norm;
                }
            }
            let moved = Tensor::new(x.shape().to_vec(), data)?;
            clip_box(&moved, x, epsilon, range)
        }
        other => Err(Error::InvalidArgument(format!(
            "{other} is not a fast variant"
        ))),
    }
}

/// Random-perturbation baselines: eps*sign(standard normal) per component,
/// or truncated-normal(0, eps/2) noise restricted to [-eps, eps].
pub fn noise_baseline(
    x: &Tensor,
    epsilon: f64,
    kind: AttackMethod,
    range: DataRange,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let data: Vec<f64> = match kind {
        AttackMethod::NoiseSign => x
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + epsilon * sign(z)
            })
            .collect(),
        AttackMethod::NoiseTruncnormal => {
            let sigma = 0.5 * epsilon;
            x.data()
                .iter()
                .map(|&v| v + sample_symmetric_truncnormal(sigma, epsilon, rng))
                .collect()
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} is not a noise baseline"
            )))
        }
    };
    let moved = Tensor::new(x.shape().to_vec(), data)?;
    clip_box(&moved, x, epsilon, range)
}

/// Rejection-sample Normal(0, sigma) restricted to [-bound, bound].
pub fn sample_symmetric_truncnormal(sigma: f64, bound: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 || bound == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = z * sigma;
        if v.abs() <= bound {
            return v;
        }
    }
}

/// Dispatch any of the eleven attack methods over a batch.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    y_true: &[usize],
    spec: &AttackSpec,
    range: DataRange,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    range.validate()?;
    check_labels(y_true, x.rows(), model.config().num_classes)?;
    let eps = spec.epsilon;
    let mut rng = stream(spec.rng_seed, Purpose::Attack, 0);
    let mut target_labels = None;
    let adv = match spec.method {
        AttackMethod::Fgsm => fgsm(model, x, y_true, eps, range)?,
        AttackMethod::StepLl => {
            let targets = select_target(model, x, TargetPolicy::LeastLikely, &mut rng)?;
            let adv = one_step_target(model, x, &targets, eps, range)?;
            target_labels = Some(targets);
            adv
        }
        AttackMethod::StepRnd => {
            let targets = select_target(model, x, TargetPolicy::Random, &mut rng)?;
            let adv = one_step_target(model, x, &targets, eps, range)?;
            target_labels = Some(targets);
            adv
        }
        AttackMethod::IterBasic => {
            iter_basic(model, x, y_true, eps, spec.alpha, spec.resolved_iters()?, range)?
        }
        AttackMethod::IterLl => {
            let (adv, targets) =
                iter_ll(model, x, eps, spec.alpha, spec.resolved_iters()?, range)?;
            target_labels = Some(targets);
            adv
        }
        AttackMethod::FgsmPred
        | AttackMethod::FastEntropy
        | AttackMethod::FastGradL2
        | AttackMethod::FastGradLinf => fast_variant(model, x, y_true, eps, spec.method, range)?,
        AttackMethod::NoiseSign | AttackMethod::NoiseTruncnormal => {
            noise_baseline(x, eps, spec.method, range, &mut rng)?
        }
    };
    Ok(AdversarialBatch {
        clean: x.clone(),
        adv,
        true_labels: y_true.to_vec(),
        target_labels,
        spec: spec.clone(),
    })
}

impl AdversarialBatch {
    /// Largest componentwise |adv - clean|.
    pub fn max_perturbation(&self) -> f64 {
        self.adv
            .data()
            .iter()
            .zip(self.clean.data())
            .map(|(&a, &c)| (a - c).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ActivationKind;
    use crate::model::ModelConfig;

    fn toy_model(seed: u64) -> Model {
        Model::init(ModelConfig {
            input_dim: 4,
            num_classes: 3,
            hidden_widths: vec![8],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed,
        })
        .unwrap()
    }

    fn toy_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        use rand::Rng;
        let mut rng = stream(seed, Purpose::Synth, 1);
        let data: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (Tensor::from_rows(n, 4, data).unwrap(), labels)
    }

    #[test]
    fn clip_box_cases() {
        let range = DataRange::default();
        let c = Tensor::from_vec(vec![0.5]);
        let a = Tensor::from_vec(vec![0.5]);
        assert_eq!(clip_box(&a, &c, 0.1, range).unwrap().data(), &[0.5]);

        let a = Tensor::from_vec(vec![0.9]);
        assert_eq!(clip_box(&a, &c, 0.1, range).unwrap().data(), &[0.6]);

        let c = Tensor::from_vec(vec![0.95]);
        let a = Tensor::from_vec(vec![1.2]);
        assert_eq!(clip_box(&a, &c, 0.1, range).unwrap().data(), &[1.0]);

        let bad = DataRange { lo: 1.0, hi: 0.0 };
        assert!(clip_box(&a, &c, 0.1, bad).is_err());
    }

    #[test]
    fn iteration_count_rule() {
        assert_eq!(iteration_count(16.0).unwrap(), 20);
        assert_eq!(iteration_count(8.0).unwrap(), 10);
        assert_eq!(iteration_count(2.0).unwrap(), 3);
        assert_eq!(iteration_count(0.0).unwrap(), 1);
        assert!(iteration_count(-1.0).is_err());
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let model = toy_model(1);
        let (x, y) = toy_batch(2, 5);
        let adv = fgsm(&model, &x, &y, 0.0, DataRange::default()).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_matches_analytic_logistic_gradient() {
        // Two-class linear model with logits [w.x, 0], w = [1, -2]:
        // J(x, class 0) = softplus(-w.x), grad_x = -sigma(-w.x) * w.
        // At x = 0: grad proportional to [-1, 2], sign = [-1, +1].
        let cfg = ModelConfig {
            input_dim: 2,
            num_classes: 2,
            hidden_widths: vec![],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 0,
        };
        let params = vec![
            Tensor::from_rows(2, 2, vec![1.0, 0.0, -2.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![0.0, 0.0]),
        ];
        let model = Model::from_parts(cfg, params, 0).unwrap();
        let x = Tensor::from_rows(1, 2, vec![0.0, 0.0]).unwrap();
        let grad = model.input_gradient(&x, &[0]).unwrap();
        assert!((grad.data()[0] - -0.5).abs() < 1e-12);
        assert!((grad.data()[1] - 1.0).abs() < 1e-12);
        let wide = DataRange { lo: -1.0, hi: 1.0 };
        let adv = fgsm(&model, &x, &[0], 0.25, wide).unwrap();
        assert_eq!(adv.data(), &[-0.25, 0.25]);
    }

    #[test]
    fn one_step_target_is_negated_fgsm_on_true_label() {
        let model = toy_model(3);
        let (x, y) = toy_batch(4, 6);
        let grad = model.input_gradient(&x, &y).unwrap();
        let eps = 0.05;
        let expect: Vec<f64> = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| (v - eps * sign(g)).clamp(0.0, 1.0))
            .collect();
        let adv = one_step_target(&model, &x, &y, eps, DataRange::default()).unwrap();
        for (a, e) in adv.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_target_increases_target_margin_on_linear_model() {
        // Linear softmax model: a small descent step on J(., target) must
        // raise the target logit margin.
        let cfg = ModelConfig {
            input_dim: 3,
            num_classes: 2,
            hidden_widths: vec![],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 5,
        };
        let model = Model::init(cfg).unwrap();
        let x = Tensor::from_rows(1, 3, vec![0.5, 0.4, 0.6]).unwrap();
        let target = 1usize;
        let before = model.predict(&x).unwrap();
        let margin_before = before.data()[target] - before.data()[1 - target];
        let wide = DataRange { lo: -10.0, hi: 10.0 };
        let adv = one_step_target(&model, &x, &[target], 0.01, wide).unwrap();
        let after = model.predict(&adv).unwrap();
        let margin_after = after.data()[target] - after.data()[1 - target];
        assert!(margin_after > margin_before);
    }

    #[test]
    fn select_target_least_likely_and_ties() {
        let cfg = ModelConfig {
            input_dim: 3,
            num_classes: 3,
            hidden_widths: vec![],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 0,
        };
        // Logits = x (identity weights): pick x rows directly.
        let params = vec![
            Tensor::from_rows(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![0.0; 3]),
        ];
        let model = Model::from_parts(cfg, params, 0).unwrap();
        let x = Tensor::from_rows(2, 3, vec![5.0, 1.0, -3.0, 2.0, 2.0, 2.0]).unwrap();
        let mut rng = stream(0, Purpose::Attack, 0);
        let t = select_target(&model, &x, TargetPolicy::LeastLikely, &mut rng).unwrap();
        assert_eq!(t, vec![2, 0]);
    }

    #[test]
    fn select_target_random_avoids_argmax_and_is_reproducible() {
        let model = toy_model(9);
        let (x, _) = toy_batch(10, 1);
        let top = model.predict_classes(&x).unwrap()[0];
        let mut rng = stream(4, Purpose::Attack, 0);
        let first = select_target(&model, &x, TargetPolicy::Random, &mut rng).unwrap();
        let mut rng = stream(4, Purpose::Attack, 0);
        let again = select_target(&model, &x, TargetPolicy::Random, &mut rng).unwrap();
        assert_eq!(first, again);
        let mut rng = stream(5, Purpose::Attack, 0);
        for _ in 0..10_000 {
            let t = select_target(&model, &x, TargetPolicy::Random, &mut rng).unwrap()[0];
            assert_ne!(t, top);
        }
    }

    #[test]
    fn iter_basic_single_step_equals_fgsm_bitwise() {
        let model = toy_model(11);
        let (x, y) = toy_batch(12, 8);
        let eps = 0.07;
        let range = DataRange::default();
        let a = fgsm(&model, &x, &y, eps, range).unwrap();
        let b = iter_basic(&model, &x, &y, eps, eps, 1, range).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn iter_ll_single_step_equals_step_ll_bitwise() {
        let model = toy_model(13);
        let (x, _) = toy_batch(14, 8);
        let eps = 0.07;
        let range = DataRange::default();
        let spec = AttackSpec {
            method: AttackMethod::StepLl,
            epsilon: eps,
            alpha: eps,
            iters: None,
            rng_seed: 0,
        };
        let one = run_attack(&model, &x, &vec![0; 8], &spec, range).unwrap();
        let (b, _) = iter_ll(&model, &x, eps, eps, 1, range).unwrap();
        assert_eq!(one.adv.data(), b.data());
    }

    #[test]
    fn iter_budget_respected_at_every_prefix() {
        let model = toy_model(15);
        let (x, y) = toy_batch(16, 4);
        let eps = 0.05;
        let alpha = 0.01;
        let range = DataRange::default();
        for iters in 1..=8 {
            let adv = iter_basic(&model, &x, &y, eps, alpha, iters, range).unwrap();
            let max = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(max <= eps + 1e-12, "iters={iters}: {max}");
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn iter_rejects_alpha_above_epsilon() {
        let model = toy_model(17);
        let (x, y) = toy_batch(18, 2);
        assert!(iter_basic(&model, &x, &y, 0.01, 0.02, 3, DataRange::default()).is_err());
        let spec = AttackSpec {
            method: AttackMethod::IterLl,
            epsilon: 0.01,
            alpha: 0.02,
            iters: None,
            rng_seed: 0,
        };
        assert!(run_attack(&model, &x, &y, &spec, DataRange::default()).is_err());
    }

    #[test]
    fn fgsm_pred_equals_fgsm_when_prediction_correct() {
        let model = toy_model(19);
        let (x, _) = toy_batch(20, 12);
        let preds = model.predict_classes(&x).unwrap();
        let range = DataRange::default();
        let a = fgsm(&model, &x, &preds, 0.03, range).unwrap();
        let b = fast_variant(&model, &x, &preds, 0.03, AttackMethod::FgsmPred, range).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fast_grad_norms_are_exact_before_range_clip() {
        let model = toy_model(21);
        let (x, y) = toy_batch(22, 6);
        let eps = 0.04;
        let wide = DataRange {
            lo: -100.0,
            hi: 100.0,
        };
        let l2 = fast_variant(&model, &x, &y, eps, AttackMethod::FastGradL2, wide).unwrap();
        let linf = fast_variant(&model, &x, &y, eps, AttackMethod::FastGradLinf, wide).unwrap();
        for i in 0..x.rows() {
            let d2: f64 = l2
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&a, &c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            assert!((d2 - eps).abs() < 1e-12, "row {i}: l2 {d2}");
            let dinf: f64 = linf
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&a, &c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!((dinf - eps).abs() < 1e-12, "row {i}: linf {dinf}");
        }
    }

    #[test]
    fn zero_gradient_returns_clean_input() {
        let mut model = toy_model(23);
        for p in model.params_mut() {
            p.data_mut().fill(0.0);
        }
        let (x, y) = toy_batch(24, 5);
        let range = DataRange::default();
        for method in [
            AttackMethod::Fgsm,
            AttackMethod::FastGradL2,
            AttackMethod::FastGradLinf,
        ] {
            let spec = AttackSpec::new(method, 0.1);
            let out = run_attack(&model, &x, &y, &spec, range).unwrap();
            assert_eq!(out.adv, x, "{method}");
        }
    }

    #[test]
    fn noise_baselines_contracts() {
        let (x, _) = toy_batch(26, 5);
        let wide = DataRange {
            lo: -100.0,
            hi: 100.0,
        };
        let mut rng = stream(1, Purpose::Attack, 0);
        let out = noise_baseline(&x, 0.0, AttackMethod::NoiseSign, wide, &mut rng).unwrap();
        assert_eq!(out, x);
        let out = noise_baseline(&x, 0.0, AttackMethod::NoiseTruncnormal, wide, &mut rng).unwrap();
        assert_eq!(out, x);

        let eps = 0.2;
        let out = noise_baseline(&x, eps, AttackMethod::NoiseSign, wide, &mut rng).unwrap();
        for (a, c) in out.data().iter().zip(x.data()) {
            let d = (a - c).abs();
            assert!((d - eps).abs() < 1e-15, "components must sit at +-eps");
        }
    }

    #[test]
    fn attacks_are_deterministic_in_seed() {
        let model = toy_model(27);
        let (x, y) = toy_batch(28, 6);
        for method in AttackMethod::ALL {
            let spec = AttackSpec::new(method, 0.05).with_seed(99);
            let a = run_attack(&model, &x, &y, &spec, DataRange::default()).unwrap();
            let b = run_attack(&model, &x, &y, &spec, DataRange::default()).unwrap();
            assert_eq!(a.adv.data(), b.adv.data(), "{method}");
        }
    }

    #[test]
    fn unknown_method_message_lists_valid_names() {
        let err = "pgd".parse::<AttackMethod>().unwrap_err();
        let msg = err.to_string();
        for m in AttackMethod::ALL {
            assert!(msg.contains(m.name()), "{msg}");
        }
    }
}
