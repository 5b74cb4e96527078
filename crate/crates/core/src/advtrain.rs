//! Mixed-minibatch adversarial training: k of m examples in every batch are
//! replaced by adversarial counterparts generated from the current model,
//! and the loss weighs the two groups as
//! `(sum clean + lambda * sum adv) / ((m-k) + lambda k)`.

use crate::attacks::{
    fast_variant, fgsm, noise_baseline, one_step_target, run_attack, sample_symmetric_truncnormal,
    select_target, AttackMethod, AttackSpec, DataRange, TargetPolicy, PIXEL_SCALE,
};
use crate::autodiff::{smoothed_labels, Tensor};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::rng::{stream, Purpose};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Per-example epsilon schedule, in pixel units ([0,255] scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EpsSchedule {
    Fixed { epsilon: f64 },
    TruncNormal { sigma: f64, bound: f64 },
}

impl EpsSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EpsSchedule::Fixed { epsilon } => {
                if epsilon < 0.0 {
                    return Err(Error::Config(format!(
                        "fixed epsilon must be non-negative, got {epsilon}"
                    )));
                }
            }
            EpsSchedule::TruncNormal { sigma, bound } => {
                if !(bound > 0.0) {
                    return Err(Error::Config(format!("bound must be positive, got {bound}")));
                }
                if !(sigma > 0.0) {
                    return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
                }
            }
        }
        Ok(())
    }
}

/// Draw one epsilon in pixel units: the fixed constant, or |z| for
/// z ~ Normal(0, sigma) rejection-sampled until |z| <= bound.
pub fn sample_epsilon(schedule: EpsSchedule, rng: &mut impl Rng) -> Result<f64> {
    schedule.validate()?;
    Ok(match schedule {
        EpsSchedule::Fixed { epsilon } => epsilon,
        EpsSchedule::TruncNormal { sigma, bound } => {
            sample_symmetric_truncnormal(sigma, bound, rng).abs()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    RmsProp { lr: f64, decay: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn rmsprop_default() -> Self {
        OptimizerKind::RmsProp {
            lr: 1e-3,
            decay: 0.9,
            eps: 1e-8,
        }
    }

    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd { lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Minibatch size.
    pub m: usize,
    /// Adversarial examples per minibatch, 0 <= k <= m.
    pub k: usize,
    /// Relative weight of adversarial losses.
    pub lambda: f64,
    /// Attack template for the adversarial half of the batch; its epsilon
    /// field is ignored in favor of the schedule.
    pub attack: AttackSpec,
    pub eps_schedule: EpsSchedule,
    /// Steps before any adversarial examples enter the batches.
    pub delay_steps: u64,
    pub optimizer: OptimizerKind,
    pub total_steps: u64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// lambda = 0.3, m = 32, k = 16 defaults with a truncnormal(8, 16)
    /// pixel-unit epsilon schedule.
    pub fn default_adversarial(total_steps: u64) -> Self {
        TrainConfig {
            m: 32,
            k: 16,
            lambda: 0.3,
            attack: AttackSpec::new(AttackMethod::StepLl, 0.0),
            eps_schedule: EpsSchedule::TruncNormal {
                sigma: 8.0,
                bound: 16.0,
            },
            delay_steps: 0,
            optimizer: OptimizerKind::rmsprop_default(),
            total_steps,
            label_smoothing: 0.0,
            weight_decay: 1e-4,
            seed: 0,
        }
    }

    /// Plain training: k = 0.
    pub fn default_clean(total_steps: u64) -> Self {
        let mut cfg = Self::default_adversarial(total_steps);
        cfg.k = 0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("minibatch size m must be positive".into()));
        }
        if self.k > self.m {
            return Err(Error::Config(format!("k {} exceeds m {}", self.k, self.m)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.eps_schedule.validate()
    }
}

/// Weighted mixed loss over per-example losses:
/// (sum clean + lambda * sum adv) / ((m-k) + lambda k).
pub fn mixed_loss(
    clean_losses: &[f64],
    adv_losses: &[f64],
    m: usize,
    k: usize,
    lambda: f64,
) -> Result<f64> {
    if clean_losses.len() != m - k || adv_losses.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {} clean and {} adversarial losses, got {} and {}",
            m - k,
            k,
            clean_losses.len(),
            adv_losses.len()
        )));
    }
    let norm = (m - k) as f64 + lambda * k as f64;
    if norm == 0.0 {
        return Err(Error::InvalidArgument(
            "loss normalizer (m-k) + lambda k is zero".into(),
        ));
    }
    let clean: f64 = clean_losses.iter().sum();
    let adv: f64 = adv_losses.iter().sum();
    Ok((clean + lambda * adv) / norm)
}

/// One training-step row of the log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub clean_term: f64,
    pub adv_term: f64,
    pub k_used: usize,
    /// Pixel-unit epsilon draws for the replaced examples.
    pub eps_draws_pixel: Vec<f64>,
    /// SHA-256 over the adversarial rows, for pre-update provenance checks.
    pub adv_digest: Option<String>,
}

/// Validation row, written at each epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub step: u64,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn step_csv(&self) -> String {
        let mut out = String::from("step,loss,clean_term,adv_term,k,eps_draws_pixel\n");
        for r in &self.steps {
            let draws = r
                .eps_draws_pixel
                .iter()
                .map(|e| format!("{e:.4}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.clean_term, r.adv_term, r.k_used, draws
            ));
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("step,clean_acc,adv_acc\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}\n", r.step, r.clean_acc, r.adv_acc));
        }
        out
    }
}

/// RMSProp running state: one squared-gradient average per parameter.
#[derive(Debug, Clone)]
pub struct RmsState {
    sq_avg: Vec<Tensor>,
}

impl RmsState {
    pub fn new(params: &[Tensor]) -> Self {
        RmsState {
            sq_avg: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
        }
    }
}

/// s <- decay*s + (1-decay)*g^2; p <- p - lr*g/(sqrt(s) + eps).
pub fn rmsprop_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut RmsState,
    lr: f64,
    decay: f64,
    eps: f64,
) {
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.sq_avg) {
        for ((pv, &gv), sv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(s.data_mut().iter_mut())
        {
            *sv = decay * *sv + (1.0 - decay) * gv * gv;
            *pv -= lr * gv / (sv.sqrt() + eps);
        }
    }
}

pub fn sgd_update(params: &mut [Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

/// Algorithm-1 trainer: owns the model and optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    rms: RmsState,
    range: DataRange,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        // The training cost's smoothing rides with the model so that
        // gradient-based attacks differentiate the same J.
        model.set_label_smoothing(config.label_smoothing)?;
        let rms = RmsState::new(model.params());
        Ok(Trainer {
            model,
            config,
            rms,
            range: DataRange::default(),
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Generate the adversarial counterparts of `x` rows (one epsilon per
    /// example, in data units) with the configured one-step or iterative
    /// method, against the current model state.
    fn generate_adversarial(
        &self,
        x: &Tensor,
        y: &[usize],
        eps_data: &[f64],
        step_index: u64,
    ) -> Result<Tensor> {
        let model = &self.model;
        let method = self.config.attack.method;
        let mut rng = stream(self.config.seed, Purpose::Attack, step_index);
        let range = self.range;
        let n = x.rows();
        let d = x.cols();
        let mut out = Vec::with_capacity(n * d);
        match method {
            // One-step methods support per-example epsilon directly: the
            // per-row gradients come from one batched backward pass.
            AttackMethod::Fgsm
            | AttackMethod::FgsmPred
            | AttackMethod::FastEntropy
            | AttackMethod::StepLl
            | AttackMethod::StepRnd
            | AttackMethod::FastGradL2
            | AttackMethod::FastGradLinf
            | AttackMethod::NoiseSign
            | AttackMethod::NoiseTruncnormal => {
                for i in 0..n {
                    let xi = Tensor::from_rows(1, d, x.row(i).to_vec())?;
                    let yi = [y[i]];
                    let eps = eps_data[i];
                    let row = match method {
                        AttackMethod::Fgsm => fgsm(model, &xi, &yi, eps, range)?,
                        AttackMethod::StepLl => {
                            let t = select_target(model, &xi, TargetPolicy::LeastLikely, &mut rng)?;
                            one_step_target(model, &xi, &t, eps, range)?
                        }
                        AttackMethod::StepRnd => {
                            let t = select_target(model, &xi, TargetPolicy::Random, &mut rng)?;
                            one_step_target(model, &xi, &t, eps, range)?
                        }
                        AttackMethod::NoiseSign | AttackMethod::NoiseTruncnormal => {
                            noise_baseline(&xi, eps, method, range, &mut rng)?
                        }
                        _ => fast_variant(model, &xi, &yi, eps, method, range)?,
                    };
                    out.extend_from_slice(row.data());
                }
            }
            AttackMethod::IterBasic | AttackMethod::IterLl => {
                for i in 0..n {
                    let xi = Tensor::from_rows(1, d, x.row(i).to_vec())?;
                    let mut spec = self.config.attack.clone();
                    spec.epsilon = eps_data[i];
                    spec.alpha = spec.alpha.min(spec.epsilon);
                    if spec.epsilon == 0.0 {
                        out.extend_from_slice(xi.data());
                        continue;
                    }
                    let batch = run_attack(model, &xi, &[y[i]], &spec, range)?;
                    out.extend_from_slice(batch.adv.data());
                }
            }
        }
        Tensor::from_rows(n, d, out)
    }

    /// One optimizer update on a full minibatch: shuffle, replace the first
    /// k examples with adversarial counterparts (generated from the current
    /// model state), and step on the weighted loss plus weight decay.
    pub fn step(&mut self, batch_x: &Tensor, batch_y: &[usize], step_index: u64) -> Result<StepRecord> {
        let cfg = &self.config;
        let m = cfg.m;
        if batch_x.rows() != m || batch_y.len() != m {
            return Err(Error::Shape(format!(
                "train batch has {} examples, expected m = {m}",
                batch_x.rows()
            )));
        }
        let k = if step_index < cfg.delay_steps { 0 } else { cfg.k };

        // Per-step shuffle so the replaced positions carry no ordering bias.
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, step_index));
        let d = batch_x.cols();
        let mut x_data = Vec::with_capacity(m * d);
        let mut y = Vec::with_capacity(m);
        for &i in &perm {
            x_data.extend_from_slice(batch_x.row(i));
            y.push(batch_y[i]);
        }
        let mut x = Tensor::from_rows(m, d, x_data)?;

        let mut eps_draws = Vec::with_capacity(k);
        let mut adv_digest = None;
        if k > 0 {
            let mut eps_rng = stream(cfg.seed, Purpose::EpsDraw, step_index);
            for _ in 0..k {
                eps_draws.push(sample_epsilon(cfg.eps_schedule, &mut eps_rng)?);
            }
            let eps_data: Vec<f64> = eps_draws.iter().map(|e| e / PIXEL_SCALE).collect();
            let head = Tensor::from_rows(k, d, x.data()[..k * d].to_vec())?;
            let adv = self.generate_adversarial(&head, &y[..k], &eps_data, step_index)?;
            let mut hasher = Sha256::new();
            for v in adv.data() {
                hasher.update(v.to_le_bytes());
            }
            adv_digest = Some(format!("{:x}", hasher.finalize()));
            x.data_mut()[..k * d].copy_from_slice(adv.data());
        }

        // Weighted loss tape: lambda on the adversarial rows, then the
        // normalizer, plus coupled L2 decay on the weight matrices.
        let q = smoothed_labels(&y, self.model.config().num_classes, cfg.label_smoothing)?;
        let mut dropout_rng = stream(cfg.seed, Purpose::Dropout, step_index);
        let (mut tb, logits) = self.model.record_logits_train(&x, &mut dropout_rng)?;
        let losses = tb.softmax_xent(logits, q)?;
        let norm = (m - k) as f64 + cfg.lambda * k as f64;
        let mut weights = vec![1.0 / norm; m];
        for w in weights.iter_mut().take(k) {
            *w = cfg.lambda / norm;
        }
        let loss_values = tb.value(losses).data().to_vec();
        let mut root = tb.weighted_sum(losses, weights)?;
        if cfg.weight_decay > 0.0 {
            // L2 decay on the weight matrices (even parameter indices).
            let param_nodes = tb.param_node_ids().to_vec();
            let mut decay_total = None;
            for idx in (0..self.model.params().len()).step_by(2) {
                let sq = tb.sum_squares(param_nodes[idx]);
                decay_total = Some(match decay_total {
                    None => sq,
                    Some(acc) => tb.add(acc, sq)?,
                });
            }
            if let Some(total) = decay_total {
                let scaled = tb.scale(total, cfg.weight_decay);
                root = tb.add(root, scaled)?;
            }
        }
        let loss = tb.value(root).item();
        let tape = tb.finish(root);
        let grads = tape.backward(&Tensor::scalar(1.0))?;
        let (_, param_grads) = grads.into_parts();

        match cfg.optimizer {
            OptimizerKind::RmsProp { lr, decay, eps } => rmsprop_update(
                self.model.params_mut(),
                &param_grads,
                &mut self.rms,
                lr,
                decay,
                eps,
            ),
            OptimizerKind::Sgd { lr } => sgd_update(self.model.params_mut(), &param_grads, lr),
        }
        self.model.train_steps_done += 1;

        let adv_sum: f64 = loss_values[..k].iter().sum();
        let clean_sum: f64 = loss_values[k..].iter().sum();
        Ok(StepRecord {
            step: step_index,
            loss,
            clean_term: clean_sum / norm,
            adv_term: cfg.lambda * adv_sum / norm,
            k_used: k,
            eps_draws_pixel: eps_draws,
            adv_digest,
        })
    }

    /// Run `total_steps` over seeded epoch permutations of `data`,
    /// validating on `val` at each epoch boundary.
    pub fn train(&mut self, data: &Dataset, val: Option<&Dataset>) -> Result<TrainLog> {
        let cfg = self.config.clone();
        if data.n() < cfg.m {
            return Err(Error::InvalidArgument(format!(
                "dataset of {} examples cannot fill a minibatch of {}",
                data.n(),
                cfg.m
            )));
        }
        let mut log = TrainLog::default();
        let batches_per_epoch = data.n() / cfg.m;
        let mut step = 0u64;
        let mut epoch = 0u64;
        'outer: loop {
            let mut order: Vec<usize> = (0..data.n()).collect();
            order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, u64::MAX - epoch));
            for b in 0..batches_per_epoch {
                if step >= cfg.total_steps {
                    break 'outer;
                }
                let idx = &order[b * cfg.m..(b + 1) * cfg.m];
                let (x, y) = data.gather(idx)?;
                log.steps.push(self.step(&x, &y, step)?);
                step += 1;
            }
            epoch += 1;
            if let Some(val) = val {
                log.epochs.push(self.validate(val, step)?);
            }
            if step >= cfg.total_steps {
                break;
            }
        }
        if let (Some(val), true) = (val, log.epochs.last().map(|e| e.step) != Some(step)) {
            log.epochs.push(self.validate(val, step)?);
        }
        Ok(log)
    }

    /// Clean and adversarial top-1 accuracy on `val`, using the attack
    /// template at a representative epsilon (the fixed value, or sigma for
    /// the truncated-normal schedule).
    fn validate(&self, val: &Dataset, step: u64) -> Result<EpochRecord> {
        let logits = self.model.predict(&val.features)?;
        let clean_acc = top1_accuracy(&logits, &val.labels);
        let eps_pixel = match self.config.eps_schedule {
            EpsSchedule::Fixed { epsilon } => epsilon,
            EpsSchedule::TruncNormal { sigma, .. } => sigma,
        };
        let mut spec = self.config.attack.clone();
        spec.epsilon = eps_pixel / PIXEL_SCALE;
        spec.alpha = spec.alpha.min(spec.epsilon.max(f64::MIN_POSITIVE));
        let adv_acc = if spec.epsilon > 0.0 {
            let batch = run_attack(&self.model, &val.features, &val.labels, &spec, self.range)?;
            let logits = self.model.predict(&batch.adv)?;
            top1_accuracy(&logits, &val.labels)
        } else {
            clean_acc
        };
        Ok(EpochRecord {
            step,
            clean_acc,
            adv_acc,
        })
    }
}

pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ActivationKind;
    use crate::data_io::synth_blobs;
    use crate::model::ModelConfig;

    fn blob_config(seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            num_classes: 3,
            hidden_widths: vec![16],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed,
        }
    }

    fn quick_train_config(total_steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default_adversarial(total_steps);
        cfg.m = 8;
        cfg.k = 4;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn mixed_loss_formula_cases() {
        // k = 0: plain mean.
        let clean = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mixed_loss(&clean, &[], 4, 0, 0.3).unwrap(), 2.5);

        // m=32, k=16, lambda=0.3: normalizer 20.8.
        let clean = vec![1.0; 16];
        let adv = vec![2.0; 16];
        let loss = mixed_loss(&clean, &adv, 32, 16, 0.3).unwrap();
        let expect = (16.0 + 0.3 * 32.0) / 20.8;
        assert!((loss - expect).abs() < 1e-15);

        // k = m: mean of adversarial losses.
        let adv = [1.0, 3.0];
        let loss = mixed_loss(&[], &adv, 2, 2, 0.7).unwrap();
        assert!((loss - 2.0).abs() < 1e-15);

        assert!(mixed_loss(&clean, &adv, 32, 3, 0.3).is_err());
    }

    #[test]
    fn sample_epsilon_fixed_and_bounds() {
        let mut rng = stream(1, Purpose::EpsDraw, 0);
        for _ in 0..10 {
            assert_eq!(
                sample_epsilon(EpsSchedule::Fixed { epsilon: 8.0 }, &mut rng).unwrap(),
                8.0
            );
        }
        let schedule = EpsSchedule::TruncNormal {
            sigma: 8.0,
            bound: 16.0,
        };
        for _ in 0..100_000 {
            let e = sample_epsilon(schedule, &mut rng).unwrap();
            assert!((0.0..=16.0).contains(&e), "{e}");
        }
        assert!(sample_epsilon(
            EpsSchedule::TruncNormal {
                sigma: 8.0,
                bound: 0.0
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn rmsprop_zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let grads = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut state = RmsState::new(&params);
        rmsprop_update(&mut params, &grads, &mut state, 0.1, 0.9, 1e-8);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        let mut params = vec![Tensor::from_vec(vec![0.0])];
        let g = 0.37;
        let grads = vec![Tensor::from_vec(vec![g])];
        let mut state = RmsState::new(&params);
        let (lr, decay, eps) = (0.01, 0.9, 1e-8);
        rmsprop_update(&mut params, &grads, &mut state, lr, decay, eps);
        let expect = -lr * g / (((1.0 - decay) * g * g).sqrt() + eps);
        assert!((params[0].data()[0] - expect).abs() < 1e-15);
        // magnitude close to lr/sqrt(1-decay), direction -sign(g)
        assert!((params[0].data()[0].abs() - lr / (1.0 - decay).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_converges_on_scalar_quadratic() {
        // f(p) = p^2 from p = 1: |p| < 1e-3 within 500 steps at lr 0.01.
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let mut state = RmsState::new(&params);
        let mut steps = 0;
        for i in 0..500 {
            let p = params[0].data()[0];
            let grads = vec![Tensor::from_vec(vec![2.0 * p])];
            rmsprop_update(&mut params, &grads, &mut state, 0.01, 0.9, 1e-8);
            if params[0].data()[0].abs() < 1e-3 {
                steps = i + 1;
                break;
            }
        }
        assert!(steps > 0 && steps <= 500, "did not converge: {}", params[0].data()[0]);
    }

    #[test]
    fn delayed_training_matches_k_zero_trajectory() {
        let data = synth_blobs(3, 30, 6, 0.08, 77).unwrap();
        let mut plain_cfg = quick_train_config(12);
        plain_cfg.k = 0;
        let mut delayed_cfg = quick_train_config(12);
        delayed_cfg.delay_steps = u64::MAX;

        let mut a = Trainer::new(Model::init(blob_config(3)).unwrap(), plain_cfg).unwrap();
        let mut b = Trainer::new(Model::init(blob_config(3)).unwrap(), delayed_cfg).unwrap();
        a.train(&data, None).unwrap();
        b.train(&data, None).unwrap();
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn k_equals_m_with_zero_epsilon_matches_clean_update() {
        let data = synth_blobs(3, 30, 6, 0.08, 78).unwrap();
        let mut adv_cfg = quick_train_config(6);
        adv_cfg.k = adv_cfg.m;
        adv_cfg.lambda = 1.0;
        adv_cfg.eps_schedule = EpsSchedule::Fixed { epsilon: 0.0 };
        adv_cfg.attack = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let mut clean_cfg = adv_cfg.clone();
        clean_cfg.k = 0;

        let mut a = Trainer::new(Model::init(blob_config(4)).unwrap(), adv_cfg).unwrap();
        let mut b = Trainer::new(Model::init(blob_config(4)).unwrap(), clean_cfg).unwrap();
        a.train(&data, None).unwrap();
        b.train(&data, None).unwrap();
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let data = synth_blobs(3, 40, 6, 0.1, 79).unwrap();
        let run = || {
            let mut t =
                Trainer::new(Model::init(blob_config(5)).unwrap(), quick_train_config(10)).unwrap();
            let log = t.train(&data, Some(&data)).unwrap();
            (t.into_model(), log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        for (pa, pb) in m1.params().iter().zip(m2.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn adversarial_rows_come_from_pre_update_model() {
        let data = synth_blobs(3, 30, 6, 0.1, 80).unwrap();
        let mut cfg = quick_train_config(3);
        cfg.eps_schedule = EpsSchedule::Fixed { epsilon: 8.0 };
        cfg.attack = AttackSpec::new(AttackMethod::StepLl, 0.0);
        let mut t = Trainer::new(Model::init(blob_config(6)).unwrap(), cfg.clone()).unwrap();

        let (x, y) = data.gather(&(0..cfg.m).collect::<Vec<_>>()).unwrap();
        let frozen = t.model.clone();
        let record = t.step(&x, &y, 0).unwrap();

        // Regenerate with the frozen pre-step model: digests must agree.
        let frozen_trainer = Trainer::new(frozen, cfg.clone()).unwrap();
        let mut perm: Vec<usize> = (0..cfg.m).collect();
        perm.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, 0));
        let d = x.cols();
        let mut shuffled = Vec::new();
        let mut ys = Vec::new();
        for &i in &perm {
            shuffled.extend_from_slice(x.row(i));
            ys.push(y[i]);
        }
        let shuffled = Tensor::from_rows(cfg.m, d, shuffled).unwrap();
        let mut eps_rng = stream(cfg.seed, Purpose::EpsDraw, 0);
        let eps: Vec<f64> = (0..cfg.k)
            .map(|_| sample_epsilon(cfg.eps_schedule, &mut eps_rng).unwrap() / PIXEL_SCALE)
            .collect();
        let head = Tensor::from_rows(cfg.k, d, shuffled.data()[..cfg.k * d].to_vec()).unwrap();
        let adv = frozen_trainer
            .generate_adversarial(&head, &ys[..cfg.k], &eps, 0)
            .unwrap();
        let mut hasher = Sha256::new();
        for v in adv.data() {
            hasher.update(v.to_le_bytes());
        }
        assert_eq!(record.adv_digest.unwrap(), format!("{:x}", hasher.finalize()));
    }

    #[test]
    fn loss_decomposition_identity() {
        use rand::Rng;
        let mut rng = stream(9, Purpose::Synth, 3);
        for _ in 0..200 {
            let m = rng.gen_range(2..20usize);
            let k = rng.gen_range(0..=m);
            let lambda = rng.gen_range(0.05..3.0);
            let clean: Vec<f64> = (0..m - k).map(|_| rng.gen_range(0.0..5.0)).collect();
            let adv: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
            let got = mixed_loss(&clean, &adv, m, k, lambda).unwrap();
            let norm = (m - k) as f64 + lambda * k as f64;
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let alt = ((m - k) as f64 * mean(&clean) + lambda * k as f64 * mean(&adv)) / norm;
            assert!((got - alt).abs() <= 1e-12, "{got} vs {alt}");
        }
    }
}
