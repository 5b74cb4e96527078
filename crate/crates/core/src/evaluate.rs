//! Measurement protocols: clean/adversarial accuracy tables, label-leak
//! detection, transferability matrices, and the capacity/activation sweep
//! drivers.

use crate::advtrain::{TrainConfig, Trainer};
use crate::attacks::{run_attack, AttackMethod, AttackSpec, PIXEL_SCALE};
use crate::autodiff::{ActivationKind, Tensor};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::{stream, Purpose};
use rand::seq::SliceRandom;
use serde::de::Visitor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// A rate that may be undefined (empty denominator). Serializes as a number
/// or the sentinel string "undefined", never as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(*v),
            Rate::Undefined => None,
        }
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v}"),
            Rate::Undefined => write!(f, "undefined"),
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Defined(v) => serializer.serialize_f64(*v),
            Rate::Undefined => serializer.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct RateVisitor;
        impl<'de> Visitor<'de> for RateVisitor {
            type Value = Rate;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or the string \"undefined\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Rate, E> {
                Ok(Rate::Defined(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Rate, E> {
                Ok(Rate::Defined(v as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Rate, E> {
                Ok(Rate::Defined(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Rate, E> {
                if v == "undefined" {
                    Ok(Rate::Undefined)
                } else {
                    Err(E::custom(format!("unexpected rate string {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(RateVisitor)
    }
}

/// A rate with its provenance counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub numerator: usize,
    pub denominator: usize,
    pub rate: Rate,
}

impl RateCell {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        let rate = if denominator == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(numerator as f64 / denominator as f64)
        };
        RateCell {
            numerator,
            denominator,
            rate,
        }
    }
}

/// One accuracy measurement: top-1 and top-k fractions over `n` examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub model_id: String,
    /// `None` means clean evaluation.
    pub method: Option<AttackMethod>,
    pub epsilon_pixel: f64,
    pub topk_level: usize,
    pub top1: f64,
    pub topk: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub model_id: String,
    pub method: AttackMethod,
    pub epsilon_pixel: f64,
    pub topk_level: usize,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
    pub ratio: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakRecord {
    pub model_id: String,
    /// Raw data-unit epsilon (the [0,1] convention).
    pub epsilon_raw: f64,
    pub count: usize,
    pub leaked_ids: Vec<usize>,
    pub n: usize,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    TransferRate,
    ErrorRate,
}

/// Source x target grid of rates for one (method, epsilon, top-k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub kind: TransferKind,
    pub method: AttackMethod,
    pub epsilon_pixel: f64,
    pub topk_level: usize,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub cells: Vec<Vec<RateCell>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<AccuracyRecord>,
    pub ratios: Vec<RatioRecord>,
    pub leaks: Vec<LeakRecord>,
    pub transfers: Vec<TransferMatrix>,
}

impl EvalReport {
    /// Flat CSV of the accuracy records: one row per (record, top-k level),
    /// stable field ordering.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,method,epsilon_pixel,topk,accuracy,n\n");
        for r in &self.records {
            let method = r.method.map_or("clean".to_string(), |m| m.to_string());
            out.push_str(&format!(
                "{},{},{},1,{},{}\n",
                r.model_id, method, r.epsilon_pixel, r.top1, r.n
            ));
            if r.topk_level != 1 {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.model_id, method, r.epsilon_pixel, r.topk_level, r.topk, r.n
                ));
            }
        }
        out
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.records.extend(other.records);
        self.ratios.extend(other.ratios);
        self.leaks.extend(other.leaks);
        self.transfers.extend(other.transfers);
    }
}

/// True when `label` is among the k highest logits. Ties resolve toward
/// lower indices, consistent with argmax.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let mut rank = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[label] || (v == row[label] && j < label) {
            rank += 1;
        }
    }
    rank < k
}

fn counts(logits: &Tensor, labels: &[usize], topk: usize) -> (usize, usize) {
    let mut top1 = 0;
    let mut topk_hits = 0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        if in_top_k(row, labels[i], 1) {
            top1 += 1;
        }
        if in_top_k(row, labels[i], topk) {
            topk_hits += 1;
        }
    }
    (top1, topk_hits)
}

/// Clean or adversarial accuracy: with an attack, every example is
/// perturbed before classification.
pub fn accuracy(
    model: &Model,
    model_id: &str,
    data: &Dataset,
    attack: Option<&AttackSpec>,
    topk: usize,
) -> Result<AccuracyRecord> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (logits, epsilon_pixel, method) = match attack {
        None => (model.predict(&data.features)?, 0.0, None),
        Some(spec) => {
            let batch = run_attack(model, &data.features, &data.labels, spec, data.range)?;
            (
                model.predict(&batch.adv)?,
                spec.epsilon * PIXEL_SCALE,
                Some(spec.method),
            )
        }
    };
    let (top1, topk_hits) = counts(&logits, &data.labels, topk);
    Ok(AccuracyRecord {
        model_id: model_id.to_string(),
        method,
        epsilon_pixel,
        topk_level: topk,
        top1: top1 as f64 / data.n() as f64,
        topk: topk_hits as f64 / data.n() as f64,
        n: data.n(),
    })
}

/// Label-leak count: examples whose adversarial image built WITH the true
/// label is classified correctly while the counterpart built WITHOUT the
/// true label is misclassified. Returns the count and the example ids.
///
/// Both methods must be one-step. For examples the model classifies
/// correctly, a predicted-label method produces the identical image, so
/// leaks can only come from examples the model gets wrong on clean input;
/// the count measures how many of those the true-label construction
/// "rescues".
pub fn label_leak_count(
    model: &Model,
    data: &Dataset,
    epsilon: f64,
    true_label_method: AttackMethod,
    label_free_method: AttackMethod,
) -> Result<(usize, Vec<usize>)> {
    for m in [true_label_method, label_free_method] {
        if m.is_iterative() {
            return Err(Error::InvalidArgument(format!(
                "label leak comparison requires one-step methods, got {m}"
            )));
        }
    }
    if !true_label_method.uses_true_label() || label_free_method.uses_true_label() {
        return Err(Error::InvalidArgument(format!(
            "leak predicate needs a true-label method vs a label-free method, got {true_label_method} vs {label_free_method}"
        )));
    }
    let with_label = run_attack(
        model,
        &data.features,
        &data.labels,
        &AttackSpec::new(true_label_method, epsilon),
        data.range,
    )?;
    let without_label = run_attack(
        model,
        &data.features,
        &data.labels,
        &AttackSpec::new(label_free_method, epsilon),
        data.range,
    )?;
    let logits_with = model.predict(&with_label.adv)?;
    let logits_without = model.predict(&without_label.adv)?;
    let mut leaked = Vec::new();
    for i in 0..data.n() {
        let with_correct = in_top_k(logits_with.row(i), data.labels[i], 1);
        let without_correct = in_top_k(logits_without.row(i), data.labels[i], 1);
        if with_correct && !without_correct {
            leaked.push(i);
        }
    }
    Ok((leaked.len(), leaked))
}

/// Outcome of one source-generated batch classified on source and target:
/// both transfer metrics computed from the same cached adversarial batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub transfer: RateCell,
    pub error_rate: RateCell,
    /// SHA-256 of the cached adversarial batch both metrics used.
    pub adv_digest: String,
}

/// Generate adversarial examples on `source` once, then classify them with
/// both models. The transfer rate conditions on source-successful examples
/// (clean correct, adversarial wrong); the error rate uses all of them.
pub fn transfer_pair(
    source: &Model,
    target: &Model,
    sample: &Dataset,
    spec: &AttackSpec,
    topk: usize,
) -> Result<TransferOutcome> {
    if sample.n() == 0 {
        return Err(Error::InvalidArgument("empty transfer sample".into()));
    }
    let batch = run_attack(source, &sample.features, &sample.labels, spec, sample.range)?;
    let mut hasher = Sha256::new();
    for v in batch.adv.data() {
        hasher.update(v.to_le_bytes());
    }
    let adv_digest = format!("{:x}", hasher.finalize());

    let source_clean = source.predict(&sample.features)?;
    let source_adv = source.predict(&batch.adv)?;
    let target_adv = target.predict(&batch.adv)?;

    let mut den = 0;
    let mut num = 0;
    let mut err = 0;
    for i in 0..sample.n() {
        let y = sample.labels[i];
        let target_wrong = !in_top_k(target_adv.row(i), y, topk);
        if target_wrong {
            err += 1;
        }
        let source_success =
            in_top_k(source_clean.row(i), y, topk) && !in_top_k(source_adv.row(i), y, topk);
        if source_success {
            den += 1;
            if target_wrong {
                num += 1;
            }
        }
    }
    Ok(TransferOutcome {
        transfer: RateCell::new(num, den),
        error_rate: RateCell::new(err, sample.n()),
        adv_digest,
    })
}

/// Fraction of source-successful adversarial examples also misclassified by
/// the target. Undefined when the source has no successful examples.
pub fn transfer_rate(
    source: &Model,
    target: &Model,
    sample: &Dataset,
    spec: &AttackSpec,
    topk: usize,
) -> Result<RateCell> {
    Ok(transfer_pair(source, target, sample, spec, topk)?.transfer)
}

/// Target error rate over ALL source-generated adversarial examples,
/// without prefiltering.
pub fn transferred_error_rate(
    source: &Model,
    target: &Model,
    sample: &Dataset,
    spec: &AttackSpec,
    topk: usize,
) -> Result<RateCell> {
    Ok(transfer_pair(source, target, sample, spec, topk)?.error_rate)
}

/// Both matrix kinds over source x target grids, one generation per
/// (source, spec).
pub fn transfer_matrices(
    sources: &[(String, &Model)],
    targets: &[(String, &Model)],
    sample: &Dataset,
    spec: &AttackSpec,
    topk: usize,
) -> Result<(TransferMatrix, TransferMatrix)> {
    let source_names: Vec<String> = sources.iter().map(|(n, _)| n.clone()).collect();
    let target_names: Vec<String> = targets.iter().map(|(n, _)| n.clone()).collect();
    let mut transfer_cells = Vec::new();
    let mut error_cells = Vec::new();
    for (_, source) in sources {
        // One generation per source; classify on every target.
        let batch = run_attack(source, &sample.features, &sample.labels, spec, sample.range)?;
        let source_clean = source.predict(&sample.features)?;
        let source_adv = source.predict(&batch.adv)?;
        let mut t_row = Vec::new();
        let mut e_row = Vec::new();
        for (_, target) in targets {
            let target_adv = target.predict(&batch.adv)?;
            let mut den = 0;
            let mut num = 0;
            let mut err = 0;
            for i in 0..sample.n() {
                let y = sample.labels[i];
                let target_wrong = !in_top_k(target_adv.row(i), y, topk);
                if target_wrong {
                    err += 1;
                }
                if in_top_k(source_clean.row(i), y, topk) && !in_top_k(source_adv.row(i), y, topk)
                {
                    den += 1;
                    if target_wrong {
                        num += 1;
                    }
                }
            }
            t_row.push(RateCell::new(num, den));
            e_row.push(RateCell::new(err, sample.n()));
        }
        transfer_cells.push(t_row);
        error_cells.push(e_row);
    }
    let make = |kind, cells| TransferMatrix {
        kind,
        method: spec.method,
        epsilon_pixel: spec.epsilon * PIXEL_SCALE,
        topk_level: topk,
        sources: source_names.clone(),
        targets: target_names.clone(),
        cells,
    };
    Ok((
        make(TransferKind::TransferRate, transfer_cells),
        make(TransferKind::ErrorRate, error_cells),
    ))
}

/// Adversarial accuracy divided by clean accuracy; undefined when the
/// clean accuracy is zero.
pub fn accuracy_ratio(
    model: &Model,
    model_id: &str,
    data: &Dataset,
    spec: &AttackSpec,
    topk: usize,
) -> Result<RatioRecord> {
    let clean = accuracy(model, model_id, data, None, topk)?;
    let adv = accuracy(model, model_id, data, Some(spec), topk)?;
    let ratio = if clean.top1 > 0.0 {
        Rate::Defined(adv.top1 / clean.top1)
    } else {
        Rate::Undefined
    };
    Ok(RatioRecord {
        model_id: model_id.to_string(),
        method: spec.method,
        epsilon_pixel: spec.epsilon * PIXEL_SCALE,
        topk_level: topk,
        clean_accuracy: clean.top1,
        adv_accuracy: adv.top1,
        ratio,
    })
}

/// Fixed seeded subsample without replacement.
pub fn sample_indices(n_total: usize, n_sample: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_total).collect();
    idx.shuffle(&mut stream(seed, Purpose::Subsample, 0));
    idx.truncate(n_sample.min(n_total));
    idx
}

/// Train one model per recipe; shared plumbing for the sweep drivers.
fn train_recipe(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
) -> Result<Model> {
    let model = Model::init(model_cfg.clone())?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    trainer.train(train_data, None)?;
    Ok(trainer.into_model())
}

/// For each width scale, train a plain and an adversarially trained model
/// from the same base seed policy and tabulate accuracy ratios across the
/// attack grid.
pub fn capacity_sweep(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    rhos: &[f64],
    grid: &[AttackSpec],
    train_data: &Dataset,
    eval_data: &Dataset,
    topk: usize,
) -> Result<EvalReport> {
    if rhos.is_empty() {
        return Err(Error::InvalidArgument("empty rho list".into()));
    }
    let mut report = EvalReport::default();
    for &rho in rhos {
        let mut model_cfg = base_model.clone();
        model_cfg.rho = rho;
        for adversarial in [false, true] {
            let mut train_cfg = base_train.clone();
            if !adversarial {
                train_cfg.k = 0;
            }
            let id = format!("rho{rho}_{}", if adversarial { "adv" } else { "clean" });
            let model = train_recipe(&model_cfg, &train_cfg, train_data)?;
            report.records.push(accuracy(&model, &id, eval_data, None, topk)?);
            for spec in grid {
                report
                    .records
                    .push(accuracy(&model, &id, eval_data, Some(spec), topk)?);
                report
                    .ratios
                    .push(accuracy_ratio(&model, &id, eval_data, spec, topk)?);
            }
        }
    }
    Ok(report)
}

/// One model per adversarial-count k (k = 0 is the plain baseline);
/// accuracy table across the attack grid.
pub fn k_sweep(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    ks: &[usize],
    grid: &[AttackSpec],
    train_data: &Dataset,
    eval_data: &Dataset,
    topk: usize,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty k list".into()));
    }
    let mut report = EvalReport::default();
    for &k in ks {
        let mut train_cfg = base_train.clone();
        train_cfg.k = k;
        let id = format!("k{k}");
        let model = train_recipe(base_model, &train_cfg, train_data)?;
        report.records.push(accuracy(&model, &id, eval_data, None, topk)?);
        for spec in grid {
            report
                .records
                .push(accuracy(&model, &id, eval_data, Some(spec), topk)?);
        }
    }
    Ok(report)
}

/// One adversarially trained model per activation; accuracy table across
/// the attack grid.
pub fn activation_comparison(
    activations: &[ActivationKind],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &[AttackSpec],
    train_data: &Dataset,
    eval_data: &Dataset,
    topk: usize,
) -> Result<EvalReport> {
    if activations.is_empty() {
        return Err(Error::InvalidArgument("empty activation list".into()));
    }
    let mut report = EvalReport::default();
    for &activation in activations {
        let mut model_cfg = base_model.clone();
        model_cfg.activation = activation;
        let id = format!("act_{activation}");
        let model = train_recipe(&model_cfg, base_train, train_data)?;
        report.records.push(accuracy(&model, &id, eval_data, None, topk)?);
        for spec in grid {
            report
                .records
                .push(accuracy(&model, &id, eval_data, Some(spec), topk)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synth_blobs;

    fn zero_model(input_dim: usize, classes: usize) -> Model {
        let mut model = Model::init(ModelConfig {
            input_dim,
            num_classes: classes,
            hidden_widths: vec![4],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 0,
        })
        .unwrap();
        for p in model.params_mut() {
            p.data_mut().fill(0.0);
        }
        model
    }

    fn trained_blob_model(seed: u64, data: &Dataset) -> Model {
        let mut cfg = TrainConfig::default_clean(60);
        cfg.m = 10;
        cfg.seed = seed;
        let model = Model::init(ModelConfig {
            input_dim: data.dim(),
            num_classes: data.num_classes,
            hidden_widths: vec![16],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed,
        })
        .unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        t.train(data, None).unwrap();
        t.into_model()
    }

    #[test]
    fn zero_weight_model_hits_class_share() {
        // All-zero logits predict class 0; balanced data -> exactly 1/C.
        let data = synth_blobs(10, 20, 4, 0.2, 3).unwrap();
        let model = zero_model(4, 10);
        let rec = accuracy(&model, "zero", &data, None, 3).unwrap();
        assert!((rec.top1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn attack_with_zero_epsilon_equals_clean() {
        let data = synth_blobs(3, 15, 6, 0.1, 4).unwrap();
        let model = trained_blob_model(1, &data);
        let clean = accuracy(&model, "m", &data, None, 3).unwrap();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let adv = accuracy(&model, "m", &data, Some(&spec), 3).unwrap();
        assert_eq!(clean.top1, adv.top1);
        assert_eq!(clean.topk, adv.topk);
    }

    #[test]
    fn topk_equal_to_class_count_is_always_one() {
        let data = synth_blobs(4, 10, 5, 0.3, 5).unwrap();
        let model = zero_model(5, 4);
        let rec = accuracy(&model, "zero", &data, None, 4).unwrap();
        assert_eq!(rec.topk, 1.0);
    }

    #[test]
    fn in_top_k_tie_handling_matches_argmax() {
        // Ties go to the lower index.
        let row = [1.0, 1.0, 0.0];
        assert!(in_top_k(&row, 0, 1));
        assert!(!in_top_k(&row, 1, 1));
        assert!(in_top_k(&row, 1, 2));
    }

    #[test]
    fn leak_count_zero_at_zero_epsilon() {
        let data = synth_blobs(3, 10, 6, 0.1, 6).unwrap();
        let model = trained_blob_model(2, &data);
        let (count, ids) =
            label_leak_count(&model, &data, 0.0, AttackMethod::Fgsm, AttackMethod::FgsmPred)
                .unwrap();
        assert_eq!(count, 0);
        assert!(ids.is_empty());
    }

    #[test]
    fn leak_predicates_are_disjoint_under_role_swap() {
        let data = synth_blobs(3, 20, 6, 0.25, 7).unwrap();
        let model = trained_blob_model(3, &data);
        let eps = 0.2;
        // Swapping roles inverts the predicate; the leaked sets must be
        // disjoint. Computed directly from the two prediction vectors.
        let a = run_attack(
            &model,
            &data.features,
            &data.labels,
            &AttackSpec::new(AttackMethod::Fgsm, eps),
            data.range,
        )
        .unwrap();
        let b = run_attack(
            &model,
            &data.features,
            &data.labels,
            &AttackSpec::new(AttackMethod::FgsmPred, eps),
            data.range,
        )
        .unwrap();
        let la = model.predict(&a.adv).unwrap();
        let lb = model.predict(&b.adv).unwrap();
        let mut fwd = Vec::new();
        let mut rev = Vec::new();
        for i in 0..data.n() {
            let ca = in_top_k(la.row(i), data.labels[i], 1);
            let cb = in_top_k(lb.row(i), data.labels[i], 1);
            if ca && !cb {
                fwd.push(i);
            }
            if cb && !ca {
                rev.push(i);
            }
        }
        for i in &fwd {
            assert!(!rev.contains(i));
        }
        let (count, ids) =
            label_leak_count(&model, &data, eps, AttackMethod::Fgsm, AttackMethod::FgsmPred)
                .unwrap();
        assert_eq!(ids, fwd);
        assert_eq!(count, fwd.len());
    }

    #[test]
    fn leak_rejects_iterative_or_mismatched_methods() {
        let data = synth_blobs(3, 5, 6, 0.1, 8).unwrap();
        let model = zero_model(6, 3);
        assert!(label_leak_count(
            &model,
            &data,
            0.1,
            AttackMethod::IterBasic,
            AttackMethod::FgsmPred
        )
        .is_err());
        assert!(label_leak_count(
            &model,
            &data,
            0.1,
            AttackMethod::FgsmPred,
            AttackMethod::Fgsm
        )
        .is_err());
    }

    #[test]
    fn self_transfer_rate_is_one() {
        let data = synth_blobs(3, 30, 6, 0.2, 9).unwrap();
        let model = trained_blob_model(4, &data);
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.25);
        let cell = transfer_rate(&model, &model, &data, &spec, 1).unwrap();
        assert!(cell.denominator > 0, "attack never succeeded");
        assert_eq!(cell.rate, Rate::Defined(1.0));
    }

    #[test]
    fn transfer_rate_undefined_on_zero_denominator() {
        // Zero-weight model: zero gradients, adversarial = clean, so no
        // example is clean-correct and adversarial-wrong.
        let data = synth_blobs(3, 10, 6, 0.1, 10).unwrap();
        let model = zero_model(6, 3);
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.2);
        let cell = transfer_rate(&model, &model, &data, &spec, 1).unwrap();
        assert_eq!(cell.denominator, 0);
        assert_eq!(cell.rate, Rate::Undefined);
        assert_eq!(cell.rate.to_string(), "undefined");
    }

    #[test]
    fn error_rate_at_zero_epsilon_matches_clean_error() {
        let data = synth_blobs(3, 25, 6, 0.15, 11).unwrap();
        let source = trained_blob_model(5, &data);
        let target = trained_blob_model(6, &data);
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let cell = transferred_error_rate(&source, &target, &data, &spec, 1).unwrap();
        let clean = accuracy(&target, "t", &data, None, 1).unwrap();
        let expect = 1.0 - clean.top1;
        assert!((cell.rate.value().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn both_transfer_metrics_use_the_same_cached_batch() {
        let data = synth_blobs(3, 20, 6, 0.2, 12).unwrap();
        let source = trained_blob_model(7, &data);
        let target = trained_blob_model(8, &data);
        let spec = AttackSpec::new(AttackMethod::StepLl, 0.15);
        let a = transfer_pair(&source, &target, &data, &spec, 1).unwrap();
        let b = transfer_pair(&source, &target, &data, &spec, 1).unwrap();
        assert_eq!(a.adv_digest, b.adv_digest);
        assert_eq!(a.transfer, b.transfer);
        assert_eq!(a.error_rate, b.error_rate);
    }

    #[test]
    fn accuracy_ratio_cases() {
        let data = synth_blobs(3, 20, 6, 0.15, 13).unwrap();
        let model = trained_blob_model(9, &data);
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let r = accuracy_ratio(&model, "m", &data, &spec, 1).unwrap();
        assert_eq!(r.ratio, Rate::Defined(1.0));

        // Clean accuracy 0: a zero-weight model always predicts class 0;
        // evaluate on examples whose labels are never 0.
        let all = synth_blobs(3, 10, 6, 0.1, 14).unwrap();
        let keep: Vec<usize> = (0..all.n()).filter(|&i| all.labels[i] != 0).collect();
        let nonzero = all.subset(&keep, "nonzero").unwrap();
        let zero = zero_model(6, 3);
        let r = accuracy_ratio(&zero, "zero", &nonzero, &spec, 1).unwrap();
        assert_eq!(r.ratio, Rate::Undefined);
    }

    #[test]
    fn sample_indices_deterministic_no_replacement() {
        let a = sample_indices(100, 30, 5);
        let b = sample_indices(100, 30, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
        assert_eq!(sample_indices(10, 50, 1).len(), 10);
    }

    #[test]
    fn capacity_sweep_row_counts() {
        let data = synth_blobs(3, 20, 6, 0.1, 15).unwrap();
        let model_cfg = ModelConfig {
            input_dim: 6,
            num_classes: 3,
            hidden_widths: vec![8],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 21,
        };
        let mut train_cfg = TrainConfig::default_adversarial(8);
        train_cfg.m = 10;
        train_cfg.k = 5;
        let grid = [
            AttackSpec::new(AttackMethod::StepLl, 0.1),
            AttackSpec::new(AttackMethod::Fgsm, 0.1),
        ];
        let report = capacity_sweep(
            &model_cfg,
            &train_cfg,
            &[1.0],
            &grid,
            &data,
            &data,
            3,
        )
        .unwrap();
        // rho=[1] degenerates to two runs: 2 clean rows + 2x2 attack rows.
        assert_eq!(report.ratios.len(), 1 * 2 * grid.len());
        assert_eq!(report.records.len(), 2 + 2 * grid.len());
        assert!(capacity_sweep(&model_cfg, &train_cfg, &[], &grid, &data, &data, 3).is_err());
    }

    #[test]
    fn activation_comparison_single_run() {
        let data = synth_blobs(3, 15, 6, 0.1, 16).unwrap();
        let model_cfg = ModelConfig {
            input_dim: 6,
            num_classes: 3,
            hidden_widths: vec![8],
            rho: 1.0,
            extra_blocks: 0,
            activation: ActivationKind::Relu,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed: 22,
        };
        let mut train_cfg = TrainConfig::default_adversarial(6);
        train_cfg.m = 9;
        train_cfg.k = 3;
        let grid = [AttackSpec::new(AttackMethod::StepLl, 0.1)];
        let report = activation_comparison(
            &[ActivationKind::Relu],
            &model_cfg,
            &train_cfg,
            &grid,
            &data,
            &data,
            3,
        )
        .unwrap();
        assert_eq!(report.records.len(), 2);
    }

    #[test]
    fn report_csv_and_json_roundtrip() {
        let report = EvalReport {
            records: vec![AccuracyRecord {
                model_id: "m".into(),
                method: Some(AttackMethod::Fgsm),
                epsilon_pixel: 16.0,
                topk_level: 3,
                top1: 0.5,
                topk: 0.75,
                n: 100,
            }],
            ratios: vec![],
            leaks: vec![],
            transfers: vec![TransferMatrix {
                kind: TransferKind::TransferRate,
                method: AttackMethod::Fgsm,
                epsilon_pixel: 16.0,
                topk_level: 1,
                sources: vec!["a".into()],
                targets: vec!["a".into()],
                cells: vec![vec![RateCell::new(0, 0)]],
            }],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model_id,method,epsilon_pixel,topk,accuracy,n");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 6);

        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"undefined\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let empty = EvalReport::default();
        assert_eq!(empty.to_csv().lines().count(), 1);
    }
}
