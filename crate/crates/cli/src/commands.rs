use crate::settings::{parse_list, CliResult, Settings};
use crate::{CliError, CommonArgs, EpsArgs};
use advex::advtrain::Trainer;
use advex::attacks::{AttackMethod, AttackSpec, PIXEL_SCALE};
use advex::autodiff::ActivationKind;
use advex::data_io::{
    load_checkpoint, load_idx_dir, save_checkpoint, synth_blobs, write_report, Dataset,
};
use advex::evaluate::{
    accuracy, capacity_sweep, k_sweep, label_leak_count, sample_indices, transfer_matrices,
    EvalReport, LeakRecord, TransferMatrix,
};
use advex::model::Model;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

fn resolve_settings(common: &CommonArgs) -> CliResult<Settings> {
    let mut s = Settings::with_defaults();
    if let Some(path) = &common.config {
        s.load_file(path)?;
    }
    if let Some(data) = &common.data {
        s.set("data.source", data);
    }
    if let Some(dir) = &common.data_dir {
        s.set("data.dir", dir.display());
    }
    for kv in &common.set {
        match kv.split_once('=') {
            Some((k, v)) => s.set(k.trim(), v.trim()),
            None => {
                return Err(CliError::Validation(format!(
                    "--set expects KEY=VALUE, got {kv:?}"
                )))
            }
        }
    }
    s.set("run.out", common.out.display());
    Ok(s)
}

fn load_split(s: &Settings, split: &str) -> CliResult<Dataset> {
    match s.get("data.source")? {
        "synth" => {
            let seed: u64 = s.parse("data.synth_seed")?;
            let seed = if split == "test" { seed ^ 0x7e57 } else { seed };
            let mut ds = synth_blobs(
                s.parse("data.synth_classes")?,
                s.parse("data.synth_per_class")?,
                s.parse("data.synth_dim")?,
                s.parse("data.synth_spread")?,
                seed,
            )?;
            ds.split = split.to_string();
            Ok(ds)
        }
        "idx" | "mnist" => {
            let dir = PathBuf::from(s.get("data.dir").map_err(|_| {
                CliError::Validation("data.source=idx requires --data-dir".into())
            })?);
            Ok(load_idx_dir(&dir, split)?)
        }
        other => Err(CliError::Validation(format!(
            "unknown data.source {other:?} (expected synth or idx)"
        ))),
    }
}

/// Write the resolved config snapshot; every run does this before compute.
fn write_snapshot(s: &Settings, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(advex::Error::from)?;
    fs::write(out.join("run_config.txt"), s.snapshot()).map_err(advex::Error::from)?;
    Ok(())
}

/// Epsilon grid in data units; pixel and raw flags are mutually exclusive.
fn eps_grid(eps: &EpsArgs, default_pixels: &[f64]) -> CliResult<Vec<f64>> {
    match (&eps.eps, &eps.eps_raw) {
        (Some(_), Some(_)) => Err(CliError::Validation(
            "--eps and --eps-raw cannot both be given".into(),
        )),
        (Some(px), None) => Ok(parse_list::<f64>(px)
            .map_err(CliError::Validation)?
            .into_iter()
            .map(|e| e / PIXEL_SCALE)
            .collect()),
        (None, Some(raw)) => parse_list::<f64>(raw).map_err(CliError::Validation),
        (None, None) => Ok(default_pixels.iter().map(|e| e / PIXEL_SCALE).collect()),
    }
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(advex::Error::from)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn attack_spec(s: &Settings, method: AttackMethod, epsilon: f64, iters: Option<usize>) -> CliResult<AttackSpec> {
    let alpha_pixel: f64 = s.parse("eval.alpha_pixel")?;
    let mut spec = AttackSpec::new(method, epsilon).with_seed(s.parse("eval.seed")?);
    spec.alpha = alpha_pixel / PIXEL_SCALE;
    spec.iters = iters;
    if method.is_iterative() && spec.alpha > spec.epsilon {
        spec.alpha = spec.epsilon;
    }
    spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(spec)
}

pub fn train(
    common: CommonArgs,
    k: Option<usize>,
    attack: Option<String>,
    eps_schedule: Option<String>,
    steps: Option<u64>,
    seed: Option<u64>,
) -> CliResult<()> {
    let mut s = resolve_settings(&common)?;
    if let Some(k) = k {
        s.set("train.k", k);
    }
    if let Some(a) = &attack {
        s.set("train.attack", a);
    }
    if let Some(sched) = &eps_schedule {
        s.set("train.eps_schedule", sched);
    }
    if let Some(n) = steps {
        s.set("train.total_steps", n);
    }
    if let Some(seed) = seed {
        s.set("train.seed", seed);
        s.set("model.seed", seed);
    }

    let train_data = load_split(&s, "train")?;
    let val_data = load_split(&s, "test")?;
    // The model must match the data it trains on.
    s.set("model.input_dim", train_data.dim());
    s.set("model.num_classes", train_data.num_classes);
    s.set("data.train_digest", train_data.digest());
    s.set("data.test_digest", val_data.digest());
    let out = s.out_dir()?;
    write_snapshot(&s, &out)?;

    let model_cfg = s.model_config()?;
    let train_cfg = s.train_config()?;
    let model = Model::init(model_cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut trainer =
        Trainer::new(model, train_cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    let log = trainer.train(&train_data, Some(&val_data))?;
    let model = trainer.into_model();

    fs::write(out.join("train_log.csv"), log.step_csv()).map_err(advex::Error::from)?;
    fs::write(out.join("val_log.csv"), log.epoch_csv()).map_err(advex::Error::from)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;

    let last = log.epochs.last();
    let summary = serde_json::json!({
        "steps": model.train_steps_done,
        "clean_acc": last.map(|e| e.clean_acc),
        "adv_acc": last.map(|e| e.adv_acc),
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_sha256": file_sha256(&ckpt)?,
        "train_digest": train_data.digest(),
        "test_digest": val_data.digest(),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())
        .map_err(advex::Error::from)?;
    println!(
        "trained {} steps; clean acc {:.4}, adv acc {:.4}; checkpoint {}",
        model.train_steps_done,
        last.map(|e| e.clean_acc).unwrap_or(f64::NAN),
        last.map(|e| e.adv_acc).unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn maybe_subsample(data: Dataset, sample: Option<usize>, seed: u64) -> CliResult<Dataset> {
    match sample {
        None => Ok(data),
        Some(n) => {
            let idx = sample_indices(data.n(), n, seed);
            Ok(data.subset(&idx, "sample")?)
        }
    }
}

fn dump_tensor(path: &Path, t: &advex::Tensor) -> CliResult<()> {
    let mut bytes = format!("advex-tensor {} {}\n", t.rows(), t.cols()).into_bytes();
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(advex::Error::from)?;
    Ok(())
}

pub fn attack(
    common: CommonArgs,
    checkpoint: PathBuf,
    method: String,
    eps: EpsArgs,
    iters: Option<usize>,
    dump_adv: bool,
    sample: Option<usize>,
) -> CliResult<()> {
    let s = resolve_settings(&common)?;
    let methods: Vec<AttackMethod> = parse_method_list(&method)?;
    let grid = eps_grid(&eps, &[2.0, 4.0, 8.0, 16.0])?;
    let out = s.out_dir()?;
    write_snapshot(&s, &out)?;

    let model = load_checkpoint(&checkpoint)?;
    let id = model_id(&checkpoint);
    let data = load_split(&s, "test")?;
    let data = maybe_subsample(data, sample, s.parse("eval.seed")?)?;
    let topk: usize = s.parse("eval.topk")?;

    let mut report = EvalReport::default();
    report.records.push(accuracy(&model, &id, &data, None, topk)?);
    for &m in &methods {
        for &e in &grid {
            let spec = attack_spec(&s, m, e, iters)?;
            report.records.push(accuracy(&model, &id, &data, Some(&spec), topk)?);
            if dump_adv {
                let batch =
                    advex::attacks::run_attack(&model, &data.features, &data.labels, &spec, data.range)?;
                let eps_px = (e * PIXEL_SCALE * 100.0).round() / 100.0;
                dump_tensor(&out.join(format!("adv_{m}_eps{eps_px}.bin")), &batch.adv)?;
            }
        }
    }
    write_report(&report, &out)?;
    for r in &report.records {
        println!(
            "{} {} eps_px={:<6} top1={:.4} top{}={:.4} n={}",
            r.model_id,
            r.method.map_or("clean".into(), |m| m.to_string()),
            r.epsilon_pixel,
            r.top1,
            r.topk_level,
            r.topk,
            r.n
        );
    }
    Ok(())
}

pub fn eval(
    common: CommonArgs,
    checkpoint: PathBuf,
    method: Option<String>,
    eps: EpsArgs,
) -> CliResult<()> {
    let methods = method.unwrap_or_default();
    let sample = None;
    attack(common, checkpoint, methods, eps, None, false, sample)
}

fn parse_method_list(raw: &str) -> CliResult<Vec<AttackMethod>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|m| {
            m.trim()
                .parse::<AttackMethod>()
                .map_err(|e| CliError::Validation(e.to_string()))
        })
        .collect()
}

pub fn transfer(
    common: CommonArgs,
    source: PathBuf,
    targets: String,
    methods: String,
    eps: EpsArgs,
    sample_n: usize,
    topk: usize,
) -> CliResult<()> {
    let mut s = resolve_settings(&common)?;
    let methods = parse_method_list(&methods)?;
    if methods.is_empty() {
        return Err(CliError::Validation("--methods must name at least one attack".into()));
    }
    let target_paths: Vec<PathBuf> = targets.split(',').map(|t| PathBuf::from(t.trim())).collect();
    if target_paths.is_empty() {
        return Err(CliError::Validation("--targets must name at least one checkpoint".into()));
    }
    let grid = eps_grid(&eps, &[16.0])?;
    s.set("eval.sample_n", sample_n);
    let out = s.out_dir()?;
    write_snapshot(&s, &out)?;

    let source_model = load_checkpoint(&source)?;
    let sources = vec![(model_id(&source), &source_model)];
    let mut target_models = Vec::new();
    for p in &target_paths {
        target_models.push((model_id(p), load_checkpoint(p)?));
    }
    let target_refs: Vec<(String, &Model)> = target_models
        .iter()
        .map(|(n, m)| (n.clone(), m))
        .collect();

    let data = load_split(&s, "test")?;
    let idx = sample_indices(data.n(), sample_n, s.parse("eval.seed")?);
    let sample = data.subset(&idx, "transfer_sample")?;

    let mut report = EvalReport::default();
    let mut csv = String::from(
        "kind,method,epsilon_pixel,topk,source,target,numerator,denominator,rate\n",
    );
    for &m in &methods {
        for &e in &grid {
            let spec = attack_spec(&s, m, e, None)?;
            let (t, er) = transfer_matrices(&sources, &target_refs, &sample, &spec, topk)?;
            for matrix in [&t, &er] {
                append_matrix_csv(&mut csv, matrix);
            }
            report.transfers.push(t);
            report.transfers.push(er);
        }
    }
    fs::write(out.join("transfer.csv"), &csv).map_err(advex::Error::from)?;
    write_report(&report, &out)?;
    println!("{csv}");
    Ok(())
}

fn append_matrix_csv(csv: &mut String, m: &TransferMatrix) {
    let kind = match m.kind {
        advex::evaluate::TransferKind::TransferRate => "transfer_rate",
        advex::evaluate::TransferKind::ErrorRate => "error_rate",
    };
    for (i, src) in m.sources.iter().enumerate() {
        for (j, tgt) in m.targets.iter().enumerate() {
            let c = &m.cells[i][j];
            csv.push_str(&format!(
                "{kind},{},{},{},{src},{tgt},{},{},{}\n",
                m.method, m.epsilon_pixel, m.topk_level, c.numerator, c.denominator, c.rate
            ));
        }
    }
}

pub fn sweep(common: CommonArgs, kind: String, grid: String, eps: EpsArgs) -> CliResult<()> {
    let s = resolve_settings(&common)?;
    let out = s.out_dir()?;

    let train_data = load_split(&s, "train")?;
    let eval_data = load_split(&s, "test")?;
    let mut s = s;
    s.set("model.input_dim", train_data.dim());
    s.set("model.num_classes", train_data.num_classes);
    write_snapshot(&s, &out)?;

    let model_cfg = s.model_config()?;
    let train_cfg = s.train_config()?;
    let topk: usize = s.parse("eval.topk")?;
    let eps_list = eps_grid(&eps, &[2.0, 4.0, 8.0, 16.0])?;
    let method: AttackMethod = s.parse("train.attack")?;
    let mut specs = Vec::new();
    for &e in &eps_list {
        specs.push(attack_spec(&s, method, e, None)?);
    }

    let report = match kind.as_str() {
        "capacity" => {
            let rhos: Vec<f64> = parse_list(&grid).map_err(CliError::Validation)?;
            capacity_sweep(&model_cfg, &train_cfg, &rhos, &specs, &train_data, &eval_data, topk)?
        }
        "kfrac" => {
            let ks: Vec<usize> = parse_list(&grid).map_err(CliError::Validation)?;
            if ks.iter().any(|&k| k > train_cfg.m) {
                return Err(CliError::Validation(format!(
                    "k grid contains values above m = {}",
                    train_cfg.m
                )));
            }
            k_sweep(&model_cfg, &train_cfg, &ks, &specs, &train_data, &eval_data, topk)?
        }
        "activation" => {
            let acts: Vec<ActivationKind> = grid
                .split(',')
                .map(|a| {
                    a.trim()
                        .parse::<ActivationKind>()
                        .map_err(|e| CliError::Validation(e.to_string()))
                })
                .collect::<CliResult<_>>()?;
            activation_comparison_wrapper(&acts, &model_cfg, &train_cfg, &specs, &train_data, &eval_data, topk)?
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown sweep kind {other:?} (expected capacity, kfrac, activation)"
            )))
        }
    };
    write_report(&report, &out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn activation_comparison_wrapper(
    acts: &[ActivationKind],
    model_cfg: &advex::model::ModelConfig,
    train_cfg: &advex::advtrain::TrainConfig,
    specs: &[AttackSpec],
    train_data: &Dataset,
    eval_data: &Dataset,
    topk: usize,
) -> CliResult<EvalReport> {
    Ok(advex::evaluate::activation_comparison(
        acts, model_cfg, train_cfg, specs, train_data, eval_data, topk,
    )?)
}

pub fn leak(common: CommonArgs, checkpoint: PathBuf, eps: EpsArgs) -> CliResult<()> {
    let s = resolve_settings(&common)?;
    let out = s.out_dir()?;
    write_snapshot(&s, &out)?;

    let model = load_checkpoint(&checkpoint)?;
    let id = model_id(&checkpoint);
    let data = load_split(&s, "test")?;
    let grid = match (&eps.eps, &eps.eps_raw) {
        (None, None) => (1..=10).map(|i| i as f64 * 0.05).collect(),
        _ => eps_grid(&eps, &[])?,
    };

    let mut report = EvalReport::default();
    let mut csv = String::from("epsilon_raw,count,n,clean_acc,adv_acc,adv_above_clean\n");
    for &e in &grid {
        let (count, leaked_ids) =
            label_leak_count(&model, &data, e, AttackMethod::Fgsm, AttackMethod::FgsmPred)?;
        let clean = accuracy(&model, &id, &data, None, 1)?;
        let spec = AttackSpec::new(AttackMethod::Fgsm, e).with_seed(s.parse("eval.seed")?);
        let adv = accuracy(&model, &id, &data, Some(&spec), 1)?;
        let flag = adv.top1 > clean.top1;
        csv.push_str(&format!(
            "{e},{count},{},{},{},{}\n",
            data.n(),
            clean.top1,
            adv.top1,
            flag
        ));
        report.leaks.push(LeakRecord {
            model_id: id.clone(),
            epsilon_raw: e,
            count,
            leaked_ids,
            n: data.n(),
            clean_accuracy: clean.top1,
            adv_accuracy: adv.top1,
        });
    }
    fs::write(out.join("leak.csv"), &csv).map_err(advex::Error::from)?;
    write_report(&report, &out)?;
    print!("{csv}");
    Ok(())
}
