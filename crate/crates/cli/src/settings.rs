//! Flat key=value run configuration with section prefixes
//! (model.*, train.*, data.*, eval.*). File values override defaults,
//! command-line flags override file values, and every run writes the fully
//! resolved snapshot before doing any work.

use crate::CliError;
use advex::advtrain::{EpsSchedule, OptimizerKind, TrainConfig};
use advex::attacks::{AttackMethod, AttackSpec};
use advex::model::ModelConfig;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn with_defaults() -> Settings {
        let mut s = Settings::default();
        for (k, v) in [
            ("model.input_dim", "784"),
            ("model.num_classes", "10"),
            ("model.hidden_widths", "512,256"),
            ("model.rho", "1"),
            ("model.extra_blocks", "0"),
            ("model.activation", "relu"),
            ("model.dropout_rate", "0"),
            ("model.weight_decay", "0.0001"),
            ("model.seed", "1"),
            ("train.m", "32"),
            ("train.k", "16"),
            ("train.lambda", "0.3"),
            ("train.attack", "step_ll"),
            ("train.eps_schedule", "truncnormal:8,16"),
            ("train.delay_steps", "0"),
            ("train.optimizer", "rmsprop:0.001"),
            ("train.total_steps", "2000"),
            ("train.label_smoothing", "0"),
            ("train.weight_decay", "0.0001"),
            ("train.seed", "1"),
            ("data.source", "synth"),
            ("data.synth_classes", "10"),
            ("data.synth_per_class", "100"),
            ("data.synth_dim", "64"),
            ("data.synth_spread", "0.08"),
            ("data.synth_seed", "7"),
            ("eval.topk", "3"),
            ("eval.sample_n", "1000"),
            ("eval.seed", "11"),
            ("eval.alpha_pixel", "1"),
        ] {
            s.map.insert(k.to_string(), v.to_string());
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> CliResult<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CliError::Validation(format!("missing config key {key}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| {
            CliError::Validation(format!("bad value for {key}: {raw:?}"))
        })
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>> {
        let raw = self.get(key)?;
        parse_list(raw).map_err(|e| CliError::Validation(format!("{key}: {e}")))
    }

    /// Merge `key=value` lines from a config file. Blank lines and lines
    /// starting with '#' are ignored; anything else without '=' is an error.
    pub fn load_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => self.set(k.trim(), v.trim()),
                None => {
                    return Err(CliError::Validation(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// Fully resolved snapshot, one sorted key=value per line.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let hidden = self.get("model.hidden_widths")?;
        let hidden_widths = if hidden.is_empty() {
            Vec::new()
        } else {
            parse_list(hidden).map_err(|e| CliError::Validation(format!("model.hidden_widths: {e}")))?
        };
        let cfg = ModelConfig {
            input_dim: self.parse("model.input_dim")?,
            num_classes: self.parse("model.num_classes")?,
            hidden_widths,
            rho: self.parse("model.rho")?,
            extra_blocks: self.parse("model.extra_blocks")?,
            activation: self.parse("model.activation")?,
            dropout_rate: self.parse("model.dropout_rate")?,
            weight_decay: self.parse("model.weight_decay")?,
            label_smoothing: self.parse("train.label_smoothing")?,
            seed: self.parse("model.seed")?,
        };
        cfg.validate()
            .map_err(|e| CliError::Validation(format!("model config: {e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let schedule = parse_schedule(self.get("train.eps_schedule")?)
            .map_err(|e| CliError::Validation(format!("train.eps_schedule: {e}")))?;
        let optimizer = parse_optimizer(self.get("train.optimizer")?)
            .map_err(|e| CliError::Validation(format!("train.optimizer: {e}")))?;
        let method: AttackMethod = self.parse("train.attack")?;
        let cfg = TrainConfig {
            m: self.parse("train.m")?,
            k: self.parse("train.k")?,
            lambda: self.parse("train.lambda")?,
            attack: AttackSpec::new(method, 0.0),
            eps_schedule: schedule,
            delay_steps: self.parse("train.delay_steps")?,
            optimizer,
            total_steps: self.parse("train.total_steps")?,
            label_smoothing: self.parse("train.label_smoothing")?,
            weight_decay: self.parse("train.weight_decay")?,
            seed: self.parse("train.seed")?,
        };
        cfg.validate()
            .map_err(|e| CliError::Validation(format!("train config: {e}")))?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        Ok(PathBuf::from(self.get("run.out")?))
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>, String> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list item {s:?}")))
        .collect()
}

/// `fixed:EPS` or `truncnormal:SIGMA,BOUND`, pixel units.
pub fn parse_schedule(raw: &str) -> Result<EpsSchedule, String> {
    if let Some(eps) = raw.strip_prefix("fixed:") {
        let epsilon = eps.parse().map_err(|_| format!("bad epsilon {eps:?}"))?;
        return Ok(EpsSchedule::Fixed { epsilon });
    }
    if let Some(rest) = raw.strip_prefix("truncnormal:") {
        let (sigma, bound) = rest
            .split_once(',')
            .ok_or_else(|| "expected truncnormal:SIGMA,BOUND".to_string())?;
        return Ok(EpsSchedule::TruncNormal {
            sigma: sigma.parse().map_err(|_| format!("bad sigma {sigma:?}"))?,
            bound: bound.parse().map_err(|_| format!("bad bound {bound:?}"))?,
        });
    }
    Err(format!(
        "unknown schedule {raw:?} (expected fixed:EPS or truncnormal:SIGMA,BOUND)"
    ))
}

/// `rmsprop:LR[,DECAY,EPS]` or `sgd:LR`.
pub fn parse_optimizer(raw: &str) -> Result<OptimizerKind, String> {
    if let Some(rest) = raw.strip_prefix("rmsprop:") {
        let parts: Vec<&str> = rest.split(',').collect();
        let lr = parts[0].parse().map_err(|_| format!("bad lr {:?}", parts[0]))?;
        let decay = match parts.get(1) {
            Some(s) => s.parse().map_err(|_| format!("bad decay {s:?}"))?,
            None => 0.9,
        };
        let eps = match parts.get(2) {
            Some(s) => s.parse().map_err(|_| format!("bad eps {s:?}"))?,
            None => 1e-8,
        };
        return Ok(OptimizerKind::RmsProp { lr, decay, eps });
    }
    if let Some(lr) = raw.strip_prefix("sgd:") {
        return Ok(OptimizerKind::Sgd {
            lr: lr.parse().map_err(|_| format!("bad lr {lr:?}"))?,
        });
    }
    Err(format!(
        "unknown optimizer {raw:?} (expected rmsprop:LR[,DECAY,EPS] or sgd:LR)"
    ))
}
