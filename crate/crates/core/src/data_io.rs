//! Dataset ingestion (IDX files, synthetic blob generators), checkpoint
//! persistence, and report serialization.

use crate::attacks::DataRange;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluate::EvalReport;
use crate::model::{Model, ModelConfig};
use crate::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CHECKPOINT_VERSION: &str = "v1";

/// A labeled dataset with features in a declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// [n, d] features.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub provenance: String,
    pub range: DataRange,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n() {
            return Err(Error::Shape(format!(
                "{} labels for {} examples",
                self.labels.len(),
                self.n()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let (lo, hi) = (self.range.lo, self.range.hi);
        if self
            .features
            .data()
            .iter()
            .any(|&v| !(lo..=hi).contains(&v))
        {
            return Err(Error::InvalidArgument(format!(
                "features outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Rows at `indices` as a fresh (features, labels) pair.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} examples",
                    self.n()
                )));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_rows(indices.len(), d, data)?, labels))
    }

    /// Sub-dataset at `indices`.
    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        let (features, labels) = self.gather(indices)?;
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            split: split.to_string(),
            provenance: format!("{} (subset of {})", self.provenance, self.split),
            range: self.range,
        })
    }

    /// SHA-256 over the canonical byte encoding (dims, features as
    /// little-endian f64, labels as little-endian u64, class count).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        format!("{:x}", h.finalize())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            path: path.display().to_string(),
            needed: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse big-endian IDX image/label files: u8 images with dims [n, rows,
/// cols] scaled to [0,1] by /255 and flattened, u8 labels with dims [n].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * rows * cols;
    if img_bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: images_path.display().to_string(),
            needed,
            found: img_bytes.len(),
        });
    }
    let features: Vec<f64> = img_bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();

    let lab_bytes = fs::read(labels_path)?;
    let magic = read_be_u32(&lab_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = read_be_u32(&lab_bytes, 4, labels_path)? as usize;
    let needed = 8 + n_labels;
    if lab_bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: labels_path.display().to_string(),
            needed,
            found: lab_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let labels: Vec<usize> = lab_bytes[8..needed].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);

    let ds = Dataset {
        features: Tensor::from_rows(n, rows * cols, features)?,
        labels,
        num_classes,
        split: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        provenance: format!("idx:{}", images_path.display()),
        range: DataRange::default(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Load `train-*`/`t10k-*` IDX pairs from a directory, MNIST naming.
pub fn load_idx_dir(dir: &Path, split: &str) -> Result<Dataset> {
    let (images, labels) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train or test)"
            )))
        }
    };
    let mut ds = load_idx(&dir.join(images), &dir.join(labels))?;
    ds.split = split.to_string();
    Ok(ds)
}

/// Gaussian clusters at seeded random centers in [0,1]^d, features clamped
/// to [0,1]. Deterministic in `seed`.
pub fn synth_blobs(
    num_classes: usize,
    n_per_class: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("d must be >= 2, got {d}")));
    }
    if num_classes == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "num_classes and n_per_class must be positive".into(),
        ));
    }
    if spread < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = stream(seed, Purpose::Synth, 0);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let n = num_classes * n_per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push((mu + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let ds = Dataset {
        features: Tensor::from_rows(n, d, features)?,
        labels,
        num_classes,
        split: "synth".into(),
        provenance: format!(
            "synth_blobs(classes={num_classes}, n_per_class={n_per_class}, d={d}, spread={spread}, seed={seed})"
        ),
        range: DataRange::default(),
    };
    ds.validate()?;
    Ok(ds)
}

fn config_to_lines(cfg: &ModelConfig) -> String {
    format!(
        "input_dim={}\nnum_classes={}\nhidden_widths={}\nrho={}\nextra_blocks={}\nactivation={}\ndropout_rate={}\nweight_decay={}\nlabel_smoothing={}\nseed={}\n",
        cfg.input_dim,
        cfg.num_classes,
        cfg.hidden_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
        cfg.rho,
        cfg.extra_blocks,
        cfg.activation,
        cfg.dropout_rate,
        cfg.weight_decay,
        cfg.label_smoothing,
        cfg.seed
    )
}

fn parse_config_lines(fields: &std::collections::HashMap<String, String>) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing field {key}")))
    };
    let parse_num = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::CheckpointCorrupt(format!("bad number in field {key}")))
    };
    let hidden = get("hidden_widths")?;
    let hidden_widths: Vec<usize> = if hidden.is_empty() {
        Vec::new()
    } else {
        hidden
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::CheckpointCorrupt("bad hidden_widths".into()))
            })
            .collect::<Result<_>>()?
    };
    Ok(ModelConfig {
        input_dim: parse_num("input_dim")? as usize,
        num_classes: parse_num("num_classes")? as usize,
        hidden_widths,
        rho: parse_num("rho")?,
        extra_blocks: parse_num("extra_blocks")? as usize,
        activation: get("activation")?.parse()?,
        dropout_rate: parse_num("dropout_rate")?,
        weight_decay: parse_num("weight_decay")?,
        label_smoothing: parse_num("label_smoothing")?,
        seed: parse_num("seed")? as u64,
    })
}

/// Versioned container: a textual header (format version, config echo,
/// step counter, rng digest) followed by named little-endian f64 blobs
/// with declared shapes. Round-trips are bitwise.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let cfg = model.config();
    let mut rng_digest = Sha256::new();
    rng_digest.update(cfg.seed.to_le_bytes());
    rng_digest.update(model.train_steps_done.to_le_bytes());

    let mut out = Vec::new();
    out.extend_from_slice(format!("advex-checkpoint {CHECKPOINT_VERSION}\n").as_bytes());
    out.extend_from_slice(config_to_lines(cfg).as_bytes());
    out.extend_from_slice(format!("train_steps_done={}\n", model.train_steps_done).as_bytes());
    out.extend_from_slice(format!("rng_state_digest={:x}\n", rng_digest.finalize()).as_bytes());
    out.extend_from_slice(format!("params={}\n", model.params().len()).as_bytes());
    for (name, tensor) in model.named_params() {
        let dims = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        out.extend_from_slice(format!("param {name} {dims}\n").as_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let read_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(Error::CheckpointCorrupt("unexpected end of header".into()));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| Error::CheckpointCorrupt("non-utf8 header".into()))?;
        *pos += 1;
        Ok(line)
    };

    let head = read_line(&mut pos)?;
    let expected = format!("advex-checkpoint {CHECKPOINT_VERSION}");
    if head != expected {
        return Err(Error::CheckpointVersion {
            expected,
            found: head,
        });
    }

    let mut fields = std::collections::HashMap::new();
    let n_params;
    loop {
        let line = read_line(&mut pos)?;
        if let Some((key, value)) = line.split_once('=') {
            if key == "params" {
                n_params = value
                    .parse::<usize>()
                    .map_err(|_| Error::CheckpointCorrupt("bad params count".into()))?;
                break;
            }
            fields.insert(key.to_string(), value.to_string());
        } else {
            return Err(Error::CheckpointCorrupt(format!("bad header line {line:?}")));
        }
    }
    let config = parse_config_lines(&fields)?;
    let train_steps_done = fields
        .get("train_steps_done")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::CheckpointCorrupt("missing train_steps_done".into()))?;


    let expected_names = config.param_names();
    let expected_dims = config.layer_dims();
    if n_params != expected_names.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "checkpoint declares {n_params} parameters, config derives {}",
            expected_names.len()
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let line = read_line(&mut pos)?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[0] != "param" {
            return Err(Error::CheckpointCorrupt(format!("bad param line {line:?}")));
        }
        let name = parts[1];
        let dims: Vec<usize> = parts[2]
            .split('x')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::CheckpointCorrupt(format!("bad dims in {line:?}")))
            })
            .collect::<Result<_>>()?;
        let layer = i / 2;
        let (fi, fo) = expected_dims[layer];
        let expect_shape: Vec<usize> = if i % 2 == 0 { vec![fi, fo] } else { vec![fo] };
        if name != expected_names[i] || dims != expect_shape {
            return Err(Error::CheckpointShape {
                name: expected_names[i].clone(),
                expected: expect_shape,
                found: dims,
            });
        }
        let numel: usize = dims.iter().product();
        let end = pos + numel * 8;
        if bytes.len() < end + 1 {
            return Err(Error::CheckpointCorrupt(format!(
                "blob for {name} needs {} bytes, file has {}",
                numel * 8 + 1,
                bytes.len().saturating_sub(pos)
            )));
        }
        let data: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        if bytes[pos] != b'\n' {
            return Err(Error::CheckpointCorrupt(format!(
                "blob for {name} not terminated"
            )));
        }
        pos += 1;
        params.push(Tensor::new(dims, data)?);
    }
    Model::from_parts(config, params, train_steps_done)
}

/// Write `report.csv` (flat accuracy rows) and `report.json` (the full
/// report including derived matrices) into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
