//! Flat `key = value [unit]` experiment configuration.
//!
//! Lines starting with `#` are comments. Relative paths resolve against the
//! directory holding the config file. Unknown and duplicate keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, Dataset, SubsampleMode, SubsampleSpec};
use crate::error::{Error, Result};
use crate::optim::OptimizerSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// One IDX image file plus its label file.
    Idx { images: PathBuf, labels: PathBuf },
    /// Directory with the four MNIST files, train and test merged.
    MnistDir(PathBuf),
    Csv { path: PathBuf, label_column: Option<String> },
    Gaussians { centers: Vec<Vec<f64>>, per_class: usize, std_dev: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Keep only these classes, relabelled densely in the listed order.
    pub classes: Option<Vec<usize>>,
    pub subsample: Option<SubsampleSpec>,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let mut ds = match &self.source {
            DatasetSource::Idx { images, labels } => data::load_idx(images, labels)?,
            DatasetSource::MnistDir(dir) => data::load_mnist_dir(dir)?,
            DatasetSource::Csv { path, label_column } => data::load_csv(path, label_column.as_deref())?,
            DatasetSource::Gaussians {
                centers,
                per_class,
                std_dev,
                seed,
            } => data::gaussian_blobs(centers, *per_class, *std_dev, *seed)?,
        };
        if let Some(classes) = &self.classes {
            ds = ds.filter_classes(classes)?;
        }
        if let Some(spec) = &self.subsample {
            ds = data::subsample(&ds, spec)?;
        }
        Ok(ds)
    }

    /// Files the dataset is read from, for content hashing.
    pub fn input_files(&self) -> Result<Vec<PathBuf>> {
        Ok(match &self.source {
            DatasetSource::Idx { images, labels } => vec![images.clone(), labels.clone()],
            DatasetSource::MnistDir(dir) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                files
            }
            DatasetSource::Csv { path, .. } => vec![path.clone()],
            DatasetSource::Gaussians { .. } => Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetSpec>,
    /// Number of clusters; defaults to the number of classes present.
    pub k: Option<usize>,
    pub train: TrainConfig,
    /// Pretrained model file read by `train` and written by `pretrain`.
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

const KEYS: &[(&str, &str)] = &[
    ("dataset.format", ""),
    ("dataset.images", ""),
    ("dataset.labels", ""),
    ("dataset.dir", ""),
    ("dataset.path", ""),
    ("dataset.label_column", ""),
    ("dataset.centers", ""),
    ("dataset.per_class", "samples"),
    ("dataset.std", ""),
    ("dataset.seed", ""),
    ("dataset.classes", ""),
    ("subsample.mode", ""),
    ("subsample.class", ""),
    ("subsample.rate", ""),
    ("subsample.counts", "samples"),
    ("subsample.r_min", ""),
    ("subsample.seed", ""),
    ("method", ""),
    ("k", "clusters"),
    ("gamma", ""),
    ("s", ""),
    ("vat.epsilon", "input_units"),
    ("vat.xi", "input_units"),
    ("vat.ip", "iterations"),
    ("tau", "iterations"),
    ("sigma", ""),
    ("itr_max", "iterations"),
    ("batch_size", "samples"),
    ("pretrain_epochs", "epochs"),
    ("pretrain.optimizer", ""),
    ("pretrain.lr", ""),
    ("pretrain.momentum", ""),
    ("pretrain.beta1", ""),
    ("pretrain.beta2", ""),
    ("pretrain.eps", ""),
    ("finetune.optimizer", ""),
    ("finetune.lr", ""),
    ("finetune.momentum", ""),
    ("finetune.beta1", ""),
    ("finetune.beta2", ""),
    ("finetune.eps", ""),
    ("latent_dim", ""),
    ("kmeans.restarts", ""),
    ("kmeans.max_iter", "iterations"),
    ("patience", "iterations"),
    ("seed", ""),
    ("model", ""),
    ("out", ""),
];

fn unit_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, u)| *u)
}

/// Raw key/value pairs with the units already checked and stripped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            if raw.entries.contains_key(key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            raw.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        Ok(raw)
    }

    /// Inserts or replaces one entry, checking the key and an optional trailing unit.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unit = unit_of(key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        let mut value = value.trim();
        if !unit.is_empty() {
            if let Some((v, u)) = value.rsplit_once(char::is_whitespace) {
                if u.chars().all(|c| c.is_ascii_alphabetic() || c == '_') {
                    if u != unit {
                        return Err(Error::Config(format!("key '{key}' is in {unit}, got unit '{u}'")));
                    }
                    value = v.trim_end();
                }
            }
        }
        if value.is_empty() {
            return Err(Error::Config(format!("key '{key}' has an empty value")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

struct Reader<'a> {
    raw: &'a RawConfig,
    base: &'a Path,
}

impl Reader<'_> {
    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{v}': {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw.get(key).map(|p| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base.join(p)
            }
        })
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw
            .get(key)
            .map(|v| parse_list(key, v))
            .transpose()
    }

    fn optimizer(&self, prefix: &str, default: OptimizerSpec) -> Result<OptimizerSpec> {
        let kind = self.raw.get(&format!("{prefix}.optimizer"));
        let lr_key = format!("{prefix}.lr");
        let spec = match kind {
            None => match default {
                OptimizerSpec::SgdMomentum { lr, momentum } => OptimizerSpec::SgdMomentum {
                    lr: self.or(&lr_key, lr)?,
                    momentum: self.or(&format!("{prefix}.momentum"), momentum)?,
                },
                OptimizerSpec::Adam { lr, beta1, beta2, eps } => OptimizerSpec::Adam {
                    lr: self.or(&lr_key, lr)?,
                    beta1: self.or(&format!("{prefix}.beta1"), beta1)?,
                    beta2: self.or(&format!("{prefix}.beta2"), beta2)?,
                    eps: self.or(&format!("{prefix}.eps"), eps)?,
                },
            },
            Some("sgd") => OptimizerSpec::SgdMomentum {
                lr: self.required(&lr_key)?,
                momentum: self.or(&format!("{prefix}.momentum"), 0.0)?,
            },
            Some("adam") => {
                let base = OptimizerSpec::adam(self.or(&lr_key, 0.001)?);
                let OptimizerSpec::Adam { lr, beta1, beta2, eps } = base else {
                    unreachable!()
                };
                OptimizerSpec::Adam {
                    lr,
                    beta1: self.or(&format!("{prefix}.beta1"), beta1)?,
                    beta2: self.or(&format!("{prefix}.beta2"), beta2)?,
                    eps: self.or(&format!("{prefix}.eps"), eps)?,
                }
            }
            Some(other) => return Err(Error::Config(format!("{prefix}.optimizer: unknown optimizer '{other}'"))),
        };
        let stray: Vec<&str> = match spec {
            OptimizerSpec::SgdMomentum { .. } => vec!["beta1", "beta2", "eps"],
            OptimizerSpec::Adam { .. } => vec!["momentum"],
        };
        for s in stray {
            if self.raw.get(&format!("{prefix}.{s}")).is_some() {
                return Err(Error::Config(format!("{prefix}.{s} does not apply to the chosen optimizer")));
            }
        }
        Ok(spec)
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{}': {e}", s.trim())))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<(Self, RawConfig)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let raw = RawConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok((Self::from_raw(&raw, base)?, raw))
    }

    /// Builds and validates a config; relative paths are joined onto `base`.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let r = Reader { raw, base };
        let d = TrainConfig::default();
        let train = TrainConfig {
            method: r.or("method", d.method)?,
            gamma: r.or("gamma", d.gamma)?,
            s: r.or("s", d.s)?,
            vat: crate::vat::VatConfig {
                epsilon: r.or("vat.epsilon", d.vat.epsilon)?,
                xi: r.or("vat.xi", d.vat.xi)?,
                power_iterations: r.or("vat.ip", d.vat.power_iterations)?,
            },
            tau: r.or("tau", d.tau)?,
            sigma: r.or("sigma", d.sigma)?,
            itr_max: r.or("itr_max", d.itr_max)?,
            batch_size: r.or("batch_size", d.batch_size)?,
            pretrain_epochs: r.or("pretrain_epochs", d.pretrain_epochs)?,
            pretrain_optimizer: r.optimizer("pretrain", d.pretrain_optimizer)?,
            finetune_optimizer: r.optimizer("finetune", d.finetune_optimizer)?,
            latent_dim: r.or("latent_dim", d.latent_dim)?,
            kmeans_restarts: r.or("kmeans.restarts", d.kmeans_restarts)?,
            kmeans_max_iter: r.or("kmeans.max_iter", d.kmeans_max_iter)?,
            patience: r.parse("patience")?,
            seed: r.or("seed", d.seed)?,
        };
        train.validate()?;
        let k: Option<usize> = r.parse("k")?;
        if k.is_some_and(|k| k < 1) {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(ExperimentConfig {
            dataset: dataset_spec(&r)?,
            k,
            train,
            model: r.path("model"),
            out: r.path("out"),
        })
    }

    /// Canonical text form listing every setting, suitable for re-parsing.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let mut put = |k: &str, v: String| {
            let unit = unit_of(k).unwrap_or("");
            if unit.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            } else {
                let _ = writeln!(s, "{k} = {v} {unit}");
            }
        };
        if let Some(ds) = &self.dataset {
            let p = |p: &Path| p.display().to_string();
            match &ds.source {
                DatasetSource::Idx { images, labels } => {
                    put("dataset.format", "idx".into());
                    put("dataset.images", p(images));
                    put("dataset.labels", p(labels));
                }
                DatasetSource::MnistDir(dir) => {
                    put("dataset.format", "mnist_dir".into());
                    put("dataset.dir", p(dir));
                }
                DatasetSource::Csv { path, label_column } => {
                    put("dataset.format", "csv".into());
                    put("dataset.path", p(path));
                    if let Some(c) = label_column {
                        put("dataset.label_column", c.clone());
                    }
                }
                DatasetSource::Gaussians {
                    centers,
                    per_class,
                    std_dev,
                    seed,
                } => {
                    put("dataset.format", "gaussians".into());
                    let c: Vec<String> = centers.iter().map(|c| join(c)).collect();
                    put("dataset.centers", c.join(";"));
                    put("dataset.per_class", per_class.to_string());
                    put("dataset.std", std_dev.to_string());
                    put("dataset.seed", seed.to_string());
                }
            }
            if let Some(c) = &ds.classes {
                put("dataset.classes", join(c));
            }
            if let Some(sub) = &ds.subsample {
                match &sub.mode {
                    SubsampleMode::SingleClass { class, rate } => {
                        put("subsample.mode", "single_class".into());
                        put("subsample.class", class.to_string());
                        put("subsample.rate", rate.to_string());
                    }
                    SubsampleMode::ExplicitCounts { counts } => {
                        put("subsample.mode", "explicit_counts".into());
                        put("subsample.counts", join(counts));
                    }
                    SubsampleMode::Interpolated { r_min } => {
                        put("subsample.mode", "interpolated".into());
                        put("subsample.r_min", r_min.to_string());
                    }
                }
                put("subsample.seed", sub.seed.to_string());
            }
        }
        put("method", t.method.name().into());
        if let Some(k) = self.k {
            put("k", k.to_string());
        }
        put("gamma", t.gamma.to_string());
        put("s", t.s.to_string());
        put("vat.epsilon", t.vat.epsilon.to_string());
        put("vat.xi", t.vat.xi.to_string());
        put("vat.ip", t.vat.power_iterations.to_string());
        put("tau", t.tau.to_string());
        put("sigma", t.sigma.to_string());
        put("itr_max", t.itr_max.to_string());
        put("batch_size", t.batch_size.to_string());
        put("pretrain_epochs", t.pretrain_epochs.to_string());
        for (prefix, spec) in [("pretrain", t.pretrain_optimizer), ("finetune", t.finetune_optimizer)] {
            match spec {
                OptimizerSpec::SgdMomentum { lr, momentum } => {
                    put(&format!("{prefix}.optimizer"), "sgd".into());
                    put(&format!("{prefix}.lr"), lr.to_string());
                    put(&format!("{prefix}.momentum"), momentum.to_string());
                }
                OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                    put(&format!("{prefix}.optimizer"), "adam".into());
                    put(&format!("{prefix}.lr"), lr.to_string());
                    put(&format!("{prefix}.beta1"), beta1.to_string());
                    put(&format!("{prefix}.beta2"), beta2.to_string());
                    put(&format!("{prefix}.eps"), eps.to_string());
                }
            }
        }
        put("latent_dim", t.latent_dim.to_string());
        put("kmeans.restarts", t.kmeans_restarts.to_string());
        put("kmeans.max_iter", t.kmeans_max_iter.to_string());
        if let Some(p) = t.patience {
            put("patience", p.to_string());
        }
        put("seed", t.seed.to_string());
        if let Some(m) = &self.model {
            put("model", m.display().to_string());
        }
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        s
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn dataset_spec(r: &Reader<'_>) -> Result<Option<DatasetSpec>> {
    let Some(format) = r.raw.get("dataset.format") else {
        if let Some(stray) = r.raw.entries.keys().find(|k| k.starts_with("dataset.") || k.starts_with("subsample.")) {
            return Err(Error::Config(format!("'{stray}' given without dataset.format")));
        }
        return Ok(None);
    };
    let source = match format {
        "idx" => DatasetSource::Idx {
            images: r.required_path("dataset.images")?,
            labels: r.required_path("dataset.labels")?,
        },
        "mnist_dir" => DatasetSource::MnistDir(r.required_path("dataset.dir")?),
        "csv" => DatasetSource::Csv {
            path: r.required_path("dataset.path")?,
            label_column: r.raw.get("dataset.label_column").map(str::to_string),
        },
        "gaussians" => {
            let text: String = r.required("dataset.centers")?;
            let centers = text
                .split(';')
                .map(|c| parse_list::<f64>("dataset.centers", c))
                .collect::<Result<Vec<_>>>()?;
            let std_dev: f64 = r.required("dataset.std")?;
            if !(std_dev >= 0.0) {
                return Err(Error::Config(format!("dataset.std must be >= 0, got {std_dev}")));
            }
            DatasetSource::Gaussians {
                centers,
                per_class: r.required("dataset.per_class")?,
                std_dev,
                seed: r.or("dataset.seed", 0)?,
            }
        }
        other => return Err(Error::Config(format!("unknown dataset.format '{other}'"))),
    };
    let subsample = match r.raw.get("subsample.mode") {
        None => None,
        Some(mode) => {
            let mode = match mode {
                "single_class" => SubsampleMode::SingleClass {
                    class: r.required("subsample.class")?,
                    rate: r.required("subsample.rate")?,
                },
                "explicit_counts" => SubsampleMode::ExplicitCounts {
                    counts: r
                        .list("subsample.counts")?
                        .ok_or_else(|| Error::Config("missing required key 'subsample.counts'".into()))?,
                },
                "interpolated" => SubsampleMode::Interpolated {
                    r_min: r.required("subsample.r_min")?,
                },
                other => return Err(Error::Config(format!("unknown subsample.mode '{other}'"))),
            };
            Some(SubsampleSpec {
                mode,
                seed: r.or("subsample.seed", 0)?,
            })
        }
    };
    Ok(Some(DatasetSpec {
        source,
        classes: r.list("dataset.classes")?,
        subsample,
    }))
}
