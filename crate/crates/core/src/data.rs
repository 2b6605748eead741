//! Dataset ingestion (IDX image files, labelled CSV), synthetic blobs, and
//! the imbalanced-subsampling protocols.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n × d`
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_counts: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::invalid("dataset features contain NaN or infinite values"));
        }
        let mut class_counts = BTreeMap::new();
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::dim("dataset labels", features.shape(), (labels.len(), 1)));
            }
            for &l in labels {
                *class_counts.entry(l).or_insert(0) += 1;
            }
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labels_required(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("dataset {} has no labels", self.name)))
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(name, self.features.select_rows(indices), labels)
    }

    /// Concatenates datasets with equal feature width.
    pub fn concat(parts: &[Dataset], name: impl Into<String>) -> Result<Dataset> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("nothing to concatenate"));
        };
        let cols = first.dim();
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            if p.dim() != cols {
                return Err(Error::dim("dataset concat", first.features.shape(), p.features.shape()));
            }
            data.extend_from_slice(p.features.as_slice());
            match (&mut labels, &p.labels) {
                (Some(all), Some(l)) => all.extend_from_slice(l),
                _ => labels = None,
            }
        }
        let rows = data.len() / cols.max(1);
        Dataset::new(name, Matrix::from_vec(rows, cols, data)?, labels)
    }

    /// Keeps only `classes` and relabels them `0..classes.len()` in the given order.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let labels = self.labels_required()?;
        for c in classes {
            if !self.class_counts.contains_key(c) {
                return Err(Error::invalid(format!("class {c} is not present in {}", self.name)));
            }
        }
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
        let relabeled = keep
            .iter()
            .map(|&i| classes.iter().position(|&c| c == labels[i]).expect("kept class"))
            .collect();
        let name = format!(
            "{}[{}]",
            self.name,
            classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("/")
        );
        Dataset::new(name, self.features.select_rows(&keep), Some(relabeled))
    }
}

/// Opens `path`, transparently gunzipping when the content starts with the gzip magic.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut reader = BufReader::new(File::open(path)?);
    let is_gz = reader.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if is_gz {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(path: &Path, buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, buf.len(), "file truncated inside the header"))
}

/// Raw IDX image tensor: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, buf: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(path, buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = be_u32(path, buf, 4)? as usize;
    let rows = be_u32(path, buf, 8)? as usize;
    let cols = be_u32(path, buf, 12)? as usize;
    let need = 16 + count * rows * cols;
    if buf.len() < need {
        return Err(parse_err(
            path,
            buf.len(),
            format!("file truncated: header promises {count} images of {rows}x{cols} ({need} bytes)"),
        ));
    }
    Ok((count, rows, cols, buf[16..need].to_vec()))
}

pub fn parse_idx_labels(path: &Path, buf: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(path, buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let count = be_u32(path, buf, 4)? as usize;
    if buf.len() < 8 + count {
        return Err(parse_err(
            path,
            buf.len(),
            format!("file truncated: header promises {count} labels"),
        ));
    }
    Ok(buf[8..8 + count].to_vec())
}

/// Loads an IDX image/label pair, flattening each image and scaling pixels by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images_path, &read_all(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_all(labels_path)?)?;
    if labels.len() != count {
        return Err(parse_err(
            labels_path,
            4,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    let features = Matrix::from_vec(count, rows * cols, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, features, Some(labels.into_iter().map(usize::from).collect()))
}

/// Writes an image/label IDX pair from `u8` pixels (row-major, `rows × cols` per image).
pub fn write_idx(images_path: &Path, labels_path: &Path, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::invalid("pixel buffer does not match label count"));
    }
    let mut f = std::io::BufWriter::new(File::create(images_path)?);
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(File::create(labels_path)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}

const MNIST_SPLITS: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

fn find_variant(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
}

/// Loads every standard MNIST split found in `dir` (train and/or t10k,
/// optionally gzipped) and merges them into one dataset.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let mut parts = Vec::new();
    for (img, lab) in MNIST_SPLITS {
        if let (Some(i), Some(l)) = (find_variant(dir, img), find_variant(dir, lab)) {
            parts.push(load_idx(&i, &l)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Config(format!("no MNIST IDX files found in {}", dir.display())));
    }
    Dataset::concat(&parts, "mnist")
}

/// Reads a CSV with a header row. `label_column` names the integer label
/// column; every other column must be numeric.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(open_maybe_gz(path)?);
    let headers = reader.headers()?.clone();
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Config(format!("{}: label column '{name}' not found", path.display()))
        })?),
        None => None,
    };
    let width = headers.len() - usize::from(label_idx.is_some());
    let mut data = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let bad = |what: &str| {
                parse_err(
                    path,
                    rec.position().map_or(0, |p| p.byte() as usize),
                    format!("row {}, column '{}': {what} '{cell}'", line + 1, &headers[c]),
                )
            };
            if Some(c) == label_idx {
                let v: usize = cell.parse().map_err(|_| bad("non-integer label"))?;
                labels.as_mut().expect("label column").push(v);
            } else {
                let v: f64 = cell.parse().map_err(|_| bad("non-numeric cell"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite value"));
                }
                data.push(v);
            }
        }
    }
    let rows = data.len().checked_div(width).unwrap_or(0);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, Matrix::from_vec(rows, width, data)?, labels)
}

/// Writes features as `x0..x{d-1}` columns followed by a `label` column when labels exist.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Isotropic Gaussian blobs, `per_class` points around each center, labelled by center.
pub fn gaussian_blobs(centers: &[Vec<f64>], per_class: usize, std_dev: f64, seed: u64) -> Result<Dataset> {
    let dim = centers.first().map_or(0, Vec::len);
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::invalid("blob centers must share a positive dimension"));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic, 0);
    let mut data = Vec::with_capacity(centers.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for i in 0..centers.len() * per_class {
        // Interleave classes so contiguous slices stay mixed.
        let k = i % centers.len();
        for &c in &centers[k] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(c + std_dev * noise);
        }
        labels.push(k);
    }
    Dataset::new(
        "gaussian_blobs",
        Matrix::from_vec(labels.len(), dim, data)?,
        Some(labels),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SubsampleMode {
    /// Down-sample one class to `round(rate × count)`, leave the rest intact.
    SingleClass { class: usize, rate: f64 },
    /// Sample class `c` to exactly `counts[i]` where `c` is the i-th class in ascending order.
    ExplicitCounts { counts: Vec<usize> },
    /// Keep each point of the k-th of C classes independently with
    /// probability `r_min + k·(1 − r_min)/(C − 1)`.
    Interpolated { r_min: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    #[serde(flatten)]
    pub mode: SubsampleMode,
    pub seed: u64,
}

/// Retention probability of the `rank`-th of `n_classes` classes under the interpolated protocol.
pub fn interpolated_rate(r_min: f64, rank: usize, n_classes: usize) -> f64 {
    if n_classes <= 1 {
        return 1.0;
    }
    r_min + rank as f64 * (1.0 - r_min) / (n_classes - 1) as f64
}

/// Applies a subsampling protocol. Output rows keep their original relative order.
pub fn subsample(ds: &Dataset, spec: &SubsampleSpec) -> Result<Dataset> {
    let labels = ds.labels_required()?;
    let classes: Vec<usize> = ds.class_counts.keys().copied().collect();
    let members = |c: usize| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == c).collect() };
    let mut rng = rng::stream(spec.seed, Stream::Subsample, 0);
    let mut keep: Vec<usize> = Vec::new();
    let suffix;
    match &spec.mode {
        SubsampleMode::SingleClass { class, rate } => {
            if !(0.0..=1.0).contains(rate) {
                return Err(Error::Config(format!("retention rate {rate} outside [0, 1]")));
            }
            if !ds.class_counts.contains_key(class) {
                return Err(Error::invalid(format!("unknown class {class}")));
            }
            for &c in &classes {
                let idx = members(c);
                if c == *class {
                    let target = (rate * idx.len() as f64).round() as usize;
                    keep.extend(index::sample(&mut rng, idx.len(), target).into_iter().map(|j| idx[j]));
                } else {
                    keep.extend(idx);
                }
            }
            suffix = format!("imb{class}@{rate}");
        }
        SubsampleMode::ExplicitCounts { counts } => {
            if counts.len() != classes.len() {
                return Err(Error::Config(format!(
                    "{} counts given for {} classes",
                    counts.len(),
                    classes.len()
                )));
            }
            for (&c, &want) in classes.iter().zip(counts) {
                let idx = members(c);
                if want > idx.len() {
                    return Err(Error::invalid(format!(
                        "class {c}: requested {want} samples but only {} available",
                        idx.len()
                    )));
                }
                keep.extend(index::sample(&mut rng, idx.len(), want).into_iter().map(|j| idx[j]));
            }
            suffix = "counts".to_string();
        }
        SubsampleMode::Interpolated { r_min } => {
            if !(*r_min > 0.0 && *r_min <= 1.0) {
                return Err(Error::Config(format!("r_min {r_min} outside (0, 1]")));
            }
            let rates: BTreeMap<usize, f64> = classes
                .iter()
                .enumerate()
                .map(|(rank, &c)| (c, interpolated_rate(*r_min, rank, classes.len())))
                .collect();
            keep = (0..labels.len())
                .filter(|&i| rng.gen::<f64>() < rates[&labels[i]])
                .collect();
            suffix = format!("rmin{r_min}");
        }
    }
    keep.sort_unstable();
    ds.select(&keep, format!("{}-{suffix}", ds.name))
}
