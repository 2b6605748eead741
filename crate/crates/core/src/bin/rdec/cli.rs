use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rdec::config::{DatasetSource, ExperimentConfig, RawConfig};
use rdec::data::{self, Dataset};
use rdec::metrics;
use rdec::network::{self, Network};
use rdec::trainer::{self, RunOutput, TrainEvent};

#[derive(Debug, Parser)]
#[command(name = "rdec", version, about = "Deep embedded clustering with VAT regularization")]
pub struct Cli {
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the autoencoder and write the model file.
    Pretrain(RunArgs),
    /// Cluster a dataset and write a run directory.
    Train(RunArgs),
    /// Score an assignment file against a label file.
    Eval(EvalArgs),
    /// Apply a subsampling protocol and write the resulting dataset.
    Subsample(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; a timestamp suffix is added if it already exists.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    /// Pretrained model file (overrides the `model` key).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Also write the metrics table to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid configuration or inputs, detected before any compute.
#[derive(Debug)]
pub struct ConfigFailure(String);

impl fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigFailure(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigFailure>().is_some() || matches!(e.downcast_ref::<rdec::Error>(), Some(rdec::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a, cli.quiet),
        Command::Train(a) => cmd_train(&a, cli.quiet),
        Command::Eval(a) => cmd_eval(&a),
        Command::Subsample(a) => cmd_subsample(&a),
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut raw = RawConfig::parse(&text)?;
    let overrides = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("method", args.method.clone()),
        ("gamma", args.gamma.map(|v| v.to_string())),
        ("vat.epsilon", args.epsilon.map(|v| v.to_string())),
        ("s", args.s.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("itr_max", args.max_iter.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            raw.set(key, &v)?;
        }
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let mut cfg = ExperimentConfig::from_raw(&raw, base)?;
    if let Some(m) = &args.model {
        cfg.model = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn check_inputs(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let ds = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("config does not name a dataset (dataset.format)"))?;
    let missing = match &ds.source {
        DatasetSource::Idx { images, labels } => [images, labels].into_iter().find(|p| !p.is_file()).cloned(),
        DatasetSource::MnistDir(dir) => (!dir.is_dir()).then(|| dir.clone()),
        DatasetSource::Csv { path, .. } => (!path.is_file()).then(|| path.clone()),
        DatasetSource::Gaussians { .. } => None,
    };
    if let Some(p) = missing {
        return Err(config_err(format!("dataset path {} does not exist", p.display())));
    }
    Ok(ds.input_files()?)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = cfg.dataset.as_ref().expect("checked by check_inputs").load()?;
    if ds.is_empty() {
        return Err(config_err("dataset is empty after filtering"));
    }
    Ok(ds)
}

/// Output directory written under a temporary name and renamed on success.
struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    done: bool,
}

impl Staging {
    fn new(requested: &Path) -> Result<Self> {
        let target = fresh_dir_name(requested);
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if let Some(parent) = tmp.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Staging { tmp, target, done: false })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.target).with_context(|| format!("moving run into {}", self.target.display()))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn fresh_dir_name(requested: &Path) -> PathBuf {
    if !requested.exists() {
        return requested.to_path_buf();
    }
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = requested.as_os_str().to_string_lossy().trim_end_matches('/').to_string();
    let mut candidate = PathBuf::from(format!("{base}-{stamp}"));
    let mut n = 1;
    while candidate.exists() {
        candidate = PathBuf::from(format!("{base}-{stamp}-{n}"));
        n += 1;
    }
    candidate
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Config copy, seed and content hashes of every input.
fn write_provenance(stage: &Staging, cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<()> {
    let text = cfg.to_text();
    fs::write(stage.path("config.txt"), &text)?;
    fs::write(stage.path("seed"), format!("{}\n", cfg.train.seed))?;
    let mut lines = Vec::new();
    let mut all = Sha256::new();
    for p in inputs.iter().chain(cfg.model.iter()) {
        let h = sha256_file(p)?;
        all.update(h.as_bytes());
        lines.push(format!("{h}  {}", p.display()));
    }
    let h = hex(&Sha256::digest(text.as_bytes()));
    all.update(h.as_bytes());
    lines.push(format!("{h}  config.txt"));
    lines.push(format!("{}  combined", hex(&all.finalize())));
    fs::write(stage.path("inputs.sha256"), lines.join("\n") + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn spawn_reporter(quiet: bool) -> (mpsc::Sender<TrainEvent>, thread::JoinHandle<()>) {
    let (tx, rx) = mpsc::channel();
    let handle = thread::spawn(move || {
        for ev in rx {
            if quiet {
                continue;
            }
            match ev {
                TrainEvent::PretrainEpoch { epoch, loss } => {
                    if epoch % 10 == 0 {
                        eprintln!("pretrain epoch {epoch:>4}  loss {loss:.6}");
                    }
                }
                TrainEvent::Checkpoint(e) => {
                    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                    let (l_d, l_v) = e.loss.map_or((None, None), |l| (Some(l.l_d), Some(l.l_v)));
                    eprintln!(
                        "iter {:>6}  L_D {}  L_V {}  acc {}  change {}",
                        e.iteration,
                        fmt_opt(l_d),
                        fmt_opt(l_v),
                        fmt_opt(e.acc),
                        fmt_opt(e.change_rate)
                    );
                }
                TrainEvent::Finished(reason) => eprintln!("stopped: {reason:?}"),
            }
        }
    });
    (tx, handle)
}

#[derive(Serialize)]
struct PretrainLog<'a> {
    seed: u64,
    n: usize,
    input_dim: usize,
    latent_dim: usize,
    epochs: usize,
    report: &'a trainer::PretrainReport,
}

fn cmd_pretrain(args: &RunArgs, quiet: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let inputs = check_inputs(&cfg)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/pretrain"));
    let ds = load_dataset(&cfg)?;
    let stage = Staging::new(&out)?;
    write_provenance(&stage, &cfg, &inputs)?;

    let (tx, reporter) = spawn_reporter(quiet);
    let (mut enc, mut dec) = network::build_network(ds.dim(), cfg.train.latent_dim, cfg.train.seed)?;
    let pre = trainer::pretrain(&mut enc, &mut dec, &ds.features, &cfg.train, Some(&tx));
    drop(tx);
    let _ = reporter.join();
    let pre = pre?;

    network::save_model(&stage.path("model.bin"), &enc, &dec)?;
    write_json(
        &stage.path("pretrain_log.json"),
        &PretrainLog {
            seed: cfg.train.seed,
            n: ds.len(),
            input_dim: ds.dim(),
            latent_dim: cfg.train.latent_dim,
            epochs: pre.epoch_losses.len(),
            report: &pre,
        },
    )?;
    let dir = stage.commit()?;
    println!("{}", dir.join("model.bin").display());
    Ok(())
}

fn load_encoder(path: &Path, ds: &Dataset, cfg: &ExperimentConfig) -> Result<Network> {
    let (enc, _) = network::load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if enc.input_dim() != ds.dim() {
        return Err(config_err(format!(
            "model expects {} input features, dataset has {}",
            enc.input_dim(),
            ds.dim()
        )));
    }
    if enc.output_dim() != cfg.train.latent_dim {
        return Err(config_err(format!(
            "model latent dimension {} differs from latent_dim = {}",
            enc.output_dim(),
            cfg.train.latent_dim
        )));
    }
    Ok(enc)
}

fn cmd_train(args: &RunArgs, quiet: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let inputs = check_inputs(&cfg)?;
    if let Some(m) = &cfg.model {
        if !m.is_file() {
            return Err(config_err(format!("model file {} does not exist", m.display())));
        }
    }
    let ds = load_dataset(&cfg)?;
    let k = match cfg.k {
        Some(k) => k,
        None if ds.labels.is_some() => ds.n_classes(),
        None => return Err(config_err("k is required for unlabelled data")),
    };
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}", cfg.train.method.name())));
    let labels = ds.labels.as_deref();
    let encoder = match (&cfg.model, cfg.train.method.needs_autoencoder()) {
        (Some(m), true) => Some(load_encoder(m, &ds, &cfg)?),
        _ => None,
    };

    let stage = Staging::new(&out)?;
    write_provenance(&stage, &cfg, &inputs)?;
    let (tx, reporter) = spawn_reporter(quiet);
    let result = (|| -> Result<RunOutput> {
        if encoder.is_none() && cfg.train.method.needs_autoencoder() {
            let (mut enc, mut dec) = network::build_network(ds.dim(), cfg.train.latent_dim, cfg.train.seed)?;
            let pre = trainer::pretrain(&mut enc, &mut dec, &ds.features, &cfg.train, Some(&tx))?;
            network::save_model(&stage.path("model.bin"), &enc, &dec)?;
            write_json(&stage.path("pretrain_log.json"), &pre)?;
            let mut out = trainer::cluster_with_encoder(Some(enc), &ds.features, labels, k, &cfg.train, Some(&tx))?;
            out.pretrain = Some(pre);
            Ok(out)
        } else {
            Ok(trainer::cluster_with_encoder(
                encoder,
                &ds.features,
                labels,
                k,
                &cfg.train,
                Some(&tx),
            )?)
        }
    })();
    drop(tx);
    let _ = reporter.join();
    let run = result?;

    write_json(&stage.path("report.json"), &run.report)?;
    write_assignments(&stage.path("assignments.csv"), &run.report.assignments, labels)?;
    write_curves(&stage.path("curves.csv"), &run.report)?;
    if let Some(l) = labels {
        let table = metric_rows(l, &run.report.assignments)?;
        write_metrics(&stage.path("metrics.csv"), &table)?;
        if !quiet {
            print_metrics(&table);
        }
    }
    if let Some(z) = run.embedding.as_ref().filter(|z| z.cols() == 2) {
        write_embeddings(&stage.path("embeddings.csv"), z, &run.report.assignments, labels)?;
    }
    let dir = stage.commit()?;
    println!("{}", dir.display());
    Ok(())
}

fn write_assignments(path: &Path, assignments: &[usize], labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if labels.is_some() {
        w.write_record(["index", "cluster", "label"])?;
    } else {
        w.write_record(["index", "cluster"])?;
    }
    for (i, &c) in assignments.iter().enumerate() {
        let mut rec = vec![i.to_string(), c.to_string()];
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_curves(path: &Path, report: &trainer::RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "l_d", "l_v", "total", "acc", "ari", "change_rate"])?;
    for e in &report.trace {
        w.write_record([
            e.iteration.to_string(),
            opt(e.loss.map(|l| l.l_d)),
            opt(e.loss.map(|l| l.l_v)),
            opt(e.loss.map(|l| l.total)),
            opt(e.acc),
            opt(e.ari),
            opt(e.change_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_embeddings(path: &Path, z: &rdec::Matrix, assignments: &[usize], labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["z0", "z1", "cluster", "label"])?;
    for (i, row) in z.iter_rows().enumerate() {
        w.write_record([
            row[0].to_string(),
            row[1].to_string(),
            assignments[i].to_string(),
            labels.map_or_else(String::new, |l| l[i].to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn metric_rows(labels: &[usize], assignments: &[usize]) -> Result<Vec<(String, f64)>> {
    if labels.len() != assignments.len() {
        return Err(config_err(format!(
            "{} labels but {} assignments",
            labels.len(),
            assignments.len()
        )));
    }
    let (acc, mapping) = metrics::accuracy(labels, assignments)?;
    let ari = metrics::adjusted_rand_index_detailed(labels, assignments)?;
    let mut rows = vec![
        ("acc".to_string(), acc),
        ("ari".to_string(), ari.value),
        ("ari_degenerate".to_string(), f64::from(u8::from(ari.degenerate))),
    ];
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let s = metrics::per_class_prf(labels, assignments, &mapping, c)?;
        rows.push((format!("class_{c}_recall"), s.recall));
        rows.push((format!("class_{c}_precision"), s.precision));
        rows.push((format!("class_{c}_f_measure"), s.f_measure));
    }
    Ok(rows)
}

fn write_metrics(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn print_metrics(rows: &[(String, f64)]) {
    for (k, v) in rows {
        println!("{k:<24} {v:.6}");
    }
}

/// Integer column of a CSV or plain list: the named column if a header has it,
/// otherwise the last column. A non-numeric first line is taken as a header.
fn read_int_column(path: &Path, preferred: &str) -> Result<Vec<usize>> {
    let f = fs::File::open(path).map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut col: Option<usize> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && cells.iter().any(|c| c.parse::<usize>().is_err()) {
            col = cells.iter().position(|c| *c == preferred);
            continue;
        }
        let idx = col.unwrap_or(cells.len() - 1);
        let cell = cells
            .get(idx)
            .ok_or_else(|| config_err(format!("{}:{}: missing column", path.display(), i + 1)))?;
        let v = cell
            .parse::<usize>()
            .map_err(|_| config_err(format!("{}:{}: '{cell}' is not a non-negative integer", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let assignments = read_int_column(&args.assignments, "cluster")?;
    let labels = read_int_column(&args.labels, "label")?;
    let rows = metric_rows(&labels, &assignments)?;
    print_metrics(&rows);
    if let Some(out) = &args.out {
        if out.exists() {
            bail!("refusing to overwrite {}", out.display());
        }
        let tmp = out.with_extension("partial");
        write_metrics(&tmp, &rows)?;
        fs::rename(&tmp, out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    source: String,
    spec: Option<&'a data::SubsampleSpec>,
    classes: Option<&'a [usize]>,
    n: usize,
    class_counts: &'a std::collections::BTreeMap<usize, usize>,
    files: Vec<String>,
}

fn cmd_subsample(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let inputs = check_inputs(&cfg)?;
    let spec = cfg.dataset.as_ref().expect("checked");
    if spec.subsample.is_none() {
        return Err(config_err("subsample needs subsample.mode in the config"));
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/subsample"));
    let ds = load_dataset(&cfg)?;
    let stage = Staging::new(&out)?;
    write_provenance(&stage, &cfg, &inputs)?;
    let image_source = matches!(spec.source, DatasetSource::Idx { .. } | DatasetSource::MnistDir(_));
    let files = if image_source && ds.dim() == 784 && ds.labels.is_some() {
        let pixels: Vec<u8> = ds.features.as_slice().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let labels: Vec<u8> = ds.labels_required()?.iter().map(|&l| l as u8).collect();
        data::write_idx(
            &stage.path("images-idx3-ubyte"),
            &stage.path("labels-idx1-ubyte"),
            28,
            28,
            &pixels,
            &labels,
        )?;
        vec!["images-idx3-ubyte".to_string(), "labels-idx1-ubyte".to_string()]
    } else {
        data::write_csv(&ds, &stage.path("dataset.csv"))?;
        vec!["dataset.csv".to_string()]
    };
    let manifest = Manifest {
        source: ds.name.clone(),
        spec: spec.subsample.as_ref(),
        classes: spec.classes.as_deref(),
        n: ds.len(),
        class_counts: &ds.class_counts,
        files,
    };
    write_json(&stage.path("manifest.json"), &manifest)?;
    let dir = stage.commit()?;
    println!("{}", dir.display());
    Ok(())
}
