//! Two-phase training: autoencoder pretraining, then joint fine-tuning of
//! the clustering loss `L_D + γ·L_V` with periodic target refresh.

use std::sync::mpsc::Sender;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dec::{self, TargetDistribution};
use crate::error::{Error, Result};
use crate::kmeans;
use crate::metrics;
use crate::model::ClusterModel;
use crate::network::Network;
use crate::optim::{OptimizerSpec, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::{self, Matrix};
use crate::vat::{self, VatConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Lloyd's k-means on the raw features.
    Kmeans,
    /// k-means on the pretrained embedding.
    AeKmeans,
    /// Self-training on KL(P‖Q) alone.
    Dec,
    /// Self-training regularized by the VAT loss.
    Rdec,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kmeans => "kmeans",
            Method::AeKmeans => "ae_kmeans",
            Method::Dec => "dec",
            Method::Rdec => "rdec",
        }
    }

    pub fn needs_autoencoder(self) -> bool {
        self != Method::Kmeans
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Method::Kmeans),
            "ae_kmeans" | "ae+kmeans" => Ok(Method::AeKmeans),
            "dec" => Ok(Method::Dec),
            "rdec" => Ok(Method::Rdec),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub gamma: f64,
    pub s: f64,
    pub vat: VatConfig,
    /// Iterations between target-distribution refreshes.
    pub tau: usize,
    /// Stop once the fraction of changed hard assignments between refreshes drops below this.
    pub sigma: f64,
    pub itr_max: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_optimizer: OptimizerSpec,
    pub finetune_optimizer: OptimizerSpec,
    pub latent_dim: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    /// Optional early stop: halt when the best batch `L_D` has not improved for this many iterations.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Rdec,
            gamma: 5.0,
            s: dec::DEFAULT_S,
            vat: VatConfig::default(),
            tau: 140,
            sigma: 0.01,
            itr_max: 20_000,
            batch_size: 256,
            pretrain_epochs: 300,
            pretrain_optimizer: OptimizerSpec::sgd(1.0, 0.9),
            finetune_optimizer: OptimizerSpec::sgd(0.01, 0.9),
            latent_dim: 10,
            kmeans_restarts: kmeans::DEFAULT_RESTARTS,
            kmeans_max_iter: kmeans::DEFAULT_MAX_ITER,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.s >= 1.0) {
            return fail(format!("s must be >= 1, got {}", self.s));
        }
        if self.tau == 0 {
            return fail("tau must be >= 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return fail(format!("sigma must lie in (0, 1), got {}", self.sigma));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be >= 1".into());
        }
        if self.kmeans_restarts == 0 {
            return fail("kmeans_restarts must be >= 1".into());
        }
        if self.patience == Some(0) {
            return fail("patience must be >= 1 when set".into());
        }
        self.vat.validate()?;
        self.pretrain_optimizer.validate()?;
        self.finetune_optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Patience,
}

/// Batch losses averaged over the interval ending at a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalLoss {
    pub l_d: f64,
    pub l_v: f64,
    pub total: f64,
}

/// State at one target-refresh checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// `None` at iteration 0, before any update.
    pub loss: Option<IntervalLoss>,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
    /// Fraction of hard assignments that changed since the previous checkpoint.
    pub change_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub trace: Vec<TraceEntry>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Full-data reconstruction MSE before the first update.
    pub initial_loss: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-data reconstruction MSE after the last update.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    PretrainEpoch { epoch: usize, loss: f64 },
    Checkpoint(TraceEntry),
    Finished(StopReason),
}

/// Optional progress channel; send errors (a dropped receiver) are ignored.
pub type Events<'a> = Option<&'a Sender<TrainEvent>>;

fn emit(events: Events<'_>, ev: TrainEvent) {
    if let Some(tx) = events {
        let _ = tx.send(ev);
    }
}

/// Centroids, frozen target distribution and how many iterations it has been used for.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub target: TargetDistribution,
    pub age: usize,
}

/// Fraction of positions whose hard assignment differs.
pub fn label_change_rate(prev: &[usize], next: &[usize]) -> Result<f64> {
    if prev.len() != next.len() {
        return Err(Error::dim("label_change_rate", (prev.len(), 1), (next.len(), 1)));
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    let changed = prev.iter().zip(next).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / prev.len() as f64)
}

/// Seeded batch order, reshuffled at every pass over the data.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    batch: usize,
    seed: u64,
    stream: Stream,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64, stream: Stream) -> Self {
        let mut s = BatchStream {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            batch,
            seed,
            stream,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = rng::stream(self.seed, self.stream, self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    /// The next batch; the final batch of a pass may be short.
    fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let start = self.cursor;
        self.cursor = (start + self.batch).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

fn reconstruction_mse(encoder: &Network, decoder: &Network, data: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for chunk in row_chunks(data.rows(), 1024) {
        let x = data.select_rows(&chunk);
        let recon = decoder.forward(&encoder.forward(&x)?)?;
        let (loss, _) = tensor::mse_loss(&recon, &x)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.rows().max(1) as f64)
}

fn row_chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
}

/// Mini-batch autoencoder training on mean squared reconstruction error.
pub fn pretrain(encoder: &mut Network, decoder: &mut Network, data: &Matrix, cfg: &TrainConfig, events: Events<'_>) -> Result<PretrainReport> {
    if data.rows() == 0 {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != data.cols() {
        return Err(Error::dim("pretrain", (encoder.input_dim(), decoder.output_dim()), data.shape()));
    }
    cfg.pretrain_optimizer.validate()?;
    let initial_loss = reconstruction_mse(encoder, decoder, data)?;
    let mut opt = OptimizerState::new(cfg.pretrain_optimizer);
    let mut batches = BatchStream::new(data.rows(), cfg.batch_size.max(1), cfg.seed, Stream::Pretrain);
    let per_epoch = data.rows().div_ceil(cfg.batch_size.max(1));
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let x = data.select_rows(batches.next_batch());
            let (z, enc_trace) = encoder.forward_trace(&x)?;
            let (recon, dec_trace) = decoder.forward_trace(&z)?;
            let (loss, grad) = tensor::mse_loss(&recon, &x)?;
            sum += loss;
            let (grad_z, dec_grads) = decoder.backward(&dec_trace, &grad, true, true)?;
            let (_, enc_grads) = encoder.backward(&enc_trace, &grad_z.expect("input grad"), true, false)?;
            let (enc_grads, dec_grads) = (enc_grads.expect("param grads"), dec_grads.expect("param grads"));
            let mut params = encoder.params_mut();
            params.extend(decoder.params_mut());
            let mut grads = enc_grads.slices();
            grads.extend(dec_grads.slices());
            opt.step(&mut params, &grads)?;
        }
        let loss = sum / per_epoch as f64;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("pretraining diverged in epoch {epoch}")));
        }
        epoch_losses.push(loss);
        emit(events, TrainEvent::PretrainEpoch { epoch, loss });
    }
    let final_loss = reconstruction_mse(encoder, decoder, data)?;
    Ok(PretrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
    })
}

/// Embeds `data` in chunks to bound peak memory.
pub fn embed_all(encoder: &Network, data: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(data.rows() * encoder.output_dim());
    for chunk in row_chunks(data.rows(), 2048) {
        out.extend_from_slice(encoder.forward(&data.select_rows(&chunk))?.as_slice());
    }
    Matrix::from_vec(data.rows(), encoder.output_dim(), out)
}

fn hard_metrics(labels: Option<&[usize]>, assignments: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
    match labels {
        Some(l) if l.len() >= 2 => Ok((
            Some(metrics::accuracy(l, assignments)?.0),
            Some(metrics::adjusted_rand_index(l, assignments)?),
        )),
        _ => Ok((None, None)),
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub model: ClusterModel,
    pub report: RunReport,
}

/// Joint fine-tuning of encoder and centroids.
///
/// Centroids start from k-means on the embedding. Every `tau` iterations the
/// full-data Q is recomputed, a checkpoint is recorded, the stop rule is
/// checked and P is refreshed; in between, each mini-batch takes one
/// optimizer step on the batch-mean `L_D` (plus `γ·L_V` for RDEC).
pub fn finetune(
    encoder: Network,
    data: &Matrix,
    labels: Option<&[usize]>,
    k: usize,
    cfg: &TrainConfig,
    events: Events<'_>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if k < 2 {
        return Err(Error::invalid(format!("fine-tuning needs K >= 2, got {k}")));
    }
    if k > data.rows() {
        return Err(Error::invalid(format!("K = {k} exceeds the {} data points", data.rows())));
    }
    if let Some(l) = labels {
        if l.len() != data.rows() {
            return Err(Error::dim("finetune labels", data.shape(), (l.len(), 1)));
        }
    }
    let started = Instant::now();
    let use_vat = cfg.method == Method::Rdec && cfg.gamma > 0.0;

    let z = embed_all(&encoder, data)?;
    let init = kmeans::kmeans(&z, k, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.seed)?;
    let mut model = ClusterModel::new(encoder, init.centroids);
    let mut opt = OptimizerState::new(cfg.finetune_optimizer);
    let mut batches = BatchStream::new(data.rows(), cfg.batch_size, cfg.seed, Stream::Finetune);

    let mut trace = Vec::new();
    let mut state: Option<ClusterState> = None;
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut interval = (0.0, 0.0, 0usize);
    let mut best_ld = f64::INFINITY;
    let mut since_best = 0usize;
    let mut iteration = 0usize;

    let stop_reason = loop {
        let at_checkpoint = iteration.is_multiple_of(cfg.tau) || iteration == cfg.itr_max;
        let patience_hit = cfg.patience.is_some_and(|p| since_best >= p);
        if at_checkpoint || patience_hit {
            let q = dec::soft_assign(&embed_all(&model.encoder, data)?, &model.centroids, model.alpha)?;
            let assign = q.q.argmax_rows();
            let change_rate = prev_assign
                .as_deref()
                .map(|p| label_change_rate(p, &assign))
                .transpose()?;
            let loss = (interval.2 > 0).then(|| {
                let n = interval.2 as f64;
                let (l_d, l_v) = (interval.0 / n, interval.1 / n);
                IntervalLoss {
                    l_d,
                    l_v,
                    total: l_d + cfg.gamma * l_v,
                }
            });
            let (acc, ari) = hard_metrics(labels, &assign)?;
            let entry = TraceEntry {
                iteration,
                loss,
                acc,
                ari,
                change_rate,
            };
            trace.push(entry.clone());
            emit(events, TrainEvent::Checkpoint(entry));
            interval = (0.0, 0.0, 0);

            let stop = if change_rate.is_some_and(|r| r < cfg.sigma) {
                Some(StopReason::Converged)
            } else if iteration >= cfg.itr_max {
                Some(StopReason::MaxIterations)
            } else if patience_hit {
                Some(StopReason::Patience)
            } else {
                None
            };
            prev_assign = Some(assign);
            if let Some(reason) = stop {
                break reason;
            }
            if at_checkpoint {
                state = Some(ClusterState {
                    target: dec::target_distribution(&q, cfg.s)?,
                    age: 0,
                });
            }
        }

        let st = state.as_mut().expect("target set at iteration 0");
        let idx = batches.next_batch().to_vec();
        let x = data.select_rows(&idx);
        let p = st.target.p.select_rows(&idx);
        let scale = 1.0 / idx.len() as f64;
        let bp = model.backprop(&x, &p, scale, true, false)?;
        let l_d = dec::kl_divergence(&p, &bp.q.q)? * scale;
        let mut grads = bp.grads.expect("parameter gradients");
        let mut l_v = 0.0;
        if use_vat {
            let mut vrng = rng::stream(cfg.seed, Stream::Vat, iteration as u64);
            let r_adv = vat::compute_radv(&model, &x, &bp.q.q, &cfg.vat, &mut vrng)?;
            let (loss, vgrads) = vat::vat_loss_against(&model, &x, &r_adv, &bp.q.q)?;
            grads.add_scaled(&vgrads, cfg.gamma)?;
            l_v = loss;
        }
        opt.step(&mut model.params_mut(), &grads.slices())?;

        if !(l_d.is_finite() && l_v.is_finite()) || !model.centroids.is_finite() {
            return Err(Error::invalid(format!("training diverged at iteration {iteration}")));
        }
        interval.0 += l_d;
        interval.1 += l_v;
        interval.2 += 1;
        if l_d < best_ld {
            best_ld = l_d;
            since_best = 0;
        } else {
            since_best += 1;
        }
        st.age += 1;
        iteration += 1;
    };
    emit(events, TrainEvent::Finished(stop_reason));

    let report = RunReport {
        method: cfg.method,
        trace,
        assignments: prev_assign.unwrap_or_default(),
        centroids: model.centroids.iter_rows().map(<[f64]>::to_vec).collect(),
        stop_reason,
        iterations: iteration,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(FinetuneOutput { model, report })
}

/// Result of one clustering run of any method.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Fine-tuned clustering model (DEC/RDEC only).
    pub model: Option<ClusterModel>,
    /// Final embedding of the data (every method except raw k-means).
    pub embedding: Option<Matrix>,
    pub pretrain: Option<PretrainReport>,
}

/// k-means result wrapped as a run report with a single checkpoint.
fn kmeans_report(points: &Matrix, labels: Option<&[usize]>, k: usize, cfg: &TrainConfig, started: Instant) -> Result<RunReport> {
    let res = kmeans::kmeans(points, k, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.seed)?;
    let (acc, ari) = hard_metrics(labels, &res.assignments)?;
    Ok(RunReport {
        method: cfg.method,
        trace: vec![TraceEntry {
            iteration: res.iterations,
            loss: None,
            acc,
            ari,
            change_rate: None,
        }],
        assignments: res.assignments,
        centroids: res.centroids.iter_rows().map(<[f64]>::to_vec).collect(),
        stop_reason: StopReason::Converged,
        iterations: res.iterations,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs `cfg.method` starting from an already pretrained encoder (ignored for raw k-means).
pub fn cluster_with_encoder(
    encoder: Option<Network>,
    data: &Matrix,
    labels: Option<&[usize]>,
    k: usize,
    cfg: &TrainConfig,
    events: Events<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    match cfg.method {
        Method::Kmeans => Ok(RunOutput {
            report: kmeans_report(data, labels, k, cfg, started)?,
            model: None,
            embedding: None,
            pretrain: None,
        }),
        Method::AeKmeans => {
            let encoder = encoder.ok_or_else(|| Error::Config("ae_kmeans needs a pretrained encoder".into()))?;
            let z = embed_all(&encoder, data)?;
            Ok(RunOutput {
                report: kmeans_report(&z, labels, k, cfg, started)?,
                model: None,
                embedding: Some(z),
                pretrain: None,
            })
        }
        Method::Dec | Method::Rdec => {
            let encoder = encoder.ok_or_else(|| Error::Config(format!("{} needs a pretrained encoder", cfg.method.name())))?;
            let out = finetune(encoder, data, labels, k, cfg, events)?;
            let embedding = embed_all(&out.model.encoder, data)?;
            Ok(RunOutput {
                report: out.report,
                embedding: Some(embedding),
                model: Some(out.model),
                pretrain: None,
            })
        }
    }
}

/// Full pipeline: builds and pretrains the autoencoder when the method needs one, then clusters.
pub fn run_method(data: &Matrix, labels: Option<&[usize]>, k: usize, cfg: &TrainConfig, events: Events<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    if !cfg.method.needs_autoencoder() {
        return cluster_with_encoder(None, data, labels, k, cfg, events);
    }
    let (mut encoder, mut decoder) = crate::network::build_network(data.cols(), cfg.latent_dim, cfg.seed)?;
    let pre = pretrain(&mut encoder, &mut decoder, data, cfg, events)?;
    let mut out = cluster_with_encoder(Some(encoder), data, labels, k, cfg, events)?;
    out.pretrain = Some(pre);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn change_rate_cases() {
        assert_eq!(label_change_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(label_change_rate(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(label_change_rate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.25);
        assert!(label_change_rate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { gamma: -1.0, ..Default::default() },
            TrainConfig { tau: 0, ..Default::default() },
            TrainConfig { sigma: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { s: 0.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn batch_stream_covers_each_pass() {
        let mut b = BatchStream::new(10, 4, 1, Stream::Finetune);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..3 {
            seen.extend_from_slice(b.next_batch());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next_batch().len(), 4);
    }

    #[test]
    fn zero_epochs_leave_weights() {
        let (mut enc, mut dec) = crate::network::build_network(4, 2, 1).unwrap();
        let before = (enc.clone(), dec.clone());
        let data = Matrix::filled(5, 4, 0.5);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..Default::default()
        };
        let rep = pretrain(&mut enc, &mut dec, &data, &cfg, None).unwrap();
        assert_eq!((enc, dec), before);
        assert_eq!(rep.initial_loss, rep.final_loss);
        assert!(pretrain(&mut before.0.clone(), &mut before.1.clone(), &Matrix::zeros(0, 4), &cfg, None).is_err());
    }
}
