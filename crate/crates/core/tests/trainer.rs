use std::path::Path;
use std::sync::mpsc;

use rdec::data::{self, Dataset};
use rdec::network::{self, Activation, Network};
use rdec::optim::OptimizerSpec;
use rdec::rng::{self, Stream};
use rdec::trainer::{self, Method, RunReport, StopReason, TrainConfig, TrainEvent};
use rdec::vat::VatConfig;
use rdec::Error;

fn two_gaussians() -> Dataset {
    data::gaussian_blobs(&[vec![0.25, 0.25], vec![0.75, 0.75]], 200, 0.05, 7).unwrap()
}

fn synth_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        latent_dim: 2,
        pretrain_epochs: 50,
        pretrain_optimizer: OptimizerSpec::adam(0.001),
        tau: 10,
        itr_max: 2000,
        vat: VatConfig {
            epsilon: 0.05,
            xi: 0.01,
            power_iterations: 1,
        },
        seed,
        ..Default::default()
    }
}

fn small_blobs() -> Dataset {
    data::gaussian_blobs(&[vec![0.0; 4], vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]], 25, 0.2, 2).unwrap()
}

fn small_encoder(seed: u64) -> Network {
    let mut r = rng::stream(seed, Stream::Encoder, 0);
    Network::new(&[4, 10, 3], &[Activation::Relu, Activation::Identity], &mut r).unwrap()
}

fn small_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        tau: 5,
        itr_max: 30,
        sigma: 1e-9,
        batch_size: 16,
        kmeans_restarts: 3,
        vat: VatConfig {
            epsilon: 0.1,
            xi: 0.01,
            power_iterations: 1,
        },
        seed,
        ..Default::default()
    }
}

fn without_clock(mut r: RunReport) -> RunReport {
    r.wall_clock_seconds = 0.0;
    r
}

#[test]
fn two_gaussian_runs_converge_with_a_settling_loss() {
    let ds = two_gaussians();
    let labels = ds.labels.as_deref();
    let cfg = synth_config(Method::Dec, 7);
    let (mut enc, mut dec_net) = network::build_network(2, 2, cfg.seed).unwrap();
    trainer::pretrain(&mut enc, &mut dec_net, &ds.features, &cfg, None).unwrap();
    for method in [Method::Dec, Method::Rdec] {
        let cfg = synth_config(method, 7);
        let out = trainer::cluster_with_encoder(Some(enc.clone()), &ds.features, labels, 2, &cfg, None).unwrap();
        let r = out.report;
        assert_eq!(r.stop_reason, StopReason::Converged, "{method:?}");
        assert!(r.iterations * 10 <= cfg.itr_max, "{method:?} needed {} iterations", r.iterations);
        assert_eq!(r.trace.last().unwrap().iteration, r.iterations);
        assert!(r.trace.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let later: Vec<f64> = r.trace.iter().skip(2).filter_map(|e| e.loss.map(|l| l.total)).collect();
        let rises = later.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 1, "{method:?} checkpoint losses {later:?}");
        if method == Method::Dec {
            assert!(r.trace.iter().filter_map(|e| e.loss).all(|l| l.l_v == 0.0));
        }
    }
}

#[test]
fn runs_are_deterministic_in_the_seed() {
    let ds = small_blobs();
    let labels = ds.labels.as_deref();
    let run = |seed| {
        let cfg = small_config(Method::Rdec, seed);
        without_clock(trainer::finetune(small_encoder(1), &ds.features, labels, 3, &cfg, None).unwrap().report)
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4).trace, run(5).trace);
}

#[test]
fn iteration_budget_and_patience_stop_the_run() {
    // Structureless data and a hot optimizer keep assignments moving.
    let ds = data::gaussian_blobs(&vec![vec![0.0; 4]; 3], 25, 1.0, 2).unwrap();
    let cfg = TrainConfig {
        finetune_optimizer: OptimizerSpec::adam(0.05),
        tau: 40,
        ..small_config(Method::Dec, 3)
    };
    let r = trainer::finetune(small_encoder(3), &ds.features, None, 3, &cfg, None).unwrap().report;
    assert_eq!(r.stop_reason, StopReason::MaxIterations);
    assert_eq!(r.iterations, 30);
    assert_eq!(r.trace.iter().map(|e| e.iteration).collect::<Vec<_>>(), vec![0, 30]);
    assert!(r.trace.iter().all(|e| e.acc.is_none()));

    let cfg = TrainConfig {
        patience: Some(3),
        tau: 10_000,
        itr_max: 10_000,
        ..cfg
    };
    let r = trainer::finetune(small_encoder(3), &ds.features, None, 3, &cfg, None).unwrap().report;
    assert_eq!(r.stop_reason, StopReason::Patience);
    assert!(r.iterations < 10_000);
}

#[test]
fn events_mirror_the_report() {
    let ds = small_blobs();
    let (tx, rx) = mpsc::channel();
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        pretrain_optimizer: OptimizerSpec::adam(0.001),
        latent_dim: 3,
        ..small_config(Method::Rdec, 8)
    };
    let out = trainer::run_method(&ds.features, ds.labels.as_deref(), 3, &cfg, Some(&tx)).unwrap();
    drop(tx);
    let events: Vec<TrainEvent> = rx.into_iter().collect();
    let epochs = events.iter().filter(|e| matches!(e, TrainEvent::PretrainEpoch { .. })).count();
    assert_eq!(epochs, 3);
    let checkpoints: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            TrainEvent::Checkpoint(t) => Some(t.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(checkpoints, out.report.trace);
    assert_eq!(events.last(), Some(&TrainEvent::Finished(out.report.stop_reason)));
    assert_eq!(out.pretrain.unwrap().epoch_losses.len(), 3);
}

#[test]
fn cluster_count_is_checked() {
    let ds = small_blobs();
    for k in [1, ds.len() + 1] {
        let err = trainer::finetune(small_encoder(1), &ds.features, None, k, &small_config(Method::Dec, 0), None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_) | Error::Config(_)), "{err}");
    }
    assert!(trainer::run_method(&ds.features, None, ds.len() + 1, &small_config(Method::Kmeans, 0), None).is_err());
}

#[test]
fn kmeans_baselines_run_without_finetuning() {
    let ds = small_blobs();
    let labels = ds.labels.as_deref();
    let raw = trainer::run_method(&ds.features, labels, 3, &small_config(Method::Kmeans, 0), None).unwrap();
    assert!(raw.model.is_none() && raw.embedding.is_none());
    assert_eq!(raw.report.trace.len(), 1);
    assert_eq!(raw.report.trace[0].acc, Some(1.0));

    let ae = trainer::cluster_with_encoder(Some(small_encoder(2)), &ds.features, labels, 3, &small_config(Method::AeKmeans, 0), None)
        .unwrap();
    assert_eq!(ae.embedding.unwrap().shape(), (ds.len(), 3));
    assert!(trainer::cluster_with_encoder(None, &ds.features, labels, 3, &small_config(Method::Dec, 0), None).is_err());
}

#[test]
fn pretraining_reduces_reconstruction_error_on_digits() {
    let td = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata");
    let ds = data::load_idx(&td.join("mnist10k-images-idx3-ubyte.gz"), &td.join("mnist10k-labels-idx1-ubyte.gz")).unwrap();
    let ds = ds.select(&(0..500).collect::<Vec<_>>(), "digits500").unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        ..Default::default()
    };
    let (mut enc, mut dec_net) = network::build_network(784, 10, 0).unwrap();
    let report = trainer::pretrain(&mut enc, &mut dec_net, &ds.features, &cfg, None).unwrap();
    assert_eq!(report.epoch_losses.len(), 3);
    assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(report.final_loss < report.initial_loss, "{report:?}");

    // The loss of an untrained decoder on [0,1] pixels is bounded by the mean squared pixel.
    let mean_sq = ds.features.as_slice().iter().map(|v| v * v).sum::<f64>() / ds.features.as_slice().len() as f64;
    assert!(report.final_loss < mean_sq, "final {} vs all-zero predictor {mean_sq}", report.final_loss);
}
