use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use rdec::data::{self, Dataset, SubsampleMode, SubsampleSpec};
use rdec::{Error, Matrix};

fn mnist10k() -> Dataset {
    let td = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata");
    data::load_idx(&td.join("mnist10k-images-idx3-ubyte.gz"), &td.join("mnist10k-labels-idx1-ubyte.gz")).unwrap()
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Two 2x3 images and their labels, byte by byte.
fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut img = Vec::new();
    for v in [0x0803, 2, 2, 3] {
        img.extend(be(v));
    }
    img.extend([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 17]);
    let mut lab = Vec::new();
    lab.extend(be(0x0801));
    lab.extend(be(2));
    lab.extend([7, 3]);
    let (ip, lp) = (dir.join("img"), dir.join("lab"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

fn row_hash(row: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in row {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

#[test]
fn idx_fixture_loads_exact_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path());
    let ds = data::load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.features.shape(), (2, 6));
    assert_eq!(ds.features.row(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(ds.features.row(1), &[1.0, 0.0, 0.0, 0.0, 0.0, 17.0 / 255.0]);
    assert_eq!(ds.labels.as_deref(), Some(&[7, 3][..]));
}

#[test]
fn idx_gzip_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path());
    let gz = dir.path().join("img.gz");
    let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&gz).unwrap(), flate2::Compression::default());
    enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
    enc.finish().unwrap();
    let (a, b) = (data::load_idx(&gz, &lp).unwrap(), data::load_idx(&ip, &lp).unwrap());
    assert_eq!((a.features, a.labels), (b.features, b.labels));
}

#[test]
fn idx_errors_name_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path());
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    std::fs::write(&ip, &bytes).unwrap();
    let err = data::load_idx(&ip, &lp).unwrap_err();
    assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    assert!(err.to_string().contains("offset 0"), "{err}");

    let (ip, lp) = write_fixture(dir.path());
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(data::load_idx(&ip, &lp), Err(Error::Parse { .. })));

    let (ip, lp) = write_fixture(dir.path());
    let mut lab = std::fs::read(&lp).unwrap();
    lab[7] = 1;
    lab.pop();
    std::fs::write(&lp, lab).unwrap();
    let err = data::load_idx(&ip, &lp).unwrap_err();
    assert!(err.to_string().contains("2 images but 1 labels"), "{err}");
}

#[test]
fn idx_writer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path());
    let ds = data::load_idx(&ip, &lp).unwrap();
    let pixels: Vec<u8> = ds.features.as_slice().iter().map(|v| (v * 255.0).round() as u8).collect();
    let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
    data::write_idx(&ip2, &lp2, 2, 3, &pixels, &[7, 3]).unwrap();
    assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
    assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
}

#[test]
fn csv_fixture_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "a,b,y\n1,2.5,0\n-3,4e-1,1\n0,0,1\n").unwrap();
    let ds = data::load_csv(&p, Some("y")).unwrap();
    assert_eq!(ds.features, Matrix::from_rows(&[[1.0, 2.5], [-3.0, 0.4], [0.0, 0.0]]).unwrap());
    assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 1][..]));
    assert!(data::load_csv(&p, None).unwrap().labels.is_none());

    assert!(matches!(data::load_csv(&p, Some("label")), Err(Error::Config(_))));

    std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
    assert!(data::load_csv(&p, None).is_err());
    std::fs::write(&p, "a,b\n1,x\n").unwrap();
    let err = data::load_csv(&p, None).unwrap_err();
    assert!(err.to_string().contains("non-numeric"), "{err}");
}

#[test]
fn csv_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data::gaussian_blobs(&[vec![0.0, 1.0, 2.0], vec![5.0, 5.0, 5.0]], 7, 0.3, 9).unwrap();
    let p = dir.path().join("blobs.csv");
    data::write_csv(&ds, &p).unwrap();
    let back = data::load_csv(&p, Some("label")).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn subsampling_never_fabricates_rows() {
    let ds = mnist10k();
    let source: HashSet<[u8; 32]> = ds.features.iter_rows().map(row_hash).collect();
    let specs = [
        SubsampleMode::SingleClass { class: 0, rate: 0.1 },
        SubsampleMode::ExplicitCounts {
            counts: vec![10, 30, 50, 100, 20, 50, 30, 600, 400, 80],
        },
        SubsampleMode::Interpolated { r_min: 0.1 },
    ];
    for mode in specs {
        let out = data::subsample(&ds, &SubsampleSpec { mode, seed: 4 }).unwrap();
        let hashes: Vec<[u8; 32]> = out.features.iter_rows().map(row_hash).collect();
        assert!(hashes.iter().all(|h| source.contains(h)));
    }
}

#[test]
fn single_class_and_explicit_counts_on_digits() {
    let ds = mnist10k();
    let zeros = ds.class_counts[&0];
    let out = data::subsample(
        &ds,
        &SubsampleSpec {
            mode: SubsampleMode::SingleClass { class: 0, rate: 0.1 },
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(out.class_counts[&0], (zeros as f64 * 0.1).round() as usize);
    for c in 1..10 {
        assert_eq!(out.class_counts[&c], ds.class_counts[&c]);
    }

    let counts = vec![10, 30, 50, 100, 20, 50, 30, 600, 400, 80];
    let out = data::subsample(
        &ds,
        &SubsampleSpec {
            mode: SubsampleMode::ExplicitCounts { counts: counts.clone() },
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(out.class_counts.values().copied().collect::<Vec<_>>(), counts);

    let greedy = SubsampleSpec {
        mode: SubsampleMode::ExplicitCounts {
            counts: vec![10_000; 10],
        },
        seed: 1,
    };
    assert!(data::subsample(&ds, &greedy).is_err());
}

#[test]
fn seeded_subsampling_is_reproducible() {
    let ds = mnist10k();
    for mode in [SubsampleMode::SingleClass { class: 3, rate: 0.5 }, SubsampleMode::Interpolated { r_min: 0.3 }] {
        let run = |seed| data::subsample(&ds, &SubsampleSpec { mode: mode.clone(), seed }).unwrap();
        assert_eq!(run(11), run(11));
        assert_ne!(run(11).features, run(12).features);
    }
}

#[test]
fn interpolated_retention_matches_the_linear_rates() {
    let ds = mnist10k();
    let r_min = 0.1;
    let seeds = 50u64;
    let mut kept = [0usize; 10];
    for seed in 100..100 + seeds {
        let out = data::subsample(
            &ds,
            &SubsampleSpec {
                mode: SubsampleMode::Interpolated { r_min },
                seed,
            },
        )
        .unwrap();
        for (c, n) in out.class_counts {
            kept[c] += n;
        }
    }
    for (rank, (&c, &n)) in ds.class_counts.iter().enumerate() {
        let p = data::interpolated_rate(r_min, rank, 10);
        let trials = (n as u64 * seeds) as f64;
        let mean = trials * p;
        let sd = (trials * p * (1.0 - p)).sqrt();
        let got = kept[c] as f64;
        assert!((got - mean).abs() <= 3.0 * sd.max(1e-9), "class {c}: kept {got}, expected {mean:.1} ± {:.1}", 3.0 * sd);
    }
}
