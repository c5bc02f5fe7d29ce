//! End-to-end checks of load -> subsample -> perturb -> normalize -> train -> evaluate.

use std::path::{Path, PathBuf};

use pushpull_core::data::{
    load_mnist_idx, normalize, subsample, Dataset, DatasetKind, Normalization, Split, DATA_ROOT_ENV,
};
use pushpull_core::harness::{
    csv_string, evaluate, evaluate_checkpoint, parse_grid, train_on, Checkpoint, DatasetConfig, TrainConfig,
};
use pushpull_core::perturb::Perturbation;
use pushpull_core::{build, Error, Model, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_idx(path: &Path, magic: u32, dims: &[u32], payload: &[u8]) {
    let mut bytes = magic.to_be_bytes().to_vec();
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    std::fs::write(path, bytes).unwrap();
}

/// Digits drawn as a bright vertical bar whose column encodes the class.
fn bar_fixture(dir: &Path, per_class: usize) -> (PathBuf, PathBuf) {
    let n = per_class * 10;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut pixels = vec![0u8; n * 784];
    for (i, img) in pixels.chunks_mut(784).enumerate() {
        let col = 3 + 2 * (i % 10);
        for y in 4..24 {
            img[y * 28 + col] = 255;
            img[y * 28 + col + 1] = 200;
        }
    }
    let (ip, lp) = (dir.join("images"), dir.join("labels"));
    write_idx(&ip, 0x803, &[n as u32, 28, 28], &pixels);
    write_idx(&lp, 0x801, &[n as u32], &labels);
    (ip, lp)
}

fn config(name: &str) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelSpec::lenet(name).unwrap(), DatasetConfig::new(DatasetKind::Mnist));
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.seed = 21;
    cfg
}

#[test]
fn perturbing_after_normalizing_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = bar_fixture(dir.path(), 2);
    let ds = load_mnist_idx(&ip, &lp).unwrap();
    let g = Perturbation::Gaussian { variance: 0.1 };

    let ok = normalize(&ds.perturb(&g, 1).unwrap(), &Normalization::mnist());
    assert!(ok.is_ok());

    let normalized = normalize(&ds, &Normalization::mnist()).unwrap();
    assert!(matches!(normalized.perturb(&g, 1), Err(Error::Domain { .. })));
}

#[test]
fn loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = bar_fixture(dir.path(), 3);
    let a = load_mnist_idx(&ip, &lp).unwrap();
    let b = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(subsample(&a, 2, 5).unwrap(), subsample(&b, 2, 5).unwrap());
}

#[test]
fn fixture_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = bar_fixture(dir.path(), 6);
    let data = load_mnist_idx(&ip, &lp).unwrap();
    let grid = parse_grid("none;gaussian:0.05;speckle:0.1;contrast:0.5;poisson:1").unwrap();

    let run = || {
        let out = train_on(&config("PD"), &data).unwrap();
        let report = evaluate_checkpoint(&out.checkpoint, &grid, &data, 3).unwrap();
        (out.checkpoint.to_bytes().unwrap(), csv_string(&report).unwrap())
    };
    let (ck1, csv1) = run();
    let (ck2, csv2) = run();
    assert_eq!(ck1, ck2);
    assert_eq!(csv1, csv2);
    assert_eq!(csv1.lines().count(), 1 + grid.len());

    let ck = Checkpoint::from_bytes(&ck1, Path::new("mem")).unwrap();
    let saved = dir.path().join("m.ppck");
    ck.save(&saved).unwrap();
    let report = evaluate_checkpoint(&Checkpoint::load(&saved).unwrap(), &grid, &data, 3).unwrap();
    assert_eq!(csv_string(&report).unwrap(), csv1);
}

#[test]
fn checkpoint_for_other_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = bar_fixture(dir.path(), 1);
    let data = load_mnist_idx(&ip, &lp).unwrap();
    let spec = ModelSpec::wideresnet(10, 1, true, 10);
    let model: Model<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ck = Checkpoint::from_model(&model, 0, DatasetKind::Cifar10, Normalization::cifar10(), 0);
    assert!(matches!(
        evaluate_checkpoint(&ck, &[Perturbation::None], &data, 0),
        Err(Error::Shape { .. })
    ));
}

fn real_mnist() -> Option<(Dataset, Dataset)> {
    let root = std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let train = DatasetKind::Mnist.load(&root, Split::Train).ok()?;
    let test = DatasetKind::Mnist.load(&root, Split::Test).ok()?;
    Some((train, test))
}

#[test]
fn mnist_smoke_run() {
    let Some((train, test)) = real_mnist() else {
        eprintln!("MNIST not found; skipping the real-data smoke run");
        return;
    };
    assert_eq!(train.item_shape(), [1, 28, 28]);
    assert!(train.labels.iter().chain(&test.labels).all(|&l| l < 10));

    let test = subsample(&test, 50, 0).unwrap();
    let grid = [Perturbation::None];

    let spec = ModelSpec::lenet("PA").unwrap();
    let mut untrained: Model<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let chance = evaluate(&mut untrained, 0, &Normalization::mnist(), &grid, &test, 0).unwrap();
    assert!((chance.clean_accuracy - 0.1).abs() <= 0.05, "{}", chance.clean_accuracy);

    let mut cfg = config("PA");
    cfg.epochs = 5;
    cfg.batch_size = 64;
    cfg.subsample = Some(100);
    let out = train_on(&cfg, &train).unwrap();
    let first = out.history[0].loss;
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    let report = evaluate_checkpoint(&out.checkpoint, &grid, &test, 0).unwrap();
    assert!(report.clean_accuracy > 0.8, "{}", report.clean_accuracy);
}
