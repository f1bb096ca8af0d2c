use std::fs;
use std::path::Path;

use disout::data::Dataset;
use disout::nn::presets::{preset_layers, AttachAt, Preset};
use disout::disout::NextLayer;
use disout::nn::{Attachment, Mode, Network};
use disout::train::{self, evaluate, load_data, TrainConfig};
use disout::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(overrides: &[&str]) -> TrainConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    TrainConfig::load(None, &owned).unwrap()
}

fn mnist_dir() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist")
        .display()
        .to_string()
}

#[test]
fn mlp_fits_blobs() {
    let cfg = blobs(&["train.epochs=50", "train.lr_decay_epochs="]);
    let data = load_data(&cfg.data).unwrap();
    let (_, rows) = train::train::<f32>(&cfg, &data).unwrap();
    let ends: Vec<_> = rows.iter().filter(|r| r.is_epoch_end()).collect();
    assert_eq!(ends.len(), 50);
    let best = ends.iter().filter_map(|r| r.clean_train_acc).fold(0.0, f64::max);
    assert!(best >= 0.99, "best clean train accuracy {best}");
}

#[test]
fn same_config_gives_identical_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs(&["train.epochs=3", "regularizer=disout-element", "train.log_every=4"]);
    train::run(&cfg, &dir.path().join("a"), None).unwrap();
    train::run(&cfg, &dir.path().join("b"), None).unwrap();
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
}

#[test]
fn resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    for reg in ["none", "dropout", "disout-element"] {
        let cfg = blobs(&[
            "train.epochs=5",
            &format!("regularizer={reg}"),
            "train.checkpoint_every=1",
            "train.lr_decay_epochs=2",
            "train.log_every=3",
        ]);
        let full = dir.path().join(format!("{reg}-full"));
        let part = dir.path().join(format!("{reg}-part"));
        train::run(&cfg, &full, None).unwrap();
        fs::create_dir_all(&part).unwrap();
        let mut cut = fs::read_to_string(full.join("metrics.csv")).unwrap();
        cut.push_str("9,999,0,0,0,,,\n");
        fs::write(part.join("metrics.csv"), cut).unwrap();
        train::run(&cfg, &part, Some(&full.join("checkpoints/epoch-2.ckpt"))).unwrap();
        assert_eq!(
            fs::read_to_string(full.join("metrics.csv")).unwrap(),
            fs::read_to_string(part.join("metrics.csv")).unwrap(),
            "{reg}"
        );
        assert_eq!(
            fs::read(full.join("checkpoints/final.ckpt")).unwrap(),
            fs::read(part.join("checkpoints/final.ckpt")).unwrap()
        );
    }
}

#[test]
fn resume_rejects_other_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs(&["train.epochs=1"]);
    train::run(&cfg, dir.path(), None).unwrap();
    let mut other = cfg.clone();
    other.seed = 9;
    let ck = dir.path().join("checkpoints/final.ckpt");
    assert!(train::run(&other, &dir.path().join("x"), Some(&ck)).is_err());
}

#[test]
fn random_network_scores_chance() {
    let classes = 4;
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = Tensor::from_fn(&[n, 10], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let ds = Dataset::new(images, labels, classes).unwrap();
    let layers = preset_layers(Preset::BlobsMlp, &[10], classes, AttachAt::None).unwrap();
    let net = Network::<f32>::new(&[10], layers, true, 5).unwrap();
    let (acc, _) = evaluate(&net, &ds, 256).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
    assert_eq!(evaluate(&net, &ds, 97).unwrap().0, acc);
    assert_eq!(evaluate(&net, &ds, 256).unwrap(), evaluate(&net, &ds, 256).unwrap());
}

#[test]
fn eval_outputs_ignore_training_masks() {
    let mut cfg = blobs(&["train.epochs=2", "regularizer=disout-element"]);
    let data = load_data(&cfg.data).unwrap();
    let (net, _) = train::train::<f64>(&{
        cfg.precision = disout::Precision::F64;
        cfg.clone()
    }, &data)
    .unwrap();
    let (x, _) = data.test.batch::<f64>(&(0..50).collect::<Vec<_>>()).unwrap();
    let reference = net.predict(&x).unwrap();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = |_: usize, _: &Attachment, f: &Tensor<f64>, _: NextLayer<'_, f64>| {
            let mask = Tensor::from_fn(f.shape(), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })?;
            Ok(disout::disout::DistortionState {
                epsilon: f.map(|v| v * 3.0)?,
                ..disout::disout::DistortionState::dropout(f, mask, disout::disout::Signs::from_vec(vec![1; 50]), 0.5)
            })
        };
        let (train_logits, _) = net.forward_with(&x, Mode::Train, Some(&mut source)).unwrap();
        assert!(!train_logits.bit_eq(&reference));
        let (eval_logits, _) = net.forward_with(&x, Mode::Eval, None).unwrap();
        assert!(eval_logits.bit_eq(&reference));
        assert!(net.predict(&x).unwrap().bit_eq(&reference));
    }
}

#[test]
fn metrics_rows_are_ordered() {
    let cfg = blobs(&["train.epochs=3", "regularizer=dropout", "train.log_every=2"]);
    let data = load_data(&cfg.data).unwrap();
    let (_, rows) = train::train::<f32>(&cfg, &data).unwrap();
    assert!(rows.windows(2).all(|w| (w[0].epoch, w[0].iter) < (w[1].epoch, w[1].iter)));
    assert_eq!(rows.iter().filter(|r| r.is_epoch_end()).count(), 3);
}

#[test]
fn logged_surrogate_descends() {
    let cfg = blobs(&[
        "train.epochs=3",
        "regularizer=disout-element",
        "train.log_every=1",
        "disout.gamma=0.01",
        "train.precision=f64",
    ]);
    let data = load_data(&cfg.data).unwrap();
    let (_, rows) = train::train::<f64>(&cfg, &data).unwrap();
    let cols: Vec<_> = rows.iter().flat_map(|r| r.erc.iter()).filter(|c| c.t_before > 0.0).collect();
    assert!(cols.len() >= 25);
    let ok = cols.iter().filter(|c| c.t_after <= c.t_before).count();
    assert!(ok as f64 >= 0.95 * cols.len() as f64, "{ok} of {}", cols.len());
}

#[test]
fn block_distortion_trains_on_mnist_subset() {
    let cfg = blobs(&[
        "data.source=mnist",
        &format!("data.dir={}", mnist_dir()),
        "data.train_limit=256",
        "data.test_limit=128",
        "model.preset=mnist-cnn",
        "regularizer=disout-block",
        "disout.block_size=3",
        "train.epochs=1",
        "train.log_every=2",
    ]);
    let data = load_data(&cfg.data).unwrap();
    let (_, rows) = train::train::<f32>(&cfg, &data).unwrap();
    let last = rows.last().unwrap();
    assert_eq!(last.erc.len(), 1);
    assert!(last.val_acc.unwrap() > 0.2);
    assert!(rows.iter().all(|r| r.train_loss.is_finite()));
}
