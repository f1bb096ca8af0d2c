//! Alternating training loop: per mini-batch, build the distortion at every
//! attachment from the clean features, finish the forward pass on the
//! distorted features, then take an SGD step on the weights.

mod compare;
mod config;
mod metrics;
mod run;

use std::path::Path;
use std::time::Instant;

use crate::data::{augment, epoch_batches, load_cifar10_bin, load_idx, synthetic_blobs, Dataset};
use crate::disout::{generate_distortion, ramp_p, DistortionPlan, ErcReport, NextLayer};
use crate::error::{dim_err, Error, Result};
use crate::nn::presets::preset_layers;
use crate::nn::{softmax_crossentropy, Attachment, Checkpoint, Mode, Network, Sgd};
use crate::rng::RunRng;
use crate::tensor::{argmax_first, Scalar, Tensor};

pub use compare::{run_compare, summarize_compare, CellOutcome, CompareSummary, SummaryRow};
pub use config::{DataConfig, DataSource, Regularizer, TrainConfig, KEYS};
pub use metrics::{csv_header, parse_metrics_csv, ErcColumns, MetricsRecord};
pub use run::{
    evaluate_checkpoint, run, RunOutcome, CHECKPOINT_DIR, ERROR_FILE, FINAL_CHECKPOINT, METRICS_FILE, SNAPSHOT_FILE,
    TIMING_FILE,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

fn first_existing(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(plain, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found (also tried .gz)")))
}

/// Loads or generates the train and test sets described by `cfg`.
pub fn load_data(cfg: &DataConfig) -> Result<RunData> {
    let (mut train, mut test) = match cfg.source {
        config::DataSource::Blobs => {
            let all = synthetic_blobs(
                cfg.blobs_train + cfg.blobs_test,
                cfg.blobs_classes,
                &[cfg.blobs_dims],
                cfg.blobs_separation,
                cfg.seed,
            )?;
            all.split_at(cfg.blobs_train)?
        }
        config::DataSource::Mnist => {
            let d = &cfg.dir;
            let train = load_idx(&first_existing(d, "train-images-idx3-ubyte")?, &first_existing(d, "train-labels-idx1-ubyte")?)?;
            let test = load_idx(&first_existing(d, "t10k-images-idx3-ubyte")?, &first_existing(d, "t10k-labels-idx1-ubyte")?)?;
            (train, test)
        }
        config::DataSource::Cifar10 => {
            let train: Vec<_> = (1..=5).map(|i| cfg.dir.join(format!("data_batch_{i}.bin"))).collect();
            (load_cifar10_bin(&train)?, load_cifar10_bin(&[cfg.dir.join("test_batch.bin")])?)
        }
    };
    if cfg.train_limit > 0 && cfg.train_limit < train.len() {
        train = train.head(cfg.train_limit)?;
    }
    if cfg.test_limit > 0 && cfg.test_limit < test.len() {
        test = test.head(cfg.test_limit)?;
    }
    let classes = train.classes().max(test.classes());
    let (mut train, mut test) = (train.with_classes(classes)?, test.with_classes(classes)?);
    if !cfg.mean.is_empty() {
        train.normalize(&cfg.mean, &cfg.std)?;
        test.normalize(&cfg.mean, &cfg.std)?;
    }
    Ok(RunData { train, test })
}

/// Top-1 accuracy and mean loss of the clean network on `data`.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let n = data.len();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk)?;
        let logits = net.predict(&x)?;
        let (l, _) = softmax_crossentropy(&logits, &y)?;
        loss += l.to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        correct += count_correct(&logits, &y);
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.row_len();
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax_first(row) == y)
        .count()
}

/// Running sums between two metrics rows.
#[derive(Default)]
struct Window {
    loss: f64,
    correct: usize,
    seen: usize,
    batches: usize,
    erc: Vec<(usize, f64, f64)>,
}

impl Window {
    fn add(&mut self, loss: f64, correct: usize, n: usize, reports: &[ErcReport]) {
        self.loss += loss * n as f64;
        self.correct += correct;
        self.seen += n;
        self.batches += 1;
        if self.erc.is_empty() {
            self.erc = reports.iter().map(|r| (r.layer, 0.0, 0.0)).collect();
        }
        for (slot, r) in self.erc.iter_mut().zip(reports) {
            slot.1 += r.t_before;
            slot.2 += r.t_after;
        }
    }

    fn record(&self, epoch: usize, iter: usize, p: f64, wall: f64) -> MetricsRecord {
        let b = self.batches.max(1) as f64;
        MetricsRecord {
            epoch,
            iter,
            p_effective: p,
            train_loss: self.loss / self.seen.max(1) as f64,
            train_acc: self.correct as f64 / self.seen.max(1) as f64,
            val_loss: None,
            val_acc: None,
            clean_train_acc: None,
            erc: self
                .erc
                .iter()
                .map(|&(layer, before, after)| ErcColumns {
                    layer,
                    t_before: before / b,
                    t_after: after / b,
                })
                .collect(),
            wall_time: wall,
        }
    }
}

fn at_iteration(err: Error, epoch: usize, iter: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, iteration {iter}: {msg}")),
        other => other,
    }
}

/// Network, optimizer and RNG state of one run.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    net: Network<T>,
    opt: Sgd<T>,
    rng: RunRng,
    plan: Option<DistortionPlan>,
    epoch: usize,
    iter: usize,
    total_iters: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, data: &RunData) -> Result<Self> {
        cfg.validate()?;
        let shape = data.train.sample_shape().to_vec();
        if data.test.sample_shape() != shape.as_slice() {
            return Err(dim_err!(
                "train samples are {shape:?} but test samples are {:?}",
                data.test.sample_shape()
            ));
        }
        let layers = preset_layers(cfg.preset, &shape, data.train.classes(), cfg.regularizer.attach_at())?;
        let net = Network::new(&shape, layers, cfg.bias, cfg.seed)?;
        let dcfg = cfg.distortion();
        let maps: Vec<(usize, usize)> = net
            .attachments()
            .iter()
            .filter_map(|a| match a.feature_shape.as_slice() {
                &[_, h, w] => Some((h, w)),
                _ => None,
            })
            .collect();
        dcfg.validate(&maps)?;
        let plan = (cfg.regularizer != Regularizer::None).then(|| DistortionPlan {
            cfg: dcfg,
            learned: cfg.regularizer.learned(),
            grad_mode: cfg.grad_mode,
        });
        let opt = Sgd::new(&net, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        let per_epoch = data.train.len().div_ceil(cfg.batch_size);
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            opt,
            rng: RunRng::new(cfg.seed),
            plan,
            epoch: 0,
            iter: 0,
            total_iters: per_epoch * cfg.epochs,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Layer index of every attachment, in order.
    pub fn attachment_layers(&self) -> Vec<usize> {
        self.net.attachments().iter().map(|a| a.layer).collect()
    }

    fn p_effective(&self) -> f64 {
        self.plan.as_ref().map_or(0.0, |p| ramp_p(self.iter, self.total_iters, &p.cfg))
    }

    /// Trains one epoch, passing each metrics row to `sink` as it is made.
    pub fn run_epoch(&mut self, data: &RunData, start: Instant, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let batches = epoch_batches(data.train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch, true)?;
        self.opt.lr = self.cfg.lr_at(self.epoch);
        let epoch = self.epoch + 1;
        let mut window = Window::default();
        let mut p = 0.0;
        for (b, indices) in batches.iter().enumerate() {
            let (mut x, y) = data.train.batch::<T>(indices)?;
            if !self.cfg.augment.is_identity() {
                x = augment(&x, &self.cfg.augment, &mut self.rng.augment)?;
            }
            p = self.p_effective();
            let mut reports = Vec::new();
            let Trainer { net, rng, plan, .. } = self;
            let (logits, cache) = match plan.as_ref() {
                Some(plan) => {
                    let mut source = |_: usize, a: &Attachment, f: &Tensor<T>, next: NextLayer<'_, T>| {
                        let (state, report) = generate_distortion(f, &next, plan, p, a.layer, rng)?;
                        reports.push(report);
                        Ok(state)
                    };
                    net.forward_with(&x, Mode::Train, Some(&mut source))
                }
                None => net.forward_with(&x, Mode::Train, None),
            }
            .map_err(|e| at_iteration(e, epoch, self.iter))?;
            let (loss, grads) = self.net.backward(&cache, &y, false).map_err(|e| at_iteration(e, epoch, self.iter))?;
            self.opt
                .step(&mut self.net, &grads)
                .map_err(|e| at_iteration(e, epoch, self.iter))?;
            self.iter += 1;
            window.add(loss.to_f64().unwrap_or(f64::NAN), count_correct(&logits, &y), y.len(), &reports);
            let last = b + 1 == batches.len();
            if self.cfg.log_every > 0 && self.iter.is_multiple_of(self.cfg.log_every) && !last {
                sink(&window.record(epoch, self.iter, p, start.elapsed().as_secs_f64()))?;
                window = Window::default();
            }
        }
        self.epoch += 1;
        let mut row = window.record(epoch, self.iter, p, 0.0);
        let (val_acc, val_loss) = evaluate(&self.net, &data.test, self.cfg.eval_batch_size)?;
        row.val_acc = Some(val_acc);
        row.val_loss = Some(val_loss);
        if self.cfg.eval_train {
            row.clean_train_acc = Some(evaluate(&self.net, &data.train, self.cfg.eval_batch_size)?.0);
        }
        row.wall_time = start.elapsed().as_secs_f64();
        sink(&row)
    }

    /// Parameters, velocity, RNG words and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.net, &self.opt);
        ck.push_words("rng", self.rng.to_words());
        let split = |v: u64| [v as u32, (v >> 32) as u32];
        let mut progress = Vec::new();
        for v in [self.epoch as u64, self.iter as u64, self.cfg.seed] {
            progress.extend(split(v));
        }
        ck.push_words("progress", progress);
        ck
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let w = ck.words("progress")?;
        if w.len() != 6 {
            return Err(Error::Format("progress entry must hold 6 words".into()));
        }
        let join = |i: usize| w[i] as u64 | (w[i + 1] as u64) << 32;
        if join(4) != self.cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was written with train.seed = {}, config has {}",
                join(4),
                self.cfg.seed
            )));
        }
        ck.restore_model(&mut self.net, &mut self.opt)?;
        self.rng = RunRng::from_words(ck.words("rng")?)?;
        self.epoch = join(0) as usize;
        self.iter = join(2) as usize;
        Ok(())
    }
}

/// Trains for `cfg.epochs` and returns the final network with every metrics row.
pub fn train<T: Scalar>(cfg: &TrainConfig, data: &RunData) -> Result<(Network<T>, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::<T>::new(cfg, data)?;
    let mut rows = Vec::new();
    let start = Instant::now();
    while !trainer.finished() {
        trainer.run_epoch(data, start, &mut |r| {
            rows.push(r.clone());
            Ok(())
        })?;
    }
    Ok((trainer.into_network(), rows))
}
