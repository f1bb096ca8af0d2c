//! A training run persisted to an output directory:
//!
//! ```text
//! <out>/config.snapshot     resolved configuration, every key
//! <out>/metrics.csv         one row per logged window, flushed per epoch
//! <out>/timing.csv          wall-clock seconds per metrics row
//! <out>/checkpoints/        epoch-<k>.ckpt and final.ckpt
//! <out>/error.txt           only when the run aborted
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::{csv_header, evaluate, load_data, MetricsRecord, RunData, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::tensor::{Precision, Scalar};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ERROR_FILE: &str = "error.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    /// Rows produced by this invocation (after the resume point, if any).
    pub records: Vec<MetricsRecord>,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub final_clean_train_acc: Option<f64>,
}

struct Writer {
    file: BufWriter<File>,
    path: std::path::PathBuf,
}

impl Writer {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Writer {
            file: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows of epochs up to `epoch` of an existing
/// metrics file, so a resumed run continues it in place.
fn truncate_metrics(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let kept = match fs::read_to_string(path) {
        Ok(text) => {
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                return Err(Error::Format(format!("{}: header does not match this run", path.display())));
            }
            lines
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
                .fold(format!("{header}\n"), |acc, l| acc + l + "\n")
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{header}\n"),
        Err(e) => return Err(Error::io(path, e)),
    };
    write(path, &kept)
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, data: &RunData, out: &Path, resume: Option<&Path>) -> Result<RunOutcome> {
    let mut trainer = Trainer::<T>::new(cfg, data)?;
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
    }
    let header = csv_header(&trainer.attachment_layers());
    let metrics_path = out.join(METRICS_FILE);
    let timing_path = out.join(TIMING_FILE);
    if resume.is_some() {
        truncate_metrics(&metrics_path, &header, trainer.epoch())?;
        if !timing_path.exists() {
            write(&timing_path, "epoch,iter,wall_time_s\n")?;
        }
    } else {
        write(&metrics_path, &format!("{header}\n"))?;
        write(&timing_path, "epoch,iter,wall_time_s\n")?;
    }
    let mut metrics = Writer::open(&metrics_path, true)?;
    let mut timing = Writer::open(&timing_path, true)?;
    let ck_dir = out.join(CHECKPOINT_DIR);

    let start = Instant::now();
    let mut records = Vec::new();
    while !trainer.finished() {
        let result = trainer.run_epoch(data, start, &mut |r| {
            metrics.line(&r.to_csv_row())?;
            timing.line(&format!("{},{},{:.3}", r.epoch, r.iter, r.wall_time))?;
            records.push(r.clone());
            Ok(())
        });
        metrics.flush()?;
        timing.flush()?;
        if let Err(e) = result {
            write(&out.join(ERROR_FILE), &format!("{e}\n"))?;
            return Err(e);
        }
        let epoch = trainer.epoch();
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&ck_dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
    }
    trainer.checkpoint().save(&ck_dir.join(FINAL_CHECKPOINT))?;

    let all = super::parse_metrics_csv(&fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?)?;
    let ends: Vec<&MetricsRecord> = all.iter().filter(|r| r.is_epoch_end()).collect();
    let last = ends.last().ok_or_else(|| Error::Format("metrics file has no epoch rows".into()))?;
    Ok(RunOutcome {
        records,
        final_val_acc: last.val_acc.unwrap_or(f64::NAN),
        best_val_acc: ends.iter().filter_map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max),
        final_clean_train_acc: last.clean_train_acc,
    })
}

/// Trains `cfg` into `out`, optionally continuing from a checkpoint of the
/// same configuration.
pub fn run(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let _ = fs::remove_file(out.join(ERROR_FILE));
    write(&out.join(SNAPSHOT_FILE), &cfg.snapshot())?;
    let data = load_data(&cfg.data)?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &data, out, resume),
        Precision::F64 => run_typed::<f64>(cfg, &data, out, resume),
    }
}

fn eval_typed<T: Scalar>(cfg: &TrainConfig, data: &RunData, ck: &Checkpoint) -> Result<(f64, f64)> {
    let mut trainer = Trainer::<T>::new(cfg, data)?;
    trainer.restore(ck)?;
    evaluate(trainer.network(), &data.test, cfg.eval_batch_size)
}

/// Test accuracy and loss of a checkpoint written under `cfg`.
pub fn evaluate_checkpoint(cfg: &TrainConfig, checkpoint: &Path) -> Result<(f64, f64)> {
    let data = load_data(&cfg.data)?;
    let ck = Checkpoint::load(checkpoint)?;
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &data, &ck),
        Precision::F64 => eval_typed::<f64>(cfg, &data, &ck),
    }
}
