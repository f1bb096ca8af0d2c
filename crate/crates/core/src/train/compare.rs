//! Regularizer × seed grid with a summary recomputed from the per-run logs.
//!
//! Cell `(r, s)` trains into `<out>/<r>/seed-<s>/`. The summary reads each
//! cell's `metrics.csv` back and reports, per regularizer, mean and sample
//! standard deviation (0 for a single seed) of final test accuracy, best
//! test accuracy and the train−test gap, where train accuracy is the clean
//! training-set accuracy of the last epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{run, ERROR_FILE, METRICS_FILE};
use super::{parse_metrics_csv, Regularizer, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Done {
        final_test_acc: f64,
        best_test_acc: f64,
        final_train_acc: f64,
        gap: f64,
    },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub regularizer: Regularizer,
    pub runs: usize,
    pub failed: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
    pub train_mean: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSummary {
    pub cells: Vec<(Regularizer, u64, CellOutcome)>,
    pub rows: Vec<SummaryRow>,
}

impl CompareSummary {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|(_, _, c)| matches!(c, CellOutcome::Failed(_)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "regularizer,runs,failed,test_acc_mean,test_acc_std,best_test_acc_mean,best_test_acc_std,train_acc_mean,gap_mean,gap_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.regularizer.name(),
                r.runs,
                r.failed,
                r.test_mean,
                r.test_std,
                r.best_mean,
                r.best_std,
                r.train_mean,
                r.gap_mean,
                r.gap_std
            );
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("regularizer,seed,status,final_test_acc,best_test_acc,final_train_acc,gap\n");
        for (r, s, c) in &self.cells {
            match c {
                CellOutcome::Done {
                    final_test_acc,
                    best_test_acc,
                    final_train_acc,
                    gap,
                } => {
                    let _ = writeln!(out, "{},{s},ok,{final_test_acc},{best_test_acc},{final_train_acc},{gap}", r.name());
                }
                CellOutcome::Failed(_) => {
                    let _ = writeln!(out, "{},{s},failed,,,,", r.name());
                }
            }
        }
        out
    }

    /// Aligned table with accuracies in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>4} {:>6} {:>16} {:>16} {:>10} {:>16}\n",
            "regularizer", "runs", "failed", "test acc (%)", "best acc (%)", "train (%)", "gap (pts)"
        );
        let pm = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>4} {:>6} {:>16} {:>16} {:>10.2} {:>16}",
                r.regularizer.name(),
                r.runs,
                r.failed,
                pm(r.test_mean, r.test_std),
                pm(r.best_mean, r.best_std),
                100.0 * r.train_mean,
                pm(r.gap_mean, r.gap_std)
            );
        }
        out
    }
}

pub fn cell_dir(out: &Path, regularizer: Regularizer, seed: u64) -> PathBuf {
    out.join(regularizer.name()).join(format!("seed-{seed}"))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn read_cell(dir: &Path) -> CellOutcome {
    if let Ok(msg) = fs::read_to_string(dir.join(ERROR_FILE)) {
        return CellOutcome::Failed(msg.trim().to_string());
    }
    let path = dir.join(METRICS_FILE);
    let rows = match fs::read_to_string(&path).map_err(|e| Error::io(&path, e)).and_then(|t| parse_metrics_csv(&t)) {
        Ok(rows) => rows,
        Err(e) => return CellOutcome::Failed(e.to_string()),
    };
    let ends: Vec<_> = rows.iter().filter(|r| r.is_epoch_end()).collect();
    let Some(last) = ends.last() else {
        return CellOutcome::Failed(format!("{}: no completed epoch", path.display()));
    };
    let test = last.val_acc.unwrap_or(f64::NAN);
    let train = last.clean_train_acc.unwrap_or(last.train_acc);
    CellOutcome::Done {
        final_test_acc: test,
        best_test_acc: ends.iter().filter_map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max),
        final_train_acc: train,
        gap: train - test,
    }
}

/// Rebuilds the summary from the cell directories under `out`.
pub fn summarize_compare(out: &Path, regularizers: &[Regularizer], seeds: &[u64]) -> CompareSummary {
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &r in regularizers {
        let outcomes: Vec<CellOutcome> = seeds.iter().map(|&s| read_cell(&cell_dir(out, r, s))).collect();
        let done: Vec<(f64, f64, f64, f64)> = outcomes
            .iter()
            .filter_map(|c| match *c {
                CellOutcome::Done {
                    final_test_acc,
                    best_test_acc,
                    final_train_acc,
                    gap,
                } => Some((final_test_acc, best_test_acc, final_train_acc, gap)),
                CellOutcome::Failed(_) => None,
            })
            .collect();
        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| mean_std(&done.iter().map(f).collect::<Vec<_>>());
        let (test_mean, test_std) = col(|c| c.0);
        let (best_mean, best_std) = col(|c| c.1);
        let (train_mean, _) = col(|c| c.2);
        let (gap_mean, gap_std) = col(|c| c.3);
        rows.push(SummaryRow {
            regularizer: r,
            runs: done.len(),
            failed: outcomes.len() - done.len(),
            test_mean,
            test_std,
            best_mean,
            best_std,
            train_mean,
            gap_mean,
            gap_std,
        });
        cells.extend(seeds.iter().zip(outcomes).map(|(&s, c)| (r, s, c)));
    }
    CompareSummary { cells, rows }
}

/// Trains every `(regularizer, seed)` cell of `cfg` and writes
/// `summary.csv`, `summary.txt` and `cells.csv` to `out`. A failing cell is
/// recorded and the grid continues.
pub fn run_compare(cfg: &TrainConfig, out: &Path, mut progress: impl FnMut(Regularizer, u64, &CellOutcome)) -> Result<CompareSummary> {
    cfg.validate()?;
    if cfg.compare_regularizers.len() < 2 {
        return Err(Error::Config("compare.regularizers must list at least two settings".into()));
    }
    for &r in &cfg.compare_regularizers {
        for &s in &cfg.compare_seeds {
            let mut cell = cfg.clone();
            cell.regularizer = r;
            cell.seed = s;
            let dir = cell_dir(out, r, s);
            let outcome = match run(&cell, &dir, None) {
                Ok(_) => read_cell(&dir),
                Err(e) => {
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join(ERROR_FILE), format!("{e}\n"));
                    CellOutcome::Failed(e.to_string())
                }
            };
            progress(r, s, &outcome);
        }
    }
    let summary = summarize_compare(out, &cfg.compare_regularizers, &cfg.compare_seeds);
    for (name, text) in [
        ("summary.csv", summary.to_csv()),
        ("summary.txt", summary.to_text()),
        ("cells.csv", summary.cells_csv()),
    ] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
