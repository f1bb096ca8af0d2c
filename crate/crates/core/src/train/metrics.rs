//! Per-row training metrics and their CSV form.
//!
//! Columns: `epoch, iter, p_effective, train_loss, train_acc, val_loss,
//! val_acc, clean_train_acc`, then `t_before_L<k>, t_after_L<k>` for each
//! attachment at layer `k`. Missing values are empty fields. Wall-clock
//! time is kept out of this file so reruns compare byte for byte.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const BASE_COLUMNS: [&str; 8] = [
    "epoch",
    "iter",
    "p_effective",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "clean_train_acc",
];

/// Mean surrogate values of one attachment over the logged window.
#[derive(Clone, Debug, PartialEq)]
pub struct ErcColumns {
    pub layer: usize,
    pub t_before: f64,
    pub t_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based epoch the row belongs to.
    pub epoch: usize,
    /// Iterations completed when the row was logged.
    pub iter: usize,
    pub p_effective: f64,
    /// Mean loss and accuracy over the mini-batches since the previous row.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Held-out metrics, present on epoch-end rows.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Distortion-free accuracy on the training set, on epoch-end rows.
    pub clean_train_acc: Option<f64>,
    pub erc: Vec<ErcColumns>,
    /// Seconds since the run (or resumed segment) started.
    pub wall_time: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_header(attachment_layers: &[usize]) -> String {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for l in attachment_layers {
        cols.push(format!("t_before_L{l}"));
        cols.push(format!("t_after_L{l}"));
    }
    cols.join(",")
}

impl MetricsRecord {
    pub fn is_epoch_end(&self) -> bool {
        self.val_acc.is_some()
    }

    pub fn to_csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.p_effective,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc),
            opt(self.clean_train_acc)
        );
        for e in &self.erc {
            let _ = write!(row, ",{},{}", e.t_before, e.t_after);
        }
        row
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("metrics line {line}: {msg}"))
}

/// Parses a metrics CSV written by [`csv_header`] and [`MetricsRecord::to_csv_row`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty file"))?.split(',').collect();
    if header.len() < BASE_COLUMNS.len() || header[..BASE_COLUMNS.len()] != BASE_COLUMNS {
        return Err(bad(1, "unexpected header"));
    }
    let mut layers = Vec::new();
    for pair in header[BASE_COLUMNS.len()..].chunks(2) {
        let layer = pair[0]
            .strip_prefix("t_before_L")
            .and_then(|l| l.parse::<usize>().ok())
            .filter(|l| pair.get(1) == Some(&format!("t_after_L{l}").as_str()))
            .ok_or_else(|| bad(1, format!("unexpected column `{}`", pair[0])))?;
        layers.push(layer);
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad(n, format!("{} fields, header has {}", f.len(), header.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(n, format!("`{}` in column {}", f[k], header[k])));
        let maybe = |k: usize| if f[k].is_empty() { Ok(None) } else { num(k).map(Some) };
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(n, format!("`{}` in column {}", f[k], header[k])));
        let erc = layers
            .iter()
            .enumerate()
            .map(|(j, &layer)| {
                Ok(ErcColumns {
                    layer,
                    t_before: num(8 + 2 * j)?,
                    t_after: num(9 + 2 * j)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            epoch: int(0)?,
            iter: int(1)?,
            p_effective: num(2)?,
            train_loss: num(3)?,
            train_acc: num(4)?,
            val_loss: maybe(5)?,
            val_acc: maybe(6)?,
            clean_train_acc: maybe(7)?,
            erc,
            wall_time: 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricsRecord {
                epoch: 1,
                iter: 5,
                p_effective: 0.05,
                train_loss: 1.25,
                train_acc: 0.5,
                val_loss: None,
                val_acc: None,
                clean_train_acc: None,
                erc: vec![ErcColumns {
                    layer: 3,
                    t_before: 0.1,
                    t_after: 0.09999999999999999,
                }],
                wall_time: 0.0,
            },
            MetricsRecord {
                epoch: 1,
                iter: 10,
                p_effective: 0.1,
                train_loss: 0.75,
                train_acc: 0.625,
                val_loss: Some(0.8),
                val_acc: Some(0.6),
                clean_train_acc: Some(0.7),
                erc: vec![ErcColumns {
                    layer: 3,
                    t_before: 2e-7,
                    t_after: 1e300,
                }],
                wall_time: 0.0,
            },
        ];
        let mut text = csv_header(&[3]);
        for r in &rows {
            text.push('\n');
            text.push_str(&r.to_csv_row());
        }
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(rows[1].is_epoch_end() && !rows[0].is_epoch_end());
    }

    #[test]
    fn malformed_csv() {
        assert!(parse_metrics_csv("").is_err());
        assert!(parse_metrics_csv("a,b\n").is_err());
        let h = csv_header(&[]);
        assert!(parse_metrics_csv(&format!("{h}\n1,2,3\n")).is_err());
        assert!(parse_metrics_csv(&format!("{h}\n1,2,x,0,0,,,\n")).is_err());
        assert_eq!(parse_metrics_csv(&format!("{h}\n1,2,0,0,0,,,\n")).unwrap().len(), 1);
    }
}
