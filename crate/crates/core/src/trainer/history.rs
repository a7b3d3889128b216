use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_loss\tpixel_accuracy\tprecision\trecall\tf1\tiou";

pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.epoch, r.train_loss, r.val_loss, r.pixel_accuracy, r.precision, r.recall, r.f1, r.iou
        )
        .unwrap();
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Invariant("history header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Invariant(format!("history row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let v = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: v(1)?,
                val_loss: v(2)?,
                pixel_accuracy: v(3)?,
                precision: v(4)?,
                recall: v(5)?,
                f1: v(6)?,
                iou: v(7)?,
            })
        })
        .collect()
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_to_tsv(history)).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history(&text)
}
