//! Epoch metrics as newline-delimited key=value records.
//!
//! Values print through f64's shortest round-trip formatting, so a parsed
//! log reproduces the written floats bit for bit. Wall time is informational
//! and excluded from determinism comparisons.

use std::fmt;
use std::path::Path;

use saccade::{Error, Result};

/// One training epoch's worth of numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss_total: f64,
    pub loss_classify: f64,
    pub loss_pose: f64,
    pub loss_spread: f64,
    pub loss_anchor: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
}

const KEYS: [&str; 10] = [
    "epoch",
    "phase",
    "loss_total",
    "loss_classify",
    "loss_pose",
    "loss_spread",
    "loss_anchor",
    "train_acc",
    "val_acc",
    "wall_secs",
];

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} loss_total={} loss_classify={} loss_pose={} \
             loss_spread={} loss_anchor={} train_acc={} val_acc={} wall_secs={}",
            self.epoch,
            self.phase,
            self.loss_total,
            self.loss_classify,
            self.loss_pose,
            self.loss_spread,
            self.loss_anchor,
            self.train_acc,
            self.val_acc,
            self.wall_secs
        )
    }
}

impl MetricsRecord {
    pub fn parse(line: &str) -> Result<MetricsRecord> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != KEYS.len() {
            return Err(Error::data(format!(
                "metrics line has {} fields, expected {}: {:?}",
                fields.len(),
                KEYS.len(),
                line
            )));
        }
        let mut values = [0.0f64; 10];
        for (i, (field, key)) in fields.iter().zip(KEYS.iter()).enumerate() {
            let (k, v) = field.split_once('=').ok_or_else(|| {
                Error::data(format!("metrics field {:?} is not key=value", field))
            })?;
            if k != *key {
                return Err(Error::data(format!(
                    "metrics field {} is {:?}, expected {:?}",
                    i, k, key
                )));
            }
            values[i] = v
                .parse::<f64>()
                .map_err(|_| Error::data(format!("bad metrics value {:?}", field)))?;
        }
        let epoch = values[0];
        let phase = values[1];
        if epoch < 0.0 || epoch.fract() != 0.0 {
            return Err(Error::data(format!("bad epoch {}", epoch)));
        }
        if phase != 1.0 && phase != 2.0 {
            return Err(Error::data(format!("bad phase {}", phase)));
        }
        Ok(MetricsRecord {
            epoch: epoch as usize,
            phase: phase as u8,
            loss_total: values[2],
            loss_classify: values[3],
            loss_pose: values[4],
            loss_spread: values[5],
            loss_anchor: values[6],
            train_acc: values[7],
            val_acc: values[8],
            wall_secs: values[9],
        })
    }

    /// Equality over everything that must reproduce across runs; wall time
    /// is allowed to differ.
    pub fn same_ignoring_wall(&self, other: &MetricsRecord) -> bool {
        self.epoch == other.epoch
            && self.phase == other.phase
            && self.loss_total.to_bits() == other.loss_total.to_bits()
            && self.loss_classify.to_bits() == other.loss_classify.to_bits()
            && self.loss_pose.to_bits() == other.loss_pose.to_bits()
            && self.loss_spread.to_bits() == other.loss_spread.to_bits()
            && self.loss_anchor.to_bits() == other.loss_anchor.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.val_acc.to_bits() == other.val_acc.to_bits()
    }
}

/// Reads a whole log, insisting on strictly increasing epoch numbers.
pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = MetricsRecord::parse(line)?;
        if let Some(prev) = out.last() {
            let prev: &MetricsRecord = prev;
            if rec.epoch <= prev.epoch {
                return Err(Error::data(format!(
                    "metrics epochs not increasing: {} after {}",
                    rec.epoch, prev.epoch
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn logs_match_ignoring_wall(a: &[MetricsRecord], b: &[MetricsRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_ignoring_wall(y))
}
