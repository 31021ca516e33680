//! Test-time metrics: log-likelihood, error rate and expected calibration error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 10;

fn check(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "metrics",
            detail: format!("{} prediction rows for {} labels", probs.rows(), labels.len()),
        });
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= probs.cols()) {
        return Err(Error::Input(format!("label {y} at row {i} with {} classes", probs.cols())));
    }
    Ok(())
}

/// Mean of `ln max(p(y_n), 1e-12)` over examples, in nats.
pub fn mean_log_likelihood(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.get(i, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn error_rate(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean confidence of the bin's examples, 0 when empty.
    pub confidence: f64,
    /// Fraction correct, 0 when empty.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Expected calibration error over `bins` equal-width, right-closed
/// confidence bins on `(0, 1]`.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<Calibration> {
    check(probs, labels)?;
    if bins == 0 {
        return Err(Error::Parameter("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let out = (0..bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[b] as f64;
                (conf_sum[b] / c, correct[b] as f64 / c)
            };
            total += count[b] as f64 / n * (accuracy - confidence).abs();
            ReliabilityBin {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(Calibration {
        ece: total,
        bins: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean test log-likelihood, nats per example.
    pub log_likelihood: f64,
    pub error: f64,
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

pub fn evaluate(probs: &Tensor, labels: &[usize], bins: usize) -> Result<EvalReport> {
    let cal = ece(probs, labels, bins)?;
    Ok(EvalReport {
        log_likelihood: mean_log_likelihood(probs, labels)?,
        error: error_rate(probs, labels)?,
        ece: cal.ece,
        bins: cal.bins,
    })
}

/// Writes `bin_low,bin_high,count,confidence,accuracy` rows.
pub fn write_reliability_csv<W: Write>(bins: &[ReliabilityBin], mut out: W) -> Result<()> {
    writeln!(out, "bin_low,bin_high,count,confidence,accuracy")?;
    for b in bins {
        writeln!(out, "{},{},{},{},{}", b.low, b.high, b.count, b.confidence, b.accuracy)?;
    }
    Ok(())
}
