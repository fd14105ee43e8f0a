//! Top-k accuracy, NLPD, ECE and the uncertainty–error scatter export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, entropy, max_value};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of ECE bins.
pub const ECE_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub top1: f64,
    /// Percent; top-`min(5, c)`.
    pub top5: f64,
    /// Mean nats per sample.
    pub nlpd: f64,
    pub ece: f64,
    pub n: usize,
}

/// Position of `label` in the descending ordering of `p`, ties broken
/// toward the lower class index.
fn label_rank(p: &[f64], label: usize) -> usize {
    let py = p[label];
    p.iter()
        .enumerate()
        .filter(|&(j, &v)| v > py || (v == py && j < label))
        .count()
}

/// Percentage of samples whose label is among the `k` most probable classes.
pub fn top_k_accuracy<P: AsRef<[f64]>>(preds: &[P], labels: &[usize], k: usize) -> Result<f64> {
    check_aligned(preds, labels)?;
    if let Some(first) = preds.first() {
        let c = first.as_ref().len();
        if k > c {
            return Err(Error::invalid(format!("top-{k} requested with {c} classes")));
        }
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| label_rank(p.as_ref(), y) < k)
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mean negative log probability of the true label.
pub fn nlpd<P: AsRef<[f64]>>(preds: &[P], labels: &[usize]) -> Result<f64> {
    check_aligned(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    // ln(1/p) and a running mean keep uniform predictions at exactly ln c
    let mut mean = 0.0;
    for (i, (p, &y)) in preds.iter().zip(labels).enumerate() {
        let term = (1.0 / p.as_ref()[y].max(PROB_FLOOR)).ln();
        mean += (term - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// Bin of a confidence value: bin `j` covers `(j/m, (j+1)/m]`, and a
/// confidence of exactly 0 lands in bin 0.
pub fn ece_bin(confidence: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut j = ((confidence * mf).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    // correct for rounding in confidence * m
    while j > 0 && confidence <= j as f64 / mf {
        j -= 1;
    }
    while j + 1 < m && confidence > (j + 1) as f64 / mf {
        j += 1;
    }
    j
}

/// Expected calibration error with `m` equal-width confidence bins.
pub fn ece<P: AsRef<[f64]>>(preds: &[P], labels: &[usize], m: usize) -> Result<f64> {
    check_aligned(preds, labels)?;
    if m == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    for (p, &y) in preds.iter().zip(labels) {
        let p = p.as_ref();
        let conf = max_value(p);
        let b = ece_bin(conf, m);
        count[b] += 1;
        conf_sum[b] += conf;
        if argmax(p) == y {
            correct[b] += 1;
        }
    }
    let n = preds.len() as f64;
    Ok((0..m)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Top-1, top-5, NLPD and ECE in one pass over the inputs.
pub fn report<P: AsRef<[f64]>>(preds: &[P], labels: &[usize]) -> Result<MetricsReport> {
    let c = preds.first().map_or(1, |p| p.as_ref().len());
    Ok(MetricsReport {
        top1: top_k_accuracy(preds, labels, 1)?,
        top5: top_k_accuracy(preds, labels, 5.min(c))?,
        nlpd: nlpd(preds, labels)?,
        ece: ece(preds, labels, ECE_BINS)?,
        n: preds.len(),
    })
}

fn check_aligned<P: AsRef<[f64]>>(preds: &[P], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    for (p, &y) in preds.iter().zip(labels) {
        if y >= p.as_ref().len() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
    }
    Ok(())
}

/// One point of the uncertainty–error scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sample_id: usize,
    /// 1-based exit index.
    pub exit: usize,
    pub entropy: f64,
    /// `1 − p(ŷ = y)`.
    pub error: f64,
    pub correct: bool,
}

/// Fraction of rows with error above one half, per exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub exit: usize,
    pub rows: usize,
    pub high_error_fraction: f64,
}

/// Predictions of one exit over a set of samples.
pub struct ExitPredictionsRef<'a, P> {
    pub exit: usize,
    pub sample_ids: &'a [usize],
    pub preds: &'a [P],
    pub labels: &'a [usize],
}

/// Scatter rows for every sample at every supplied exit, plus the per-exit
/// proportion of rows with error > 0.5.
pub fn scatter_export<P: AsRef<[f64]>>(
    exits: &[ExitPredictionsRef<'_, P>],
) -> Result<(Vec<ScatterRow>, Vec<ScatterSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::with_capacity(exits.len());
    for e in exits {
        check_aligned(e.preds, e.labels)?;
        if e.sample_ids.len() != e.preds.len() {
            return Err(Error::invalid("sample ids and predictions differ in length"));
        }
        let mut high = 0usize;
        for ((p, &y), &id) in e.preds.iter().zip(e.labels).zip(e.sample_ids) {
            let p = p.as_ref();
            let error = (1.0 - p[y]).clamp(0.0, 1.0);
            if error > 0.5 {
                high += 1;
            }
            rows.push(ScatterRow {
                sample_id: id,
                exit: e.exit,
                entropy: entropy(p).max(0.0),
                error,
                correct: argmax(p) == y,
            });
        }
        summary.push(ScatterSummary {
            exit: e.exit,
            rows: e.preds.len(),
            high_error_fraction: if e.preds.is_empty() {
                0.0
            } else {
                high as f64 / e.preds.len() as f64
            },
        });
    }
    Ok((rows, summary))
}
