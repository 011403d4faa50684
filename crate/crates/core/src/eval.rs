//! Evaluation metrics and analysis reports.
//!
//! Everything here is a pure function over prediction records: accuracy,
//! macro/weighted F1, accuracy binned by description length, and the
//! reliability table + expected calibration error used to diagnose
//! overconfident classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;

/// One scored prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub gold: usize,
    pub predicted: usize,
    /// Per-class probabilities; sum to 1 within 1e-6.
    pub probabilities: Vec<f64>,
    /// Calibration confidence. For the softmax paths this is the maximum
    /// class probability; the pair-query path stores the winning binary
    /// confidence instead (its raw query outputs are not a distribution).
    pub confidence: f64,
    /// Token count of the image description used for this prediction.
    pub caption_len: usize,
    pub mode: FusionMode,
}

impl PredictionRecord {
    /// Record with confidence = max class probability.
    pub fn from_probabilities(
        id: usize,
        gold: usize,
        predicted: usize,
        probabilities: Vec<f64>,
        caption_len: usize,
        mode: FusionMode,
    ) -> Self {
        let confidence = probabilities.iter().cloned().fold(0.0, f64::max);
        PredictionRecord {
            id,
            gold,
            predicted,
            probabilities,
            confidence,
            caption_len,
            mode,
        }
    }

    pub fn correct(&self) -> bool {
        self.gold == self.predicted
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

fn require_non_empty(records: &[PredictionRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract(format!("{what} requires at least one record")));
    }
    Ok(())
}

/// Fraction of records with predicted == gold.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    require_non_empty(records, "accuracy")?;
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

fn per_class_f1(records: &[PredictionRecord], num_classes: usize) -> (Vec<f64>, Vec<usize>) {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for r in records {
        support[r.gold] += 1;
        if r.predicted == r.gold {
            tp[r.gold] += 1;
        } else {
            fp[r.predicted] += 1;
            fn_[r.gold] += 1;
        }
    }
    let f1 = (0..num_classes)
        .map(|k| {
            let p = if tp[k] + fp[k] == 0 {
                0.0
            } else {
                tp[k] as f64 / (tp[k] + fp[k]) as f64
            };
            let r = if tp[k] + fn_[k] == 0 {
                0.0
            } else {
                tp[k] as f64 / (tp[k] + fn_[k]) as f64
            };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    (f1, support)
}

/// Unweighted mean of per-class F1. A class with neither predictions nor
/// gold labels contributes F1 = 0.
pub fn macro_f1(records: &[PredictionRecord], num_classes: usize) -> Result<f64> {
    require_non_empty(records, "macro_f1")?;
    let (f1, _) = per_class_f1(records, num_classes);
    Ok(f1.iter().sum::<f64>() / num_classes as f64)
}

/// Per-class F1 weighted by gold-class support fraction.
pub fn weighted_f1(records: &[PredictionRecord], num_classes: usize) -> Result<f64> {
    require_non_empty(records, "weighted_f1")?;
    let (f1, support) = per_class_f1(records, num_classes);
    let n = records.len() as f64;
    Ok(f1
        .iter()
        .zip(&support)
        .map(|(f, s)| f * (*s as f64 / n))
        .sum())
}

/// One half-open description-length bin [lo, hi).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub accuracy: f64,
}

/// Bin records by description length into disjoint width-`bin_width` bins
/// covering every observed length. Empty bins are omitted; counts over all
/// bins sum to the record count.
pub fn caption_length_bins(records: &[PredictionRecord], bin_width: usize) -> Result<Vec<LengthBin>> {
    if bin_width == 0 {
        return Err(Error::Param("bin_width must be >= 1".into()));
    }
    let max_bin = match records.iter().map(|r| r.caption_len / bin_width).max() {
        Some(m) => m,
        None => return Ok(Vec::new()),
    };
    let mut correct = vec![0usize; max_bin + 1];
    let mut incorrect = vec![0usize; max_bin + 1];
    for r in records {
        let b = r.caption_len / bin_width;
        if r.correct() {
            correct[b] += 1;
        } else {
            incorrect[b] += 1;
        }
    }
    Ok((0..=max_bin)
        .filter(|b| correct[*b] + incorrect[*b] > 0)
        .map(|b| {
            let n = correct[b] + incorrect[b];
            LengthBin {
                lo: b * bin_width,
                hi: (b + 1) * bin_width,
                correct: correct[b],
                incorrect: incorrect[b],
                accuracy: correct[b] as f64 / n as f64,
            }
        })
        .collect())
}

/// One reliability bin over confidence range [lo, hi).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Expected calibration error: support-weighted mean |confidence - accuracy|.
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Equal-width reliability diagram over [0, 1]; confidence is the maximum
/// class probability. The last bin includes confidence 1.0 exactly. Empty
/// bins are reported with zero count and contribute nothing to the ECE.
pub fn calibration_report(records: &[PredictionRecord], n_bins: usize) -> Result<CalibrationReport> {
    if n_bins == 0 {
        return Err(Error::Param("calibration needs n_bins >= 1".into()));
    }
    require_non_empty(records, "calibration_report")?;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for r in records {
        let c = r.confidence();
        let b = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        if r.correct() {
            correct[b] += 1;
        }
    }
    let n = records.len() as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, acc) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            };
            ece += count[b] as f64 / n * (mean_confidence - acc).abs();
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                accuracy: acc,
            }
        })
        .collect();
    Ok(CalibrationReport { ece, bins })
}

/// Aggregate metrics emitted as the JSON summary of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_records: usize,
    pub num_classes: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn metrics_summary(records: &[PredictionRecord], num_classes: usize) -> Result<MetricsSummary> {
    Ok(MetricsSummary {
        n_records: records.len(),
        num_classes,
        accuracy: accuracy(records)?,
        macro_f1: macro_f1(records, num_classes)?,
        weighted_f1: weighted_f1(records, num_classes)?,
    })
}

pub fn length_bins_csv(bins: &[LengthBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,correct,incorrect,accuracy\n");
    for b in bins {
        out.push_str(&format!("{},{},{},{},{}\n", b.lo, b.hi, b.correct, b.incorrect, b.accuracy));
    }
    out
}

pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,mean_confidence,accuracy\n");
    for b in &report.bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_confidence, b.accuracy
        ));
    }
    out
}
