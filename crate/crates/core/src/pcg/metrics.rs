//! Confusion metrics, ROC AUC and calibration for the binary task
//! (abnormal = positive).

use std::io::Write;

use crate::error::{Error, Result};
use crate::pcg::signal::Label;

pub const RELIABILITY_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// NaN when only one class is present.
    pub auc: f64,
    pub ece: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "tp,fp,tn,fn,accuracy,sensitivity,specificity,f1,auc,ece";

    /// Derived rates from counts; ratios with an empty denominator are 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            auc: f64::NAN,
            ece: 0.0,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.f1,
            self.auc,
            self.ece
        )
    }
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl ReliabilityBins {
    pub const CSV_HEADER: &'static str = "bin,lower,upper,count,mean_confidence,accuracy";

    /// Bins `(confidence, correct)` pairs into ten equal-width bins on [0, 1].
    pub fn build(confidence: &[f64], correct: &[bool]) -> Result<Self> {
        if confidence.len() != correct.len() {
            return Err(Error::shape("reliability bins", "length", confidence.len(), correct.len()));
        }
        let n = RELIABILITY_BINS;
        let mut sum_c = vec![0.0; n];
        let mut hits = vec![0usize; n];
        let mut count = vec![0usize; n];
        for (&c, &ok) in confidence.iter().zip(correct) {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
            }
            let b = ((c * n as f64) as usize).min(n - 1);
            sum_c[b] += c;
            hits[b] += usize::from(ok);
            count[b] += 1;
        }
        let bins = (0..n)
            .map(|b| Bin {
                lower: b as f64 / n as f64,
                upper: (b + 1) as f64 / n as f64,
                count: count[b],
                mean_confidence: if count[b] > 0 { sum_c[b] / count[b] as f64 } else { 0.0 },
                accuracy: ratio(hits[b], count[b]),
            })
            .collect();
        Ok(ReliabilityBins {
            bins,
            total: confidence.len(),
        })
    }

    /// `Σ (count/total)·|accuracy − confidence|`
    pub fn ece(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.total as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(
                w,
                "{i},{:.1},{:.1},{},{:.10},{:.10}",
                b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            )?;
        }
        Ok(())
    }
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score threshold. Tied scores form one diagonal ROC step. NaN when
/// either class is absent.
pub fn roc_auc(labels: &[Label], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::shape("auc", "length", labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Every metric for one evaluation set. `scores` are positive-class
/// probabilities; confidence for calibration is that of the predicted
/// label.
pub fn compute_metrics(labels: &[Label], predicted: &[Label], scores: &[f64]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::invalid("metrics: empty input"));
    }
    if predicted.len() != labels.len() {
        return Err(Error::shape("metrics", "predictions", labels.len(), predicted.len()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", "scores", labels.len(), scores.len()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("metrics: score {s} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y.is_positive(), p.is_positive()) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let mut report = MetricsReport::from_counts(tp, fp, tn, fn_);
    report.auc = roc_auc(labels, scores)?;
    let (conf, correct) = calibration_inputs(labels, predicted, scores);
    report.ece = ReliabilityBins::build(&conf, &correct)?.ece();
    Ok(report)
}

/// Confidence of each predicted label and whether it was right.
pub fn calibration_inputs(labels: &[Label], predicted: &[Label], scores: &[f64]) -> (Vec<f64>, Vec<bool>) {
    labels
        .iter()
        .zip(predicted)
        .zip(scores)
        .map(|((&y, &p), &s)| (if p.is_positive() { s } else { 1.0 - s }, y == p))
        .unzip()
}
