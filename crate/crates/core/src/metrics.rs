//! Calibration and discrimination metrics over binary correctness labels.
//!
//! Conventions: equal-width bins are right-open except the last, which is
//! closed so a confidence of exactly 1.0 lands in the top bin. AUROC gives
//! half credit to ties. AUCPR is step-wise average precision with tied
//! scores processed as one block.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
/// Weight of AUROC in the composite validation score.
pub const COMPOSITE_ALPHA: f64 = 0.6;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(confidences: &[f64], labels: &[bool]) -> Result<()> {
    if confidences.is_empty() {
        return Err(Error::Empty("metric needs at least one sample".into()));
    }
    if confidences.len() != labels.len() {
        return Err(Error::Dimension {
            expected: confidences.len(),
            got: labels.len(),
        });
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Validation(format!("confidence {c} outside [0,1]")));
    }
    Ok(())
}

fn bin_index(c: f64, bins: usize) -> usize {
    ((c * bins as f64).floor() as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n: usize,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    /// Count-weighted gap between mean confidence and accuracy.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.mean_conf - b.accuracy).abs())
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"])?;
        for b in &self.bins {
            out.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                b.mean_conf.to_string(),
                b.accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn reliability_bins(confidences: &[f64], labels: &[bool], bins: usize) -> Result<ReliabilityBins> {
    check_inputs(confidences, labels)?;
    if bins == 0 {
        return Err(Error::Validation("bin count must be positive".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for (&c, &y) in confidences.iter().zip(labels) {
        let j = bin_index(c, bins);
        count[j] += 1;
        conf_sum[j] += c;
        correct[j] += y as usize;
    }
    let bins_out = (0..bins)
        .map(|j| {
            let (mean_conf, accuracy) = if count[j] > 0 {
                (conf_sum[j] / count[j] as f64, correct[j] as f64 / count[j] as f64)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                lo: j as f64 / bins as f64,
                hi: (j + 1) as f64 / bins as f64,
                count: count[j],
                mean_conf,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        n: confidences.len(),
        bins: bins_out,
    })
}

pub fn ece(confidences: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    Ok(reliability_bins(confidences, labels, bins)?.weighted_gap())
}

pub fn brier_score(confidences: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(confidences, labels)?;
    let sum: f64 = confidences
        .iter()
        .zip(labels)
        .map(|(&c, &y)| {
            let d = c - y as u8 as f64;
            d * d
        })
        .sum();
    Ok(sum / confidences.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and F1 with predictions `confidence >= threshold` and the
/// correct-response class as positive.
pub fn threshold_metrics(confidences: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_inputs(confidences, labels)?;
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&c, &y) in confidences.iter().zip(labels) {
        match (c >= threshold, y) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let n = confidences.len() as f64;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ThresholdMetrics {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
    })
}

/// Indices sorted by score descending; ties keep input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann–Whitney AUROC with half credit for ties.
pub fn auroc(confidences: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(confidences, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Walk ascending; each block of tied scores credits its positives with
    // every negative strictly below plus half of the tied negatives.
    let mut order = descending_order(confidences);
    order.reverse();
    let mut negatives_below = 0u64;
    let mut twice_wins = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = confidences[order[i]];
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && confidences[order[j]] == s {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision.
pub fn aucpr(confidences: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(confidences, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUCPR needs at least one positive".into()));
    }
    let order = descending_order(confidences);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = confidences[order[i]];
        let mut block_pos = 0usize;
        while i < order.len() && confidences[order[i]] == s {
            if labels[order[i]] {
                block_pos += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_pos;
        if block_pos > 0 {
            ap += (block_pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

pub fn composite(auroc: f64, ece: f64) -> f64 {
    COMPOSITE_ALPHA * auroc + (1.0 - COMPOSITE_ALPHA) * (1.0 - ece)
}

/// Full metric roster for one score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub prevalence: f64,
    pub ece: f64,
    pub brier: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub aucpr: f64,
    pub auroc: f64,
    pub composite: f64,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "n", "prevalence", "ece", "brier", "acc", "f1", "aucpr", "auroc", "composite",
];

impl MetricReport {
    pub fn compute(confidences: &[f64], labels: &[bool]) -> Result<Self> {
        Self::compute_with_bins(confidences, labels, DEFAULT_BINS)
    }

    pub fn compute_with_bins(confidences: &[f64], labels: &[bool], bins: usize) -> Result<Self> {
        let ece = ece(confidences, labels, bins)?;
        let auroc = auroc(confidences, labels)?;
        let t = threshold_metrics(confidences, labels, DEFAULT_THRESHOLD)?;
        let n = confidences.len();
        Ok(MetricReport {
            n,
            prevalence: labels.iter().filter(|&&y| y).count() as f64 / n as f64,
            ece,
            brier: brier_score(confidences, labels)?,
            accuracy: t.accuracy,
            f1: t.f1,
            aucpr: aucpr(confidences, labels)?,
            auroc,
            composite: composite(auroc, ece),
        })
    }

    fn row(&self) -> [String; 9] {
        [
            self.n.to_string(),
            self.prevalence.to_string(),
            self.ece.to_string(),
            self.brier.to_string(),
            self.accuracy.to_string(),
            self.f1.to_string(),
            self.aucpr.to_string(),
            self.auroc.to_string(),
            self.composite.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(reports: &[MetricReport], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_COLUMNS)?;
        for r in reports {
            out.write_record(r.row())?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ece_perfect() {
        assert_eq!(ece(&[1.0, 1.0, 1.0], &[true, true, true], 10).unwrap(), 0.0);
    }

    #[test]
    fn ece_hand_case() {
        let conf = [0.95, 0.95, 0.05, 0.55];
        let y = [true, false, false, true];
        assert_abs_diff_eq!(ece(&conf, &y, 10).unwrap(), 0.35, epsilon = 1e-12);
        let bins = reliability_bins(&conf, &y, 10).unwrap();
        let populated: Vec<usize> = bins.bins.iter().map(|b| b.count).filter(|&c| c > 0).collect();
        assert_eq!(populated, vec![1, 1, 2]);
        assert_eq!(bins.bins[9].count, 2);
        assert_abs_diff_eq!(bins.bins[9].accuracy, 0.5);
    }

    #[test]
    fn ece_matches_accuracy() {
        // 7 of 10 correct, every confidence 0.7
        let conf = [0.7; 10];
        let y: Vec<bool> = (0..10).map(|i| i < 7).collect();
        assert_abs_diff_eq!(ece(&conf, &y, 10).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn one_lands_in_top_bin() {
        let b = reliability_bins(&[1.0], &[true], 10).unwrap();
        assert_eq!(b.bins[9].count, 1);
        assert_eq!(b.bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn reliability_top_bin_pattern() {
        // 1000 predictions at 0.95 with 913 correct
        let conf = vec![0.95; 1000];
        let y: Vec<bool> = (0..1000).map(|i| i < 913).collect();
        let b = reliability_bins(&conf, &y, 10).unwrap();
        let top = &b.bins[9];
        assert_eq!(top.count, 1000);
        assert_abs_diff_eq!(top.mean_conf, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(top.accuracy, 0.913, epsilon = 1e-12);
    }

    #[test]
    fn brier_cases() {
        assert_eq!(brier_score(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_abs_diff_eq!(brier_score(&[0.5, 0.5], &[false, true]).unwrap(), 0.25);
        assert_abs_diff_eq!(brier_score(&[0.9, 0.2], &[true, false]).unwrap(), 0.025, epsilon = 1e-15);
    }

    #[test]
    fn threshold_cases() {
        let t = threshold_metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((t.accuracy, t.f1), (1.0, 1.0));
        let t = threshold_metrics(&[0.4, 0.4, 0.4], &[true, false, true], 0.5).unwrap();
        assert_eq!(t.f1, 0.0);
        let t = threshold_metrics(&[0.6, 0.6, 0.4], &[true, false, true], 0.5).unwrap();
        assert_abs_diff_eq!(t.accuracy, 1.0 / 3.0);
        assert_abs_diff_eq!(t.precision, 0.5);
        assert_abs_diff_eq!(t.recall, 0.5);
        assert_abs_diff_eq!(t.f1, 0.5);
        // the threshold itself counts as a positive prediction
        let t = threshold_metrics(&[0.5], &[true], 0.5).unwrap();
        assert_eq!(t.accuracy, 1.0);
    }

    #[test]
    fn auroc_cases() {
        let conf = [0.9, 0.8, 0.7, 0.85];
        let y = [true, true, false, false];
        assert_abs_diff_eq!(auroc(&conf, &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.3, 0.4], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aucpr_cases() {
        assert_eq!(aucpr(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            aucpr(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        for k in 1..6 {
            let mut conf: Vec<f64> = (0..k).map(|i| 0.9 - 0.1 * i as f64).collect();
            conf.push(0.01);
            let mut y = vec![false; k];
            y.push(true);
            assert_abs_diff_eq!(aucpr(&conf, &y).unwrap(), 1.0 / (k as f64 + 1.0), epsilon = 1e-15);
        }
        assert!(matches!(aucpr(&[0.3], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn composite_cases() {
        assert_eq!(composite(1.0, 0.0), 1.0);
        assert_abs_diff_eq!(composite(0.5, 0.5), 0.5);
        // 0.6 * 0.7863 + 0.4 * 0.9291
        assert_abs_diff_eq!(composite(0.7863, 0.0709), 0.84342, epsilon = 1e-12);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(ece(&[], &[], 10), Err(Error::Empty(_))));
        assert!(matches!(threshold_metrics(&[], &[], 0.5), Err(Error::Empty(_))));
        assert!(reliability_bins(&[], &[], 10).is_err());
    }

    #[test]
    fn report_csv_columns() {
        let r = MetricReport::compute(&[0.9, 0.1], &[true, false]).unwrap();
        assert_abs_diff_eq!(r.ece, 0.1, epsilon = 1e-15);
        assert_eq!(r.auroc, 1.0);
        let mut buf = Vec::new();
        MetricReport::write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,prevalence,ece,brier,acc,f1,aucpr,auroc,composite\n2,0.5,"));
    }
}
