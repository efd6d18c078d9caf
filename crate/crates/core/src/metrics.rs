//! Mean absolute error and maximum F-measure over 256 thresholds.

use crate::{DcfmError, Result};

pub const THRESHOLDS: usize = 256;

/// Precision weight of the F-measure.
pub const DEFAULT_BETA_SQ: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta_max: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_beta: Vec<f64>,
}

fn check_len(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(DcfmError::Config(format!(
            "metric inputs must have equal, nonzero size ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// 8-bit level of a value in `[0,1]`, rounded half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binarize at `t/255` for every `t` in `0..=255` and keep the best F-measure.
///
/// A pixel is positive at threshold `t` when its 8-bit level exceeds `t`,
/// so an all-zero map never produces a positive.
/// `0/0` precision, recall or F count as 0.
pub fn f_beta_curves(pred: &[f64], gt: &[f64], beta_sq: f64) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_len(pred, gt)?;
    let mut pos_hist = [0u64; THRESHOLDS];
    let mut neg_hist = [0u64; THRESHOLDS];
    for (&p, &g) in pred.iter().zip(gt) {
        let level = quantize(p) as usize;
        if g > 0.5 {
            pos_hist[level] += 1;
        } else {
            neg_hist[level] += 1;
        }
    }
    let positives: u64 = pos_hist.iter().sum();
    if positives == 0 {
        return Err(DcfmError::UndefinedMetric("ground truth has no positive pixel".into()));
    }
    let (mut precision, mut recall, mut f) = (vec![0.0; THRESHOLDS], vec![0.0; THRESHOLDS], vec![0.0; THRESHOLDS]);
    let (mut tp, mut fp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        if t + 1 < THRESHOLDS {
            tp += pos_hist[t + 1];
            fp += neg_hist[t + 1];
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = tp as f64 / positives as f64;
        let denom = beta_sq * p + r;
        precision[t] = p;
        recall[t] = r;
        f[t] = if denom == 0.0 { 0.0 } else { (1.0 + beta_sq) * p * r / denom };
    }
    let best = f.iter().copied().fold(0.0, f64::max);
    Ok((best, precision, recall, f))
}

pub fn f_beta_max(pred: &[f64], gt: &[f64], beta_sq: f64) -> Result<f64> {
    f_beta_curves(pred, gt, beta_sq).map(|r| r.0)
}

pub fn evaluate(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    let (best, precision, recall, f_beta) = f_beta_curves(pred, gt, DEFAULT_BETA_SQ)?;
    Ok(MetricReport { mae: mae(pred, gt)?, f_beta_max: best, precision, recall, f_beta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps() {
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(f_beta_max(&gt, &gt, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn inverted_and_zero_maps() {
        let gt = [1.0, 0.0, 1.0, 1.0];
        let inv: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
        assert_eq!(f_beta_max(&[0.0; 4], &gt, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn empty_ground_truth_is_undefined() {
        assert!(matches!(f_beta_max(&[0.2, 0.9], &[0.0, 0.0], 0.3), Err(DcfmError::UndefinedMetric(_))));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.1), 0);
        assert_eq!(quantize(2.0 / 255.0 - 1e-12), 2);
    }
}
