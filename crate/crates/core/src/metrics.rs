//! Pixel-wise ROC-AUC and confusion maps.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthdata::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::AucUndefined(format!("score {s} cannot be ranked")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined(format!(
            "need both classes, got {positives} positive and {negatives} negative labels"
        )));
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks:
/// the probability that a random positive outscores a random negative,
/// counting ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<EvalResult> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, in exact integer arithmetic
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1..=end share the midrank (start + 1 + end) / 2
        let doubled_midrank = (start + 1 + end) as u128;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += doubled_midrank * tied_positives;
        start = end;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    let auc = doubled_u as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(EvalResult {
        auc,
        positives,
        negatives,
    })
}

/// Direct count over every positive/negative pair.
pub fn auc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut doubled_wins: u128 = 0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                doubled_wins += 2;
            } else if scores[i] == scores[j] {
                doubled_wins += 1;
            }
        }
    }
    Ok(doubled_wins as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

impl ErrorCategory {
    /// Display colour: TP white, FP red, FN blue, TN black.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            ErrorCategory::TruePositive => [255, 255, 255],
            ErrorCategory::FalsePositive => [220, 40, 40],
            ErrorCategory::FalseNegative => [40, 90, 230],
            ErrorCategory::TrueNegative => [0, 0, 0],
        }
    }
}

/// Per-pixel confusion category of `probs >= threshold` against `mask`.
pub fn error_map(probs: &[f64], mask: &Mask, threshold: f64) -> Result<Vec<ErrorCategory>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Shape(format!("threshold {threshold} outside (0, 1)")));
    }
    if probs.len() != mask.data().len() {
        return Err(Error::Shape(format!(
            "{} predictions for a {}-pixel mask",
            probs.len(),
            mask.data().len()
        )));
    }
    Ok(probs
        .iter()
        .zip(mask.data())
        .map(|(&p, &m)| match (p >= threshold, m == 1) {
            (true, true) => ErrorCategory::TruePositive,
            (true, false) => ErrorCategory::FalsePositive,
            (false, true) => ErrorCategory::FalseNegative,
            (false, false) => ErrorCategory::TrueNegative,
        })
        .collect())
}

/// Writes a square error map as an RGB PNG.
pub fn write_error_map_png(map: &[ErrorCategory], side: usize, path: &Path) -> Result<()> {
    if map.len() != side * side {
        return Err(Error::Shape(format!("{} categories for side {side}", map.len())));
    }
    let rgb: Vec<u8> = map.iter().flat_map(|c| c.rgb()).collect();
    crate::corpus::write_png(path, side, png::ColorType::Rgb, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: usize, neg: usize) -> Vec<bool> {
        let mut l = vec![true; pos];
        l.extend(vec![false; neg]);
        l
    }

    #[test]
    fn hand_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &labels(2, 2)).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.8, 0.8], &labels(1, 1)).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.1], &labels(2, 2)).unwrap().auc, 0.75);
        assert_eq!(auc_bruteforce(&[0.9, 0.4, 0.6, 0.1], &labels(2, 2)).unwrap(), 0.75);
        let r = roc_auc(&[0.9, 0.4, 0.6], &labels(1, 2)).unwrap();
        assert_eq!((r.positives, r.negatives), (1, 2));
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::AucUndefined(_))
        ));
        assert!(matches!(
            auc_bruteforce(&[0.1, 0.2], &[false, false]),
            Err(Error::AucUndefined(_))
        ));
        assert!(roc_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
        assert!(roc_auc(&[0.2], &[true, false]).is_err());
    }

    #[test]
    fn error_map_categories() {
        let mask = Mask::new(2, vec![1, 0, 1, 0]).unwrap();
        let exact = error_map(&[1.0, 0.0, 1.0, 0.0], &mask, 0.5).unwrap();
        assert!(exact
            .iter()
            .all(|c| matches!(c, ErrorCategory::TruePositive | ErrorCategory::TrueNegative)));
        let zero = error_map(&[0.0; 4], &mask, 0.5).unwrap();
        assert_eq!(
            zero,
            vec![
                ErrorCategory::FalseNegative,
                ErrorCategory::TrueNegative,
                ErrorCategory::FalseNegative,
                ErrorCategory::TrueNegative
            ]
        );
        assert_eq!(
            error_map(&[0.7, 0.7, 0.2, 0.2], &mask, 0.5).unwrap()[1],
            ErrorCategory::FalsePositive
        );
        assert!(error_map(&[0.0; 4], &mask, 1.0).is_err());
        assert!(error_map(&[0.0; 3], &mask, 0.5).is_err());
    }
}
