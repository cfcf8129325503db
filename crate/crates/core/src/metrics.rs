//! Tie-aware AUROC / average precision and mean±std aggregation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Identifier written into reports for the AUCPR computation rule.
pub const AUCPR_METHOD: &str = "average_precision_steps";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub aucpr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divisor n - 1.
    #[default]
    Sample,
    /// Divisor n.
    Population,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// False when the std is not defined for `n` (sample std with n = 1); `std` is then 0.
    pub std_defined: bool,
}

/// Class counts after validating lengths, labels and scores.
fn check<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("non-finite score at index {i}")));
    }
    let mut pos = 0;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            0 => {}
            1 => pos += 1,
            _ => {
                return Err(Error::Validation(format!(
                    "label {l} at index {i} is not 0 or 1"
                )))
            }
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Indices grouped into blocks of equal score, blocks in ascending score order.
fn tie_blocks<T: Scalar>(scores: &[T]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Mann–Whitney AUROC: fraction of (positive, negative) pairs ordered
/// correctly, ties counted as one half. O(m log m).
pub fn auroc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    // Twice the U statistic, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let q = block.len() as u128 - p;
        twice_u += 2 * p * neg_below + p * q;
        neg_below += q;
    }
    Ok(twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Average precision by the step rule over tied-score blocks, visited in
/// descending score order: `sum_k (R_k - R_{k-1}) * P_k`.
pub fn aucpr<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (n_pos, _) = check(scores, labels)?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0f64;
    for block in tie_blocks(scores).into_iter().rev() {
        let block_pos = block.iter().filter(|&&i| labels[i] == 1).count();
        tp += block_pos;
        seen += block.len();
        if block_pos > 0 {
            ap += (block_pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

pub fn evaluate<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<EvalResult> {
    let (n_pos, n_neg) = check(scores, labels)?;
    Ok(EvalResult {
        auroc: auroc(scores, labels)?,
        aucpr: aucpr(scores, labels)?,
        n_pos,
        n_neg,
    })
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    summarize_with(values, StdKind::Sample)
}

pub fn summarize_with(values: &[f64], kind: StdKind) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::Validation("cannot summarize an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "cannot summarize non-finite values".into(),
        ));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let (std, std_defined) = match kind {
        StdKind::Sample if n < 2 => (0.0, false),
        StdKind::Sample => ((ss / (n - 1) as f64).sqrt(), true),
        StdKind::Population => ((ss / n as f64).sqrt(), true),
    };
    Ok(SummaryStats {
        mean,
        std,
        n,
        std_defined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: [f64; 4] = [0.1, 0.4, 0.35, 0.8];
    const L: [u8; 4] = [0, 0, 1, 1];

    #[test]
    fn hand_example() {
        assert_eq!(auroc(&S, &L).unwrap(), 0.75);
        assert!((aucpr(&S, &L).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_tied() {
        let s = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(auroc(&s, &L).unwrap(), 1.0);
        assert_eq!(aucpr(&s, &L).unwrap(), 1.0);
        let tied = [0.3f32; 5];
        let l = [1, 0, 0, 1, 0];
        assert_eq!(auroc(&tied, &l).unwrap(), 0.5);
        assert!((aucpr(&tied, &l).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            aucpr(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            auroc(&[0.1, f64::NAN], &[0, 1]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            auroc(&[0.1, 0.2], &[0, 2]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(auroc(&[0.1], &[0, 1]), Err(Error::Validation(_))));
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (0.5, 0.0, 3));
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.std - 0.5f64.sqrt()).abs() < 1e-15);
        let s = summarize(&[0.8]).unwrap();
        assert_eq!((s.mean, s.std, s.n, s.std_defined), (0.8, 0.0, 1, false));
        let p = summarize_with(&[0.0, 1.0], StdKind::Population).unwrap();
        assert_eq!(p.std, 0.5);
        assert!(summarize(&[]).is_err());
    }
}
