//! MAE / accuracy for ordinal targets and PLCC / SRCC for continuous ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric needs at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("ordinal label {label} outside 0..{num_bins}")]
    LabelOutOfRange { label: u32, num_bins: u32 },
}

pub type MetricResult<T> = Result<T, MetricError>;

fn check_pair(x: &[f64], y: &[f64], needed: usize) -> MetricResult<()> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(MetricError::TooFew { needed, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Rounds each prediction to the nearest bin, clamped to `[0, num_bins - 1]`,
/// and returns `(MAE, accuracy)` against the labels.
pub fn mae_and_accuracy(pred: &[f64], labels: &[u32], num_bins: u32) -> MetricResult<(f64, f64)> {
    if pred.len() != labels.len() {
        return Err(MetricError::LengthMismatch(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooFew { needed: 1, got: 0 });
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_bins) {
        return Err(MetricError::LabelOutOfRange { label, num_bins });
    }
    let top = f64::from(num_bins.saturating_sub(1));
    let mut abs_err = 0.0;
    let mut hits = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        let decoded = p.round().clamp(0.0, top);
        let err = (decoded - f64::from(l)).abs();
        abs_err += err;
        if err == 0.0 {
            hits += 1;
        }
    }
    let n = pred.len() as f64;
    Ok((abs_err / n, hits as f64 / n))
}

/// Pearson linear correlation (population moments).
pub fn plcc(x: &[f64], y: &[f64]) -> MetricResult<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: PLCC of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> MetricResult<f64> {
    check_pair(x, y, 2)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Metric values for one group of items; `None` where a metric is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n_items: usize,
    /// Ordinal MAE when every item carries a bin, otherwise mean absolute
    /// error of the raw scores.
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl MetricSet {
    /// `num_bins` is required for the ordinal metrics; without bins the MAE
    /// falls back to raw absolute error.
    pub fn compute(pred: &[f64], targets: &[f64], bins: Option<(&[u32], u32)>) -> Self {
        let (mae, accuracy) = match bins {
            Some((labels, k)) => match mae_and_accuracy(pred, labels, k) {
                Ok((m, a)) => (Some(m), Some(a)),
                Err(_) => (None, None),
            },
            None if !pred.is_empty() && pred.len() == targets.len() => {
                let m = pred.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
                (m.is_finite().then_some(m), None)
            }
            None => (None, None),
        };
        MetricSet {
            n_items: pred.len(),
            mae,
            accuracy,
            plcc: plcc(pred, targets).ok(),
            srcc: srcc(pred, targets).ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ordinal_examples() {
        assert_eq!(mae_and_accuracy(&[1.2, 2.9], &[1, 3], 4).unwrap(), (0.0, 1.0));
        assert_eq!(mae_and_accuracy(&[0.0, 1.0, 2.0], &[0, 1, 2], 3).unwrap(), (0.0, 1.0));
        let (mae, acc) = mae_and_accuracy(&[0.0, 0.0, 0.0], &[0, 1, 2], 3).unwrap();
        assert_eq!(mae, 1.0);
        assert!((acc - 1.0 / 3.0).abs() < 1e-15);
        // clamping
        assert_eq!(mae_and_accuracy(&[-7.0, 42.0], &[0, 2], 3).unwrap(), (0.0, 1.0));
        assert!(mae_and_accuracy(&[], &[], 3).is_err());
        assert!(mae_and_accuracy(&[1.0], &[3], 3).is_err());
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // hand value: cov = 1.0, var_x = var_y = 1.25 → 0.8
        assert!((plcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!((srcc(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        assert_eq!(plcc(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ZeroVariance));
        assert_eq!(srcc(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]), Err(MetricError::ZeroVariance));
        assert!(matches!(plcc(&[1.0], &[1.0]), Err(MetricError::TooFew { .. })));
        assert!(matches!(
            plcc(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn metric_set_single_item() {
        let m = MetricSet::compute(&[1.1], &[1.0], Some((&[1], 3)));
        assert_eq!(m.mae, Some(0.0));
        assert!(m.plcc.is_none() && m.srcc.is_none());
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_monotone_maps(
            x in prop::collection::vec(-3.0f64..3.0, 3..30),
            y in prop::collection::vec(-3.0f64..3.0, 30),
        ) {
            let y = &y[..x.len()];
            if let Ok(base) = srcc(&x, y) {
                let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let cube: Vec<f64> = y.iter().map(|v| v * v * v).collect();
                let aff: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
                prop_assert!((srcc(&ex, y).unwrap() - base).abs() < 1e-12);
                prop_assert!((srcc(&x, &cube).unwrap() - base).abs() < 1e-12);
                prop_assert!((srcc(&aff, y).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn plcc_affine_behaviour(
            x in prop::collection::vec(-3.0f64..3.0, 3..30),
            y in prop::collection::vec(-3.0f64..3.0, 30),
            slope in 0.1f64..5.0,
            shift in -5.0f64..5.0,
        ) {
            let y = &y[..x.len()];
            if let Ok(base) = plcc(&x, y) {
                let pos: Vec<f64> = x.iter().map(|v| slope * v + shift).collect();
                let neg: Vec<f64> = x.iter().map(|v| -slope * v + shift).collect();
                prop_assert!((plcc(&pos, y).unwrap() - base).abs() < 1e-9);
                prop_assert!((plcc(&neg, y).unwrap() + base).abs() < 1e-9);
                prop_assert!(base.abs() <= 1.0);
            }
        }

        #[test]
        fn joint_permutation_leaves_metrics_unchanged(
            x in prop::collection::vec(0.0f64..5.0, 3..20),
            seed in 0u64..1000,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i % 3) as f64).collect();
            let labels: Vec<u32> = y.iter().map(|v| (v.round() as u32).min(6)).collect();
            let mut idx: Vec<usize> = (0..x.len()).collect();
            crate::rng::Rng::new(seed).shuffle(&mut idx);
            let px: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let pl: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let a = MetricSet::compute(&x, &y, Some((&labels, 7)));
            let b = MetricSet::compute(&px, &py, Some((&pl, 7)));
            let close = |u: Option<f64>, v: Option<f64>| match (u, v) {
                (Some(u), Some(v)) => (u - v).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(close(a.mae, b.mae) && close(a.accuracy, b.accuracy));
            prop_assert!(close(a.plcc, b.plcc) && close(a.srcc, b.srcc));
        }

        #[test]
        fn perfect_accuracy_implies_zero_mae(
            pred in prop::collection::vec(-1.0f64..6.0, 1..20),
            labels in prop::collection::vec(0u32..5, 20),
        ) {
            let labels = &labels[..pred.len()];
            let (mae, acc) = mae_and_accuracy(&pred, labels, 5).unwrap();
            if acc == 1.0 {
                prop_assert_eq!(mae, 0.0);
            }
        }
    }
}
