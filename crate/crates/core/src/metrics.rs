//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UlcError};

/// Area under the ROC curve via the Mann-Whitney rank statistic.
/// Tied scores receive their average rank. `positives[i]` marks the class
/// that should score higher.
pub fn auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(UlcError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(UlcError::Contract(format!("score {s} is NaN")));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(UlcError::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| positives[k]).count();
        rank_sum_pos += mean_rank * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Recall per class plus aggregates over a minority/majority split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub minority: Option<f64>,
    pub majority: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn per_class_accuracy(
    preds: &[usize],
    truth: &[usize],
    class_count: usize,
    minority_classes: &[usize],
) -> Result<ClassAccuracy> {
    if preds.len() != truth.len() {
        return Err(UlcError::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if let Some(&l) = preds.iter().chain(truth).find(|&&l| l >= class_count) {
        return Err(UlcError::Contract(format!("label {l} >= class count {class_count}")));
    }
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (&p, &t) in preds.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let overall = if truth.is_empty() {
        0.0
    } else {
        hits.iter().sum::<usize>() as f64 / truth.len() as f64
    };
    let minority = mean_present(
        per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| minority_classes.contains(c))
            .map(|(_, a)| *a),
    );
    let majority = mean_present(
        per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| !minority_classes.contains(c))
            .map(|(_, a)| *a),
    );
    Ok(ClassAccuracy {
        per_class,
        overall,
        minority,
        majority,
    })
}

/// Row-wise argmax.
pub fn argmax_rows(probs: &ndarray::Array2<f64>) -> Vec<usize> {
    probs
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(P*N) pairwise definition.
    fn auc_pairwise(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(UlcError::UndefinedMetric(_))
        ));
        let s = [0.1, 0.4, 0.35, 0.8];
        let p = [false, false, true, true];
        assert_eq!(auc(&s, &p).unwrap(), 0.75);
    }

    #[test]
    fn per_class_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        let acc = per_class_accuracy(&truth, &truth, 3, &[2]).unwrap();
        assert_eq!(acc.per_class, vec![Some(1.0); 3]);
        let acc = per_class_accuracy(&[0; 6], &truth, 3, &[]).unwrap();
        assert_eq!(acc.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
        let acc = per_class_accuracy(&[0, 0, 1, 0], &[0, 0, 1, 1], 2, &[1]).unwrap();
        assert_eq!(acc.per_class, vec![Some(1.0), Some(0.5)]);
        assert_eq!(acc.minority, Some(0.5));
        assert_eq!(acc.majority, Some(1.0));
    }

    #[test]
    fn missing_class_excluded() {
        let acc = per_class_accuracy(&[0, 1], &[0, 1], 3, &[2]).unwrap();
        assert_eq!(acc.per_class[2], None);
        assert_eq!(acc.minority, None);
        assert_eq!(acc.majority, Some(1.0));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
            let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let a = auc(&scores, &pos).unwrap();
            prop_assert!((a - auc_pairwise(&scores, &pos)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 - 1.0).collect();
            prop_assert!((auc(&scores, &pos).unwrap() - auc(&warped, &pos).unwrap()).abs() < 1e-12);
        }
    }
}
