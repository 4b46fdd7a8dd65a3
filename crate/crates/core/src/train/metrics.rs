use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Pearson product-moment correlation, computed with two passes.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("series of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Undefined(format!("correlation of {} points", x.len())));
    }
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
    if sxx == 0.0 || syy == 0.0 || !(sxx * syy).is_finite() {
        return Err(Error::Undefined("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mann-Whitney estimate of P(score of a positive > score of a negative),
/// with ties counted as one half. Uses midranks, O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares its mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC over `probs[i][k]`. Classes absent from `truth`
/// (or present in every slide) are skipped; at least one must qualify.
/// Two classes reduce to the plain AUC of class 1.
pub fn macro_auc(probs: &[Vec<f64>], truth: &[usize], num_classes: usize) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", probs.len(), truth.len())));
    }
    if num_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return auc(&s, &l);
    }
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..num_classes {
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let l: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        match auc(&s, &l) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(Error::Undefined(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Undefined("no class has both positives and negatives".into()));
    }
    Ok(total / used as f64)
}

/// Metrics of one task on one evaluation set. Undefined metrics are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    /// Slides with a label for this task.
    pub n: usize,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub pearson: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskMetrics>,
    /// Mean training loss per epoch (empty for evaluation-only reports).
    pub loss_curve: Vec<f64>,
    pub wall_time_s: f64,
    pub peak_activation: usize,
}

impl MetricReport {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Mean of the defined AUC values.
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self.tasks.iter().filter_map(|t| t.auc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pairwise_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn auc_matches_pairwise_on_twenty_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // coarse scores force ties
            let s: Vec<f64> = (0..20).map(|_| (rng.random::<f64>() * 6.0).floor()).collect();
            let mut l: Vec<bool> = (0..20).map(|_| rng.random()).collect();
            l[0] = true;
            l[1] = false;
            assert_eq!(auc(&s, &l).unwrap(), pairwise_auc(&s, &l));
        }
    }

    #[test]
    fn pearson_cases() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[2.0; 10]), Err(Error::Undefined(_))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 0.3 + rng.random::<f64>()).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((pearson(&x, &y).unwrap() - cov / (sx * sy)).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor() {
        let truth = vec![0, 2, 1, 2, 0, 1];
        let probs: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| (0..3).map(|k| if k == t { 0.9 } else { 0.05 }).collect())
            .collect();
        let pred: Vec<usize> = truth.clone();
        assert_eq!(accuracy(&pred, &truth).unwrap(), 1.0);
        assert_eq!(macro_auc(&probs, &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn macro_auc_skips_missing_classes() {
        let truth = vec![0, 1, 0, 1];
        let probs = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1]];
        assert_eq!(macro_auc(&probs, &truth, 3).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(
            s in prop::collection::vec(-5.0f64..5.0, 4..50),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut l: Vec<bool> = s.iter().map(|_| rng.random()).collect();
            l[0] = true;
            l[1] = false;
            let a = auc(&s, &l).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, pairwise_auc(&s, &l));
            let y: Vec<f64> = s.iter().map(|v| v * v + rng.random::<f64>()).collect();
            if let Ok(r) = pearson(&s, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
