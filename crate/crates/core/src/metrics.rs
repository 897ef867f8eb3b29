//! Evaluation metrics: accuracy, macro F1, weighted cross entropy, confusion
//! matrix, MSE and R². All metric arithmetic runs in f64 regardless of the
//! model element type.

use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("input error: {0}")]
    Input(String),
}

/// Everything measured in one evaluation. Classification runs leave `mse`
/// and `r2` unset; regression runs leave the classification fields at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Cross entropy weighted by the supplied class weights.
    pub weighted_ce: f64,
    /// The same loss with unit weights, reported alongside.
    pub unweighted_ce: f64,
    /// Rows are gold labels, columns are predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Classes absent from both gold and predictions; their F1 is 0 by convention.
    pub absent_classes: Vec<usize>,
    pub mse: Option<f64>,
    pub r2: Option<f64>,
    /// Set when R² is undefined because the targets are constant.
    #[serde(default)]
    pub r2_degenerate: bool,
}

impl MetricsReport {
    pub fn predicted_labels(logits: &[Scalar], num_classes: usize) -> Vec<usize> {
        logits
            .chunks(num_classes)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn cross_entropy(logits: &[Scalar], num_classes: usize, gold: &[usize], weights: &[f64]) -> f64 {
    let mut total = 0.0f64;
    for (i, &label) in gold.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max) as f64;
        let sum: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
        let lse = max + sum.ln();
        total += weights[label] * (lse - row[label] as f64);
    }
    total / gold.len() as f64
}

/// Classification metrics from raw logits. Per-class F1 is defined as zero
/// when precision + recall is zero.
pub fn classification_metrics(
    logits: &[Scalar],
    num_classes: usize,
    gold: &[usize],
    class_weights: &[f64],
) -> Result<MetricsReport, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::Input("empty evaluation set".into()));
    }
    if logits.len() != gold.len() * num_classes {
        return Err(MetricsError::Input(format!(
            "{} logits for {} examples x {num_classes} classes",
            logits.len(),
            gold.len()
        )));
    }
    if class_weights.len() != num_classes {
        return Err(MetricsError::Input(format!(
            "{} class weights for {num_classes} classes",
            class_weights.len()
        )));
    }
    for &g in gold {
        if g >= num_classes {
            return Err(MetricsError::Input(format!(
                "gold label {g} >= {num_classes}"
            )));
        }
    }

    let predicted = MetricsReport::predicted_labels(logits, num_classes);
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&g, &p) in gold.iter().zip(predicted.iter()) {
        confusion[g][p] += 1;
    }
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / gold.len() as f64;

    let mut per_class_f1 = Vec::with_capacity(num_classes);
    let mut absent_classes = Vec::new();
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let gold_c: u64 = confusion[c].iter().sum();
        let pred_c: u64 = (0..num_classes).map(|g| confusion[g][c]).sum();
        if gold_c == 0 && pred_c == 0 {
            absent_classes.push(c);
        }
        let precision = if pred_c == 0 { 0.0 } else { tp / pred_c as f64 };
        let recall = if gold_c == 0 { 0.0 } else { tp / gold_c as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class_f1.push(f1);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / num_classes as f64;

    let unit = vec![1.0f64; num_classes];
    Ok(MetricsReport {
        n: gold.len(),
        accuracy,
        macro_f1,
        per_class_f1,
        weighted_ce: cross_entropy(logits, num_classes, gold, class_weights),
        unweighted_ce: cross_entropy(logits, num_classes, gold, &unit),
        confusion,
        absent_classes,
        mse: None,
        r2: None,
        r2_degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    /// Unset when the targets are constant (zero total variance).
    pub r2: Option<f64>,
    pub degenerate_targets: bool,
}

/// MSE and R² (about the target mean). Constant targets make R² undefined;
/// it is reported as absent with a flag.
pub fn regression_metrics(
    predictions: &[f64],
    targets: &[f64],
) -> Result<RegressionMetrics, MetricsError> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(MetricsError::Input(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(RegressionMetrics {
            mse,
            r2: None,
            degenerate_targets: true,
        });
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(RegressionMetrics {
        mse,
        r2: Some(1.0 - ss_res / ss_tot),
        degenerate_targets: false,
    })
}

/// Square-root inverse-frequency class weights: a class covering 25% of the
/// examples gets weight 2.
pub fn compute_class_weights(label_counts: &[usize]) -> Result<Vec<f64>, MetricsError> {
    if label_counts.is_empty() {
        return Err(MetricsError::Input("no classes".into()));
    }
    let total: usize = label_counts.iter().sum();
    let mut weights = Vec::with_capacity(label_counts.len());
    for (c, &count) in label_counts.iter().enumerate() {
        if count == 0 {
            return Err(MetricsError::Input(format!("class {c} has zero count")));
        }
        weights.push((total as f64 / count as f64).sqrt());
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_for(pred: &[usize], num_classes: usize) -> Vec<Scalar> {
        let mut logits = vec![0.0 as Scalar; pred.len() * num_classes];
        for (i, &p) in pred.iter().enumerate() {
            logits[i * num_classes + p] = 4.0;
        }
        logits
    }

    #[test]
    fn perfect_predictions() {
        let gold = [0usize, 1, 2];
        let logits = logits_for(&gold, 3);
        let report = classification_metrics(&logits, 3, &gold, &[1.0; 3]).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert!(report.absent_classes.is_empty());
    }

    #[test]
    fn hand_computed_f1_case() {
        let gold = [0usize, 0, 1, 1, 2, 2];
        let pred = [0usize, 0, 1, 2, 2, 2];
        let report = classification_metrics(&logits_for(&pred, 3), 3, &gold, &[1.0; 3]).unwrap();
        assert!((report.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((report.per_class_f1[0] - 1.0).abs() < 1e-12);
        assert!((report.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.per_class_f1[2] - 0.8).abs() < 1e-12);
        assert!((report.macro_f1 - (1.0 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scored_zero_and_flagged() {
        let gold = [0usize, 1, 0, 1];
        let pred = [0usize, 1, 0, 1];
        let report = classification_metrics(&logits_for(&pred, 3), 3, &gold, &[1.0; 3]).unwrap();
        assert_eq!(report.absent_classes, vec![2]);
        assert_eq!(report.per_class_f1[2], 0.0);
        assert!((report.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_matrix_invariants() {
        let gold = [0usize, 1, 2, 2, 1, 0, 0];
        let pred = [1usize, 1, 2, 0, 1, 0, 2];
        let report = classification_metrics(&logits_for(&pred, 3), 3, &gold, &[1.0; 3]).unwrap();
        let total: u64 = report.confusion.iter().flatten().sum();
        assert_eq!(total as usize, gold.len());
        let trace: u64 = (0..3).map(|c| report.confusion[c][c]).sum();
        assert_eq!(report.accuracy, trace as f64 / gold.len() as f64);
        assert_eq!(report.confusion[0][1], 1);
        assert_eq!(report.confusion[2][0], 1);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(
            classification_metrics(&[0.0; 6], 3, &[0, 1, 2], &[1.0; 3]),
            Err(MetricsError::Input(_))
        ));
    }

    #[test]
    fn class_weights_published_values() {
        // 25% frequency -> weight 2; 100% frequency -> weight 1.
        let w = compute_class_weights(&[25, 75]).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        let w = compute_class_weights(&[10]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        // PhraseBank-like distribution.
        let w = compute_class_weights(&[60, 28, 12]).unwrap();
        assert!((w[0] - 1.2909944487358056).abs() < 1e-9);
        assert!((w[1] - 1.8898223650461363).abs() < 1e-9);
        assert!((w[2] - 2.886751345948129).abs() < 1e-9);
        assert!(matches!(
            compute_class_weights(&[5, 0]),
            Err(MetricsError::Input(_))
        ));
    }

    #[test]
    fn regression_basic_cases() {
        let m = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.r2, Some(1.0));

        // Predicting the target mean gives exactly zero R^2.
        let m = regression_metrics(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.r2, Some(0.0));

        let m = regression_metrics(&[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.mse, 0.5);
        assert_eq!(m.r2, None);
        assert!(m.degenerate_targets);

        assert!(matches!(
            regression_metrics(&[0.0], &[0.0, 1.0]),
            Err(MetricsError::Input(_))
        ));
    }

    // Brute-force references, written independently of the implementations
    // above: direct counting and direct formula evaluation.
    mod oracle {
        pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
            let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
            hits as f64 / gold.len() as f64
        }

        pub fn confusion(gold: &[usize], pred: &[usize], c: usize) -> Vec<Vec<u64>> {
            let mut m = vec![vec![0u64; c]; c];
            for (&g, &p) in gold.iter().zip(pred) {
                m[g][p] += 1;
            }
            m
        }

        pub fn macro_f1(gold: &[usize], pred: &[usize], c: usize) -> (f64, Vec<f64>) {
            let mut per_class = Vec::new();
            for class in 0..c {
                let tp = gold
                    .iter()
                    .zip(pred)
                    .filter(|&(&g, &p)| g == class && p == class)
                    .count() as f64;
                let fp = gold
                    .iter()
                    .zip(pred)
                    .filter(|&(&g, &p)| g != class && p == class)
                    .count() as f64;
                let fnn = gold
                    .iter()
                    .zip(pred)
                    .filter(|&(&g, &p)| g == class && p != class)
                    .count() as f64;
                let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                per_class.push(f1);
            }
            (per_class.iter().sum::<f64>() / c as f64, per_class)
        }

        pub fn weighted_ce(logits: &[f64], c: usize, gold: &[usize], w: &[f64]) -> f64 {
            let mut total = 0.0;
            for (i, &g) in gold.iter().enumerate() {
                let row = &logits[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                let log_p = (row[g] - m) - z.ln();
                total += w[g] * -log_p;
            }
            total / gold.len() as f64
        }

        pub fn mse_r2(pred: &[f64], target: &[f64]) -> (f64, Option<f64>) {
            let n = pred.len() as f64;
            let mse = pred
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                / n;
            let mean = target.iter().sum::<f64>() / n;
            let sst: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
            if sst == 0.0 {
                (mse, None)
            } else {
                let ssr: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
                (mse, Some(1.0 - ssr / sst))
            }
        }
    }

    #[test]
    fn metrics_agree_with_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let c = rng.gen_range(2..=5);
            let n = rng.gen_range(1..=40);
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let logits: Vec<Scalar> = (0..n * c)
                .map(|_| (rng.gen::<f64>() * 6.0 - 3.0) as Scalar)
                .collect();
            let weights: Vec<f64> = (0..c).map(|_| 0.5 + rng.gen::<f64>() * 2.0).collect();
            let report = classification_metrics(&logits, c, &gold, &weights).unwrap();
            let pred = MetricsReport::predicted_labels(&logits, c);

            assert_eq!(report.accuracy, oracle::accuracy(&gold, &pred));
            assert_eq!(report.confusion, oracle::confusion(&gold, &pred, c));
            let (macro_f1, per_class) = oracle::macro_f1(&gold, &pred, c);
            assert!((report.macro_f1 - macro_f1).abs() < 1e-9);
            for (a, b) in report.per_class_f1.iter().zip(per_class.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
            let logits64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            assert!(
                (report.weighted_ce - oracle::weighted_ce(&logits64, c, &gold, &weights)).abs()
                    < 1e-9
            );

            let preds: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let reg = regression_metrics(&preds, &targets).unwrap();
            let (mse, r2) = oracle::mse_r2(&preds, &targets);
            assert!((reg.mse - mse).abs() < 1e-9);
            match (reg.r2, r2) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("r2 mismatch: {other:?}"),
            }
        }
    }
}
