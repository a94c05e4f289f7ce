//! Evaluation metrics: confusion matrix, overall and average accuracy,
//! per-class accuracy and weak-class extraction.
//!
//! Average accuracy is the unweighted mean over classes that actually appear
//! in the test set; absent classes are recorded in `absent_classes` and
//! excluded rather than counted as zero.

use serde::{Deserialize, Serialize};

use crate::error::{HsdrError, Result};
use crate::hsio::LabelRaster;

/// Identification of one evaluation run, echoed into every report so runs
/// are attributable and reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub split_seed: u64,
    pub train_fraction: f64,
    pub classifier_seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// `confusion[true-1][predicted-1]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    /// Indexed by class-1; `None` when the class has no test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Classes with zero test samples, excluded from the average accuracy.
    pub absent_classes: Vec<u16>,
    /// Classes under the weak-class threshold on the evaluated raster.
    pub weak_class_ids: Vec<u16>,
    pub n_test_samples: usize,
    pub run: RunMetadata,
}

/// Confusion matrix and accuracy summary of one prediction run. Labels are
/// 1-based; both vectors must have equal, nonzero length.
pub fn evaluate(true_labels: &[u16], predicted: &[u16], n_classes: usize) -> Result<EvalReport> {
    if true_labels.len() != predicted.len() {
        return Err(HsdrError::LengthMismatch {
            left: true_labels.len(),
            right: predicted.len(),
        });
    }
    if true_labels.is_empty() {
        return Err(HsdrError::EmptyInput("evaluation labels"));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        for label in [t, p] {
            if label == 0 || label as usize > n_classes {
                return Err(HsdrError::LabelOutOfRange { label, n_classes });
            }
        }
        confusion[t as usize - 1][p as usize - 1] += 1;
    }

    let total: u64 = confusion.iter().flatten().sum();
    let diagonal: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let overall_accuracy = diagonal as f64 / total as f64;

    let mut per_class_accuracy = Vec::with_capacity(n_classes);
    let mut absent_classes = Vec::new();
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for (c, row) in confusion.iter().enumerate() {
        let row_sum: u64 = row.iter().sum();
        if row_sum == 0 {
            per_class_accuracy.push(None);
            absent_classes.push((c + 1) as u16);
        } else {
            let acc = row[c] as f64 / row_sum as f64;
            per_class_accuracy.push(Some(acc));
            aa_sum += acc;
            aa_count += 1;
        }
    }

    Ok(EvalReport {
        method: String::new(),
        confusion,
        overall_accuracy,
        average_accuracy: aa_sum / aa_count as f64,
        per_class_accuracy,
        absent_classes,
        weak_class_ids: Vec::new(),
        n_test_samples: total as usize,
        run: RunMetadata::default(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text)
            .map_err(|e| HsdrError::FormatError(format!("report json: {e}")))
    }

    /// Per-class table CSV: `class_id,name,n_test,accuracy`; the accuracy
    /// cell is empty for classes absent from the test set.
    pub fn per_class_csv(&self, raster: Option<&LabelRaster>) -> String {
        let mut out = String::from("class_id,name,n_test,accuracy\n");
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            let class = (c + 1) as u16;
            let name = raster
                .map(|r| r.class_name(class))
                .unwrap_or_else(|| format!("class_{class}"));
            let n_test: u64 = self.confusion[c].iter().sum();
            let acc = acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{class},{name},{n_test},{acc}\n"));
        }
        out
    }
}

/// Classes whose share of all labeled pixels is below `threshold_fraction`,
/// ascending.
pub fn weak_classes(raster: &LabelRaster, threshold_fraction: f64) -> Result<Vec<u16>> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(HsdrError::InvalidConfig(format!(
            "weak-class threshold must be in (0,1), got {threshold_fraction}"
        )));
    }
    let counts = raster.class_counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(HsdrError::EmptyInput("raster has no labeled pixels"));
    }
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, &count)| (count as f64) < threshold_fraction * total as f64)
        .map(|(c, _)| (c + 1) as u16)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn perfect_prediction() {
        let labels = vec![1u16, 2, 3, 2, 1];
        let report = evaluate(&labels, &labels, 3).unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.average_accuracy, 1.0);
        for (c, row) in report.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                if c != p {
                    assert_eq!(count, 0);
                }
            }
        }
    }

    #[test]
    fn hand_counted_two_class_case() {
        let truth = vec![1u16, 1, 1, 2];
        let pred = vec![1u16, 1, 2, 2];
        let report = evaluate(&truth, &pred, 2).unwrap();
        assert!((report.overall_accuracy - 0.75).abs() < 1e-15);
        assert!((report.per_class_accuracy[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(report.per_class_accuracy[1], Some(1.0));
        assert!((report.average_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(report.n_test_samples, 4);
    }

    #[test]
    fn absent_class_excluded_from_average() {
        let truth = vec![1u16, 1, 3, 3];
        let pred = vec![1u16, 1, 3, 1];
        let report = evaluate(&truth, &pred, 3).unwrap();
        assert_eq!(report.absent_classes, vec![2]);
        assert_eq!(report.per_class_accuracy[1], None);
        assert!((report.average_accuracy - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mismatched_and_invalid_labels_rejected() {
        assert!(matches!(
            evaluate(&[1, 2], &[1], 2),
            Err(HsdrError::LengthMismatch { .. })
        ));
        assert!(matches!(
            evaluate(&[1, 0], &[1, 1], 2),
            Err(HsdrError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            evaluate(&[1, 3], &[1, 1], 2),
            Err(HsdrError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn oa_invariant_under_permutation() {
        let mut rng = SeededRng::new(41);
        let truth: Vec<u16> = (0..200).map(|_| (rng.next_u64() % 4 + 1) as u16).collect();
        let pred: Vec<u16> = (0..200).map(|_| (rng.next_u64() % 4 + 1) as u16).collect();
        let base = evaluate(&truth, &pred, 4).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        rng.shuffle(&mut order);
        let truth_p: Vec<u16> = order.iter().map(|&i| truth[i]).collect();
        let pred_p: Vec<u16> = order.iter().map(|&i| pred[i]).collect();
        let permuted = evaluate(&truth_p, &pred_p, 4).unwrap();
        assert_eq!(base.overall_accuracy, permuted.overall_accuracy);
        assert_eq!(base.confusion, permuted.confusion);
    }

    #[test]
    fn aa_equals_oa_on_balanced_test_set() {
        // 10 samples per class, deliberately unequal per-class accuracy
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for c in 1..=3u16 {
            for i in 0..10 {
                truth.push(c);
                // class c gets c wrong predictions
                pred.push(if i < c { (c % 3) + 1 } else { c });
            }
        }
        let report = evaluate(&truth, &pred, 3).unwrap();
        assert!((report.average_accuracy - report.overall_accuracy).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutes_confusion_and_preserves_scores() {
        let mut rng = SeededRng::new(43);
        let truth: Vec<u16> = (0..300).map(|_| (rng.next_u64() % 3 + 1) as u16).collect();
        let pred: Vec<u16> = truth
            .iter()
            .map(|&t| {
                if rng.uniform() < 0.8 {
                    t
                } else {
                    (rng.next_u64() % 3 + 1) as u16
                }
            })
            .collect();
        let base = evaluate(&truth, &pred, 3).unwrap();

        // permutation pi: 1->2, 2->3, 3->1
        let pi = |l: u16| (l % 3) + 1;
        let truth_r: Vec<u16> = truth.iter().map(|&t| pi(t)).collect();
        let pred_r: Vec<u16> = pred.iter().map(|&p| pi(p)).collect();
        let relabeled = evaluate(&truth_r, &pred_r, 3).unwrap();
        assert_eq!(base.overall_accuracy, relabeled.overall_accuracy);
        assert_eq!(base.average_accuracy, relabeled.average_accuracy);
        for t in 0..3usize {
            for p in 0..3usize {
                let (tr, pr) = (pi((t + 1) as u16) as usize - 1, pi((p + 1) as u16) as usize - 1);
                assert_eq!(base.confusion[t][p], relabeled.confusion[tr][pr]);
            }
        }
    }

    fn raster_with_counts(counts: &[usize]) -> LabelRaster {
        let total: usize = counts.iter().sum();
        let width = 128;
        let height = total / width + 1;
        let mut labels = vec![0u16; width * height];
        let mut i = 0;
        for (c, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                labels[i] = (c + 1) as u16;
                i += 1;
            }
        }
        LabelRaster::from_labels(width, height, labels).unwrap()
    }

    #[test]
    fn uniform_classes_have_no_weak_class() {
        let raster = raster_with_counts(&[100, 100, 100, 100]);
        assert!(weak_classes(&raster, 0.01).unwrap().is_empty());
    }

    #[test]
    fn single_pixel_class_flagged() {
        let raster = raster_with_counts(&[999, 1]);
        assert_eq!(weak_classes(&raster, 0.01).unwrap(), vec![2]);
    }

    #[test]
    fn weak_classes_on_published_indian_pines_counts() {
        // ground-truth pixel counts of the 16-class Indian Pines raster
        let counts = [
            46, 1428, 830, 237, 483, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93,
        ];
        let raster = raster_with_counts(&counts);
        assert_eq!(raster.labeled_pixels(), 10249);
        assert_eq!(weak_classes(&raster, 0.01).unwrap(), vec![1, 7, 9, 16]);
    }

    #[test]
    fn report_json_round_trip() {
        let truth = vec![1u16, 2, 2, 1];
        let pred = vec![1u16, 2, 1, 1];
        let mut report = evaluate(&truth, &pred, 2).unwrap();
        report.method = "pca:2".into();
        report.weak_class_ids = vec![2];
        let back = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn per_class_csv_shape() {
        let truth = vec![1u16, 2, 2];
        let pred = vec![1u16, 2, 2];
        let report = evaluate(&truth, &pred, 3).unwrap();
        let csv = report.per_class_csv(None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class_id,name,n_test,accuracy");
        assert_eq!(lines[1], "1,class_1,1,1");
        assert_eq!(lines[3], "3,class_3,0,");
    }
}
