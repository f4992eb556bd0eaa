//! Classification metrics.
//!
//! Confusion matrix plus per-class precision/recall/F1, macro-F1, UA
//! (unweighted accuracy = mean per-class recall) and WA (weighted accuracy =
//! overall accuracy). Zero-denominator cases yield 0.0, never NaN; that is
//! the convention that lets a constant predictor report 0.00 precision and
//! F1 on the positive class. Some toolkits emit NaN here, so callers
//! comparing against external results should keep the difference in mind.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Class index of a "validate" decision in the binary timing task.
pub const VALIDATE: usize = 1;
/// Class index of a "non-validate" decision in the binary timing task.
pub const NON_VALIDATE: usize = 0;

/// `n x n` counts; rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    n_classes: usize,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.n_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.count(c, c)).sum()
    }
}

/// Count label pairs into a confusion matrix.
pub fn confusion(true_labels: &[usize], pred_labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.is_empty() {
        return Err(Error::Empty("confusion on empty label lists"));
    }
    if true_labels.len() != pred_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::InvalidValue(format!(
                "label ({t}, {p}) out of range for {n_classes} classes"
            )));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { counts, n_classes })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true samples of this class.
    pub support: u64,
}

/// Per-class and aggregate metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean of per-class F1.
    pub macro_f1: f64,
    /// Unweighted accuracy: mean of per-class recalls.
    pub ua: f64,
    /// Weighted accuracy: overall accuracy.
    pub wa: f64,
    pub n_samples: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricsReport {
    /// Derive the report from a confusion matrix.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let n = cm.n_classes();
        let mut per_class = Vec::with_capacity(n);
        for c in 0..n {
            let tp = cm.count(c, c);
            let pred_c: u64 = (0..n).map(|t| cm.count(t, c)).sum();
            let true_c: u64 = (0..n).map(|p| cm.count(c, p)).sum();
            let precision = ratio(tp, pred_c);
            let recall = ratio(tp, true_c);
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1: f1_of(precision, recall),
                support: true_c,
            });
        }
        let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / n as f64;
        let ua = per_class.iter().map(|m| m.recall).sum::<f64>() / n as f64;
        let wa = ratio(cm.trace(), cm.total());
        MetricsReport {
            per_class,
            macro_f1,
            ua,
            wa,
            n_samples: cm.total(),
        }
    }

    /// Validation-class precision (binary timing task).
    pub fn v_precision(&self) -> f64 {
        self.per_class[VALIDATE].precision
    }

    /// Validation-class F1 (binary timing task).
    pub fn v_f1(&self) -> f64 {
        self.per_class[VALIDATE].f1
    }

    /// Non-validation-class F1 (binary timing task).
    pub fn nv_f1(&self) -> f64 {
        self.per_class[NON_VALIDATE].f1
    }
}

/// Full report straight from label lists.
pub fn classification_report(
    true_labels: &[usize],
    pred_labels: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(&confusion(
        true_labels,
        pred_labels,
        n_classes,
    )?))
}

/// One row of the 4-column timing table, values in percent.
pub fn timing_row(report: &MetricsReport) -> [f64; 4] {
    [
        100.0 * report.v_precision(),
        100.0 * report.v_f1(),
        100.0 * report.nv_f1(),
        100.0 * report.macro_f1,
    ]
}

/// Render labeled reports as the aligned 4-column text table
/// (V-Prec., V-F1, NV-F1, M-F1, in percent).
pub fn format_timing_table(rows: &[(String, MetricsReport)]) -> String {
    use core::fmt::Write;
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(core::iter::once(8))
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>8} {:>8} {:>8} {:>8}",
        "", "V-Prec.", "V-F1", "NV-F1", "M-F1"
    );
    for (name, report) in rows {
        let r = timing_row(report);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            name, r[0], r[1], r[2], r[3]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn single_pair_lands_in_the_right_cell() {
        let cm = confusion(&[0], &[1], 2).unwrap();
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn order_does_not_matter() {
        let a = confusion(&[0, 1, 1, 0, 1], &[1, 1, 0, 0, 1], 2).unwrap();
        let b = confusion(&[1, 0, 1, 1, 0], &[1, 1, 0, 1, 0], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_computed_binary_case() {
        // true [1,1,0,0], pred [1,0,0,0]:
        //   V: TP=1 FP=0 FN=1 -> prec 1.0, rec 0.5, F1 2/3
        //   NV: TP=2 FP=1 FN=0 -> prec 2/3, rec 1.0, F1 0.8
        let r = classification_report(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert!((r.v_precision() - 1.0).abs() < 1e-12);
        assert!((r.v_f1() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.nv_f1() - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((r.wa - 0.75).abs() < 1e-12);
        assert!((r.ua - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [0usize, 1, 2, 1, 0, 2, 2];
        let r = classification_report(&labels, &labels, 3).unwrap();
        for c in &r.per_class {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
        }
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.ua, 1.0);
        assert_eq!(r.wa, 1.0);
    }

    #[test]
    fn constant_negative_predictor_exhibits_zero_convention() {
        // All predictions non-validate on mixed labels: V-Prec and V-F1
        // are 0.0 by the zero-division convention, never NaN.
        let t = [1, 0, 1, 0, 0];
        let p = [0, 0, 0, 0, 0];
        let r = classification_report(&t, &p, 2).unwrap();
        assert_eq!(r.v_precision(), 0.0);
        assert_eq!(r.v_f1(), 0.0);
        assert!(r.nv_f1() > 0.0);
        assert!(r.macro_f1.is_finite());
    }

    #[test]
    fn ua_of_constant_predictor_on_balanced_set_is_one_over_c() {
        let mut t = Vec::new();
        for c in 0..4usize {
            t.extend(core::iter::repeat(c).take(10));
        }
        let p = vec![2usize; t.len()];
        let r = classification_report(&t, &p, 4).unwrap();
        assert!((r.ua - 0.25).abs() < 1e-12);
    }

    #[test]
    fn class_relabeling_permutes_rows_and_keeps_macro_f1() {
        let mut r = rng::stream(3, &[8]);
        let t: Vec<usize> = (0..200).map(|_| rng::index(&mut r, 3)).collect();
        let p: Vec<usize> = (0..200).map(|_| rng::index(&mut r, 3)).collect();
        let base = classification_report(&t, &p, 3).unwrap();
        let perm = [2usize, 0, 1];
        let t2: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let permuted = classification_report(&t2, &p2, 3).unwrap();
        assert!((base.macro_f1 - permuted.macro_f1).abs() < 1e-12);
        for c in 0..3 {
            assert_eq!(base.per_class[c], permuted.per_class[perm[c]]);
        }
    }

    #[test]
    fn empty_input_errors() {
        assert!(classification_report(&[], &[], 2).is_err());
    }

    #[test]
    fn table_has_header_and_rows() {
        let r = classification_report(&[1, 0], &[1, 0], 2).unwrap();
        let txt = format_timing_table(&[("concat".into(), r)]);
        assert!(txt.contains("V-Prec."));
        assert!(txt.contains("concat"));
        assert!(txt.contains("100.00"));
    }

    proptest! {
        #[test]
        fn wa_is_trace_over_total_and_everything_in_unit_interval(
            labels in proptest::collection::vec((0usize..4, 0usize..4), 1..80)
        ) {
            let t: Vec<usize> = labels.iter().map(|&(a, _)| a).collect();
            let p: Vec<usize> = labels.iter().map(|&(_, b)| b).collect();
            let cm = confusion(&t, &p, 4).unwrap();
            let r = MetricsReport::from_confusion(&cm);
            prop_assert_eq!(cm.total() as usize, t.len());
            prop_assert!((r.wa - cm.trace() as f64 / cm.total() as f64).abs() < 1e-12);
            for c in &r.per_class {
                prop_assert!((0.0..=1.0).contains(&c.precision));
                prop_assert!((0.0..=1.0).contains(&c.recall));
                prop_assert!((0.0..=1.0).contains(&c.f1));
                if c.precision == 0.0 && c.recall == 0.0 {
                    prop_assert_eq!(c.f1, 0.0);
                }
            }
            prop_assert!((0.0..=1.0).contains(&r.macro_f1));
            prop_assert!((0.0..=1.0).contains(&r.ua));
        }
    }
}
