//! Confusion-count accumulation and binary segmentation metrics.
//!
//! The positive class is the landslide/foreground label. All ratios resolve
//! 0/0 to 0 so cross-implementation comparisons agree on degenerate cases.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Adds per-pixel tallies for a prediction/truth pair. Both tensors must
    /// have identical shapes and strictly binary values.
    pub fn accumulate<F: Scalar>(
        &mut self,
        pred: &TensorBase<F>,
        truth: &TensorBase<F>,
    ) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                lhs: pred.shape().to_vec(),
                rhs: truth.shape().to_vec(),
            });
        }
        let ps = pred.values();
        let ts = truth.values();
        for (&p, &t) in ps.iter().zip(ts.iter()) {
            let p = binary(p, "prediction")?;
            let t = binary(t, "truth")?;
            match (p, t) {
                (true, true) => self.true_pos += 1,
                (true, false) => self.false_pos += 1,
                (false, true) => self.false_neg += 1,
                (false, false) => self.true_neg += 1,
            }
        }
        Ok(())
    }

    /// Field-wise merge; accumulation is associative across batches.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

fn binary<F: Scalar>(v: F, what: &'static str) -> Result<bool> {
    if v == F::zero() {
        Ok(false)
    } else if v == F::one() {
        Ok(true)
    } else {
        Err(TensorError::Config {
            op: "accumulate",
            msg: format!("{what} mask contains non-binary value {v}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub landslide_iou: f64,
    pub background_iou: f64,
    pub miou: f64,
}

/// Derives the six metrics from confusion counts:
/// P = TP/(TP+FP), REC = TP/(TP+FN), F1 = 2·P·REC/(P+REC),
/// OA = (TP+TN)/total, IoU_fg = TP/(TP+FN+FP), IoU_bg = TN/(TN+FN+FP),
/// MIoU = (IoU_fg + IoU_bg)/2.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(TensorError::Config {
            op: "compute_metrics",
            msg: "no pixels accumulated".into(),
        });
    }
    let tp = counts.true_pos as f64;
    let fp = counts.false_pos as f64;
    let tn = counts.true_neg as f64;
    let fn_ = counts.false_neg as f64;
    let precision = safe_div(tp, tp + fp);
    let recall = safe_div(tp, tp + fn_);
    let f1 = safe_div(2.0 * precision * recall, precision + recall);
    let oa = safe_div(tp + tn, tp + tn + fn_ + fp);
    let landslide_iou = safe_div(tp, tp + fn_ + fp);
    let background_iou = safe_div(tn, tn + fn_ + fp);
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        oa,
        landslide_iou,
        background_iou,
        miou: (landslide_iou + background_iou) / 2.0,
    })
}

/// 0/0 resolves to 0 by convention.
fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "P,REC,F1,OA,MIoU,Landslide-IoU";

    /// Fixed column order, fractions with '.' decimal separator.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.precision, self.recall, self.f1, self.oa, self.miou, self.landslide_iou
        )
    }

    /// Metric columns as percentages, for the aligned text tables.
    pub fn table_cells(&self) -> Vec<String> {
        [
            self.precision,
            self.recall,
            self.f1,
            self.oa,
            self.miou,
            self.landslide_iou,
        ]
        .iter()
        .map(|v| format!("{:.2}", v * 100.0))
        .collect()
    }
}

/// Renders rows as an aligned table in the layout of the evaluation tables:
/// label column then P/REC/F1/OA/MIoU/Landslide-IoU percentages.
pub fn format_metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let headers = ["Model", "P(%)", "REC(%)", "F1(%)", "OA(%)", "MIoU(%)", "Landslide-IoU(%)"];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for (label, report) in rows {
        let mut row = vec![label.clone()];
        row.extend(report.table_cells());
        cells.push(row);
    }
    align_table(&cells)
}

pub fn align_table(cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in cells {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in cells {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn mask(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(values.to_vec(), shape).unwrap()
    }

    // Independent per-pixel loop over raw bit vectors.
    fn oracle_counts(pred: &[bool], truth: &[bool]) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for i in 0..pred.len() {
            if pred[i] && truth[i] {
                c.true_pos += 1;
            } else if pred[i] && !truth[i] {
                c.false_pos += 1;
            } else if !pred[i] && truth[i] {
                c.false_neg += 1;
            } else {
                c.true_neg += 1;
            }
        }
        c
    }

    fn oracle_metrics(c: &ConfusionCounts) -> [f64; 7] {
        let (tp, fp, tn, fn_) = (
            c.true_pos as f64,
            c.false_pos as f64,
            c.true_neg as f64,
            c.false_neg as f64,
        );
        let div = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        let f1 = div(2.0 * p * r, p + r);
        let oa = div(tp + tn, tp + tn + fp + fn_);
        let li = div(tp, tp + fn_ + fp);
        let bi = div(tn, tn + fn_ + fp);
        [p, r, f1, oa, li, bi, (li + bi) / 2.0]
    }

    #[test]
    fn perfect_prediction_counts() {
        let truth = mask(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[2, 3]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&truth, &truth).unwrap();
        assert_eq!(c.true_pos, 3);
        assert_eq!(c.true_neg, 3);
        assert_eq!(c.false_pos, 0);
        assert_eq!(c.false_neg, 0);
        let m = compute_metrics(&c).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn total_inversion_has_no_true_counts() {
        let truth = mask(&[1.0, 0.0, 1.0, 0.0], &[4]);
        let pred = mask(&[0.0, 1.0, 0.0, 1.0], &[4]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &truth).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.false_pos, 2);
        assert_eq!(c.false_neg, 2);
    }

    #[test]
    fn worked_example_from_counts() {
        let c = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            false_neg: 1,
            true_neg: 5,
        };
        let m = compute_metrics(&c).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 0.75).abs() < 1e-12);
        assert!((m.oa - 0.8).abs() < 1e-12);
        assert!((m.landslide_iou - 0.6).abs() < 1e-12);
        assert!((m.background_iou - 5.0 / 7.0).abs() < 1e-12);
        assert!((m.miou - 0.6571428571428571).abs() < 1e-12);
    }

    #[test]
    fn zero_true_pos_uses_zero_convention() {
        let c = ConfusionCounts {
            true_pos: 0,
            false_pos: 2,
            false_neg: 3,
            true_neg: 5,
        };
        let m = compute_metrics(&c).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.landslide_iou, 0.0);
    }

    #[test]
    fn empty_counts_is_an_error() {
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = mask(&[1.0, 0.0], &[2]);
        let b = mask(&[1.0, 0.0, 1.0], &[3]);
        let mut c = ConfusionCounts::default();
        assert!(matches!(
            c.accumulate(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let a = mask(&[0.5], &[1]);
        let b = mask(&[1.0], &[1]);
        let mut c = ConfusionCounts::default();
        assert!(c.accumulate(&a, &b).is_err());
    }

    #[test]
    fn random_pairs_match_bruteforce_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let h = rng.random_range(1..=32);
            let w = rng.random_range(1..=32);
            let pred_bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
            let truth_bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
            let to_mask = |bits: &[bool]| {
                mask(
                    &bits.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>(),
                    &[h, w],
                )
            };
            let mut c = ConfusionCounts::default();
            c.accumulate(&to_mask(&pred_bits), &to_mask(&truth_bits)).unwrap();
            let expected = oracle_counts(&pred_bits, &truth_bits);
            assert_eq!(c, expected);
            let m = compute_metrics(&c).unwrap();
            let e = oracle_metrics(&expected);
            let got = [
                m.precision,
                m.recall,
                m.f1,
                m.oa,
                m.landslide_iou,
                m.background_iou,
                m.miou,
            ];
            for (a, b) in got.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_row_has_fixed_column_order() {
        let c = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            false_neg: 1,
            true_neg: 5,
        };
        let m = compute_metrics(&c).unwrap();
        assert_eq!(MetricsReport::CSV_HEADER, "P,REC,F1,OA,MIoU,Landslide-IoU");
        assert_eq!(m.csv_row(), "0.750000,0.750000,0.750000,0.800000,0.657143,0.600000");
    }

    proptest! {
        // Swapping class labels swaps the two IoUs and fixes OA and MIoU.
        #[test]
        fn label_swap_symmetry(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = rng.random_range(1..64usize);
            let pred: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
            let truth: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
            let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();

            let mut c = ConfusionCounts::default();
            c.accumulate(&mask(&pred, &[n]), &mask(&truth, &[n])).unwrap();
            let m = compute_metrics(&c).unwrap();

            let mut cf = ConfusionCounts::default();
            cf.accumulate(&mask(&flip(&pred), &[n]), &mask(&flip(&truth), &[n])).unwrap();
            let mf = compute_metrics(&cf).unwrap();

            prop_assert!((m.landslide_iou - mf.background_iou).abs() < 1e-15);
            prop_assert!((m.background_iou - mf.landslide_iou).abs() < 1e-15);
            prop_assert!((m.oa - mf.oa).abs() < 1e-15);
            prop_assert!((m.miou - mf.miou).abs() < 1e-15);
        }

        // Accumulating A then B equals accumulating the concatenation.
        #[test]
        fn batch_associativity(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n1 = rng.random_range(1..32usize);
            let n2 = rng.random_range(1..32usize);
            let bits = |rng: &mut ChaCha20Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect()
            };
            let (p1, t1) = (bits(&mut rng, n1), bits(&mut rng, n1));
            let (p2, t2) = (bits(&mut rng, n2), bits(&mut rng, n2));

            let mut separate = ConfusionCounts::default();
            separate.accumulate(&mask(&p1, &[n1]), &mask(&t1, &[n1])).unwrap();
            separate.accumulate(&mask(&p2, &[n2]), &mask(&t2, &[n2])).unwrap();

            let pc: Vec<f64> = p1.iter().chain(&p2).copied().collect();
            let tc: Vec<f64> = t1.iter().chain(&t2).copied().collect();
            let mut joint = ConfusionCounts::default();
            joint.accumulate(&mask(&pc, &[n1 + n2]), &mask(&tc, &[n1 + n2])).unwrap();

            prop_assert_eq!(separate, joint);
        }

        // All metrics stay inside [0, 1].
        #[test]
        fn metrics_are_bounded(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let m = compute_metrics(&ConfusionCounts {
                true_pos: tp,
                false_pos: fp,
                true_neg: tn,
                false_neg: fn_,
            }).unwrap();
            for v in [m.precision, m.recall, m.f1, m.oa, m.landslide_iou, m.background_iou, m.miou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
