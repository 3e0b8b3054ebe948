//! Detection-quality metrics: IoU, greedy matching, precision/recall/F1,
//! all-point average precision, and per-class report formatting.

use std::fmt::Write as _;

use crate::error::{FerError, Result};

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union; degenerate boxes and empty unions give 0.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub bbox: BoxXyxy,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GroundTruth {
    pub bbox: BoxXyxy,
    pub class: usize,
}

/// All detections and ground truths of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub truths: Vec<GroundTruth>,
}

/// Greedy matching of one image's detections of one class against its
/// ground truths: detections in descending score order each claim the
/// unmatched ground truth with the highest IoU at or above `iou_thresh`;
/// exact IoU ties go to the lower ground-truth index. Returns
/// `(score, is_tp)` per detection plus the ground-truth count.
pub fn match_class(
    img: &ImageEval,
    class: usize,
    iou_thresh: f64,
) -> (Vec<(f64, bool)>, usize) {
    let gts: Vec<&GroundTruth> = img.truths.iter().filter(|t| t.class == class).collect();
    let mut order: Vec<&Detection> = img.detections.iter().filter(|d| d.class == class).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv, // ties keep the earlier (lower) index
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out.push((det.score, true));
        } else {
            out.push((det.score, false));
        }
    }
    (out, gts.len())
}

/// Precision, recall, and F1 from match counts; empty denominators give 0.
pub fn precision_recall_f1(tp: usize, num_det: usize, num_gt: usize) -> (f64, f64, f64) {
    let p = if num_det == 0 { 0.0 } else { tp as f64 / num_det as f64 };
    let r = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// All-point average precision over `(score, is_tp)` pairs pooled across
/// images. Precision is interpolated to its running maximum from the right
/// before integrating over recall. Zero ground truths give 0.
pub fn average_precision(mut scored: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut prec = Vec::with_capacity(scored.len());
    let mut rec = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    // right-max interpolation
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..prec.len() {
        ap += (rec[i] - prev_r) * prec[i];
        prev_r = rec[i];
    }
    ap
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Everything reported for one class.
#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
}

/// Per-class metrics plus their mean row.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub classes: Vec<ClassMetrics>,
    pub map: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

/// Evaluates pooled detections. AP pools scores across images per class;
/// precision/recall/F1 count matches at the same IoU threshold.
pub fn evaluate(images: &[ImageEval], class_names: &[String], iou_thresh: f64) -> Result<EvalSummary> {
    if class_names.is_empty() {
        return Err(FerError::invalid("evaluate needs at least one class"));
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for (ci, name) in class_names.iter().enumerate() {
        let mut scored = Vec::new();
        let mut num_gt = 0usize;
        for img in images {
            let (s, n) = match_class(img, ci, iou_thresh);
            scored.extend(s);
            num_gt += n;
        }
        let tp = scored.iter().filter(|(_, t)| *t).count();
        let (precision, recall, f1) = precision_recall_f1(tp, scored.len(), num_gt);
        let ap = average_precision(scored, num_gt);
        classes.push(ClassMetrics {
            name: name.clone(),
            precision,
            recall,
            f1,
            ap,
        });
    }
    let n = classes.len() as f64;
    Ok(EvalSummary {
        map: classes.iter().map(|c| c.ap).sum::<f64>() / n,
        mean_precision: classes.iter().map(|c| c.precision).sum::<f64>() / n,
        mean_recall: classes.iter().map(|c| c.recall).sum::<f64>() / n,
        mean_f1: classes.iter().map(|c| c.f1).sum::<f64>() / n,
        classes,
    })
}

impl EvalSummary {
    /// Rows of `(name, f1, recall%, ap%)` with two-decimal rounding, plus an
    /// average row computed from the rounded per-class values.
    pub fn rounded_rows(&self) -> Vec<(String, f64, f64, f64)> {
        let mut rows: Vec<(String, f64, f64, f64)> = self
            .classes
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    round2(c.f1),
                    round2(c.recall * 100.0),
                    round2(c.ap * 100.0),
                )
            })
            .collect();
        let n = rows.len() as f64;
        let avg = (
            "Average".to_string(),
            round2(rows.iter().map(|r| r.1).sum::<f64>() / n),
            round2(rows.iter().map(|r| r.2).sum::<f64>() / n),
            round2(rows.iter().map(|r| r.3).sum::<f64>() / n),
        );
        rows.push(avg);
        rows
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>6} {:>10} {:>8}", "Class", "F1", "Recall(%)", "AP(%)");
        for (name, f1, r, ap) in self.rounded_rows() {
            let _ = writeln!(s, "{name:<12} {f1:>6.2} {r:>10.2} {ap:>8.2}");
        }
        let _ = writeln!(s, "mAP: {:.2}%", round2(self.map * 100.0));
        s
    }

    /// CSV with a header row; the final data row is the average.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,f1,recall_pct,ap_pct\n");
        for (name, f1, r, ap) in self.rounded_rows() {
            let _ = writeln!(s, "{name},{f1:.2},{r:.2},{ap:.2}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXyxy {
        BoxXyxy::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_basics() {
        let u = b(0.0, 0.0, 2.0, 2.0);
        assert!((iou(&u, &u) - 1.0).abs() < 1e-12);
        // half overlap: inter 2, union 6
        assert!((iou(&u, &b(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        // disjoint
        assert_eq!(iou(&u, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // degenerate boxes never divide by zero
        let pt = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&pt, &pt), 0.0);
    }

    #[test]
    fn ap_tp_fp_tp_with_two_truths() {
        // scores 0.9 TP, 0.8 FP, 0.7 TP over 2 ground truths -> AP = 5/6
        let scored = vec![(0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision(scored, 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
        assert!((round2(ap * 100.0) - 83.33).abs() < 1e-9);
    }

    #[test]
    fn ap_empty_cases() {
        assert_eq!(average_precision(vec![], 3), 0.0);
        assert_eq!(average_precision(vec![(0.5, false)], 0), 0.0);
    }

    #[test]
    fn prf_zero_denominators() {
        assert_eq!(precision_recall_f1(0, 0, 0), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(0, 4, 0), (0.0, 0.0, 0.0));
        let (p, r, f1) = precision_recall_f1(3, 4, 6);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn matching_prefers_higher_iou_then_lower_index() {
        let img = ImageEval {
            detections: vec![Detection {
                bbox: b(0.0, 0.0, 10.0, 10.0),
                class: 0,
                score: 0.9,
            }],
            truths: vec![
                GroundTruth {
                    bbox: b(0.0, 0.0, 10.0, 12.0),
                    class: 0,
                },
                GroundTruth {
                    bbox: b(0.0, 0.0, 10.0, 10.0),
                    class: 0,
                },
            ],
        };
        let (scored, n) = match_class(&img, 0, 0.5);
        assert_eq!(n, 2);
        assert_eq!(scored, vec![(0.9, true)]);

        // exact tie: two identical truths, detection takes index 0, the
        // second detection then matches index 1
        let img2 = ImageEval {
            detections: vec![
                Detection {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                    score: 0.8,
                },
                Detection {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                    score: 0.6,
                },
            ],
            truths: vec![
                GroundTruth {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                },
                GroundTruth {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                },
            ],
        };
        let (scored, _) = match_class(&img2, 0, 0.5);
        assert_eq!(scored, vec![(0.8, true), (0.6, true)]);
    }

    #[test]
    fn each_truth_matches_at_most_once() {
        let img = ImageEval {
            detections: vec![
                Detection {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                    score: 0.9,
                },
                Detection {
                    bbox: b(0.0, 0.0, 4.0, 4.0),
                    class: 0,
                    score: 0.7,
                },
            ],
            truths: vec![GroundTruth {
                bbox: b(0.0, 0.0, 4.0, 4.0),
                class: 0,
            }],
        };
        let (scored, _) = match_class(&img, 0, 0.5);
        assert_eq!(scored, vec![(0.9, true), (0.7, false)]);
    }

    #[test]
    fn classes_never_cross_match() {
        let img = ImageEval {
            detections: vec![Detection {
                bbox: b(0.0, 0.0, 4.0, 4.0),
                class: 1,
                score: 0.9,
            }],
            truths: vec![GroundTruth {
                bbox: b(0.0, 0.0, 4.0, 4.0),
                class: 0,
            }],
        };
        let (scored, n) = match_class(&img, 1, 0.5);
        assert_eq!(n, 0);
        assert_eq!(scored, vec![(0.9, false)]);
    }

    #[test]
    fn round2_half_away_from_zero() {
        assert_eq!(round2(0.005), 0.01);
        assert_eq!(round2(-0.005), -0.01);
        assert_eq!(round2(72.954), 72.95);
        assert_eq!(round2(78.294), 78.29);
    }

    #[test]
    fn average_row_from_rounded_class_rows() {
        // seven-class table of (f1, recall%, ap%) values; the average row
        // of the rounded columns must itself round to the expected figures
        let rows = [
            (0.73, 71.43, 75.34),
            (0.61, 53.33, 70.00),
            (0.61, 48.57, 80.95),
            (0.91, 92.53, 90.45),
            (0.75, 84.41, 67.89),
            (0.77, 75.00, 80.00),
            (0.84, 85.38, 83.43),
        ];
        let n = rows.len() as f64;
        let f1 = round2(rows.iter().map(|r| r.0).sum::<f64>() / n);
        let rec = round2(rows.iter().map(|r| r.1).sum::<f64>() / n);
        let ap = round2(rows.iter().map(|r| r.2).sum::<f64>() / n);
        assert_eq!((f1, rec, ap), (0.75, 72.95, 78.29));
    }

    #[test]
    fn summary_table_shapes() {
        let images = vec![ImageEval {
            detections: vec![Detection {
                bbox: b(0.0, 0.0, 4.0, 4.0),
                class: 0,
                score: 0.9,
            }],
            truths: vec![GroundTruth {
                bbox: b(0.0, 0.0, 4.0, 4.0),
                class: 0,
            }],
        }];
        let names = vec!["a".to_string(), "b".to_string()];
        let s = evaluate(&images, &names, 0.5).unwrap();
        assert_eq!(s.classes.len(), 2);
        assert!((s.classes[0].ap - 1.0).abs() < 1e-12);
        assert_eq!(s.classes[1].ap, 0.0);
        assert!((s.map - 0.5).abs() < 1e-12);
        let rows = s.rounded_rows();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].0, "Average");
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("class,f1,recall_pct,ap_pct"));
        assert!(evaluate(&images, &[], 0.5).is_err());
    }
}
