//! Detection metrics: greedy matching, 101-point interpolated average precision, and
//! mAP at IoU 0.50, 0.75 and averaged over 0.50:0.05:0.95.

use std::cmp::Ordering;
use std::fmt::Write as _;

pub use crate::boxes::iou;
use crate::boxes::{DetectionBox, GroundTruthBox};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Indices of `preds` in descending confidence; ties keep input order.
fn confidence_order(preds: &[DetectionBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

/// True-positive flag for each prediction, in input order.
///
/// Predictions are visited by descending confidence; each takes the unmatched ground truth of
/// its class with the highest IoU (lowest index on ties) when that IoU reaches the threshold.
pub fn match_detections(
    preds: &[DetectionBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for i in confidence_order(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class != p.class {
                continue;
            }
            let u = iou(&p.rect, &gt.rect);
            if best.is_none_or(|(_, b)| u > b) {
                best = Some((g, u));
            }
        }
        if let Some((g, u)) = best {
            if u >= iou_threshold {
                taken[g] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// 101-point interpolated AP from TP/FP flags sorted by descending confidence.
///
/// `None` when there is nothing to measure (no ground truth and no predictions); with
/// predictions but no ground truth the AP is 0.
pub fn average_precision(labels: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    // (tp count, precision) after each prediction
    let mut curve = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &l) in labels.iter().enumerate() {
        tp += l as usize;
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    // envelope: best precision at this recall or higher
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100usize {
        // first point with recall >= r/100, compared exactly in integers
        while k < curve.len() && curve[k].0 * 100 < r * num_gt {
            k += 1;
        }
        if k == curve.len() {
            break;
        }
        sum += curve[k].1;
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    /// AP per threshold in [`IOU_THRESHOLDS`]; `None` when the class has neither ground truth
    /// nor predictions.
    pub ap: [Option<f64>; 10],
    pub num_gt: usize,
    /// True and false positives at IoU 0.50.
    pub tp: usize,
    pub fp: usize,
}

impl ClassReport {
    pub fn ap50(&self) -> Option<f64> {
        self.ap[0]
    }

    pub fn ap75(&self) -> Option<f64> {
        self.ap[5]
    }

    /// Mean over thresholds.
    pub fn ap_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.ap.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map50: f64,
    pub map75: f64,
    pub map: f64,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = v.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates per-image predictions against per-image ground truth.
pub fn evaluate(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let img_preds: Vec<Vec<DetectionBox>> = preds
            .iter()
            .map(|p| p.iter().filter(|d| d.class == c).copied().collect())
            .collect();
        let img_gts: Vec<Vec<GroundTruthBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == c).copied().collect())
            .collect();
        let num_gt = img_gts.iter().map(Vec::len).sum();
        let mut report = ClassReport {
            class: c,
            ap: [None; 10],
            num_gt,
            tp: 0,
            fp: 0,
        };
        for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
            // (confidence, tp) over all images, image-major input order
            let mut scored: Vec<(f32, bool)> = Vec::new();
            for (p, g) in img_preds.iter().zip(&img_gts) {
                let flags = match_detections(p, g, t);
                scored.extend(p.iter().zip(flags).map(|(d, f)| (d.confidence, f)));
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
            let labels: Vec<bool> = scored.iter().map(|s| s.1).collect();
            if ti == 0 {
                report.tp = labels.iter().filter(|&&l| l).count();
                report.fp = labels.len() - report.tp;
            }
            report.ap[ti] = average_precision(&labels, num_gt);
        }
        classes.push(report);
    }
    EvalReport {
        map50: mean_defined(classes.iter().map(ClassReport::ap50)),
        map75: mean_defined(classes.iter().map(ClassReport::ap75)),
        map: mean_defined(classes.iter().map(ClassReport::ap_mean)),
        classes,
    }
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Human-readable table, one row per class.
    pub fn table(&self, names: &[&str]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "class", "gt", "tp", "fp", "AP50", "AP75", "AP"
        );
        for c in &self.classes {
            let name = names
                .get(c.class)
                .map_or_else(|| c.class.to_string(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
                name,
                c.num_gt,
                c.tp,
                c.fp,
                fmt_ap(c.ap50()),
                fmt_ap(c.ap75()),
                fmt_ap(c.ap_mean())
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            "all", "", "", "", self.map50, self.map75, self.map
        );
        s
    }

    /// `key = value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map50 = {:.6}", self.map50);
        let _ = writeln!(s, "map75 = {:.6}", self.map75);
        let _ = writeln!(s, "map = {:.6}", self.map);
        for c in &self.classes {
            let k = c.class;
            let _ = writeln!(s, "class{k}.gt = {}", c.num_gt);
            let _ = writeln!(s, "class{k}.tp = {}", c.tp);
            let _ = writeln!(s, "class{k}.fp = {}", c.fp);
            for (t, ap) in IOU_THRESHOLDS.iter().zip(&c.ap) {
                let _ = writeln!(
                    s,
                    "class{k}.ap{:02} = {}",
                    (t * 100.0).round() as u32,
                    fmt_ap(*ap)
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Rect;

    fn det(r: Rect, class: usize, confidence: f32) -> DetectionBox {
        DetectionBox {
            rect: r,
            class,
            confidence,
        }
    }

    fn gt(r: Rect, class: usize) -> GroundTruthBox {
        GroundTruthBox { rect: r, class }
    }

    const A: Rect = Rect::new(0.0, 0.0, 10.0, 10.0);

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert!((average_precision(&[false, true], 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn two_predictions_one_ground_truth() {
        let preds = [det(A, 0, 0.4), det(A, 0, 0.9)];
        assert_eq!(
            match_detections(&preds, &[gt(A, 0)], 0.5),
            vec![false, true]
        );
    }

    #[test]
    fn class_mismatch_is_false_positive() {
        assert_eq!(
            match_detections(&[det(A, 1, 0.9)], &[gt(A, 0)], 0.5),
            vec![false]
        );
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            vec![gt(A, 0), gt(Rect::new(20.0, 20.0, 30.0, 40.0), 1)],
            vec![gt(A, 1)],
        ];
        let preds: Vec<Vec<DetectionBox>> = gts
            .iter()
            .map(|g| g.iter().map(|b| det(b.rect, b.class, 0.8)).collect())
            .collect();
        let r = evaluate(&preds, &gts, 2);
        assert_eq!((r.map50, r.map75, r.map), (1.0, 1.0, 1.0));
        let r = evaluate(&[vec![], vec![]], &gts, 2);
        assert_eq!((r.map50, r.map75, r.map), (0.0, 0.0, 0.0));
    }

    #[test]
    fn class_without_data_is_excluded() {
        let r = evaluate(&[vec![det(A, 0, 0.5)]], &[vec![gt(A, 0)]], 3);
        assert_eq!(r.classes[2].ap50(), None);
        assert_eq!(r.map50, 1.0);
    }

    #[test]
    fn report_text() {
        let r = evaluate(&[vec![det(A, 0, 0.5)]], &[vec![gt(A, 0)]], 1);
        assert!(r.key_values().contains("map50 = 1.000000"));
        assert!(r.table(&["hot-blob"]).contains("hot-blob"));
    }
}
