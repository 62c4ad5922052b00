use std::cmp::Ordering;

use super::head::HeadOutput;
use crate::boxes::{iou, DetectionBox, Rect};
use crate::tensor::Scalar;

/// Per-point predictions of one image, detached from the graph.
#[derive(Debug, Clone)]
pub struct DecodedImage {
    /// Point centers in pixels.
    pub centers: Vec<(f64, f64)>,
    pub strides: Vec<f64>,
    /// Sigmoid class scores, `points × num_classes` row-major.
    pub scores: Vec<f64>,
    pub num_classes: usize,
    /// Boxes implied by the expected side distances.
    pub boxes: Vec<Rect>,
}

impl DecodedImage {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn score(&self, point: usize, class: usize) -> f64 {
        self.scores[point * self.num_classes + class]
    }
}

/// Point centers and strides for every level, in level-major, row-major order.
pub fn anchor_points<T: Scalar>(heads: &[HeadOutput<T>]) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut centers = Vec::new();
    let mut strides = Vec::new();
    for h in heads {
        let (gh, gw) = h.grid();
        let s = h.stride as f64;
        for y in 0..gh {
            for x in 0..gw {
                centers.push(((x as f64 + 0.5) * s, (y as f64 + 0.5) * s));
                strides.push(s);
            }
        }
    }
    (centers, strides)
}

/// Softmax expectation over `0..=reg_max`.
pub fn expected_distance(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut e) = (0.0, 0.0);
    for (i, &l) in logits.iter().enumerate() {
        let p = (l - m).exp();
        z += p;
        e += p * i as f64;
    }
    e / z
}

/// Box around `center` from left/top/right/bottom distances in stride units.
pub fn box_from_distances(center: (f64, f64), stride: f64, ltrb: [f64; 4]) -> Rect {
    Rect::new(
        (center.0 - ltrb[0] * stride) as f32,
        (center.1 - ltrb[1] * stride) as f32,
        (center.0 + ltrb[2] * stride) as f32,
        (center.1 + ltrb[3] * stride) as f32,
    )
}

pub fn decode_image<T: Scalar>(heads: &[HeadOutput<T>], n: usize) -> DecodedImage {
    let (centers, strides) = anchor_points(heads);
    let nc = heads[0].num_classes();
    let mut scores = Vec::with_capacity(centers.len() * nc);
    let mut boxes = Vec::with_capacity(centers.len());
    let mut point = 0;
    for h in heads {
        let (gh, gw) = h.grid();
        let hw = gh * gw;
        let bins = h.reg_max() + 1;
        let cls = &h.cls.data()[n * nc * hw..(n + 1) * nc * hw];
        let reg = &h.reg.data()[n * 4 * bins * hw..(n + 1) * 4 * bins * hw];
        let mut logits = vec![0.0; bins];
        for p in 0..hw {
            for c in 0..nc {
                scores.push(crate::tensor::sigmoid_scalar(cls[c * hw + p].as_f64()));
            }
            let mut ltrb = [0.0; 4];
            for (side, d) in ltrb.iter_mut().enumerate() {
                for (b, l) in logits.iter_mut().enumerate() {
                    *l = reg[(side * bins + b) * hw + p].as_f64();
                }
                *d = expected_distance(&logits);
            }
            boxes.push(box_from_distances(centers[point], strides[point], ltrb));
            point += 1;
        }
    }
    DecodedImage {
        centers,
        strides,
        scores,
        num_classes: nc,
        boxes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_det: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            conf_threshold: 0.25,
            nms_iou: 0.65,
            max_det: 300,
        }
    }
}

fn by_confidence(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
}

/// Class-wise greedy suppression: in descending confidence (stable), a box survives if its IoU
/// with every earlier survivor of the same class is at most `iou_threshold`.
pub fn nms(mut dets: Vec<DetectionBox>, iou_threshold: f64, max_det: usize) -> Vec<DetectionBox> {
    dets.sort_by(by_confidence);
    let mut keep: Vec<DetectionBox> = Vec::new();
    for d in dets {
        if keep.len() == max_det {
            break;
        }
        if keep
            .iter()
            .all(|k| k.class != d.class || iou(&k.rect, &d.rect) <= iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

/// Detections per image: best class per point, confidence filter, clipping, NMS.
pub fn decode_predictions<T: Scalar>(
    heads: &[HeadOutput<T>],
    cfg: &DecodeConfig,
) -> Vec<Vec<DetectionBox>> {
    let batch = heads[0].cls.dim(0);
    let (gh, gw) = heads[0].grid();
    let (img_h, img_w) = ((gh * heads[0].stride) as f32, (gw * heads[0].stride) as f32);
    (0..batch)
        .map(|n| {
            let d = decode_image(heads, n);
            let mut cands = Vec::new();
            for p in 0..d.len() {
                let (class, score) = (0..d.num_classes).map(|c| (c, d.score(p, c))).fold(
                    (0, f64::NEG_INFINITY),
                    |best, x| if x.1 > best.1 { x } else { best },
                );
                if score <= cfg.conf_threshold {
                    continue;
                }
                let rect = d.boxes[p].clipped(img_w, img_h);
                if rect.is_valid() {
                    cands.push(DetectionBox {
                        rect,
                        class,
                        confidence: score as f32,
                    });
                }
            }
            nms(cands, cfg.nms_iou, cfg.max_det)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, class: usize, conf: f32) -> DetectionBox {
        DetectionBox {
            rect: Rect::new(x, 0.0, x + 10.0, 10.0),
            class,
            confidence: conf,
        }
    }

    #[test]
    fn identical_boxes_collapse() {
        let out = nms(vec![det(0.0, 0, 0.5), det(0.0, 0, 0.9)], 0.65, 300);
        assert_eq!(out, vec![det(0.0, 0, 0.9)]);
    }

    #[test]
    fn other_class_is_not_suppressed() {
        assert_eq!(
            nms(vec![det(0.0, 0, 0.5), det(0.0, 1, 0.9)], 0.65, 300).len(),
            2
        );
    }

    #[test]
    fn max_det_caps_output() {
        let dets = (0..10)
            .map(|i| det(i as f32 * 20.0, 0, 0.1 * i as f32))
            .collect();
        let out = nms(dets, 0.5, 3);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].confidence, 0.1 * 9.0);
    }

    #[test]
    fn uniform_distribution_expects_midpoint() {
        assert!((expected_distance(&[0.0; 17]) - 8.0).abs() < 1e-12);
    }
}
