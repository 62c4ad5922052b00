use std::cmp::Ordering;

use super::decode::decode_image;
use super::head::HeadOutput;
use crate::boxes::{iou, GroundTruthBox, Rect};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub alpha: f64,
    pub beta: f64,
    pub topk: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            alpha: 0.5,
            beta: 6.0,
            topk: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Ground-truth index per point; `None` is background.
    pub matched: Vec<Option<usize>>,
    /// Alignment `s^alpha * u^beta` with the matched ground truth (0 for background).
    pub alignment: Vec<f64>,
    /// Soft classification target for the matched class: alignment normalized so each ground
    /// truth's best point gets that ground truth's best IoU.
    pub target_scores: Vec<f64>,
}

impl AssignmentResult {
    pub fn background(points: usize) -> Self {
        AssignmentResult {
            matched: vec![None; points],
            alignment: vec![0.0; points],
            target_scores: vec![0.0; points],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Task-aligned assignment from detached per-point predictions.
///
/// `scores` is `points × num_classes` (probabilities), `boxes` the decoded box per point.
pub fn assign_points(
    scores: &[f64],
    num_classes: usize,
    boxes: &[Rect],
    centers: &[(f64, f64)],
    gts: &[GroundTruthBox],
    cfg: &AssignConfig,
) -> Result<AssignmentResult> {
    let points = centers.len();
    if boxes.len() != points || scores.len() != points * num_classes {
        return Err(Error::InvalidArgument(format!(
            "{points} points but {} boxes and {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth class {} out of range for {num_classes} classes",
            g.class
        )));
    }
    let mut best: Vec<Option<(usize, f64, f64)>> = vec![None; points];
    for (gi, gt) in gts.iter().enumerate() {
        let mut cands: Vec<(usize, f64, f64)> = (0..points)
            .filter(|&p| gt.rect.contains_point(centers[p].0, centers[p].1))
            .map(|p| {
                let s = scores[p * num_classes + gt.class];
                let u = iou(&boxes[p], &gt.rect);
                (p, s.powf(cfg.alpha) * u.powf(cfg.beta), u)
            })
            .collect();
        // stable: ties keep point order
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        for &(p, t, u) in cands.iter().take(cfg.topk) {
            match best[p] {
                Some((_, bt, _)) if bt >= t => {}
                _ => best[p] = Some((gi, t, u)),
            }
        }
    }
    let mut max_t = vec![0.0f64; gts.len()];
    let mut max_u = vec![0.0f64; gts.len()];
    for &(g, t, u) in best.iter().flatten() {
        max_t[g] = max_t[g].max(t);
        max_u[g] = max_u[g].max(u);
    }
    let mut out = AssignmentResult::background(points);
    for (p, b) in best.iter().enumerate() {
        if let Some((g, t, _)) = *b {
            out.matched[p] = Some(g);
            out.alignment[p] = t;
            out.target_scores[p] = if max_t[g] > 0.0 {
                t / max_t[g] * max_u[g]
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Assignment for image `n` of a batch of head outputs.
pub fn task_aligned_assign<T: Scalar>(
    heads: &[HeadOutput<T>],
    n: usize,
    gts: &[GroundTruthBox],
    cfg: &AssignConfig,
) -> Result<AssignmentResult> {
    let d = decode_image(heads, n);
    if gts.is_empty() {
        return Ok(AssignmentResult::background(d.len()));
    }
    assign_points(&d.scores, d.num_classes, &d.boxes, &d.centers, gts, cfg)
}
