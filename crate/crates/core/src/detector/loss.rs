use std::f64::consts::PI;

use super::assign::{task_aligned_assign, AssignConfig, AssignmentResult};
use super::head::HeadOutput;
use crate::boxes::{GroundTruthBox, Rect};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const CIOU_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of logits against targets.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(logits.bce_with_logits(targets)?.mean())
}

/// Complete-IoU loss `1 - IoU + rho^2/c^2 + alpha v` per row of `[P, 4]` boxes; returns `[P]`.
/// `gt` is treated as a constant.
pub fn ciou_loss_rows<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.rank() != 2 || pred.dim(1) != 4 || pred.shape() != gt.shape() {
        return Err(Error::shape(
            "ciou",
            format!(
                "expected matching [P,4] boxes, got {:?} and {:?}",
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    let gt = gt.detach();
    let col = |t: &Tensor<T>, i: usize| t.narrow(1, i, 1);
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx1, gy1, gx2, gy2) = (col(&gt, 0)?, col(&gt, 1)?, col(&gt, 2)?, col(&gt, 3)?);
    let (w1, h1) = (px2.sub(&px1)?, py2.sub(&py1)?.add_scalar(CIOU_EPS));
    let (w2, h2) = (gx2.sub(&gx1)?, gy2.sub(&gy1)?.add_scalar(CIOU_EPS));

    let iw = px2.minimum(&gx2)?.sub(&px1.maximum(&gx1)?)?.clamp_min(0.0);
    let ih = py2.minimum(&gy2)?.sub(&py1.maximum(&gy1)?)?.clamp_min(0.0);
    let inter = iw.mul(&ih)?;
    let union = w1
        .mul(&h1)?
        .add(&w2.mul(&h2)?)?
        .sub(&inter)?
        .add_scalar(CIOU_EPS);
    let iou = inter.div(&union)?;

    let cw = px2.maximum(&gx2)?.sub(&px1.minimum(&gx1)?)?;
    let ch = py2.maximum(&gy2)?.sub(&py1.minimum(&gy1)?)?;
    let c2 = cw.square().add(&ch.square())?.add_scalar(CIOU_EPS);
    let dx = gx1.add(&gx2)?.sub(&px1)?.sub(&px2)?;
    let dy = gy1.add(&gy2)?.sub(&py1)?.sub(&py2)?;
    let rho2 = dx.square().add(&dy.square())?.scale(0.25);

    let v = w2
        .div(&h2)?
        .atan()
        .sub(&w1.div(&h1)?.atan())?
        .square()
        .scale(4.0 / (PI * PI));
    let alpha = v.div(&v.sub(&iou)?.add_scalar(1.0 + CIOU_EPS))?;
    let penalty = rho2.div(&c2)?.add(&v.mul(&alpha)?)?;
    let loss = iou.neg().add(&penalty)?.add_scalar(1.0);
    loss.reshape(&[pred.dim(0)])
}

/// Complete-IoU loss of a single box pair.
pub fn ciou_loss(pred: &Rect, gt: &Rect) -> Result<f64> {
    for (name, r) in [("prediction", pred), ("ground truth", gt)] {
        if !r.is_valid() {
            return Err(Error::InvalidBox(format!("{name} box {r} has no area")));
        }
    }
    let row = |r: &Rect| Tensor::<f64>::new(r.to_array().map(|v| v as f64).to_vec(), &[1, 4]);
    Ok(ciou_loss_rows(&row(pred)?, &row(gt)?)?.item())
}

/// Left/right bins and weights of a fractional target in `[0, reg_max]`.
fn dfl_bins(t: f64, reg_max: usize) -> (usize, usize, f64, f64) {
    let lo = (t.floor() as usize).min(reg_max - 1);
    let wl = (lo + 1) as f64 - t;
    (lo, lo + 1, wl, 1.0 - wl)
}

/// Distribution focal loss per row of `[M, reg_max + 1]` logits; returns `[M]`.
/// Targets are clamped into `[0, reg_max]`.
pub fn dfl_loss_rows<T: Scalar>(logits: &Tensor<T>, targets: &[f64]) -> Result<Tensor<T>> {
    if logits.rank() != 2 || logits.dim(0) != targets.len() || logits.dim(1) < 2 {
        return Err(Error::shape(
            "dfl",
            format!("{:?} logits for {} targets", logits.shape(), targets.len()),
        ));
    }
    let bins = logits.dim(1);
    let reg_max = bins - 1;
    let mut w = vec![T::zero(); logits.numel()];
    for (row, &t) in targets.iter().enumerate() {
        let (l, r, wl, wr) = dfl_bins(t.clamp(0.0, reg_max as f64), reg_max);
        w[row * bins + l] = T::lit(wl);
        w[row * bins + r] = T::lit(wr);
    }
    let w = Tensor::new(w, logits.shape())?;
    logits
        .log_softmax(1)?
        .mul(&w)?
        .sum_axis(1, false)?
        .neg()
        .reshape(&[targets.len()])
}

/// Distribution focal loss of one `[reg_max + 1]` distribution.
pub fn dfl_loss<T: Scalar>(dist_logits: &Tensor<T>, target: f64) -> Result<Tensor<T>> {
    let bins = dist_logits.numel();
    if bins < 2 {
        return Err(Error::shape("dfl", "need at least two bins"));
    }
    let reg_max = (bins - 1) as f64;
    if !(0.0..=reg_max).contains(&target) {
        log::warn!("distribution target {target} outside [0, {reg_max}], clamping");
    }
    dfl_loss_rows(&dist_logits.reshape(&[1, bins])?, &[target])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub dfl_weight: f64,
    pub assign: AssignConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls_weight: 0.5,
            box_weight: 7.5,
            dfl_weight: 1.5,
            assign: AssignConfig::default(),
        }
    }
}

/// Weighted total with the unweighted components.
pub struct LossBreakdown<T: Scalar> {
    pub total: Tensor<T>,
    pub cls: f64,
    pub bbox: f64,
    pub dfl: f64,
    pub foreground: usize,
}

/// Concatenates one kind of per-level output into `[N * points, channels]`.
fn flatten<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let n = parts[0].dim(0);
    let c = parts[0].dim(1);
    let flat: Vec<Tensor<T>> = parts
        .iter()
        .map(|t| t.reshape(&[n, c, t.dim(2) * t.dim(3)]))
        .collect::<Result<_>>()?;
    let all = Tensor::concat(&flat, 2)?;
    let points = all.dim(2);
    all.permute(&[0, 2, 1])?.reshape(&[n * points, c])
}

/// Classification, box and distribution losses for a batch, with task-aligned targets.
///
/// Each term is normalized by the sum of soft targets; box terms are weighted per point by
/// its target score.
pub fn detection_loss<T: Scalar>(
    heads: &[HeadOutput<T>],
    targets: &[Vec<GroundTruthBox>],
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    let assignments = assign_batch(heads, targets, cfg)?;
    loss_with_assignments(heads, targets, &assignments, cfg)
}

/// Task-aligned assignment for every image of a batch.
pub fn assign_batch<T: Scalar>(
    heads: &[HeadOutput<T>],
    targets: &[Vec<GroundTruthBox>],
    cfg: &LossConfig,
) -> Result<Vec<AssignmentResult>> {
    let n = heads[0].cls.dim(0);
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} target lists for a batch of {n}",
            targets.len()
        )));
    }
    targets
        .iter()
        .enumerate()
        .map(|(img, gts)| task_aligned_assign(heads, img, gts, &cfg.assign))
        .collect()
}

/// The loss for fixed assignments. Targets are constants here, which is also how training
/// treats them: the assigner output carries no gradient.
pub fn loss_with_assignments<T: Scalar>(
    heads: &[HeadOutput<T>],
    targets: &[Vec<GroundTruthBox>],
    assignments: &[AssignmentResult],
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    let n = heads[0].cls.dim(0);
    if targets.len() != n || assignments.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} target lists and {} assignments for a batch of {n}",
            targets.len(),
            assignments.len()
        )));
    }
    let nc = heads[0].num_classes();
    let reg_max = heads[0].reg_max();
    let bins = reg_max + 1;
    let cls = flatten(&heads.iter().map(|h| &h.cls).collect::<Vec<_>>())?;
    let reg = flatten(&heads.iter().map(|h| &h.reg).collect::<Vec<_>>())?;
    let points = cls.dim(0) / n;
    let (centers, strides) = super::decode::anchor_points(heads);

    let mut cls_target = vec![T::zero(); cls.numel()];
    let mut rows = Vec::new();
    let mut pos_centers = Vec::new();
    let mut pos_scale = Vec::new();
    let mut gt_rows = Vec::new();
    let mut dfl_targets = Vec::new();
    let mut weights = Vec::new();
    let mut score_sum = 0.0;
    for (img, gts) in targets.iter().enumerate() {
        let a = &assignments[img];
        for p in 0..points {
            let Some(g) = a.matched[p] else { continue };
            let gt = &gts[g];
            let ts = a.target_scores[p];
            score_sum += ts;
            cls_target[(img * points + p) * nc + gt.class] = T::lit(ts);
            let (cx, cy) = centers[p];
            let s = strides[p];
            rows.push(img * points + p);
            pos_centers.extend([cx, cy, cx, cy].map(T::lit));
            pos_scale.extend([-s, -s, s, s].map(T::lit));
            gt_rows.extend(gt.rect.to_array().map(|v| T::lit(v as f64)));
            let r = &gt.rect;
            let cap = reg_max as f64 - 0.01;
            dfl_targets.extend(
                [
                    cx - r.x1 as f64,
                    cy - r.y1 as f64,
                    r.x2 as f64 - cx,
                    r.y2 as f64 - cy,
                ]
                .map(|d| (d / s).clamp(0.0, cap)),
            );
            weights.push(T::lit(ts));
        }
    }
    let norm = score_sum.max(1.0);
    let cls_loss = cls
        .bce_with_logits(&Tensor::new(cls_target, cls.shape())?)?
        .sum()
        .scale(1.0 / norm);

    let mut total = cls_loss.scale(cfg.cls_weight);
    let (mut bbox, mut dfl) = (0.0, 0.0);
    if !rows.is_empty() {
        let p = rows.len();
        let dist_logits = reg.index_select(&rows)?.reshape(&[p * 4, bins])?;
        let bin_index = Tensor::from_fn(&[bins, 1], |i| T::lit(i as f64));
        let dist = dist_logits
            .softmax(1)?
            .matmul(&bin_index)?
            .reshape(&[p, 4])?;
        let pred = Tensor::new(pos_centers, &[p, 4])?
            .add(&dist.mul(&Tensor::new(pos_scale, &[p, 4])?)?)?;
        let w = Tensor::new(weights, &[p])?;
        let box_loss = ciou_loss_rows(&pred, &Tensor::new(gt_rows, &[p, 4])?)?
            .mul(&w)?
            .sum()
            .scale(1.0 / norm);
        let dfl_loss = dfl_loss_rows(&dist_logits, &dfl_targets)?
            .reshape(&[p, 4])?
            .mean_axis(1, false)?
            .mul(&w)?
            .sum()
            .scale(1.0 / norm);
        bbox = box_loss.item().as_f64();
        dfl = dfl_loss.item().as_f64();
        total = total
            .add(&box_loss.scale(cfg.box_weight))?
            .add(&dfl_loss.scale(cfg.dfl_weight))?;
    }
    Ok(LossBreakdown {
        cls: cls_loss.item().as_f64(),
        bbox,
        dfl,
        foreground: rows.len(),
        total,
    })
}
