mod common;

use crt_core::detector::{
    assign_points, bce_loss, ciou_loss, decode_predictions, detection_loss, dfl_loss, nms,
    task_aligned_assign, Ablation, AssignConfig, Backbone, DecodeConfig, DetectionBox, Detector,
    DetectorConfig, GroundTruthBox, LossConfig, Rect,
};
use crt_core::nn::Phase;
use crt_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn tiny(ablation: Ablation) -> DetectorConfig {
    DetectorConfig {
        image_size: 64,
        widths: [8, 8, 16],
        neck_width: 16,
        head_width: 8,
        reg_max: 8,
        ema_groups: 4,
        codewords: 4,
        ablation,
        ..DetectorConfig::default()
    }
}

fn image(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[n, 1, s, s], |_| rng.random_range(0.0..1.0))
}

#[test]
fn backbone_levels_at_default_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bb = Backbone::<f32>::new(1, [64, 128, 256], false, &mut rng);
    let p = bb.forward(&image(2, 64, &mut rng), &Phase::eval()).unwrap();
    assert_eq!(p.f3.shape(), &[2, 64, 8, 8]);
    assert_eq!(p.f4.shape(), &[2, 128, 4, 4]);
    assert_eq!(p.f5.shape(), &[2, 256, 2, 2]);
}

#[test]
fn backbone_rejects_sizes_off_the_stride_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bb = Backbone::<f32>::new(1, [8, 8, 8], false, &mut rng);
    let r = bb.forward(&Tensor::zeros(&[1, 1, 48, 48]), &Phase::eval());
    assert!(matches!(
        r,
        Err(Error::InvalidInputSize {
            size: 48,
            divisor: 32
        })
    ));
}

#[test]
fn construction_and_forward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = Detector::<f32>::new(tiny(Ablation::FULL), &mut rng).unwrap();
        let x = image(1, 64, &mut rng);
        let heads = model.forward(&x, &mut Phase::eval()).unwrap();
        heads
            .iter()
            .flat_map(|h| h.cls.to_vec().into_iter().chain(h.reg.to_vec()))
            .collect::<Vec<f32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_variant_builds_and_produces_a_finite_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = image(2, 64, &mut rng);
    let gts = vec![
        vec![GroundTruthBox {
            rect: Rect::new(10.0, 12.0, 40.0, 30.0),
            class: 1,
        }],
        vec![],
    ];
    let variants = Ablation::variants();
    assert_eq!(variants.len(), 6);
    for (name, ab) in variants {
        let model = Detector::<f32>::new(tiny(ab), &mut rng).unwrap();
        let heads = model.forward(&x, &mut Phase::eval()).unwrap();
        assert_eq!(heads.len(), 3, "{name}");
        for (h, s) in heads.iter().zip([8, 4, 2]) {
            assert_eq!(h.cls.shape(), &[2, 3, s, s], "{name}");
            assert_eq!(h.reg.shape(), &[2, 4 * 9, s, s], "{name}");
        }
        let loss = detection_loss(&heads, &gts, &LossConfig::default()).unwrap();
        assert!(loss.total.item().is_finite(), "{name}");
    }
    let baseline = Detector::<f32>::new(tiny(Ablation::BASELINE), &mut rng).unwrap();
    assert!(
        baseline.ema.is_none() && baseline.neck.center.is_none() && baseline.neck.gcr.is_none()
    );
}

#[test]
fn class_channels_follow_class_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = DetectorConfig {
        num_classes: 5,
        ..tiny(Ablation::FULL)
    };
    let model = Detector::<f32>::new(cfg, &mut rng).unwrap();
    let heads = model
        .forward(&image(1, 64, &mut rng), &mut Phase::eval())
        .unwrap();
    assert!(heads.iter().all(|h| h.num_classes() == 5));
}

/// Random points on an 8×8 grid of stride 8 with random scores and boxes around them.
fn random_points(rng: &mut ChaCha8Rng, nc: usize) -> (Vec<(f64, f64)>, Vec<f64>, Vec<Rect>) {
    let centers: Vec<(f64, f64)> = (0..64)
        .map(|i| ((i % 8) as f64 * 8.0 + 4.0, (i / 8) as f64 * 8.0 + 4.0))
        .collect();
    let scores = (0..64 * nc).map(|_| rng.random_range(0.0..1.0)).collect();
    let boxes = centers
        .iter()
        .map(|&(x, y)| {
            let (x, y) = (x as f32, y as f32);
            Rect::new(
                x - rng.random_range(1.0..12.0),
                y - rng.random_range(1.0..12.0),
                x + rng.random_range(1.0..12.0),
                y + rng.random_range(1.0..12.0),
            )
        })
        .collect();
    (centers, scores, boxes)
}

fn random_gt(rng: &mut ChaCha8Rng, nc: usize) -> GroundTruthBox {
    let (x, y) = (
        rng.random_range(0.0..48.0f32),
        rng.random_range(0.0..48.0f32),
    );
    GroundTruthBox {
        rect: Rect::new(
            x,
            y,
            x + rng.random_range(4.0..24.0),
            y + rng.random_range(4.0..24.0),
        ),
        class: rng.random_range(0..nc),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_respects_centers_and_topk(seed in any::<u64>(), ngt in 0usize..5, topk in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (centers, scores, boxes) = random_points(&mut rng, 2);
        let gts: Vec<GroundTruthBox> = (0..ngt).map(|_| random_gt(&mut rng, 2)).collect();
        let cfg = AssignConfig { topk, ..AssignConfig::default() };
        let a = assign_points(&scores, 2, &boxes, &centers, &gts, &cfg).unwrap();
        prop_assert_eq!(a.matched.len(), 64);
        let mut per_gt = vec![0usize; ngt];
        for (p, m) in a.matched.iter().enumerate() {
            match m {
                Some(g) => {
                    prop_assert!(gts[*g].rect.contains_point(centers[p].0, centers[p].1));
                    per_gt[*g] += 1;
                    prop_assert!((0.0..=1.0).contains(&a.target_scores[p]));
                }
                None => prop_assert_eq!(a.alignment[p], 0.0),
            }
        }
        prop_assert!(per_gt.iter().all(|&c| c <= topk));
    }

    #[test]
    fn nms_matches_suppression_matrix(seed in any::<u64>(), thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<DetectionBox> = (0..20)
            .map(|_| {
                let g = random_gt(&mut rng, 2);
                DetectionBox { rect: g.rect, class: g.class, confidence: rng.random_range(0.0..1.0) }
            })
            .collect();
        let kept = nms(dets.clone(), thr, usize::MAX);
        prop_assert_eq!(kept.clone(), nms_oracle(&dets, thr));
        // idempotent on its own output
        prop_assert_eq!(nms(kept.clone(), thr, usize::MAX), kept);
    }

    #[test]
    fn bce_is_minimized_at_the_sigmoid(x in -6.0f64..6.0, dy in -0.3f64..0.3) {
        let y = 1.0 / (1.0 + (-x).exp());
        // as a function of the logit, the loss for target y is smallest at x
        let off = |dx: f64| bce_loss(&Tensor::scalar(x + dx), &Tensor::scalar(y)).unwrap().item();
        prop_assert!(off(dy) >= off(0.0) - 1e-12);
    }
}

#[test]
fn no_ground_truth_means_all_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Detector::<f32>::new(tiny(Ablation::FULL), &mut rng).unwrap();
    let heads = model
        .forward(&image(1, 64, &mut rng), &mut Phase::eval())
        .unwrap();
    let a = task_aligned_assign(&heads, 0, &[], &AssignConfig::default()).unwrap();
    assert_eq!(a.matched.len(), 64 + 16 + 4);
    assert_eq!(a.foreground_count(), 0);
}

#[test]
fn perfect_alignment_outranks_half_overlap() {
    let gt = GroundTruthBox {
        rect: Rect::new(0.0, 0.0, 16.0, 16.0),
        class: 0,
    };
    let centers = [(4.0, 4.0), (12.0, 12.0)];
    let boxes = [gt.rect, Rect::new(0.0, 0.0, 16.0, 8.0)];
    for beta in [0.1, 1.0, 6.0] {
        let cfg = AssignConfig {
            alpha: 0.5,
            beta,
            topk: 1,
        };
        let a = assign_points(&[1.0, 1.0], 1, &boxes, &centers, &[gt], &cfg).unwrap();
        assert_eq!(a.matched, vec![Some(0), None]);
    }
}

#[test]
fn single_cell_ground_truth_on_two_by_two_grid() {
    let centers = [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)];
    let boxes: Vec<Rect> = centers
        .iter()
        .map(|&(x, y)| {
            Rect::new(
                x as f32 - 4.0,
                y as f32 - 4.0,
                x as f32 + 4.0,
                y as f32 + 4.0,
            )
        })
        .collect();
    for cell in 0..4 {
        let gt = GroundTruthBox {
            rect: boxes[cell],
            class: 0,
        };
        let cfg = AssignConfig {
            topk: 1,
            ..AssignConfig::default()
        };
        let a = assign_points(&[0.5; 4], 1, &boxes, &centers, &[gt], &cfg).unwrap();
        let expect: Vec<Option<usize>> = (0..4).map(|p| (p == cell).then_some(0)).collect();
        assert_eq!(a.matched, expect);
    }
}

#[test]
fn ciou_oracles() {
    let gt = Rect::new(10.0, 10.0, 30.0, 20.0);
    assert!(ciou_loss(&gt, &gt).unwrap().abs() < 1e-6);
    // concentric, same aspect: only 1 - IoU remains
    let inner = Rect::new(15.0, 12.5, 25.0, 17.5);
    let expect = 1.0 - 50.0 / 200.0;
    assert!((ciou_loss(&inner, &gt).unwrap() - expect).abs() < 1e-6);
    // translating toward the target lowers the loss at every step
    let mut prev = f64::INFINITY;
    for k in 0..=40 {
        let dx = 40.0 - k as f32;
        let l = ciou_loss(&Rect::new(10.0 + dx, 10.0, 30.0 + dx, 20.0), &gt).unwrap();
        assert!(l < prev, "step {k}: {l} !< {prev}");
        assert!((0.0..2.5).contains(&l));
        prev = l;
    }
    assert!(matches!(
        ciou_loss(&Rect::new(1.0, 1.0, 1.0, 5.0), &gt),
        Err(Error::InvalidBox(_))
    ));
}

#[test]
fn dfl_closed_forms() {
    for n in [2usize, 5, 17] {
        let l = dfl_loss(&Tensor::<f64>::zeros(&[n]), 1.0).unwrap().item();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
    }
    let peaked = Tensor::<f64>::from_fn(&[5], |i| if i == 3 { 40.0 } else { 0.0 });
    assert!(dfl_loss(&peaked, 3.0).unwrap().item() < 1e-12);
    // t = 1.5 weights bins 1 and 2 equally, so swapping their logits changes nothing
    let a = Tensor::<f64>::new(vec![0.1, 0.7, -0.4, 0.2], &[4]).unwrap();
    let b = Tensor::<f64>::new(vec![0.1, -0.4, 0.7, 0.2], &[4]).unwrap();
    let (la, lb) = (
        dfl_loss(&a, 1.5).unwrap().item(),
        dfl_loss(&b, 1.5).unwrap().item(),
    );
    assert!((la - lb).abs() < 1e-12);
}

#[test]
fn bce_closed_forms() {
    let l = bce_loss(&Tensor::<f64>::scalar(0.0), &Tensor::scalar(0.5))
        .unwrap()
        .item();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let l = bce_loss(&Tensor::<f64>::scalar(40.0), &Tensor::scalar(1.0))
        .unwrap()
        .item();
    assert!(l < 1e-15);
}

#[test]
fn decoding_below_threshold_is_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Detector::<f32>::new(tiny(Ablation::FULL), &mut rng).unwrap();
    let heads = model
        .forward(&image(2, 64, &mut rng), &mut Phase::eval())
        .unwrap();
    let cfg = DecodeConfig {
        conf_threshold: 1.0,
        ..DecodeConfig::default()
    };
    assert!(decode_predictions(&heads, &cfg)
        .iter()
        .all(|d| d.is_empty()));
    let dets = decode_predictions(
        &heads,
        &DecodeConfig {
            conf_threshold: 0.0,
            ..DecodeConfig::default()
        },
    );
    for d in dets.iter().flatten() {
        assert!(d.rect.x2 > d.rect.x1 && d.rect.y2 > d.rect.y1);
        assert!((0.0..=1.0).contains(&d.confidence));
    }
    for image in &dets {
        assert!(image.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        assert_eq!(&nms(image.clone(), 0.65, 300), image);
    }
}

#[test]
fn identical_boxes_collapse_to_one() {
    let d = DetectionBox {
        rect: Rect::new(0.0, 0.0, 5.0, 5.0),
        class: 2,
        confidence: 0.5,
    };
    assert_eq!(nms(vec![d, d], 0.65, 300).len(), 1);
}
