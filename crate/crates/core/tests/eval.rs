mod common;

use crt_core::boxes::{DetectionBox, GroundTruthBox, Rect};
use crt_core::eval::{average_precision, evaluate, iou, match_detections, IOU_THRESHOLDS};
use proptest::prelude::*;

use common::*;

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

#[test]
fn iou_by_area_arithmetic() {
    let a = Rect::new(0.0, 0.0, 2.0, 2.0);
    let b = Rect::new(1.0, 1.0, 3.0, 3.0);
    // intersection 1, union 4 + 4 - 1
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &Rect::new(5.0, 5.0, 6.0, 6.0)), 0.0);
}

#[test]
fn hand_derived_average_precision() {
    assert_eq!(average_precision(&[true], 1), Some(1.0));
    // envelope is 0.5 at every recall level
    let ap = average_precision(&[false, true], 1).unwrap();
    assert!((ap - 0.5).abs() < 1e-6);
    assert_eq!(average_precision(&[false, false], 2), Some(0.0));
    assert_eq!(average_precision(&[], 0), None);
    assert_eq!(average_precision(&[false], 0), Some(0.0));
}

#[test]
fn fp_then_tp_through_the_evaluator() {
    let g = Rect::new(10.0, 10.0, 30.0, 30.0);
    let preds = vec![vec![
        det(Rect::new(50.0, 50.0, 60.0, 60.0), 0, 0.9),
        det(g, 0, 0.8),
    ]];
    let r = evaluate(&preds, &[vec![gt(g, 0)]], 1);
    assert!((r.map50 - 0.5).abs() < 1e-6);
}

#[test]
fn perfect_and_empty_predictions() {
    let gts = vec![
        vec![
            gt(Rect::new(0.0, 0.0, 10.0, 10.0), 0),
            gt(Rect::new(20.0, 20.0, 40.0, 30.0), 1),
        ],
        vec![gt(Rect::new(5.0, 5.0, 9.0, 9.0), 2)],
    ];
    let perfect: Vec<Vec<DetectionBox>> = gts
        .iter()
        .map(|g| g.iter().map(|b| det(b.rect, b.class, 0.7)).collect())
        .collect();
    let r = evaluate(&perfect, &gts, 3);
    assert_eq!((r.map50, r.map75, r.map), (1.0, 1.0, 1.0));
    let r = evaluate(&[vec![], vec![]], &gts, 3);
    assert_eq!((r.map50, r.map75, r.map), (0.0, 0.0, 0.0));
}

#[test]
fn two_predictions_on_one_target() {
    let g = Rect::new(0.0, 0.0, 10.0, 10.0);
    let preds = [det(g, 0, 0.4), det(Rect::new(0.0, 0.0, 10.0, 9.0), 0, 0.8)];
    assert_eq!(
        match_detections(&preds, &[gt(g, 0)], 0.5),
        vec![false, true]
    );
}

#[test]
fn greedy_matching_equals_exhaustive_search() {
    let seqs = sequences();
    assert_eq!(seqs.len(), 1 + 8 + 64 + 512);
    let confidences = [0.9f32, 0.6, 0.3];
    let mut checked = 0usize;
    for ps in &seqs {
        let preds: Vec<DetectionBox> = ps
            .iter()
            .zip(confidences)
            .map(|(&(r, c), s)| det(r, c, s))
            .collect();
        for gs in &seqs {
            let gts: Vec<GroundTruthBox> = gs.iter().map(|&(r, c)| gt(r, c)).collect();
            for thr in [0.1, 0.5, 0.75] {
                let want = brute_force(&preds, &gts, thr);
                assert_eq!(
                    match_detections(&preds, &gts, thr),
                    want,
                    "{preds:?} {gts:?} @ {thr}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 585 * 585 * 3);
}

// Second implementation of the full evaluator.

fn reference_ap(scored: &mut [(f32, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return (!scored.is_empty()).then_some(0.0);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for &(_, hit) in scored.iter() {
        seen += 1;
        tp += hit as usize;
        points.push((tp, tp as f64 / seen as f64));
    }
    let total: f64 = (0..=100usize)
        .map(|r| {
            points
                .iter()
                .filter(|(tp, _)| tp * 100 >= r * num_gt)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

fn reference_map(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GroundTruthBox>],
    nc: usize,
    thr: f64,
) -> f64 {
    let mut aps = Vec::new();
    for c in 0..nc {
        let mut scored = Vec::new();
        let mut num_gt = 0;
        for (p, g) in preds.iter().zip(gts) {
            let g: Vec<&GroundTruthBox> = g.iter().filter(|b| b.class == c).collect();
            num_gt += g.len();
            let mut p: Vec<&DetectionBox> = p.iter().filter(|d| d.class == c).collect();
            p.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let mut used = vec![false; g.len()];
            for d in p {
                let best = (0..g.len())
                    .filter(|&j| !used[j])
                    .map(|j| (j, iou(&d.rect, &g[j].rect)))
                    .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                let hit = matches!(best, Some((_, u)) if u >= thr);
                if let (true, Some((j, _))) = (hit, best) {
                    used[j] = true;
                }
                scored.push((d.confidence, hit));
            }
        }
        if let Some(ap) = reference_ap(&mut scored, num_gt) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[test]
fn five_image_dataset_matches_reference_evaluator() {
    for seed in 0..50 {
        let (preds, gts) = micro_dataset(seed, 5, 3);
        let r = evaluate(&preds, &gts, 3);
        assert!(
            (r.map50 - reference_map(&preds, &gts, 3, 0.5)).abs() < 1e-6,
            "seed {seed}"
        );
        assert!(
            (r.map75 - reference_map(&preds, &gts, 3, 0.75)).abs() < 1e-6,
            "seed {seed}"
        );
        // mAP is the mean over classes of each class's mean over thresholds; with every class
        // defined at all thresholds that is the mean of the per-threshold mAPs
        let per_t: f64 = IOU_THRESHOLDS
            .iter()
            .map(|&t| reference_map(&preds, &gts, 3, t))
            .sum::<f64>()
            / 10.0;
        if r.classes.iter().all(|c| c.ap.iter().all(Option::is_some)) {
            assert!((r.map - per_t).abs() < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn duplicate_can_claim_a_second_overlapping_target() {
    let p = det(Rect::new(0.0, 0.0, 10.0, 10.0), 0, 0.9);
    let gts = [
        gt(Rect::new(0.0, 0.0, 10.0, 10.0), 0),
        gt(Rect::new(0.0, 0.0, 10.0, 9.0), 0),
    ];
    assert_eq!(match_detections(&[p], &gts, 0.5), vec![true]);
    assert_eq!(match_detections(&[p, p], &gts, 0.5), vec![true, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_does_not_increase_with_threshold(seed in any::<u64>()) {
        let (preds, gts) = micro_dataset(seed, 5, 2);
        let r = evaluate(&preds, &gts, 2);
        for c in &r.classes {
            for w in c.ap.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    prop_assert!(b <= a + 1e-12, "{:?}", c.ap);
                }
            }
            prop_assert!(c.ap.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!(r.map50 >= r.map75 - 1e-12);
    }

    // A copy can take a second ground truth that its original also cleared, so the property
    // is stated for predictions that clear at most one target of their class.
    #[test]
    fn duplicates_keep_tp_count_and_never_raise_ap(seed in any::<u64>()) {
        let (preds, gts) = micro_dataset(seed, 5, 2);
        prop_assume!(preds.iter().zip(&gts).all(|(p, g)| p.iter().all(|d| {
            g.iter().filter(|b| b.class == d.class && iou(&d.rect, &b.rect) >= 0.5).count() <= 1
        })));
        let doubled: Vec<Vec<DetectionBox>> = preds.iter().map(|p| p.iter().flat_map(|d| [*d, *d]).collect()).collect();
        let a = evaluate(&preds, &gts, 2);
        let b = evaluate(&doubled, &gts, 2);
        for (x, y) in a.classes.iter().zip(&b.classes) {
            prop_assert_eq!(x.tp, y.tp);
            for (u, v) in x.ap.iter().zip(&y.ap) {
                if let (Some(u), Some(v)) = (u, v) {
                    prop_assert!(v <= u);
                }
            }
        }
    }

    #[test]
    fn monotone_confidence_maps_leave_report_unchanged(seed in any::<u64>()) {
        let (preds, gts) = micro_dataset(seed, 5, 3);
        let squashed: Vec<Vec<DetectionBox>> = preds
            .iter()
            .map(|p| p.iter().map(|d| det(d.rect, d.class, d.confidence * d.confidence * 0.5)).collect())
            .collect();
        prop_assert_eq!(evaluate(&preds, &gts, 3), evaluate(&squashed, &gts, 3));
    }

    #[test]
    fn image_order_does_not_matter(seed in any::<u64>(), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let (preds, gts) = micro_dataset(seed, 5, 3);
        let p2: Vec<_> = perm.iter().map(|&i| preds[i].clone()).collect();
        let g2: Vec<_> = perm.iter().map(|&i| gts[i].clone()).collect();
        prop_assert_eq!(evaluate(&preds, &gts, 3), evaluate(&p2, &g2, 3));
    }
}
