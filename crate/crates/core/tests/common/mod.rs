//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use crt_core::boxes::{iou, DetectionBox, GroundTruthBox, Rect};
use crt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Residual encoding by explicit loops over positions and codewords.
pub fn encode_oracle(x: &Tensor<f64>, b: &[f64], s: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let k = s.len();
    let hw = h * w;
    let mut out = vec![0.0; n * k * c];
    for bi in 0..n {
        for i in 0..hw {
            let xi: Vec<f64> = (0..c).map(|ch| x.data()[(bi * c + ch) * hw + i]).collect();
            let logits: Vec<f64> = (0..k)
                .map(|kk| {
                    -s[kk]
                        * (0..c)
                            .map(|ch| (xi[ch] - b[kk * c + ch]).powi(2))
                            .sum::<f64>()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for kk in 0..k {
                let a = (logits[kk] - m).exp() / z;
                for ch in 0..c {
                    out[(bi * k + kk) * c + ch] += a * (xi[ch] - b[kk * c + ch]);
                }
            }
        }
    }
    out
}

pub const CANDIDATES: [Rect; 4] = [
    Rect::new(0.0, 0.0, 10.0, 10.0),
    Rect::new(0.0, 0.0, 10.0, 7.0),
    Rect::new(3.0, 0.0, 13.0, 10.0),
    Rect::new(5.0, 5.0, 15.0, 15.0),
];

/// All injective partial maps from predictions to ground truths over admissible pairs (same
/// class, IoU at least the threshold). The greedy protocol is the optimum that, visiting
/// predictions by confidence, maximizes each matched IoU before looking at later ones; an
/// unmatched prediction scores -1.
pub fn brute_force(preds: &[DetectionBox], gts: &[GroundTruthBox], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let mut choice = vec![None; preds.len()];
    fn rec(
        k: usize,
        order: &[usize],
        preds: &[DetectionBox],
        gts: &[GroundTruthBox],
        thr: f64,
        choice: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<f64> = order
                .iter()
                .map(|&p| choice[p].map_or(-1.0, |g| iou(&preds[p].rect, &gts[g].rect)))
                .collect();
            if best
                .as_ref()
                .is_none_or(|(b, _)| key.partial_cmp(b) == Some(std::cmp::Ordering::Greater))
            {
                *best = Some((key, choice.clone()));
            }
            return;
        }
        let p = order[k];
        rec(k + 1, order, preds, gts, thr, choice, best);
        for g in 0..gts.len() {
            let free = !choice.contains(&Some(g));
            if free && gts[g].class == preds[p].class && iou(&preds[p].rect, &gts[g].rect) >= thr {
                choice[p] = Some(g);
                rec(k + 1, order, preds, gts, thr, choice, best);
                choice[p] = None;
            }
        }
    }
    rec(0, &order, preds, gts, thr, &mut choice, &mut best);
    best.unwrap().1.iter().map(Option::is_some).collect()
}

/// Every sequence of at most three (box, class) pairs drawn from the candidates.
pub fn sequences() -> Vec<Vec<(Rect, usize)>> {
    let items: Vec<(Rect, usize)> = CANDIDATES.iter().flat_map(|&r| [(r, 0), (r, 1)]).collect();
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..3 {
        let mut next = Vec::new();
        for s in &frontier {
            for &it in &items {
                let mut t: Vec<(Rect, usize)> = s.clone();
                t.push(it);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Classic formulation: sort, then each kept box marks every later same-class box above the
/// threshold as suppressed.
pub fn nms_oracle(dets: &[DetectionBox], thr: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (i, &a) in order.iter().enumerate() {
        if suppressed[a] {
            continue;
        }
        out.push(dets[a]);
        for &b in &order[i + 1..] {
            if dets[b].class == dets[a].class && iou(&dets[a].rect, &dets[b].rect) > thr {
                suppressed[b] = true;
            }
        }
    }
    out
}

/// Random micro-dataset; confidences are distinct multiples of 1/1024.
pub fn micro_dataset(
    seed: u64,
    images: usize,
    nc: usize,
) -> (Vec<Vec<DetectionBox>>, Vec<Vec<GroundTruthBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conf: Vec<u32> = (1..1024).collect();
    for i in (1..conf.len()).rev() {
        conf.swap(i, rng.random_range(0..=i));
    }
    let mut next = conf.into_iter();
    let rect = |rng: &mut ChaCha8Rng| {
        let (x, y) = (
            rng.random_range(0.0..60.0f32),
            rng.random_range(0.0..60.0f32),
        );
        Rect::new(
            x,
            y,
            x + rng.random_range(4.0..30.0),
            y + rng.random_range(4.0..30.0),
        )
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GroundTruthBox> = (0..rng.random_range(0..5))
            .map(|_| GroundTruthBox {
                rect: rect(&mut rng),
                class: rng.random_range(0..nc),
            })
            .collect();
        let mut p = Vec::new();
        for b in &g {
            if rng.random_bool(0.8) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0f32);
                let r = Rect::new(
                    b.rect.x1 + j(&mut rng),
                    b.rect.y1 + j(&mut rng),
                    b.rect.x2 + j(&mut rng),
                    b.rect.y2 + j(&mut rng),
                );
                if r.is_valid() {
                    p.push(DetectionBox {
                        rect: r,
                        class: b.class,
                        confidence: next.next().unwrap() as f32 / 1024.0,
                    });
                }
            }
        }
        for _ in 0..rng.random_range(0..3) {
            p.push(DetectionBox {
                rect: rect(&mut rng),
                class: rng.random_range(0..nc),
                confidence: next.next().unwrap() as f32 / 1024.0,
            });
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}
