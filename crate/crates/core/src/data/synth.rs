//! Synthetic thermal scenes: a noisy background with smooth hot patches.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::boxes::{iou, GroundTruthBox, Rect};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `sqrt(2 ln 10)`: a Gaussian falls to 10% of its peak at this many standard deviations.
const TENTH: f64 = 2.145_966_026_289_347;

const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectKind {
    /// Axis-aligned Gaussian; `size` is the standard deviation range.
    Blob,
    /// Rotated capsule with Gaussian cross-section; `size` is the cross-section deviation
    /// range and the length is 3 to 6 times the deviation.
    Bar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ObjectKind,
    /// Peak intensity above background.
    pub peak: (f64, f64),
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub background: f64,
    pub noise: f64,
    /// Largest IoU allowed between boxes of one scene.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class = |name: &str, kind, peak, size| ClassSpec {
            name: name.into(),
            kind,
            peak,
            size,
        };
        SceneConfig {
            image_size: 96,
            classes: vec![
                class("hot-blob", ObjectKind::Blob, (0.65, 0.8), (3.0, 5.5)),
                class("warm-blob", ObjectKind::Blob, (0.25, 0.35), (3.0, 5.5)),
                class("hot-bar", ObjectKind::Bar, (0.65, 0.8), (1.8, 2.6)),
            ],
            min_objects: 1,
            max_objects: 4,
            background: 0.15,
            noise: 0.02,
            max_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::InvalidInputSize {
                size: self.image_size,
                divisor: 32,
            });
        }
        if self.classes.is_empty() {
            return Err(Error::Config("scene needs at least one class".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.background) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "background must be in [0,1] and noise >= 0".into(),
            ));
        }
        for c in &self.classes {
            let (lo, hi) = c.peak;
            if !(unit(lo) && unit(hi) && lo <= hi && lo > 0.0) {
                return Err(Error::Config(format!(
                    "class {}: peak range must lie in (0,1]",
                    c.name
                )));
            }
            if !(c.size.0 > 0.0 && c.size.0 <= c.size.1) {
                return Err(Error::Config(format!(
                    "class {}: invalid size range",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `[1, 1, S, S]`
    pub image: Tensor<f32>,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, Copy)]
enum Patch {
    Blob {
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
        peak: f64,
    },
    Bar {
        cx: f64,
        cy: f64,
        half_len: f64,
        sigma: f64,
        cos: f64,
        sin: f64,
        peak: f64,
    },
}

impl Patch {
    fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Patch::Blob {
                cx,
                cy,
                sx,
                sy,
                peak,
            } => {
                let (dx, dy) = ((x - cx) / sx, (y - cy) / sy);
                peak * (-0.5 * (dx * dx + dy * dy)).exp()
            }
            Patch::Bar {
                cx,
                cy,
                half_len,
                sigma,
                cos,
                sin,
                peak,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let along = (dx * cos + dy * sin).abs();
                let across = -dx * sin + dy * cos;
                let d2 = (along - half_len).max(0.0).powi(2) + across * across;
                peak * (-0.5 * d2 / (sigma * sigma)).exp()
            }
        }
    }

    /// Tight box of the region above 10% of the peak.
    fn extent(&self) -> Rect {
        match *self {
            Patch::Blob { cx, cy, sx, sy, .. } => {
                let (rx, ry) = (sx * TENTH, sy * TENTH);
                Rect::new(
                    (cx - rx) as f32,
                    (cy - ry) as f32,
                    (cx + rx) as f32,
                    (cy + ry) as f32,
                )
            }
            Patch::Bar {
                cx,
                cy,
                half_len,
                sigma,
                cos,
                sin,
                ..
            } => {
                let r = sigma * TENTH;
                let (ex, ey) = ((half_len * cos).abs() + r, (half_len * sin).abs() + r);
                Rect::new(
                    (cx - ex) as f32,
                    (cy - ey) as f32,
                    (cx + ex) as f32,
                    (cy + ey) as f32,
                )
            }
        }
    }
}

fn sample_patch(spec: &ClassSpec, size: f64, rng: &mut dyn RngCore) -> Patch {
    let peak = rng.random_range(spec.peak.0..=spec.peak.1);
    let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    match spec.kind {
        ObjectKind::Blob => {
            let sx = rng.random_range(spec.size.0..=spec.size.1);
            let sy = rng.random_range(spec.size.0..=spec.size.1);
            Patch::Blob {
                cx,
                cy,
                sx,
                sy,
                peak,
            }
        }
        ObjectKind::Bar => {
            let sigma = rng.random_range(spec.size.0..=spec.size.1);
            let half_len = sigma * rng.random_range(1.5..3.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Patch::Bar {
                cx,
                cy,
                half_len,
                sigma,
                cos: theta.cos(),
                sin: theta.sin(),
                peak,
            }
        }
    }
}

/// Renders one scene. Objects that cannot be placed inside the image without exceeding the
/// overlap limit after 100 tries are skipped with a warning.
pub fn synth_scene(config: &SceneConfig, rng: &mut dyn RngCore) -> Result<Scene> {
    config.validate()?;
    let s = config.image_size;
    let size = s as f64;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut patches: Vec<(Patch, usize, Rect)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..config.classes.len());
        let spec = &config.classes[class];
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let p = sample_patch(spec, size, rng);
            let r = p.extent();
            let inside = r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= s as f32 && r.y2 <= s as f32;
            let free = patches
                .iter()
                .all(|(_, _, q)| iou(q, &r) <= config.max_overlap);
            (inside && free).then_some((p, r))
        });
        match placed {
            Some((p, r)) => patches.push((p, class, r)),
            None => log::warn!(
                "could not place a {} after {PLACEMENT_TRIES} tries, skipping",
                spec.name
            ),
        }
    }
    let noise =
        Normal::new(0.0, config.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = config.background + noise.sample(rng);
            for (p, _, _) in &patches {
                v += p.value(px, py);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let boxes = patches
        .iter()
        .map(|&(_, class, r)| GroundTruthBox {
            rect: r.clipped(size as f32, size as f32),
            class,
        })
        .collect();
    Ok(Scene {
        image: Tensor::new(data, &[1, 1, s, s])?,
        boxes,
    })
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer per component).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub const TRAIN_SPLIT: u64 = 0;
pub const EVAL_SPLIT: u64 = 1;

/// Scenes `0..count` of a split; each has its own derived seed, so the result does not depend
/// on how generation is scheduled.
pub fn synth_split(config: &SceneConfig, split: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split, i as u64]));
            synth_scene(config, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_no_boxes() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = synth_scene(&cfg, &mut rng).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.image.shape(), &[1, 1, 96, 96]);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = synth_split(&cfg, TRAIN_SPLIT, 3).unwrap();
        let b = synth_split(&cfg, TRAIN_SPLIT, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.boxes, y.boxes);
        }
    }

    #[test]
    fn box_edge_is_at_tenth_of_peak() {
        let p = Patch::Blob {
            cx: 40.0,
            cy: 40.0,
            sx: 3.0,
            sy: 5.0,
            peak: 0.8,
        };
        let r = p.extent();
        assert!((p.value(r.x2 as f64, 40.0) - 0.08).abs() < 1e-6);
        assert!((p.value(40.0, r.y1 as f64) - 0.08).abs() < 1e-6);
        let b = Patch::Bar {
            cx: 40.0,
            cy: 40.0,
            half_len: 6.0,
            sigma: 2.0,
            cos: 1.0,
            sin: 0.0,
            peak: 0.5,
        };
        assert!((b.value(b.extent().x2 as f64, 40.0) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_size() {
        let cfg = SceneConfig {
            image_size: 100,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_scene(&cfg, &mut rng).is_err());
    }
}
