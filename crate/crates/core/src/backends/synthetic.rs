//! Seeded stand-ins for the two networks. They turn ground truth into noisy
//! predictions with a small, explicit error model:
//!
//! * detector: misses grow with local crowding (`p = base · exp(-decay · neighbours)`),
//!   fragments below a visibility floor are never detected, boxes are
//!   jittered, and Poisson false positives are sprinkled per region;
//! * density: the integral over-predicts by
//!   `offset · max(0, 1 - N / saturation)` plus Gaussian noise.
//!
//! All per-object draws (hit, score, jitter) come from a stream keyed by
//! `(seed, image id, object index)`, so an object fully visible in two
//! overlapping tiles yields the same box in both. False positives are keyed by
//! `(seed, image id, tile origin)`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{BackendError, Capabilities, DensityBackend, DetectorBackend, ImageRef};
use crate::density::{generate_density_map, DensityMap, KernelConfig};
use crate::geometry::{clip, BBox, Detection};
use crate::seed::{hash_str, rng_for};
use crate::synthgen::Scene;

const STREAM_OBJECT: u64 = 1;
const STREAM_FALSE_POSITIVE: u64 = 2;
const STREAM_DENSITY: u64 = 3;

const SCORE_MIN: f64 = 0.3;
const FP_SIDE: (f64, f64) = (6.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticErrorModel {
    pub base_detect_prob: f64,
    /// Per-neighbour decay of the detection probability.
    pub crowd_decay: f64,
    /// Neighbour radius as a multiple of the scene's median box side.
    pub neighbor_radius_factor: f64,
    /// Fragments whose visible fraction is below this are never detected.
    pub fragment_min_visibility: f64,
    /// Expected false positives per whole image.
    pub fp_rate: f64,
    pub density_overpred_offset: f64,
    pub density_saturation: f64,
    /// Box jitter in pixels for the detector, count noise for the density map.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticErrorModel {
    fn default() -> Self {
        Self {
            base_detect_prob: 0.95,
            crowd_decay: 0.02,
            neighbor_radius_factor: 2.0,
            fragment_min_visibility: 0.8,
            fp_rate: 0.5,
            density_overpred_offset: 10.0,
            density_saturation: 200.0,
            noise_sd: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticErrorModel {
    /// Detector that reproduces ground truth exactly.
    pub fn noiseless() -> Self {
        Self {
            base_detect_prob: 1.0,
            crowd_decay: 0.0,
            fp_rate: 0.0,
            density_overpred_offset: 0.0,
            noise_sd: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        if !in_unit(self.base_detect_prob) || !in_unit(self.fragment_min_visibility) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        if !(non_neg(self.crowd_decay)
            && non_neg(self.neighbor_radius_factor)
            && non_neg(self.fp_rate)
            && non_neg(self.density_overpred_offset)
            && non_neg(self.noise_sd))
        {
            return Err("rates must be finite and non-negative".into());
        }
        if !(self.density_saturation.is_finite() && self.density_saturation > 0.0) {
            return Err("density_saturation must be positive".into());
        }
        Ok(())
    }

    /// Expected density-map integral before noise.
    pub fn expected_density_count(&self, n: usize) -> f64 {
        let n = n as f64;
        n + self.density_overpred_offset * (1.0 - n / self.density_saturation).max(0.0)
    }
}

/// Number of other objects whose centre lies within `radius_factor` times
/// the median box side.
fn neighbour_counts(boxes: &[BBox], radius_factor: f64) -> Vec<usize> {
    if boxes.is_empty() {
        return Vec::new();
    }
    let mut sides: Vec<f64> = boxes.iter().map(|b| b.area().sqrt()).collect();
    sides.sort_by(f64::total_cmp);
    let mid = sides.len() / 2;
    let median = if sides.len() % 2 == 1 {
        sides[mid]
    } else {
        0.5 * (sides[mid - 1] + sides[mid])
    };
    let r2 = (radius_factor * median).powi(2);
    let centers: Vec<_> = boxes.iter().map(BBox::center).collect();
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(j, o)| j != i && (o.x - c.x).powi(2) + (o.y - c.y).powi(2) <= r2)
                .count()
        })
        .collect()
}

fn jittered(b: &BBox, d: [f64; 4]) -> Option<BBox> {
    let (x0, x1) = (b.x_min + d[0], b.x_max + d[2]);
    let (y0, y1) = (b.y_min + d[1], b.y_max + d[3]);
    BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
}

fn detect_with_neighbours(
    scene: &Scene,
    neighbours: &[usize],
    m: &SyntheticErrorModel,
    tile: Option<&BBox>,
) -> Vec<Detection> {
    let full = scene.bounds();
    let region = tile.copied().unwrap_or(full);
    let image_key = hash_str(&scene.id);
    let jitter = Normal::new(0.0, m.noise_sd).ok();
    let mut out = Vec::new();

    for (i, gt) in scene.boxes.iter().enumerate() {
        let Some(visible) = clip(gt, &region) else {
            continue;
        };
        // fixed draw order per object, independent of the tile
        let mut rng = rng_for(m.seed, &[STREAM_OBJECT, image_key, i as u64]);
        let hit: f64 = rng.random();
        let score = rng.random_range(SCORE_MIN..=1.0);
        let d = match &jitter {
            Some(n) if m.noise_sd > 0.0 => [0; 4].map(|_| n.sample(&mut rng)),
            _ => [0.0; 4],
        };

        let visibility = if gt.area() > 0.0 {
            visible.area() / gt.area()
        } else {
            0.0
        };
        if visibility < m.fragment_min_visibility {
            continue;
        }
        let p = m.base_detect_prob * (-m.crowd_decay * neighbours[i] as f64).exp();
        if hit >= p {
            continue;
        }
        if let Some(b) = jittered(&visible, d).and_then(|b| clip(&b, &region)) {
            out.push(Detection {
                bbox: b.translate(-region.x_min, -region.y_min),
                score,
            });
        }
    }

    let rate = m.fp_rate * region.area() / full.area();
    if rate > 0.0 {
        let mut rng = rng_for(
            m.seed,
            &[
                STREAM_FALSE_POSITIVE,
                image_key,
                region.x_min.to_bits(),
                region.y_min.to_bits(),
            ],
        );
        let k = Poisson::new(rate).unwrap().sample(&mut rng) as usize;
        for _ in 0..k {
            let w = rng.random_range(FP_SIDE.0..FP_SIDE.1).min(region.width());
            let h = rng.random_range(FP_SIDE.0..FP_SIDE.1).min(region.height());
            let x = rng.random_range(0.0..=(region.width() - w));
            let y = rng.random_range(0.0..=(region.height() - h));
            let score = rng.random_range(SCORE_MIN..=1.0);
            out.push(Detection {
                bbox: BBox::from_xywh(x, y, w, h).unwrap(),
                score,
            });
        }
    }
    out
}

/// Simulated detector output for `scene`, restricted to `tile` when given
/// (boxes then in tile-local coordinates).
pub fn synthetic_detect(
    scene: &Scene,
    m: &SyntheticErrorModel,
    tile: Option<&BBox>,
) -> Vec<Detection> {
    let neighbours = neighbour_counts(&scene.boxes, m.neighbor_radius_factor);
    detect_with_neighbours(scene, &neighbours, m, tile)
}

/// Simulated full-resolution density prediction for `scene`.
pub fn synthetic_density(scene: &Scene, m: &SyntheticErrorModel, kernel: &KernelConfig) -> DensityMap {
    let n = scene.points.len();
    let mut target = m.expected_density_count(n);
    if m.noise_sd > 0.0 {
        let mut rng = rng_for(m.seed, &[STREAM_DENSITY, hash_str(&scene.id)]);
        target += Normal::new(0.0, m.noise_sd).unwrap().sample(&mut rng);
    }
    let target = target.max(0.0);

    let gt = generate_density_map(&scene.points, scene.width, scene.height, kernel)
        .expect("scene points lie inside the image");
    let base = gt.integrate();
    if target <= base {
        return if base > 0.0 { gt.scaled(target / base) } else { gt };
    }
    let cells = scene.width as usize * scene.height as usize;
    let spread = DensityMap::from_values(
        scene.width,
        scene.height,
        vec![(target - base) / cells as f64; cells],
    )
    .expect("non-negative fill");
    gt.plus(&spread)
}

/// [`synthetic_detect`] as a backend over a fixed set of scenes.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    model: SyntheticErrorModel,
    scenes: HashMap<String, (Scene, Vec<usize>)>,
}

impl SyntheticDetector {
    pub fn new<'a>(model: SyntheticErrorModel, scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let scenes = scenes
            .into_iter()
            .map(|s| {
                let n = neighbour_counts(&s.boxes, model.neighbor_radius_factor);
                (s.id.clone(), (s.clone(), n))
            })
            .collect();
        Self { model, scenes }
    }

    pub fn model(&self) -> &SyntheticErrorModel {
        &self.model
    }
}

impl DetectorBackend for SyntheticDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            accepts_crops: true,
        }
    }

    fn detect(&self, image: &ImageRef, region: &BBox) -> Result<Vec<Detection>, BackendError> {
        let (scene, neighbours) = self
            .scenes
            .get(&image.id)
            .ok_or_else(|| BackendError::UnknownImage(image.id.clone()))?;
        Ok(detect_with_neighbours(scene, neighbours, &self.model, Some(region)))
    }
}

/// [`synthetic_density`] sum-pooled to `1 / output_scale` resolution.
#[derive(Debug, Clone)]
pub struct SyntheticDensity {
    model: SyntheticErrorModel,
    kernel: KernelConfig,
    output_scale: u32,
    scenes: HashMap<String, Scene>,
}

impl SyntheticDensity {
    pub fn new<'a>(
        model: SyntheticErrorModel,
        kernel: KernelConfig,
        output_scale: u32,
        scenes: impl IntoIterator<Item = &'a Scene>,
    ) -> Self {
        Self {
            model,
            kernel,
            output_scale: output_scale.max(1),
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s.clone())).collect(),
        }
    }
}

impl DensityBackend for SyntheticDensity {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            accepts_crops: false,
        }
    }

    fn output_scale(&self) -> u32 {
        self.output_scale
    }

    fn estimate_native(&self, image: &ImageRef) -> Result<DensityMap, BackendError> {
        let scene = self
            .scenes
            .get(&image.id)
            .ok_or_else(|| BackendError::UnknownImage(image.id.clone()))?;
        Ok(synthetic_density(scene, &self.model, &self.kernel).sum_pool(self.output_scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::estimate_density;
    use crate::synthgen::{generate_scene, Clustering, SceneSpec};
    use crate::tiling::clip_ground_truth;

    fn scene(n: u32, seed: u64) -> Scene {
        generate_scene(&SceneSpec::default().with_count(n, n), seed).unwrap()
    }

    #[test]
    fn noiseless_detector_is_identity() {
        let s = scene(40, 1);
        let out = synthetic_detect(&s, &SyntheticErrorModel::noiseless(), None);
        assert_eq!(out.len(), 40);
        for (d, gt) in out.iter().zip(&s.boxes) {
            assert_eq!(d.bbox, *gt);
            assert!(d.score > 0.0 && d.score <= 1.0);
        }
    }

    #[test]
    fn low_visibility_fragment_dropped() {
        let gt = BBox::new(250., 250., 262., 262.).unwrap();
        let tile = BBox::new(0., 0., 256., 256.).unwrap();
        assert_eq!(clip_ground_truth(&[gt], &tile)[0].1, 0.25);
        let s = Scene {
            id: "f".into(),
            width: 640,
            height: 640,
            boxes: vec![gt],
            points: vec![gt.center()],
            density_level: Default::default(),
        };
        let m = SyntheticErrorModel {
            fragment_min_visibility: 0.5,
            ..SyntheticErrorModel::noiseless()
        };
        assert!(synthetic_detect(&s, &m, Some(&tile)).is_empty());
        let m = SyntheticErrorModel {
            fragment_min_visibility: 0.2,
            ..m
        };
        let out = synthetic_detect(&s, &m, Some(&tile));
        assert_eq!(out[0].bbox, BBox::new(250., 250., 256., 256.).unwrap());
    }

    #[test]
    fn deterministic_and_tile_consistent() {
        let s = scene(60, 4);
        let m = SyntheticErrorModel::default().with_seed(17);
        assert_eq!(synthetic_detect(&s, &m, None), synthetic_detect(&s, &m, None));
        // an object fully inside two tiles yields the same global box in both
        let a = BBox::new(0., 0., 400., 400.).unwrap();
        let b = BBox::new(100., 100., 500., 500.).unwrap();
        let m0 = SyntheticErrorModel { fp_rate: 0.0, noise_sd: 0.0, ..m };
        let da: Vec<_> = synthetic_detect(&s, &m0, Some(&a))
            .into_iter()
            .map(|d| d.bbox.translate(a.x_min, a.y_min))
            .collect();
        let db: Vec<_> = synthetic_detect(&s, &m0, Some(&b))
            .into_iter()
            .map(|d| d.bbox.translate(b.x_min, b.y_min))
            .collect();
        let inner = BBox::new(101., 101., 399., 399.).unwrap();
        let ia: Vec<_> = da.iter().filter(|x| inner.contains_box(x)).collect();
        let ib: Vec<_> = db.iter().filter(|x| inner.contains_box(x)).collect();
        assert_eq!(ia, ib);
    }

    #[test]
    fn crowding_lowers_detected_count() {
        let uniform_spec = SceneSpec {
            clustering: Clustering {
                fraction: 0.0,
                ..Clustering::default()
            },
            ..SceneSpec::default().with_count(200, 200)
        };
        let clustered_spec = SceneSpec {
            clustering: Clustering {
                fraction: 1.0,
                clusters: 2,
                sigma: 50.0,
            },
            ..uniform_spec.clone()
        };
        let uniform = generate_scene(&uniform_spec, 1).unwrap();
        let clustered = generate_scene(&clustered_spec, 1).unwrap();
        let m = SyntheticErrorModel {
            fp_rate: 0.0,
            ..SyntheticErrorModel::default()
        };
        let mean = |s: &Scene| -> f64 {
            (0..1000u64)
                .map(|seed| synthetic_detect(s, &m.with_seed(seed), None).len() as f64)
                .sum::<f64>()
                / 1000.0
        };
        let (mu, mc) = (mean(&uniform), mean(&clustered));
        assert!(mc < mu, "clustered {mc} vs uniform {mu}");
    }

    #[test]
    fn density_integral_follows_formula() {
        let kernel = KernelConfig::default();
        let s = scene(37, 2);
        let noiseless = SyntheticErrorModel::noiseless();
        assert!((synthetic_density(&s, &noiseless, &kernel).integrate() - 37.0).abs() < 1e-6);

        let m = SyntheticErrorModel {
            density_overpred_offset: 10.0,
            density_saturation: 200.0,
            noise_sd: 0.0,
            ..SyntheticErrorModel::default()
        };
        let empty = scene(0, 2);
        assert!((synthetic_density(&empty, &m, &kernel).integrate() - 10.0).abs() < 1e-6);
        let full = scene(200, 2);
        assert!((synthetic_density(&full, &m, &kernel).integrate() - 200.0).abs() < 1e-6);
        // over-prediction non-increasing in N
        let over: Vec<f64> = (0..=300).map(|n| m.expected_density_count(n) - n as f64).collect();
        assert!(over.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn density_backend_round_trips_scale() {
        let s = scene(25, 3);
        let den = SyntheticDensity::new(
            SyntheticErrorModel::noiseless(),
            KernelConfig::default(),
            8,
            [&s],
        );
        let native = den.estimate_native(&s.image_ref()).unwrap();
        assert_eq!((native.width(), native.height()), (80, 80));
        let up = estimate_density(&den, &s.image_ref()).unwrap();
        assert!((up.integrate() - 25.0).abs() < 1e-6);
    }

    #[test]
    fn unknown_image_errors() {
        let det = SyntheticDetector::new(SyntheticErrorModel::default(), []);
        let img = ImageRef::new("x", 10, 10);
        assert_eq!(
            det.detect(&img, &img.bounds()),
            Err(BackendError::UnknownImage("x".into()))
        );
    }

    #[test]
    fn model_validation() {
        assert!(SyntheticErrorModel::default().validate().is_ok());
        let bad = SyntheticErrorModel {
            base_detect_prob: 1.5,
            ..SyntheticErrorModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
