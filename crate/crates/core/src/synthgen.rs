//! Seeded synthetic scenes: annotation-only images whose object counts, size
//! mix and clustering follow a declared [`SceneSpec`].
//!
//! Object sizes use the COCO area classes (small below 32², large above 96²).
//! The default mix is 72.89 % small, 27.07 % medium and 0.04 % large.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::ImageRef;
use crate::geometry::{iou, BBox, Point};
use crate::seed;

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;
const LARGE_MAX_SIDE: f64 = 128.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("could only place {achieved} of {requested} objects within the retry budget")]
    Infeasible { requested: usize, achieved: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityLevel {
    #[default]
    Normal,
    High,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
    pub points: Vec<Point>,
    pub density_level: DensityLevel,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }

    pub fn image_ref(&self) -> ImageRef {
        ImageRef::new(&self.id, self.width, self.height)
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64,
            y_max: self.height as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn of(b: &BBox) -> Self {
        let a = b.area();
        if a < SMALL_AREA {
            SizeClass::Small
        } else if a <= LARGE_AREA {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for SizeMix {
    fn default() -> Self {
        Self {
            small: 0.7289,
            medium: 0.2707,
            large: 0.0004,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountBin {
    pub min: u32,
    pub max: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountDistribution {
    /// Uniform over `min..=max`.
    Uniform { min: u32, max: u32 },
    /// Pick a bin by weight, then uniform inside it.
    Histogram(Vec<CountBin>),
}

impl CountDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self {
            CountDistribution::Uniform { min, max } => rng.random_range(*min..=*max),
            CountDistribution::Histogram(bins) => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                let mut u = rng.random_range(0.0..total);
                for b in bins {
                    if u < b.weight {
                        return rng.random_range(b.min..=b.max);
                    }
                    u -= b.weight;
                }
                let last = bins.last().unwrap();
                rng.random_range(last.min..=last.max)
            }
        }
    }

    /// P(count <= k).
    pub fn cdf(&self, k: u32) -> f64 {
        let bin_cdf = |min: u32, max: u32| -> f64 {
            if k < min {
                0.0
            } else if k >= max {
                1.0
            } else {
                (k - min + 1) as f64 / (max - min + 1) as f64
            }
        };
        match self {
            CountDistribution::Uniform { min, max } => bin_cdf(*min, *max),
            CountDistribution::Histogram(bins) => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                bins.iter()
                    .map(|b| b.weight / total * bin_cdf(b.min, b.max))
                    .sum()
            }
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match self {
            CountDistribution::Uniform { min, max } => min <= max,
            CountDistribution::Histogram(bins) => {
                !bins.is_empty()
                    && bins.iter().all(|b| b.min <= b.max && b.weight >= 0.0)
                    && bins.iter().map(|b| b.weight).sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(format!("bad count distribution {self:?}")))
        }
    }
}

/// Fraction of objects drawn around Gaussian cluster centres; the rest are
/// placed uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub fraction: f64,
    pub clusters: u32,
    /// Cluster spread in pixels.
    pub sigma: f64,
}

impl Default for Clustering {
    fn default() -> Self {
        Self {
            fraction: 0.3,
            clusters: 3,
            sigma: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub count: CountDistribution,
    pub size_mix: SizeMix,
    /// Smallest object side in pixels.
    pub min_side: f64,
    pub clustering: Clustering,
    /// Largest IoU allowed between any two ground-truth boxes.
    pub max_overlap: f64,
    /// Placement attempts per object before giving up.
    pub retry_budget: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 640,
            count: CountDistribution::Uniform { min: 1, max: 50 },
            size_mix: SizeMix::default(),
            min_side: 6.0,
            clustering: Clustering::default(),
            max_overlap: 0.3,
            retry_budget: 200,
        }
    }
}

impl SceneSpec {
    /// Crowded scenes, 150 to 300 objects.
    pub fn high_density() -> Self {
        Self {
            count: CountDistribution::Uniform { min: 150, max: 300 },
            ..Self::default()
        }
    }

    pub fn with_count(mut self, min: u32, max: u32) -> Self {
        self.count = CountDistribution::Uniform { min, max };
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let m = &self.size_mix;
        if [m.small, m.medium, m.large].iter().any(|f| !(0.0..=1.0).contains(f))
            || (m.small + m.medium + m.large - 1.0).abs() > 1e-6
        {
            return Err(SynthError::InvalidSpec(format!("size mix {m:?} must sum to 1")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidSpec("empty image".into()));
        }
        if !(self.min_side >= 1.0 && self.min_side < 32.0) {
            return Err(SynthError::InvalidSpec(format!("min_side {}", self.min_side)));
        }
        let c = &self.clustering;
        if !(0.0..=1.0).contains(&c.fraction) || c.sigma < 0.0 || (c.fraction > 0.0 && c.clusters == 0) {
            return Err(SynthError::InvalidSpec(format!("clustering {c:?}")));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(SynthError::InvalidSpec(format!("max_overlap {}", self.max_overlap)));
        }
        self.count.validate()
    }

    fn sample_class(&self, rng: &mut ChaCha8Rng) -> SizeClass {
        let u: f64 = rng.random();
        if u < self.size_mix.small {
            SizeClass::Small
        } else if u < self.size_mix.small + self.size_mix.medium {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    /// Integer (w, h) whose area falls in `class`. Sides skew towards the
    /// lower end of the class range.
    fn sample_size(&self, class: SizeClass, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (lo, hi) = match class {
            SizeClass::Small => (self.min_side, 32.0),
            SizeClass::Medium => (32.0, 96.0),
            SizeClass::Large => (96.0, LARGE_MAX_SIDE),
        };
        let max_w = self.width as f64;
        let max_h = self.height as f64;
        for _ in 0..64 {
            let u: f64 = rng.random();
            let side = lo + (hi - lo) * u * u;
            let aspect = rng.random_range(-0.3f64..0.3).exp();
            let w = (side * aspect).round().clamp(1.0, max_w);
            let h = (side / aspect).round().clamp(1.0, max_h);
            let b = BBox::from_xywh(0.0, 0.0, w, h).unwrap();
            if SizeClass::of(&b) == class {
                return (w, h);
            }
        }
        let side = match class {
            SizeClass::Small => lo.ceil(),
            SizeClass::Medium => 48.0,
            SizeClass::Large => 112.0,
        };
        (side.min(max_w), side.min(max_h))
    }
}

/// One scene, fully determined by `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SynthError> {
    generate_scene_with_id(spec, seed, format!("scene-{seed}"))
}

fn generate_scene_with_id(spec: &SceneSpec, seed: u64, id: String) -> Result<Scene, SynthError> {
    spec.validate()?;
    let mut rng = seed::rng_for(seed, &[0x5CE7E]);
    let n = spec.count.sample(&mut rng) as usize;
    let (wf, hf) = (spec.width as f64, spec.height as f64);

    let centers: Vec<(f64, f64)> = (0..spec.clustering.clusters)
        .map(|_| (rng.random_range(0.0..wf), rng.random_range(0.0..hf)))
        .collect();
    let spread = Normal::new(0.0, spec.clustering.sigma.max(1e-9)).unwrap();

    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = spec.sample_class(&mut rng);
        let (w, h) = spec.sample_size(class, &mut rng);
        let clustered = !centers.is_empty() && rng.random::<f64>() < spec.clustering.fraction;
        let mut placed = None;
        for _ in 0..spec.retry_budget.max(1) {
            let (cx, cy) = if clustered {
                let c = centers[rng.random_range(0..centers.len())];
                (c.0 + spread.sample(&mut rng), c.1 + spread.sample(&mut rng))
            } else {
                (rng.random_range(0.0..wf), rng.random_range(0.0..hf))
            };
            let x = (cx - w / 2.0).round();
            let y = (cy - h / 2.0).round();
            if x < 0.0 || y < 0.0 || x + w > wf || y + h > hf {
                continue;
            }
            let b = BBox::from_xywh(x, y, w, h).unwrap();
            if boxes.iter().all(|o| iou(o, &b) <= spec.max_overlap) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                log::warn!(
                    "placement gave up after {} attempts ({} of {n} placed)",
                    spec.retry_budget,
                    boxes.len()
                );
                return Err(SynthError::Infeasible {
                    requested: n,
                    achieved: boxes.len(),
                });
            }
        }
    }
    let points = boxes.iter().map(BBox::center).collect();
    Ok(Scene {
        id,
        width: spec.width,
        height: spec.height,
        boxes,
        points,
        density_level: DensityLevel::Normal,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn subset(&self, level: DensityLevel) -> Dataset {
        Dataset {
            scenes: self
                .scenes
                .iter()
                .filter(|s| s.density_level == level)
                .cloned()
                .collect(),
        }
    }

    pub fn manifest(&self, seed: Option<u64>, high_density_cut: Option<u32>) -> Manifest {
        Manifest {
            version: 1,
            seed,
            high_density_cut,
            images: self
                .scenes
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    count: s.count(),
                    density_level: s.density_level,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub count: usize,
    pub density_level: DensityLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: Option<u64>,
    pub high_density_cut: Option<u32>,
    pub images: Vec<ManifestEntry>,
}

fn mark_density(scene: &mut Scene, high_density_cut: Option<u32>) {
    scene.density_level = match high_density_cut {
        Some(cut) if scene.count() >= cut as usize => DensityLevel::High,
        _ => DensityLevel::Normal,
    };
}

/// `n_images` scenes with ids `img_0000`, `img_0001`, …; scenes whose count
/// reaches `high_density_cut` are flagged as high density.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_images: usize,
    seed: u64,
    high_density_cut: Option<u32>,
) -> Result<Dataset, SynthError> {
    generate_parts(&[(spec, n_images)], seed, high_density_cut)
}

/// Concatenates several specs into one dataset with a shared id sequence.
pub fn generate_parts(
    parts: &[(&SceneSpec, usize)],
    seed: u64,
    high_density_cut: Option<u32>,
) -> Result<Dataset, SynthError> {
    if parts.iter().map(|p| p.1).sum::<usize>() == 0 {
        return Err(SynthError::InvalidSpec("dataset needs at least one image".into()));
    }
    let mut scenes = Vec::new();
    for (spec, n) in parts {
        for _ in 0..*n {
            let i = scenes.len();
            let mut s =
                generate_scene_with_id(spec, seed::derive(seed, &[i as u64]), format!("img_{i:04}"))?;
            mark_density(&mut s, high_density_cut);
            scenes.push(s);
        }
    }
    Ok(Dataset { scenes })
}

pub const BENCHMARK_NORMAL_IMAGES: usize = 100;
pub const BENCHMARK_HIGH_IMAGES: usize = 20;
pub const BENCHMARK_HIGH_CUT: u32 = 150;

/// Reference benchmark: 100 scenes with 1–50 objects followed by 20 scenes
/// with 150–300 objects, the latter flagged high density.
pub fn benchmark_dataset(seed: u64) -> Result<Dataset, SynthError> {
    generate_parts(
        &[
            (&SceneSpec::default(), BENCHMARK_NORMAL_IMAGES),
            (&SceneSpec::high_density(), BENCHMARK_HIGH_IMAGES),
        ],
        seed,
        Some(BENCHMARK_HIGH_CUT),
    )
}
