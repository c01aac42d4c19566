//! Split-merge detection: cover the image with overlapping square windows,
//! detect per window, shift results back to image coordinates and resolve the
//! duplicates that overlapping windows produce.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, DetectorBackend, ImageRef};
use crate::geometry::{clip, BBox, Detection};
use crate::nms::{suppress, NmsConfig};

#[derive(Debug, Error, PartialEq)]
pub enum TilingError {
    #[error("window size must be at least 1 pixel")]
    ZeroWindow,
    #[error("overlap ratio {0} must lie in [0, 1)")]
    OverlapRatio(f64),
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    EmptyImage(u32, u32),
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("tile plan is for a {plan_w}x{plan_h} image but `{image}` is {image_w}x{image_h}")]
    PlanMismatch {
        image: String,
        plan_w: u32,
        plan_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("detector failed on `{image}` tile {index} at ({x}, {y}): {source}")]
    Tile {
        image: String,
        index: usize,
        x: f64,
        y: f64,
        #[source]
        source: BackendError,
    },
}

/// How per-tile results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// One NMS pass over the concatenated results of all tiles.
    #[default]
    GlobalNms,
    /// Concatenate without de-duplication.
    Concatenate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub image_width: u32,
    pub image_height: u32,
    pub window: u32,
    pub overlap_ratio: f64,
    /// Row-major.
    pub tiles: Vec<BBox>,
}

impl TilePlan {
    /// Distance between consecutive window origins along an axis.
    pub fn stride(&self) -> u32 {
        stride(self.window, self.overlap_ratio)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// `round_half_up(window * (1 - overlap))`, at least 1.
pub fn stride(window: u32, overlap_ratio: f64) -> u32 {
    let s = (window as f64 * (1.0 - overlap_ratio) + 0.5).floor();
    (s as u32).max(1)
}

fn axis_origins(dim: u32, window: u32, stride: u32) -> Vec<u32> {
    if dim <= window {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0u32;
    loop {
        if o + window >= dim {
            origins.push(dim - window);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

pub fn plan_tiles(
    width: u32,
    height: u32,
    window: u32,
    overlap_ratio: f64,
) -> Result<TilePlan, TilingError> {
    if window == 0 {
        return Err(TilingError::ZeroWindow);
    }
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(TilingError::OverlapRatio(overlap_ratio));
    }
    if width == 0 || height == 0 {
        return Err(TilingError::EmptyImage(width, height));
    }
    let s = stride(window, overlap_ratio);
    let xs = axis_origins(width, window, s);
    let ys = axis_origins(height, window, s);
    let tw = window.min(width) as f64;
    let th = window.min(height) as f64;
    let tiles = ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| BBox {
                x_min: x as f64,
                y_min: y as f64,
                x_max: x as f64 + tw,
                y_max: y as f64 + th,
            })
        })
        .collect();
    Ok(TilePlan {
        image_width: width,
        image_height: height,
        window,
        overlap_ratio,
        tiles,
    })
}

/// Shifts tile-local detections into image coordinates.
pub fn remap_to_global(dets: &[Detection], tile: &BBox) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            bbox: d.bbox.translate(tile.x_min, tile.y_min),
            score: d.score,
        })
        .collect()
}

/// Ground-truth boxes as seen from inside `tile`: tile-local clipped box and
/// the fraction of the original area that remains visible.
pub fn clip_ground_truth(gt: &[BBox], tile: &BBox) -> Vec<(BBox, f64)> {
    gt.iter()
        .filter_map(|b| {
            let c = clip(b, tile)?;
            let area = b.area();
            let visibility = if area > 0.0 { c.area() / area } else { 0.0 };
            Some((c.translate(-tile.x_min, -tile.y_min), visibility))
        })
        .collect()
}

/// Full split-merge pass with a global NMS merge.
///
/// Detectors that do not accept crops are called once on the whole image and
/// the plan is ignored apart from its dimension check.
pub fn split_merge_detect(
    image: &ImageRef,
    detector: &dyn DetectorBackend,
    plan: &TilePlan,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Detection>, DetectError> {
    split_merge_detect_with(image, detector, plan, nms_cfg, MergeMode::GlobalNms)
}

pub fn split_merge_detect_with(
    image: &ImageRef,
    detector: &dyn DetectorBackend,
    plan: &TilePlan,
    nms_cfg: &NmsConfig,
    merge: MergeMode,
) -> Result<Vec<Detection>, DetectError> {
    if plan.image_width != image.width || plan.image_height != image.height {
        return Err(DetectError::PlanMismatch {
            image: image.id.clone(),
            plan_w: plan.image_width,
            plan_h: plan.image_height,
            image_w: image.width,
            image_h: image.height,
        });
    }
    let caps = detector.capabilities();
    let full = [image.bounds()];
    let tiles: &[BBox] = if caps.accepts_crops { &plan.tiles } else { &full };

    let run_tile = |(index, tile): (usize, &BBox)| -> Result<Vec<Detection>, DetectError> {
        let local = detector
            .detect(image, tile)
            .map_err(|source| DetectError::Tile {
                image: image.id.clone(),
                index,
                x: tile.x_min,
                y: tile.y_min,
                source,
            })?;
        Ok(local
            .iter()
            .filter_map(|d| {
                // keep everything inside the tile, and therefore inside the image
                let global = d.bbox.translate(tile.x_min, tile.y_min);
                clip(&global, tile).map(|bbox| Detection {
                    bbox,
                    score: d.score,
                })
            })
            .collect())
    };

    let per_tile: Vec<Vec<Detection>> = if caps.concurrent_safe && tiles.len() > 1 {
        tiles
            .par_iter()
            .enumerate()
            .map(run_tile)
            .collect::<Result<_, _>>()?
    } else {
        tiles
            .iter()
            .enumerate()
            .map(run_tile)
            .collect::<Result<_, _>>()?
    };

    // tile order is row-major, so a stable sort on score alone gives
    // (score desc, tile origin, local index)
    let mut all: Vec<Detection> = per_tile.into_iter().flatten().collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));

    Ok(match merge {
        MergeMode::GlobalNms => suppress(&all, nms_cfg),
        MergeMode::Concatenate => all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, Capabilities};

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn origins(plan: &TilePlan) -> Vec<f64> {
        let mut xs: Vec<f64> = plan.tiles.iter().map(|t| t.x_min).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    #[test]
    fn exact_fit_single_tile() {
        let p = plan_tiles(256, 256, 256, 0.2).unwrap();
        assert_eq!(p.tiles, vec![bb(0., 0., 256., 256.)]);
    }

    #[test]
    fn default_plan_on_640() {
        let p = plan_tiles(640, 640, 256, 0.2).unwrap();
        assert_eq!(p.stride(), 205);
        assert_eq!(origins(&p), vec![0., 205., 384.]);
        assert_eq!(p.len(), 9);
        // row-major
        assert_eq!(p.tiles[1], bb(205., 0., 461., 256.));
        assert_eq!(p.tiles[3], bb(0., 205., 256., 461.));
    }

    #[test]
    fn small_image_gets_one_clamped_tile() {
        let p = plan_tiles(100, 300, 256, 0.2).unwrap();
        assert_eq!(p.tiles, vec![bb(0., 0., 100., 256.), bb(0., 44., 100., 300.)]);
    }

    #[test]
    fn invalid_plans_rejected() {
        assert_eq!(plan_tiles(10, 10, 0, 0.2), Err(TilingError::ZeroWindow));
        assert_eq!(plan_tiles(10, 10, 4, 1.0), Err(TilingError::OverlapRatio(1.0)));
        assert_eq!(plan_tiles(10, 10, 4, -0.1), Err(TilingError::OverlapRatio(-0.1)));
    }

    #[test]
    fn tiny_stride_is_at_least_one() {
        assert_eq!(stride(1, 0.9), 1);
        let p = plan_tiles(5, 5, 2, 0.99).unwrap();
        assert_eq!(origins(&p), vec![0., 1., 2., 3.]);
    }

    #[test]
    fn remap_examples() {
        let d = [Detection::new(bb(0., 0., 2., 2.), 0.7)];
        let tile = bb(205., 0., 461., 256.);
        let g = remap_to_global(&d, &tile);
        assert_eq!(g, vec![Detection::new(bb(205., 0., 207., 2.), 0.7)]);
        assert_eq!(remap_to_global(&d, &bb(0., 0., 256., 256.)), d.to_vec());
        let back: Vec<_> = g.iter().map(|d| d.bbox.translate(-205., 0.)).collect();
        assert_eq!(back, vec![d[0].bbox]);
    }

    #[test]
    fn clip_ground_truth_examples() {
        let tile = bb(0., 0., 256., 256.);
        let gt = [bb(10., 10., 20., 20.), bb(300., 300., 310., 310.), bb(250., 250., 262., 262.)];
        let v = clip_ground_truth(&gt, &tile);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0], (bb(10., 10., 20., 20.), 1.0));
        assert_eq!(v[1], (bb(250., 250., 256., 256.), 0.25));
    }

    struct Fixed {
        per_tile: Vec<Vec<Detection>>,
        caps: Capabilities,
    }

    impl DetectorBackend for Fixed {
        fn capabilities(&self) -> Capabilities {
            self.caps
        }
        fn detect(&self, image: &ImageRef, region: &BBox) -> Result<Vec<Detection>, BackendError> {
            let plan = plan_tiles(image.width, image.height, 256, 0.2).unwrap();
            let i = plan.tiles.iter().position(|t| t == region).unwrap();
            Ok(self.per_tile[i].clone())
        }
    }

    struct Failing;
    impl DetectorBackend for Failing {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn detect(&self, _: &ImageRef, region: &BBox) -> Result<Vec<Detection>, BackendError> {
            if region.x_min > 0.0 {
                Err(BackendError::Other("boom".into()))
            } else {
                Ok(vec![])
            }
        }
    }

    #[test]
    fn single_tile_passes_through_distinct_boxes() {
        let image = ImageRef::new("a", 256, 256);
        let dets = vec![
            Detection::new(bb(0., 0., 10., 10.), 0.9),
            Detection::new(bb(50., 50., 60., 60.), 0.8),
            Detection::new(bb(100., 0., 110., 10.), 0.7),
        ];
        let det = Fixed {
            per_tile: vec![dets.clone()],
            caps: Capabilities::default(),
        };
        let plan = plan_tiles(256, 256, 256, 0.2).unwrap();
        let out = split_merge_detect(&image, &det, &plan, &NmsConfig::soft(0.3, 0.001)).unwrap();
        assert_eq!(out, dets);
    }

    #[test]
    fn duplicate_across_tiles_is_merged() {
        // object at global (210,10)-(220,20) is seen in tiles 0 and 1
        let image = ImageRef::new("a", 640, 640);
        let mut per_tile = vec![vec![]; 9];
        per_tile[0] = vec![Detection::new(bb(210., 10., 220., 20.), 0.9)];
        per_tile[1] = vec![Detection::new(bb(5., 10., 15., 20.), 0.85)];
        let det = Fixed {
            per_tile,
            caps: Capabilities {
                concurrent_safe: true,
                accepts_crops: true,
            },
        };
        let plan = plan_tiles(640, 640, 256, 0.2).unwrap();
        let out = split_merge_detect(&image, &det, &plan, &NmsConfig::soft(0.3, 0.001)).unwrap();
        assert_eq!(out, vec![Detection::new(bb(210., 10., 220., 20.), 0.9)]);

        let raw = split_merge_detect_with(
            &image,
            &det,
            &plan,
            &NmsConfig::soft(0.3, 0.001),
            MergeMode::Concatenate,
        )
        .unwrap();
        assert_eq!(raw.len(), 2);
    }

    #[test]
    fn tile_failure_names_the_tile() {
        let image = ImageRef::new("img7", 640, 640);
        let plan = plan_tiles(640, 640, 256, 0.2).unwrap();
        let err = split_merge_detect(&image, &Failing, &plan, &NmsConfig::default()).unwrap_err();
        match err {
            DetectError::Tile { image, index, x, .. } => {
                assert_eq!(image, "img7");
                assert_eq!(index, 1);
                assert_eq!(x, 205.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plan_mismatch_rejected() {
        let image = ImageRef::new("a", 500, 640);
        let plan = plan_tiles(640, 640, 256, 0.2).unwrap();
        assert!(matches!(
            split_merge_detect(&image, &Failing, &plan, &NmsConfig::default()),
            Err(DetectError::PlanMismatch { .. })
        ));
    }

    #[test]
    fn every_small_object_fully_inside_some_tile() {
        // desk scale: 200x150 image, window 40, overlap 0.25 -> stride 30, overlap 10
        let plan = plan_tiles(200, 150, 40, 0.25).unwrap();
        let side = (plan.window - plan.stride()) as f64;
        assert_eq!(side, 10.0);
        for s in 1..=side as u32 {
            let s = s as f64;
            for y in 0..=(150 - s as u32) {
                for x in 0..=(200 - s as u32) {
                    let b = bb(x as f64, y as f64, x as f64 + s, y as f64 + s);
                    assert!(plan.tiles.iter().any(|t| t.contains_box(&b)), "{b:?}");
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn tiles_stay_inside_and_cover(w in 1u32..400, h in 1u32..400, win in 1u32..300, r in 0.0f64..0.9) {
            let p = plan_tiles(w, h, win, r).unwrap();
            let img = bb(0., 0., w as f64, h as f64);
            for t in &p.tiles {
                proptest::prop_assert!(img.contains_box(t));
            }
            // every pixel cell is inside some tile
            for y in (0..h).step_by(7) {
                for x in (0..w).step_by(7) {
                    let cell = bb(x as f64, y as f64, x as f64 + 1., y as f64 + 1.);
                    proptest::prop_assert!(p.tiles.iter().any(|t| t.contains_box(&cell)));
                }
            }
        }

        #[test]
        fn consecutive_tiles_overlap_enough(w in 1u32..800, win in 1u32..300, r in 0.0f64..0.9) {
            let p = plan_tiles(w, 1, win, r).unwrap();
            let min_overlap = (win as f64 * r).floor();
            for pair in p.tiles.windows(2) {
                let overlap = pair[0].x_max - pair[1].x_min;
                proptest::prop_assert!(overlap >= min_overlap, "{overlap} < {min_overlap}");
            }
        }
    }
}
