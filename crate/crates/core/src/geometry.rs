//! Axis-aligned box arithmetic.
//!
//! Coordinates are real-valued pixels with the origin at the top-left corner,
//! x growing right and y growing down. Boxes are measured as
//! `(x_max - x_min) * (y_max - y_min)`; there is no "+1" pixel convention.

use serde::{Deserialize, Serialize};

/// An axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, returning `None` if the corners are out of order or not finite.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.is_valid().then_some(b)
    }

    /// Box from an origin and a size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Option<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point {
            x: 0.5 * (self.x_min + self.x_max),
            y: 0.5 * (self.y_min + self.y_max),
        }
    }

    /// True if `other` lies entirely inside `self` (closed intervals).
    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        translate(self, dx, dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} out of [0,1]");
        Self { bbox, score }
    }
}

/// A point label in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Intersection over union. Degenerate boxes score 0 against everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection of `b` with `window`, or `None` when they do not overlap.
///
/// Boxes that only touch along an edge produce a zero-area result, which is
/// treated as empty.
pub fn clip(b: &BBox, window: &BBox) -> Option<BBox> {
    let x_min = b.x_min.max(window.x_min);
    let y_min = b.y_min.max(window.y_min);
    let x_max = b.x_max.min(window.x_max);
    let y_max = b.y_max.min(window.y_max);
    if x_min < x_max && y_min < y_max {
        Some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    } else {
        None
    }
}

pub fn translate(b: &BBox, dx: f64, dy: f64) -> BBox {
    BBox {
        x_min: b.x_min + dx,
        y_min: b.y_min + dy,
        x_max: b.x_max + dx,
        y_max: b.y_max + dy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Pixel-overlap oracle: sample both boxes on a fine grid and count cells.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let x0 = a.x_min.min(b.x_min);
        let y0 = a.y_min.min(b.y_min);
        let x1 = a.x_max.max(b.x_max);
        let y1 = a.y_max.max(b.y_max);
        let nx = ((x1 - x0) / res).ceil() as usize;
        let ny = ((y1 - y0) / res).ceil() as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for j in 0..ny {
            let y = y0 + (j as f64 + 0.5) * res;
            for i in 0..nx {
                let x = x0 + (i as f64 + 0.5) * res;
                let p = Point::new(x, y);
                let in_a = a.contains_point(&p);
                let in_b = b.contains_point(&p);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bb(0., 0., 10., 10.), &bb(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bb(0., 0., 1., 1.), &bb(5., 5., 6., 6.)), 0.0);
        let v = iou(&bb(0., 0., 2., 2.), &bb(1., 1., 3., 3.));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
        let oracle = raster_iou(&bb(0., 0., 2., 2.), &bb(1., 1., 3., 3.), 0.01);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        let d = bb(3., 3., 3., 8.);
        assert_eq!(iou(&d, &d), 0.0);
        assert_eq!(iou(&d, &bb(0., 0., 10., 10.)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2., 0., 1., 1.).is_none());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_none());
    }

    #[test]
    fn clip_examples() {
        let w = bb(0., 0., 10., 10.);
        assert_eq!(clip(&bb(2., 2., 4., 4.), &w), Some(bb(2., 2., 4., 4.)));
        assert_eq!(clip(&bb(-5., -5., -1., -1.), &w), None);
        assert_eq!(
            clip(&bb(250., 250., 262., 262.), &bb(0., 0., 256., 256.)),
            Some(bb(250., 250., 256., 256.))
        );
    }

    #[test]
    fn translate_examples() {
        let b = bb(0., 0., 2., 2.);
        assert_eq!(translate(&b, 0., 0.), b);
        assert_eq!(translate(&b, 205., 0.), bb(205., 0., 207., 2.));
    }

    #[test]
    fn iou_matches_raster_oracle_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // corners on a 0.05 grid, so a 0.01 raster counts areas exactly
        let snap = |v: f64| (v * 20.0).round() / 20.0;
        let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
            let x = snap(rng.random_range(0.0..6.0));
            let y = snap(rng.random_range(0.0..6.0));
            let w = snap(rng.random_range(0.2..4.0));
            let h = snap(rng.random_range(0.2..4.0));
            bb(x, y, x + w, y + h)
        };
        for _ in 0..1000 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let exact = iou(&a, &b);
            let oracle = raster_iou(&a, &b, 0.01);
            assert!((exact - oracle).abs() <= 1e-6, "{a:?} {b:?} {exact} {oracle}");
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -50i32..50, dy in -50i32..50) {
            let (dx, dy) = (dx as f64, dy as f64);
            let moved = iou(&translate(&a, dx, dy), &translate(&b, dx, dy));
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn clip_is_contained(a in arb_box(), w in arb_box()) {
            if let Some(c) = clip(&a, &w) {
                prop_assert!(c.is_valid());
                prop_assert!(a.contains_box(&c) && w.contains_box(&c));
                prop_assert!(c.area() <= a.area().min(w.area()) + 1e-9);
            }
        }

        #[test]
        fn translate_inverse(a in arb_box(), dx in -50i32..50, dy in -50i32..50) {
            let (dx, dy) = (dx as f64, dy as f64);
            let back = translate(&translate(&a, dx, dy), -dx, -dy);
            for (u, v) in back.to_array().iter().zip(a.to_array()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
