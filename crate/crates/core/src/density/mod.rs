//! Density maps: ground truth from point labels, counting by integration and
//! count-preserving bilinear upsampling of low-resolution predictions.

mod codec;

pub use codec::{read_csv, read_grid, write_csv, write_grid, GRID_HEADER_LEN, GRID_MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("invalid kernel: sigma {sigma}, truncation {truncation}")]
    InvalidKernel { sigma: f64, truncation: f64 },
    #[error("grid of {width}x{height} needs {expected} values, got {got}")]
    Shape {
        width: u32,
        height: u32,
        expected: usize,
        got: usize,
    },
    #[error("density value {value} at index {index} is negative or not finite")]
    BadValue { index: usize, value: f64 },
    #[error("upsampling factor must be at least 1")]
    ZeroFactor,
    #[error("malformed density grid: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A non-negative grid of objects-per-cell, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Result<Self, DensityError> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(DensityError::Shape {
                width,
                height,
                expected,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(DensityError::BadValue { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Sum of all cells.
    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    /// Multiplies every cell by `factor` (must be non-negative).
    pub fn scaled(mut self, factor: f64) -> Self {
        debug_assert!(factor >= 0.0);
        self.values.iter_mut().for_each(|v| *v *= factor);
        self
    }

    /// Cell-wise sum of two maps of equal shape.
    pub fn plus(mut self, other: &DensityMap) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
        self
    }

    /// Sum-pools non-overlapping `factor x factor` blocks; the output is
    /// `ceil(width / factor) x ceil(height / factor)` and keeps the integral.
    pub fn sum_pool(&self, factor: u32) -> DensityMap {
        let f = factor.max(1);
        let ow = self.width.div_ceil(f);
        let oh = self.height.div_ceil(f);
        let mut out = DensityMap::zeros(ow, oh);
        for y in 0..self.height {
            for x in 0..self.width {
                let o = (y / f) as usize * ow as usize + (x / f) as usize;
                out.values[o] += self.get(x, y);
            }
        }
        out
    }

    /// Keeps the top-left `width x height` window.
    pub fn crop(&self, width: u32, height: u32) -> DensityMap {
        let w = width.min(self.width);
        let h = height.min(self.height);
        let mut values = Vec::with_capacity(w as usize * h as usize);
        for y in 0..h {
            let row = y as usize * self.width as usize;
            values.extend_from_slice(&self.values[row..row + w as usize]);
        }
        DensityMap {
            width: w,
            height: h,
            values,
        }
    }

    /// Cell coordinates of the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> Option<(u32, u32)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| ((i % self.width as usize) as u32, (i / self.width as usize) as u32))
    }
}

/// Fixed-width Gaussian kernel used for ground-truth maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Kernel half-width in multiples of `sigma`.
    pub truncation: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            truncation: 4.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), DensityError> {
        if self.sigma > 0.0 && self.truncation > 0.0 && self.sigma.is_finite() && self.truncation.is_finite() {
            Ok(())
        } else {
            Err(DensityError::InvalidKernel {
                sigma: self.sigma,
                truncation: self.truncation,
            })
        }
    }
}

/// 1-D kernel weights for the cells `[lo, lo + weights.len())` along one axis.
/// Cell `i` is sampled at its centre `i + 0.5`.
fn axis_weights(center: f64, dim: u32, k: &KernelConfig) -> (u32, Vec<f64>) {
    let radius = k.sigma * k.truncation;
    let lo = (center - radius - 0.5).ceil().max(0.0) as u32;
    let hi = ((center + radius - 0.5).floor() as i64).min(dim as i64 - 1);
    let two_var = 2.0 * k.sigma * k.sigma;
    let mut w: Vec<f64> = (lo as i64..=hi)
        .map(|i| {
            let d = i as f64 + 0.5 - center;
            (-d * d / two_var).exp()
        })
        .collect();
    if w.iter().sum::<f64>() <= 0.0 {
        // kernel narrower than a cell: all mass in the containing cell
        let cell = (center.floor() as u32).min(dim - 1);
        return (cell, vec![1.0]);
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    (lo, w)
}

/// Ground-truth density: each point deposits a truncated Gaussian bump of
/// total mass exactly 1, renormalised after clipping at the image border.
pub fn generate_density_map(
    points: &[Point],
    width: u32,
    height: u32,
    k: &KernelConfig,
) -> Result<DensityMap, DensityError> {
    k.validate()?;
    let mut map = DensityMap::zeros(width, height);
    for p in points {
        let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
        if !inside {
            return Err(DensityError::PointOutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
        // separable kernel, each axis normalised, so the product sums to 1
        let (x0, wx) = axis_weights(p.x, width, k);
        let (y0, wy) = axis_weights(p.y, height, k);
        for (j, vy) in wy.iter().enumerate() {
            let row = (y0 as usize + j) * width as usize + x0 as usize;
            for (i, vx) in wx.iter().enumerate() {
                map.values[row + i] += vy * vx;
            }
        }
    }
    Ok(map)
}

pub fn integrate(map: &DensityMap) -> f64 {
    map.values.iter().sum()
}

/// Bilinear upsampling by an integer factor (half-pixel-centre alignment,
/// edge-clamped), rescaled so the integral is unchanged.
pub fn upsample_bilinear(map: &DensityMap, factor: u32) -> Result<DensityMap, DensityError> {
    if factor == 0 {
        return Err(DensityError::ZeroFactor);
    }
    if factor == 1 || map.values.is_empty() {
        return Ok(map.clone());
    }
    let (w, h) = (map.width, map.height);
    let (ow, oh) = (w * factor, h * factor);
    let f = factor as f64;

    // source coordinate and blend weight for each output column / row
    let taps = |n_out: u32, n_in: u32| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in as usize - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xt = taps(ow, w);
    let yt = taps(oh, h);

    let mut values = Vec::with_capacity(ow as usize * oh as usize);
    for &(y0, y1, ty) in &yt {
        let r0 = &map.values[y0 * w as usize..(y0 + 1) * w as usize];
        let r1 = &map.values[y1 * w as usize..(y1 + 1) * w as usize];
        for &(x0, x1, tx) in &xt {
            let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
            let bottom = r1[x0] * (1.0 - tx) + r1[x1] * tx;
            values.push((top * (1.0 - ty) + bottom * ty).max(0.0));
        }
    }
    let mut out = DensityMap {
        width: ow,
        height: oh,
        values,
    };
    let before = map.integrate();
    let after = out.integrate();
    if after > 0.0 {
        let k = before / after;
        out.values.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Box centres, used as point labels when none are annotated.
pub fn points_from_boxes(boxes: &[BBox]) -> Vec<Point> {
    boxes.iter().map(BBox::center).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_points_give_zero_map() {
        let m = generate_density_map(&[], 16, 8, &KernelConfig::default()).unwrap();
        assert_eq!(m.integrate(), 0.0);
        assert_eq!(m.values().len(), 128);
    }

    #[test]
    fn single_point_has_unit_mass() {
        let m = generate_density_map(&[Point::new(32., 32.)], 64, 64, &KernelConfig::default())
            .unwrap();
        assert!((m.integrate() - 1.0).abs() < 1e-9);
        // symmetric about the point
        assert!((m.get(31, 31) - m.get(32, 32)).abs() < 1e-15);
    }

    #[test]
    fn edge_points_keep_unit_mass() {
        let pts = [
            Point::new(0., 0.),
            Point::new(63.9, 0.2),
            Point::new(0.5, 63.99),
            Point::new(63.999, 63.999),
            Point::new(30., 1.),
        ];
        let m = generate_density_map(&pts, 64, 64, &KernelConfig::default()).unwrap();
        assert!((m.integrate() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let err = generate_density_map(&[Point::new(64., 3.)], 64, 64, &KernelConfig::default());
        assert!(matches!(err, Err(DensityError::PointOutOfBounds { .. })));
        let err = generate_density_map(&[Point::new(-0.1, 3.)], 64, 64, &KernelConfig::default());
        assert!(matches!(err, Err(DensityError::PointOutOfBounds { .. })));
    }

    #[test]
    fn tiny_sigma_falls_back_to_containing_cell() {
        let k = KernelConfig {
            sigma: 1e-3,
            truncation: 4.0,
        };
        let m = generate_density_map(&[Point::new(3.2, 5.9)], 8, 8, &k).unwrap();
        assert_eq!(m.get(3, 5), 1.0);
    }

    #[test]
    fn invalid_kernel_rejected() {
        let k = KernelConfig {
            sigma: 0.0,
            truncation: 4.0,
        };
        assert!(generate_density_map(&[], 4, 4, &k).is_err());
    }

    #[test]
    fn integrate_examples() {
        assert_eq!(DensityMap::zeros(5, 5).integrate(), 0.0);
        let m = DensityMap::from_values(10, 10, vec![0.02; 100]).unwrap();
        assert!((m.integrate() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn from_values_validates() {
        assert!(DensityMap::from_values(2, 2, vec![0.0; 3]).is_err());
        assert!(DensityMap::from_values(1, 1, vec![-1.0]).is_err());
        assert!(DensityMap::from_values(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn random_point_sets_conserve_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 7, 50, 500] {
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.random_range(0.0..96.0), rng.random_range(0.0..80.0)))
                .collect();
            let m = generate_density_map(&pts, 96, 80, &KernelConfig::default()).unwrap();
            assert!((m.integrate() - n as f64).abs() < 1e-6 * n as f64);
        }
    }

    #[test]
    fn upsample_identity_and_uniform() {
        let m = DensityMap::from_values(3, 2, vec![0.1, 0.2, 0.3, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(upsample_bilinear(&m, 1).unwrap(), m);

        let u = DensityMap::from_values(4, 4, vec![0.25; 16]).unwrap();
        let up = upsample_bilinear(&u, 3).unwrap();
        assert_eq!((up.width(), up.height()), (12, 12));
        for v in up.values() {
            assert!((v - 0.25 / 9.0).abs() < 1e-15);
        }
        assert!((up.integrate() - 4.0).abs() < 1e-12);
        assert!(matches!(upsample_bilinear(&u, 0), Err(DensityError::ZeroFactor)));
    }

    #[test]
    fn upsample_by_eight_keeps_integral() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let m = DensityMap::from_values(8, 8, raw.iter().map(|v| v * 3.0 / s).collect()).unwrap();
        let up = upsample_bilinear(&m, 8).unwrap();
        assert_eq!((up.width(), up.height()), (64, 64));
        assert!((up.integrate() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn upsample_keeps_single_bump_peak() {
        let m = generate_density_map(&[Point::new(10.5, 6.5)], 20, 16, &KernelConfig {
            sigma: 1.5,
            truncation: 3.0,
        })
        .unwrap();
        let (px, py) = m.argmax().unwrap();
        assert_eq!((px, py), (10, 6));
        for f in [2u32, 3, 8] {
            let up = upsample_bilinear(&m, f).unwrap();
            let (ux, uy) = up.argmax().unwrap();
            assert_eq!((ux / f, uy / f), (px, py), "factor {f}");
        }
    }

    #[test]
    fn sum_pool_and_crop() {
        let m = DensityMap::from_values(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let p = m.sum_pool(2);
        assert_eq!((p.width(), p.height()), (2, 2));
        assert_eq!(p.values(), &[12.0, 9.0, 15.0, 9.0]);
        let c = m.crop(2, 1);
        assert_eq!(c.values(), &[1.0, 2.0]);
    }

    #[test]
    fn points_from_boxes_examples() {
        let b = [
            BBox::new(0., 0., 10., 10.).unwrap(),
            BBox::new(2., 4., 8., 10.).unwrap(),
        ];
        assert_eq!(points_from_boxes(&b), vec![Point::new(5., 5.), Point::new(5., 7.)]);
        assert!(points_from_boxes(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn interior_translation_covariance(
            pts in proptest::collection::vec((20.0f64..40.0, 20.0f64..40.0), 1..6),
            dx in 0u32..10, dy in 0u32..10,
        ) {
            let k = KernelConfig { sigma: 2.0, truncation: 3.0 };
            let a: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let b: Vec<Point> = a.iter().map(|p| Point::new(p.x + dx as f64, p.y + dy as f64)).collect();
            let ma = generate_density_map(&a, 80, 80, &k).unwrap();
            let mb = generate_density_map(&b, 80, 80, &k).unwrap();
            for y in 0..60 {
                for x in 0..60 {
                    prop_assert!((ma.get(x, y) - mb.get(x + dx, y + dy)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn upsample_nonnegative_and_conserving(
            vals in proptest::collection::vec(0.0f64..5.0, 12), f in 1u32..6,
        ) {
            let m = DensityMap::from_values(4, 3, vals).unwrap();
            let up = upsample_bilinear(&m, f).unwrap();
            prop_assert!(up.values().iter().all(|v| *v >= 0.0));
            prop_assert!((up.integrate() - m.integrate()).abs() <= 1e-9 * m.integrate().max(1.0));
        }
    }
}
