//! The model boundary. Detectors and density estimators are trait objects so
//! the pipeline never depends on an inference framework; this crate ships a
//! file-replay implementation and a seeded synthetic one.

mod replay;
mod synthetic;

pub use replay::{
    read_replay_density, read_replay_detections, write_replay_density, write_replay_detections,
    ReplayDensity, ReplayDetector, ReplayLoadError, ReplayRecord, REPLAY_DENSITY_MAGIC,
};
pub use synthetic::{
    synthetic_density, synthetic_detect, SyntheticDensity, SyntheticDetector, SyntheticErrorModel,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{upsample_bilinear, DensityMap};
use crate::geometry::{BBox, Detection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no stored result for image `{0}`")]
    ReplayMiss(String),
    #[error("malformed stored record for `{id}`: {reason}")]
    Malformed { id: String, reason: String },
    #[error(
        "density grid for `{id}` is {got_w}x{got_h}, expected {expected_w}x{expected_h} at output scale {scale}"
    )]
    DimensionMismatch {
        id: String,
        got_w: u32,
        got_h: u32,
        expected_w: u32,
        expected_h: u32,
        scale: u32,
    },
    #[error("backend has no scene for image `{0}`")]
    UnknownImage(String),
    #[error("{0}")]
    Other(String),
}

/// Identity and size of an image. Pixels are never decoded by this crate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<PathBuf>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        Self {
            id: id.into(),
            width,
            height,
            payload: None,
        }
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    /// Safe to call from several threads at once.
    pub concurrent_safe: bool,
    /// Accepts sub-image regions; otherwise only whole images are passed.
    pub accepts_crops: bool,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            concurrent_safe: false,
            accepts_crops: true,
        }
    }
}

pub trait DetectorBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Detects objects inside `region` (image coordinates). Returned boxes are
    /// relative to the region's top-left corner.
    fn detect(&self, image: &ImageRef, region: &BBox) -> Result<Vec<Detection>, BackendError>;
}

pub trait DensityBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// The native grid is `ceil(width / scale) x ceil(height / scale)`.
    fn output_scale(&self) -> u32;

    fn estimate_native(&self, image: &ImageRef) -> Result<DensityMap, BackendError>;
}

/// Whole-image detection.
pub fn detect(backend: &dyn DetectorBackend, image: &ImageRef) -> Result<Vec<Detection>, BackendError> {
    backend.detect(image, &image.bounds())
}

/// Native prediction upsampled to image resolution, keeping its integral.
///
/// When the image size is not a multiple of the output scale the upsampled
/// grid overhangs the image; it is cropped and rescaled to the native count.
pub fn estimate_density(
    backend: &dyn DensityBackend,
    image: &ImageRef,
) -> Result<DensityMap, BackendError> {
    let scale = backend.output_scale().max(1);
    let native = backend.estimate_native(image)?;
    let expected_w = image.width.div_ceil(scale);
    let expected_h = image.height.div_ceil(scale);
    if native.width() != expected_w || native.height() != expected_h {
        return Err(BackendError::DimensionMismatch {
            id: image.id.clone(),
            got_w: native.width(),
            got_h: native.height(),
            expected_w,
            expected_h,
            scale,
        });
    }
    let up = upsample_bilinear(&native, scale).map_err(|e| BackendError::Other(e.to_string()))?;
    if up.width() == image.width && up.height() == image.height {
        return Ok(up);
    }
    let count = native.integrate();
    let cropped = up.crop(image.width, image.height);
    let kept = cropped.integrate();
    Ok(if kept > 0.0 {
        cropped.scaled(count / kept)
    } else {
        cropped
    })
}
