//! Threshold-switched counting.
//!
//! Every image goes through tiled detection first. If the number of confident
//! detections `n1` stays below the switch threshold the count is `n1`;
//! otherwise the density backend is consulted and its integral is the count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{estimate_density, BackendError, DensityBackend, DetectorBackend, ImageRef};
use crate::geometry::Detection;
use crate::nms::{NmsConfig, NmsConfigError};
use crate::tiling::{plan_tiles, split_merge_detect_with, DetectError, MergeMode, TilingError};

pub const DEFAULT_SWITCH_THRESHOLD: f64 = 165.0;
pub const DEFAULT_COUNT_SCORE_THRESHOLD: f64 = 0.25;
pub const DEFAULT_WINDOW: u32 = 256;
pub const DEFAULT_OVERLAP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Detector,
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// `f64::INFINITY` routes everything to the detector.
    pub switch_threshold: f64,
    pub count_score_threshold: f64,
    pub window: u32,
    pub overlap_ratio: f64,
    pub nms: NmsConfig,
    pub merge: MergeMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            switch_threshold: DEFAULT_SWITCH_THRESHOLD,
            count_score_threshold: DEFAULT_COUNT_SCORE_THRESHOLD,
            window: DEFAULT_WINDOW,
            overlap_ratio: DEFAULT_OVERLAP,
            nms: NmsConfig::default(),
            merge: MergeMode::GlobalNms,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("switch threshold must be >= 0, got {0}")]
    SwitchThreshold(f64),
    #[error("count score threshold must be in [0, 1], got {0}")]
    CountScore(f64),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Nms(#[from] NmsConfigError),
}

impl HybridConfig {
    pub fn with_switch_threshold(mut self, t: f64) -> Self {
        self.switch_threshold = t;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.switch_threshold.is_nan() || self.switch_threshold < 0.0 {
            return Err(ConfigError::SwitchThreshold(self.switch_threshold));
        }
        if !(0.0..=1.0).contains(&self.count_score_threshold) {
            return Err(ConfigError::CountScore(self.count_score_threshold));
        }
        plan_tiles(1, 1, self.window, self.overlap_ratio)?;
        self.nms.validate()?;
        Ok(())
    }

    /// Routing rule: `n1 >= threshold` selects the density branch.
    pub fn route(&self, n1: usize) -> Branch {
        route(n1, self.switch_threshold)
    }
}

pub fn route(n1: usize, switch_threshold: f64) -> Branch {
    if (n1 as f64) < switch_threshold {
        Branch::Detector
    } else {
        Branch::Density
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub image: String,
    pub count: f64,
    pub branch: Branch,
    pub n1: usize,
    /// Density integral, present iff the density branch ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<f64>,
    /// Surviving detections, present iff the detector branch was chosen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("detector branch failed on `{image}`: {source}")]
    Detector {
        image: String,
        #[source]
        source: Box<DetectError>,
    },
    #[error("density branch failed on `{image}`: {source}")]
    Density {
        image: String,
        #[source]
        source: BackendError,
    },
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
}

impl PipelineError {
    pub fn branch(&self) -> Option<Branch> {
        match self {
            Self::Detector { .. } => Some(Branch::Detector),
            Self::Density { .. } => Some(Branch::Density),
            Self::Config(_) => None,
        }
    }
}

/// Detector stage alone: merged detections and the confident count `n1`.
pub fn detector_stage(
    image: &ImageRef,
    det: &dyn DetectorBackend,
    cfg: &HybridConfig,
) -> Result<(Vec<Detection>, usize), PipelineError> {
    let plan = plan_tiles(image.width, image.height, cfg.window, cfg.overlap_ratio)
        .map_err(ConfigError::from)?;
    let dets = split_merge_detect_with(image, det, &plan, &cfg.nms, cfg.merge).map_err(|source| {
        PipelineError::Detector {
            image: image.id.clone(),
            source: Box::new(source),
        }
    })?;
    let n1 = confident_count(&dets, cfg.count_score_threshold);
    Ok((dets, n1))
}

pub fn confident_count(dets: &[Detection], min_score: f64) -> usize {
    dets.iter().filter(|d| d.score >= min_score).count()
}

/// Density stage alone: the integral of the upsampled prediction.
pub fn density_stage(image: &ImageRef, den: &dyn DensityBackend) -> Result<f64, PipelineError> {
    estimate_density(den, image)
        .map(|m| m.integrate())
        .map_err(|source| PipelineError::Density {
            image: image.id.clone(),
            source,
        })
}

pub fn hybrid_count(
    image: &ImageRef,
    det: &dyn DetectorBackend,
    den: &dyn DensityBackend,
    cfg: &HybridConfig,
) -> Result<CountResult, PipelineError> {
    cfg.validate()?;
    let (dets, n1) = detector_stage(image, det, cfg)?;
    Ok(match cfg.route(n1) {
        Branch::Detector => CountResult {
            image: image.id.clone(),
            count: n1 as f64,
            branch: Branch::Detector,
            n1,
            n2: None,
            detections: Some(dets),
        },
        Branch::Density => {
            let n2 = density_stage(image, den)?;
            CountResult {
                image: image.id.clone(),
                count: n2,
                branch: Branch::Density,
                n1,
                n2: Some(n2),
                detections: None,
            }
        }
    })
}
