//! Counting tiny, variably dense objects.
//!
//! Sparse images are counted by tiled detection with a global soft-NMS merge;
//! once the detector count reaches a switch threshold the image is counted by
//! integrating a density map instead. Models sit behind the traits in
//! [`backends`], with file-replay and seeded synthetic implementations.

pub mod annotations;
pub mod backends;
pub mod density;
pub mod geometry;
pub mod hybrid;
pub mod metrics;
pub mod nms;
pub mod seed;
pub mod sweeps;
pub mod synthgen;
pub mod tiling;

pub use backends::{BackendError, Capabilities, DensityBackend, DetectorBackend, ImageRef};
pub use density::{DensityMap, KernelConfig};
pub use geometry::{iou, BBox, Detection, Point};
pub use hybrid::{hybrid_count, Branch, CountResult, HybridConfig, PipelineError};
pub use metrics::{average_precision, mae, match_detections, rmse, Matching};
pub use nms::{NmsConfig, NmsMode};
pub use synthgen::{Dataset, Scene, SceneSpec};
pub use tiling::{plan_tiles, split_merge_detect, MergeMode, TilePlan};
