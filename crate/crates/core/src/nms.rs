//! Greedy non-maximum suppression, hard and linear-soft variants.
//!
//! Both variants repeatedly pick the highest-scoring remaining detection and
//! act on every other remaining detection whose IoU with it is at least
//! `iou_threshold`. Hard NMS deletes those detections; soft NMS multiplies
//! their score by `1 - iou` and drops them only once the decayed score falls
//! below `prune_epsilon`. Equal scores are resolved in favour of the lower
//! input index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    Hard,
    SoftLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub prune_epsilon: f64,
    pub mode: NmsMode,
}

#[derive(Debug, Error, PartialEq)]
pub enum NmsConfigError {
    #[error("iou_threshold {0} must lie in [0, 1]")]
    IouThreshold(f64),
    #[error("prune_epsilon {0} must lie in [0, 1)")]
    PruneEpsilon(f64),
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            prune_epsilon: 0.001,
            mode: NmsMode::SoftLinear,
        }
    }
}

impl NmsConfig {
    pub fn hard(iou_threshold: f64) -> Self {
        Self {
            iou_threshold,
            prune_epsilon: 0.0,
            mode: NmsMode::Hard,
        }
    }

    pub fn soft(iou_threshold: f64, prune_epsilon: f64) -> Self {
        Self {
            iou_threshold,
            prune_epsilon,
            mode: NmsMode::SoftLinear,
        }
    }

    pub fn validate(&self) -> Result<(), NmsConfigError> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(NmsConfigError::IouThreshold(self.iou_threshold));
        }
        if !(0.0..1.0).contains(&self.prune_epsilon) {
            return Err(NmsConfigError::PruneEpsilon(self.prune_epsilon));
        }
        Ok(())
    }
}

/// Runs whichever variant `cfg.mode` selects.
pub fn suppress(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    match cfg.mode {
        NmsMode::Hard => hard_nms(dets, cfg),
        NmsMode::SoftLinear => soft_nms(dets, cfg),
    }
}

/// Hard NMS: overlapping lower-scored boxes are deleted. `cfg.mode` is ignored.
pub fn hard_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    greedy(dets, cfg.iou_threshold, |_score, _overlap| None)
}

/// Linear soft NMS: overlapping boxes are decayed by `1 - iou`. `cfg.mode` is ignored.
pub fn soft_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let eps = cfg.prune_epsilon;
    greedy(dets, cfg.iou_threshold, |score, overlap| {
        let decayed = score * (1.0 - overlap);
        (decayed >= eps).then_some(decayed)
    })
}

/// Shared greedy loop. `rescore` maps (score, iou) of a suppressed candidate to
/// its new score, or `None` to delete it.
fn greedy<F>(dets: &[Detection], threshold: f64, rescore: F) -> Vec<Detection>
where
    F: Fn(f64, f64) -> Option<f64>,
{
    // (original index, current score)
    let mut live: Vec<(usize, f64)> = dets.iter().map(|d| d.score).enumerate().collect();
    let mut out = Vec::with_capacity(dets.len());

    while !live.is_empty() {
        let mut best = 0;
        for k in 1..live.len() {
            let (idx, s) = live[k];
            let (bidx, bs) = live[best];
            if s > bs || (s == bs && idx < bidx) {
                best = k;
            }
        }
        let (sel_idx, sel_score) = live.swap_remove(best);
        let selected = dets[sel_idx].bbox;
        out.push(Detection {
            bbox: selected,
            score: sel_score,
        });

        live.retain_mut(|(idx, score)| {
            let overlap = iou(&selected, &dets[*idx].bbox);
            if overlap < threshold {
                return true;
            }
            match rescore(*score, overlap) {
                Some(s) => {
                    *score = s;
                    true
                }
                None => false,
            }
        });
    }
    out
}
