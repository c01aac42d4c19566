//! Parameter sweeps over the switch threshold, the tile window and the tile
//! overlap.
//!
//! Threshold sweeps score count error (MAE/RMSE) and reuse one detection pass
//! per image, since only the routing changes with the threshold. Window and
//! overlap sweeps score AP of the merged detections.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{DensityBackend, DetectorBackend};
use crate::geometry::Detection;
use crate::hybrid::{
    density_stage, detector_stage, hybrid_count, route, Branch, HybridConfig, PipelineError,
};
use crate::metrics::{average_precision, mae, rmse, MetricsError};
use crate::synthgen::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Window,
    Overlap,
    SwitchThreshold,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::Window => "window",
            Self::Overlap => "overlap",
            Self::SwitchThreshold => "switch-threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepValues {
    List(Vec<f64>),
    /// Inclusive of `to` when it lies on the grid.
    Range { from: f64, to: f64, step: f64 },
}

impl SweepValues {
    pub fn expand(&self) -> Result<Vec<f64>, SweepError> {
        let values = match *self {
            Self::List(ref v) => v.clone(),
            Self::Range { from, to, step } => {
                if step.is_nan() || step <= 0.0 || !from.is_finite() || !to.is_finite() || to < from {
                    return Err(SweepError::InvalidValues(format!(
                        "range {from}..={to} step {step}"
                    )));
                }
                // tolerate float drift at the upper end
                let n = ((to - from) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| from + i as f64 * step).collect()
            }
        };
        if values.is_empty() {
            return Err(SweepError::InvalidValues("no values".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(SweepError::InvalidValues("NaN value".into()));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: SweepValues,
    /// Everything not being swept.
    pub base: HybridConfig,
    /// IoU for AP matching in window and overlap sweeps.
    pub match_iou: f64,
}

impl SweepSpec {
    pub fn new(parameter: SweepParameter, values: SweepValues) -> Self {
        Self {
            parameter,
            values,
            base: HybridConfig::default(),
            match_iou: 0.5,
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep values: {0}")]
    InvalidValues(String),
    #[error("sweep expects parameter {expected}, got {got}")]
    WrongParameter { expected: &'static str, got: &'static str },
    #[error("sweep point {parameter}={value}: {source}")]
    Pipeline {
        parameter: &'static str,
        value: f64,
        #[source]
        source: PipelineError,
    },
    #[error("sweep point {parameter}={value}: {source}")]
    Metrics {
        parameter: &'static str,
        value: f64,
        #[source]
        source: MetricsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    /// `"mae"` (minimised) or `"ap"` (maximised).
    pub metric: String,
    pub fixed: HybridConfig,
    pub match_iou: f64,
    pub images: usize,
    pub rows: Vec<SweepRow>,
    pub best: usize,
}

impl SweepReport {
    fn build(spec: &SweepSpec, images: usize, metric: &str, rows: Vec<SweepRow>) -> Self {
        let key = |r: &SweepRow| match metric {
            "mae" => r.mae.unwrap_or(f64::INFINITY),
            _ => -r.ap.unwrap_or(f64::NEG_INFINITY),
        };
        // strict improvement only, so ties keep the smallest value
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[a].value.total_cmp(&rows[b].value));
        let mut best = order[0];
        for &i in &order[1..] {
            if key(&rows[i]) < key(&rows[best]) {
                best = i;
            }
        }
        let mut rows = rows;
        rows[best].best = true;
        Self {
            parameter: spec.parameter,
            metric: metric.to_string(),
            fixed: spec.base.clone(),
            match_iou: spec.match_iou,
            images,
            rows,
            best,
        }
    }

    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    /// `value<TAB>metric` per row, for plotting.
    pub fn curve(&self) -> String {
        let mut s = format!("# {}\t{}\n", self.parameter.name(), self.metric);
        for r in &self.rows {
            let m = if self.metric == "mae" { r.mae } else { r.ap };
            let _ = writeln!(s, "{}\t{}", r.value, m.unwrap_or(f64::NAN));
        }
        s
    }
}

type DetEntry = Arc<(Vec<Detection>, usize)>;

/// Memoised pipeline stages. One cache must only ever be used with a single
/// pair of backends.
#[derive(Debug, Default)]
pub struct SweepCache {
    detections: Mutex<HashMap<(String, String), DetEntry>>,
    density: Mutex<HashMap<String, f64>>,
}

/// Every field that influences the detector stage.
fn detector_key(cfg: &HybridConfig) -> String {
    format!(
        "w={};o={:x};n={:?};m={:?};c={:x}",
        cfg.window,
        cfg.overlap_ratio.to_bits(),
        cfg.nms,
        cfg.merge,
        cfg.count_score_threshold.to_bits()
    )
}

impl SweepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn detections(
        &self,
        scene: &Scene,
        det: &dyn DetectorBackend,
        cfg: &HybridConfig,
    ) -> Result<DetEntry, PipelineError> {
        let key = (detector_key(cfg), scene.id.clone());
        if let Some(hit) = self.detections.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let fresh = Arc::new(detector_stage(&scene.image_ref(), det, cfg)?);
        // a concurrent insert of the same key computed the same value
        Ok(self
            .detections
            .lock()
            .unwrap()
            .entry(key)
            .or_insert(fresh)
            .clone())
    }

    pub fn density(&self, scene: &Scene, den: &dyn DensityBackend) -> Result<f64, PipelineError> {
        if let Some(&hit) = self.density.lock().unwrap().get(&scene.id) {
            return Ok(hit);
        }
        let v = density_stage(&scene.image_ref(), den)?;
        self.density.lock().unwrap().insert(scene.id.clone(), v);
        Ok(v)
    }
}

fn par_map<T, R, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<R>, PipelineError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, PipelineError> + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Predicted count for every (threshold, image); outer index follows
/// `thresholds`. Density runs once per image, and only for images some
/// threshold routes to it.
pub fn threshold_predictions(
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    den: &dyn DensityBackend,
    base: &HybridConfig,
    thresholds: &[f64],
    cache: &SweepCache,
) -> Result<Vec<Vec<f64>>, (f64, PipelineError)> {
    let lowest = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let first = thresholds.first().copied().unwrap_or(0.0);
    base.validate().map_err(|e| (first, e.into()))?;
    let parallel = det.capabilities().concurrent_safe && den.capabilities().concurrent_safe;
    let stages = par_map(scenes, parallel, |scene| {
        let entry = cache.detections(scene, det, base)?;
        let n1 = entry.1;
        let n2 = match route(n1, lowest) {
            Branch::Density => Some(cache.density(scene, den)?),
            Branch::Detector => None,
        };
        Ok((n1, n2))
    })
    .map_err(|e| (first, e))?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            stages
                .iter()
                .map(|&(n1, n2)| match route(n1, t) {
                    Branch::Detector => n1 as f64,
                    Branch::Density => n2.expect("density computed for lowest threshold"),
                })
                .collect()
        })
        .collect())
}

fn error_row(value: f64, preds: &[f64], truth: &[f64]) -> Result<SweepRow, SweepError> {
    let pairs: Vec<(f64, f64)> = preds.iter().copied().zip(truth.iter().copied()).collect();
    let wrap = |source| SweepError::Metrics {
        parameter: SweepParameter::SwitchThreshold.name(),
        value,
        source,
    };
    Ok(SweepRow {
        value,
        mae: Some(mae(&pairs).map_err(wrap)?),
        rmse: Some(rmse(&pairs).map_err(wrap)?),
        ap: None,
        best: false,
    })
}

fn expect_parameter(spec: &SweepSpec, p: SweepParameter) -> Result<(), SweepError> {
    if spec.parameter == p {
        Ok(())
    } else {
        Err(SweepError::WrongParameter {
            expected: p.name(),
            got: spec.parameter.name(),
        })
    }
}

pub fn sweep_switch_threshold(
    spec: &SweepSpec,
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    den: &dyn DensityBackend,
    cache: &SweepCache,
) -> Result<SweepReport, SweepError> {
    expect_parameter(spec, SweepParameter::SwitchThreshold)?;
    let values = spec.values.expand()?;
    let truth: Vec<f64> = scenes.iter().map(|s| s.count() as f64).collect();
    let preds = threshold_predictions(scenes, det, den, &spec.base, &values, cache).map_err(
        |(value, source)| SweepError::Pipeline {
            parameter: SweepParameter::SwitchThreshold.name(),
            value,
            source,
        },
    )?;
    let rows = values
        .iter()
        .zip(&preds)
        .map(|(&v, p)| error_row(v, p, &truth))
        .collect::<Result<_, _>>()?;
    Ok(SweepReport::build(spec, scenes.len(), "mae", rows))
}

/// Reference implementation: a full `hybrid_count` for every point and image.
pub fn sweep_switch_threshold_uncached(
    spec: &SweepSpec,
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    den: &dyn DensityBackend,
) -> Result<SweepReport, SweepError> {
    expect_parameter(spec, SweepParameter::SwitchThreshold)?;
    let values = spec.values.expand()?;
    let truth: Vec<f64> = scenes.iter().map(|s| s.count() as f64).collect();
    let mut rows = Vec::with_capacity(values.len());
    for &t in &values {
        let cfg = spec.base.clone().with_switch_threshold(t);
        let preds = scenes
            .iter()
            .map(|s| hybrid_count(&s.image_ref(), det, den, &cfg).map(|r| r.count))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| SweepError::Pipeline {
                parameter: SweepParameter::SwitchThreshold.name(),
                value: t,
                source,
            })?;
        rows.push(error_row(t, &preds, &truth)?);
    }
    Ok(SweepReport::build(spec, scenes.len(), "mae", rows))
}

fn ap_sweep(
    spec: &SweepSpec,
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    cache: &SweepCache,
    apply: impl Fn(&mut HybridConfig, f64),
) -> Result<SweepReport, SweepError> {
    let values = spec.values.expand()?;
    let name = spec.parameter.name();
    let parallel = det.capabilities().concurrent_safe;
    let mut rows = Vec::with_capacity(values.len());
    for &v in &values {
        let mut cfg = spec.base.clone();
        apply(&mut cfg, v);
        let pipe = |source| SweepError::Pipeline {
            parameter: name,
            value: v,
            source,
        };
        cfg.validate().map_err(|e| pipe(e.into()))?;
        let dets = par_map(scenes, parallel, |s| cache.detections(s, det, &cfg)).map_err(pipe)?;
        let ap = average_precision(
            scenes
                .iter()
                .zip(&dets)
                .map(|(s, d)| (d.0.as_slice(), s.boxes.as_slice())),
            spec.match_iou,
        )
        .map_err(|source| SweepError::Metrics {
            parameter: name,
            value: v,
            source,
        })?;
        rows.push(SweepRow {
            value: v,
            mae: None,
            rmse: None,
            ap: Some(ap),
            best: false,
        });
    }
    Ok(SweepReport::build(spec, scenes.len(), "ap", rows))
}

pub fn sweep_window(
    spec: &SweepSpec,
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    cache: &SweepCache,
) -> Result<SweepReport, SweepError> {
    expect_parameter(spec, SweepParameter::Window)?;
    for v in spec.values.expand()? {
        if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(SweepError::InvalidValues(format!("window {v}")));
        }
    }
    ap_sweep(spec, scenes, det, cache, |c, v| c.window = v as u32)
}

pub fn sweep_overlap(
    spec: &SweepSpec,
    scenes: &[Scene],
    det: &dyn DetectorBackend,
    cache: &SweepCache,
) -> Result<SweepReport, SweepError> {
    expect_parameter(spec, SweepParameter::Overlap)?;
    for v in spec.values.expand()? {
        if !(0.0..1.0).contains(&v) {
            return Err(SweepError::InvalidValues(format!("overlap {v}")));
        }
    }
    ap_sweep(spec, scenes, det, cache, |c, v| c.overlap_ratio = v)
}
