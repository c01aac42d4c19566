//! Detection and counting metrics.
//!
//! Matching is greedy: predictions in descending score order (ties keep input
//! order) each claim the unmatched ground-truth box with the highest IoU, if
//! that IoU reaches the threshold. AP is the area under the monotone
//! precision envelope with all-point interpolation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("average precision is undefined for a dataset without ground truth")]
    NoGroundTruth,
    #[error("error metrics need at least one (prediction, truth) pair")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// (prediction index, ground-truth index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub iou_threshold: f64,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_predictions.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_gts.len()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.true_positives(),
            fp: self.false_positives(),
            fn_: self.false_negatives(),
        }
    }
}

/// Prediction indices in descending score order, ties by index.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching; returns, for each prediction in `order`, its gt index.
fn greedy_assign(preds: &[Detection], order: &[usize], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&preds[p].bbox, gt);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_threshold: f64) -> Matching {
    let order = score_order(preds);
    let assigned = greedy_assign(preds, &order, gts, iou_threshold);
    let mut pairs = Vec::new();
    let mut unmatched_predictions = Vec::new();
    let mut gt_used = vec![false; gts.len()];
    for (&p, a) in order.iter().zip(&assigned) {
        match a {
            Some(g) => {
                pairs.push((p, *g));
                gt_used[*g] = true;
            }
            None => unmatched_predictions.push(p),
        }
    }
    unmatched_predictions.sort_unstable();
    let unmatched_gts = (0..gts.len()).filter(|&g| !gt_used[g]).collect();
    Matching {
        pairs,
        unmatched_predictions,
        unmatched_gts,
        iou_threshold,
    }
}

/// `tp / (tp + fp)`, or 0 when nothing was predicted.
pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        log::debug!("precision with zero predictions, reporting 0");
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `tp / (tp + fn)`, or 0 when there is no ground truth.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        log::debug!("recall with zero ground truth, reporting 0");
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub tp: usize,
    pub fp: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall after each prediction, best score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_gts: usize,
    pub iou_threshold: f64,
}

impl PrCurve {
    /// Pools predictions over images. Matching happens per image; the pooled
    /// ranking is by score, ties broken by image order then per-image rank.
    pub fn build<'a, I>(images: I, iou_threshold: f64) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (&'a [Detection], &'a [BBox])>,
    {
        // (score, image, rank within image, is true positive)
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        let mut total_gts = 0;
        for (img, (preds, gts)) in images.into_iter().enumerate() {
            total_gts += gts.len();
            let order = score_order(preds);
            let assigned = greedy_assign(preds, &order, gts, iou_threshold);
            for (rank, (&p, a)) in order.iter().zip(&assigned).enumerate() {
                ranked.push((preds[p].score, img, rank, a.is_some()));
            }
        }
        if total_gts == 0 {
            return Err(MetricsError::NoGroundTruth);
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let (mut tp, mut fp) = (0, 0);
        let points = ranked
            .iter()
            .map(|&(score, _, _, hit)| {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                PrPoint {
                    score,
                    tp,
                    fp,
                    recall: tp as f64 / total_gts as f64,
                    precision: tp as f64 / (tp + fp) as f64,
                }
            })
            .collect();
        Ok(Self {
            points,
            total_gts,
            iou_threshold,
        })
    }

    /// Exact area under the monotone precision envelope.
    pub fn average_precision(&self) -> f64 {
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (p, env) in self.points.iter().zip(&envelope) {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
        ap
    }

    /// Two-column `recall<TAB>precision` text, one row per rank.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# recall\tprecision\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{}", p.recall, p.precision);
        }
        s
    }
}

pub fn average_precision<'a, I>(images: I, iou_threshold: f64) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a [Detection], &'a [BBox])>,
{
    Ok(PrCurve::build(images, iou_threshold)?.average_precision())
}

/// Mean absolute error over `(predicted, true)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Root mean squared error over `(predicted, true)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mse = pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// One image; `counts` is `None` for images counted by the density branch,
/// which produces no boxes to match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub image: String,
    pub counts: Option<Counts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub iou_threshold: f64,
    pub rows: Vec<ConfusionRow>,
    /// Sum over rows that have counts.
    pub totals: Counts,
}

pub fn confusion_report<I>(iou_threshold: f64, per_image: I) -> ConfusionReport
where
    I: IntoIterator<Item = (String, Option<Matching>)>,
{
    let mut totals = Counts::default();
    let rows = per_image
        .into_iter()
        .map(|(image, m)| {
            let counts = m.map(|m| m.counts());
            if let Some(c) = counts {
                totals += c;
            }
            ConfusionRow { image, counts }
        })
        .collect();
    ConfusionReport {
        iou_threshold,
        rows,
        totals,
    }
}

impl ConfusionReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>6} {:>6}\n", "image", "TP", "FP", "FN");
        for r in &self.rows {
            match r.counts {
                Some(c) => {
                    let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>6}", r.image, c.tp, c.fp, c.fn_);
                }
                None => {
                    let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>6}", r.image, "n/a", "n/a", "n/a");
                }
            }
        }
        let t = self.totals;
        let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>6}", "TOTAL", t.tp, t.fp, t.fn_);
        s
    }
}
