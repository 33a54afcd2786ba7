//! Moment-retrieval and highlight-detection evaluation.
//!
//! Follows the QVHighlights protocol: R1@{0.3,0.5,0.7}, mAP at 0.5 / 0.75 and
//! averaged over `[0.5:0.05:0.95]`, mIoU of the top-1 span, and per-video
//! HD mAP / HIT@1 on clip saliency.

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `[start, end]` in seconds.
pub type Window = [f64; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("span [{0}, {1}] has start after end")]
    ReversedSpan(f64, f64),
}

/// A predicted span with its ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl ScoredSpan {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn window(&self) -> Window {
        [self.start, self.end]
    }
}

/// IoU thresholds of the averaged mAP.
pub const MAP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Intersection over union of two time spans; 0 when the union is empty.
pub fn temporal_iou(a: Window, b: Window) -> Result<f64, MetricsError> {
    for w in [a, b] {
        if w[0] > w[1] {
            return Err(MetricsError::ReversedSpan(w[0], w[1]));
        }
    }
    Ok(iou(a, b))
}

pub(crate) fn iou(a: Window, b: Window) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = a[1].max(b[1]) - a[0].min(b[0]);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Predictions ordered by non-increasing score; equal scores keep input order.
pub fn rank(preds: &[ScoredSpan]) -> Vec<ScoredSpan> {
    let mut out = preds.to_vec();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

fn best_iou(span: Window, gts: &[Window]) -> f64 {
    gts.iter().map(|&g| iou(span, g)).fold(0.0, f64::max)
}

/// Fraction of queries whose top-1 span reaches `threshold` IoU with any
/// ground-truth window. Queries without predictions count as misses.
pub fn recall_at_1(preds: &[Vec<ScoredSpan>], gts: &[Vec<Window>], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| {
            rank(p)
                .first()
                .is_some_and(|top| best_iou(top.window(), g) >= threshold)
        })
        .count();
    hits as f64 / preds.len() as f64
}

/// Mean over queries of the best IoU between the top-1 span and the ground truth.
pub fn mean_iou(preds: &[Vec<ScoredSpan>], gts: &[Vec<Window>]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| rank(p).first().map_or(0.0, |top| best_iou(top.window(), g)))
        .sum();
    total / preds.len() as f64
}

/// Greedy matching of ranked predictions to ground truth at `threshold`:
/// each prediction takes the unmatched window with the highest IoU.
fn match_flags(ranked: &[ScoredSpan], gts: &[Window], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(p.window(), g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= threshold => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Interpolated average precision of one query's predictions.
pub fn average_precision(preds: &[ScoredSpan], gts: &[Window], threshold: f64) -> f64 {
    if gts.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let ranked = rank(preds);
    let flags = match_flags(&ranked, gts, threshold);
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (n, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (n + 1) as f64);
    }
    for n in (0..precision.len().saturating_sub(1)).rev() {
        precision[n] = precision[n].max(precision[n + 1]);
    }
    let g = gts.len() as f64;
    let mut ap = 0.0;
    for (n, &hit) in flags.iter().enumerate() {
        if hit {
            ap += precision[n] / g;
        }
    }
    ap
}

/// mAP per threshold and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
}

impl MapResult {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|(_, v)| *v)
    }
}

pub fn map_moments(preds: &[Vec<ScoredSpan>], gts: &[Vec<Window>], thresholds: &[f64]) -> MapResult {
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let total: f64 = preds
                .iter()
                .zip(gts)
                .map(|(p, g)| average_precision(p, g, t))
                .sum();
            (t, if preds.is_empty() { 0.0 } else { total / preds.len() as f64 })
        })
        .collect();
    let average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64
    };
    MapResult { per_threshold, average }
}

/// Highlight-detection summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighlightMetrics {
    pub hd_map: f64,
    pub hit_at_1: f64,
    /// Videos skipped because no clip is labeled positive.
    pub excluded: usize,
}

/// Non-interpolated AP of ranking clips by `scores` against `label > 0`.
pub fn clip_average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l > 0.0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (n, &i) in order.iter().enumerate() {
        if labels[i] > 0.0 {
            tp += 1;
            ap += tp as f64 / (n + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

pub fn highlight_metrics(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> HighlightMetrics {
    let mut ap_sum = 0.0;
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (s, l) in scores.iter().zip(labels) {
        let Some(ap) = clip_average_precision(s, l) else {
            excluded += 1;
            continue;
        };
        counted += 1;
        ap_sum += ap;
        let top = (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
        if l.get(top).is_some_and(|&v| v > 0.0) {
            hits += 1;
        }
    }
    if excluded > 0 {
        info!("highlight metrics: {excluded} video(s) without positive clips excluded");
    }
    let denom = counted.max(1) as f64;
    HighlightMetrics {
        hd_map: if counted == 0 { 0.0 } else { ap_sum / denom },
        hit_at_1: if counted == 0 { 0.0 } else { hits as f64 / denom },
        excluded,
    }
}

/// Flat evaluation summary; every value lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1_at_0_3: f64,
    pub r1_at_0_5: f64,
    pub r1_at_0_7: f64,
    pub map_at_0_5: f64,
    pub map_at_0_75: f64,
    pub map_avg: f64,
    pub miou: f64,
    pub hd_map: f64,
    pub hit_at_1: f64,
    pub codebook_utilization: f64,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 10] = [
        "r1_0.3",
        "r1_0.5",
        "r1_0.7",
        "map_0.5",
        "map_0.75",
        "map_avg",
        "miou",
        "hd_map",
        "hit_at_1",
        "utilization",
    ];

    /// Moment and highlight metrics from per-query predictions and labels.
    pub fn compute(
        preds: &[Vec<ScoredSpan>],
        gts: &[Vec<Window>],
        saliency: &[Vec<f64>],
        labels: &[Vec<f64>],
        codebook_utilization: f64,
    ) -> Self {
        let map = map_moments(preds, gts, &MAP_THRESHOLDS);
        let hd = highlight_metrics(saliency, labels);
        Self {
            r1_at_0_3: recall_at_1(preds, gts, 0.3),
            r1_at_0_5: recall_at_1(preds, gts, 0.5),
            r1_at_0_7: recall_at_1(preds, gts, 0.7),
            map_at_0_5: map.at(0.5).unwrap_or(0.0),
            map_at_0_75: map.at(0.75).unwrap_or(0.0),
            map_avg: map.average,
            miou: mean_iou(preds, gts),
            hd_map: hd.hd_map,
            hit_at_1: hd.hit_at_1,
            codebook_utilization,
        }
    }

    pub fn values(&self) -> [f64; 10] {
        [
            self.r1_at_0_3,
            self.r1_at_0_5,
            self.r1_at_0_7,
            self.map_at_0_5,
            self.map_at_0_75,
            self.map_avg,
            self.miou,
            self.hd_map,
            self.hit_at_1,
            self.codebook_utilization,
        ]
    }
}
