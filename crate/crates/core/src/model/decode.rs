use serde::{Deserialize, Serialize};

use super::HeadOutputs;
use crate::metrics::{iou, ScoredSpan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Candidates overlapping a kept span above this IoU are suppressed.
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            top_k: 10,
        }
    }
}

/// Ranked spans plus per-clip saliency for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPrediction {
    /// Sorted by non-increasing score.
    pub spans: Vec<ScoredSpan>,
    pub saliency: Vec<f64>,
}

/// One candidate per clip: `[(t + 0.5) - start, (t + 0.5) + end] * clip_len`,
/// clipped to `[0, duration]` and scored by confidence.
pub fn candidate_spans(heads: &HeadOutputs, clip_len: f64, duration: f64) -> Vec<ScoredSpan> {
    (0..heads.confidence.len())
        .map(|t| {
            let center = t as f64 + 0.5;
            let start = ((center - heads.start_offset[t]) * clip_len).clamp(0.0, duration);
            let end = ((center + heads.end_offset[t]) * clip_len).clamp(0.0, duration);
            ScoredSpan {
                start,
                end: end.max(start),
                score: heads.confidence[t],
            }
        })
        .collect()
}

/// Greedy non-maximum suppression over score-sorted candidates; stable for
/// equal scores.
pub fn nms(mut candidates: Vec<ScoredSpan>, nms_iou: f64, top_k: usize) -> Vec<ScoredSpan> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredSpan> = Vec::new();
    for c in candidates {
        if kept.len() == top_k {
            break;
        }
        if kept.iter().all(|k| iou([k.start, k.end], [c.start, c.end]) <= nms_iou) {
            kept.push(c);
        }
    }
    kept
}

pub fn decode_moments(heads: &HeadOutputs, clip_len: f64, duration: f64, config: &DecodeConfig) -> MomentPrediction {
    let spans = nms(candidate_spans(heads, clip_len, duration), config.nms_iou, config.top_k);
    MomentPrediction {
        spans,
        saliency: heads.saliency.clone(),
    }
}
