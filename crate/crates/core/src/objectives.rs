//! Training losses: focal + L1 moment retrieval, intra-video saliency
//! contrast, symmetric InfoNCE alignment, and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::metrics::Window;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("loss part `{part}` is not finite ({value})")]
    NonFinite { part: &'static str, value: f64 },
    #[error("alignment needs a batch of at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid loss setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_hd: f64,
    pub lambda_mq: f64,
    pub lambda_align: f64,
    pub lambda_cmt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_hd: 1.0,
            lambda_mq: 1.0,
            lambda_align: 0.3,
            lambda_cmt: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [
            ("lambda_hd", self.lambda_hd),
            ("lambda_mq", self.lambda_mq),
            ("lambda_align", self.lambda_align),
            ("lambda_cmt", self.lambda_cmt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ObjectiveError::Invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss hyperparameters other than the balancing weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub saliency_temperature: f64,
    pub alignment_temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            saliency_temperature: 0.07,
            alignment_temperature: 0.07,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(ObjectiveError::Invalid("focal alpha must lie in [0,1] and gamma >= 0".into()));
        }
        if !(self.saliency_temperature > 0.0 && self.alignment_temperature > 0.0) {
            return Err(ObjectiveError::Invalid("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Unweighted loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_mr: f64,
    pub l_hd: f64,
    pub l_cb: f64,
    pub l_cmt: f64,
    pub l_align: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mr: f64,
    pub l_hd: f64,
    /// `l_cb + lambda_cmt * l_cmt`.
    pub l_mq: f64,
    pub l_align: f64,
    pub total: f64,
}

/// Weighted combination; a non-finite part aborts with its name.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown, ObjectiveError> {
    for (part, value) in [
        ("l_mr", parts.l_mr),
        ("l_hd", parts.l_hd),
        ("l_cb", parts.l_cb),
        ("l_cmt", parts.l_cmt),
        ("l_align", parts.l_align),
    ] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { part, value });
        }
    }
    let l_mq = parts.l_cb + w.lambda_cmt * parts.l_cmt;
    Ok(LossBreakdown {
        l_mr: parts.l_mr,
        l_hd: parts.l_hd,
        l_mq,
        l_align: parts.l_align,
        total: parts.l_mr + w.lambda_hd * parts.l_hd + w.lambda_mq * l_mq + w.lambda_align * parts.l_align,
    })
}

/// Loss parts still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_mr: Var,
    pub l_hd: Var,
    pub l_cb: Var,
    pub l_cmt: Var,
    pub l_align: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        let v = |x: Var| tape.value(x).item();
        LossParts {
            l_mr: v(self.l_mr),
            l_hd: v(self.l_hd),
            l_cb: v(self.l_cb),
            l_cmt: v(self.l_cmt),
            l_align: v(self.l_align),
        }
    }

    /// The differentiable total, checked part by part for finiteness.
    pub fn total(&self, tape: &mut Tape, w: &LossWeights) -> Result<Var, ObjectiveError> {
        total_loss(&self.values(tape), w)?;
        let cmt = tape.scale(self.l_cmt, w.lambda_cmt);
        let mq = tape.add(self.l_cb, cmt)?;
        let hd = tape.scale(self.l_hd, w.lambda_hd);
        let mq = tape.scale(mq, w.lambda_mq);
        let al = tape.scale(self.l_align, w.lambda_align);
        let t = tape.add(self.l_mr, hd)?;
        let t = tape.add(t, mq)?;
        Ok(tape.add(t, al)?)
    }
}

/// Per-clip regression targets derived from ground-truth windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTargets {
    /// 1 where the clip center lies inside a window.
    pub foreground: Vec<f64>,
    /// Clip-unit distances from each positive center to its window's start
    /// and end; zero on negatives.
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl ClipTargets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.foreground.len()).filter(|&t| self.foreground[t] > 0.0).collect()
    }
}

/// A clip is positive iff its center falls inside a window; the first such
/// window supplies its offsets.
pub fn clip_targets(windows: &[Window], num_clips: usize, clip_len: f64) -> ClipTargets {
    let mut out = ClipTargets {
        foreground: vec![0.0; num_clips],
        start: vec![0.0; num_clips],
        end: vec![0.0; num_clips],
    };
    for t in 0..num_clips {
        let center = t as f64 + 0.5;
        let secs = center * clip_len;
        if let Some(w) = windows.iter().find(|w| secs >= w[0] && secs <= w[1]) {
            out.foreground[t] = 1.0;
            out.start[t] = center - w[0] / clip_len;
            out.end[t] = w[1] / clip_len - center;
        }
    }
    out
}

fn column(values: &[f64]) -> Tensor {
    Tensor::new(&[values.len(), 1], values.to_vec())
}

/// Per-clip focal terms `-alpha_t (1 - p_t)^gamma ln p_t`, shaped like
/// `confidence`. Logs are floored at 1e-12.
pub fn focal_terms(tape: &mut Tape, confidence: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var, ObjectiveError> {
    let shape = tape.shape(confidence).to_vec();
    if shape.iter().product::<usize>() != labels.len() {
        return Err(ObjectiveError::Invalid(format!(
            "{} labels for confidence of shape {shape:?}",
            labels.len()
        )));
    }
    let y = tape.constant(Tensor::new(&shape, labels.to_vec()));
    let not_y = tape.constant(Tensor::new(&shape, labels.iter().map(|l| 1.0 - l).collect()));
    let alpha_t = tape.constant(Tensor::new(
        &shape,
        labels.iter().map(|l| alpha * l + (1.0 - alpha) * (1.0 - l)).collect(),
    ));
    let q = tape.one_minus(confidence)?;
    let a = tape.mul(confidence, y)?;
    let b = tape.mul(q, not_y)?;
    let pt = tape.add(a, b)?;
    let log_pt = tape.log_floor(pt, 1e-12);
    let one_minus_pt = tape.one_minus(pt)?;
    let log_q = tape.log_floor(one_minus_pt, 1e-12);
    let pow = tape.scale(log_q, gamma);
    let modulator = tape.exp(pow);
    let ce = tape.mul(modulator, log_pt)?;
    let weighted = tape.mul(ce, alpha_t)?;
    Ok(tape.scale(weighted, -1.0))
}

/// `|x|` as `relu(x) + relu(-x)`.
fn abs(tape: &mut Tape, x: Var) -> Var {
    let pos = tape.relu(x);
    let neg_x = tape.scale(x, -1.0);
    let neg = tape.relu(neg_x);
    tape.add(pos, neg).expect("same shapes")
}

/// Focal loss summed over clips and divided by `max(#positives, 1)`, plus
/// the L1 error of start/end offsets averaged over positive clips.
pub fn moment_retrieval_loss(
    tape: &mut Tape,
    confidence: Var,
    start_offset: Var,
    end_offset: Var,
    targets: &ClipTargets,
    settings: &LossSettings,
) -> Result<Var, ObjectiveError> {
    let positives = targets.positives();
    let norm = positives.len().max(1) as f64;
    let terms = focal_terms(tape, confidence, &targets.foreground, settings.focal_alpha, settings.focal_gamma)?;
    let focal_sum = tape.sum(terms);
    let focal = tape.scale(focal_sum, 1.0 / norm);
    if positives.is_empty() {
        return Ok(focal);
    }
    let mut l1 = Vec::with_capacity(2);
    for (pred, target) in [(start_offset, &targets.start), (end_offset, &targets.end)] {
        let picked = tape.gather(pred, &positives)?;
        let t: Vec<f64> = positives.iter().map(|&i| target[i]).collect();
        let tv = tape.constant(column(&t));
        let diff = tape.sub(picked, tv)?;
        let a = abs(tape, diff);
        l1.push(tape.sum(a));
    }
    let l1_sum = tape.add(l1[0], l1[1])?;
    let l1_mean = tape.scale(l1_sum, 1.0 / norm);
    Ok(tape.add(focal, l1_mean)?)
}

/// `-mean_{p positive} log softmax(s / tau)_p`, with softmax over all clips
/// of the video. Returns `None` when no clip is positive.
pub fn saliency_loss(tape: &mut Tape, saliency: Var, labels: &[f64], tau: f64) -> Result<Option<Var>, ObjectiveError> {
    let n = tape.value(saliency).numel();
    if n != labels.len() {
        return Err(ObjectiveError::Invalid(format!("{} labels for {n} saliency scores", labels.len())));
    }
    let positives: Vec<usize> = (0..n).filter(|&t| labels[t] > 0.0).collect();
    if positives.is_empty() {
        return Ok(None);
    }
    let logits = tape.scale(saliency, 1.0 / tau);
    let lse = logsumexp(tape, logits)?;
    let picked = tape.gather(logits, &positives)?;
    let mean_pos = tape.mean(picked);
    Ok(Some(tape.sub(lse, mean_pos)?))
}

/// `ln sum exp(x)` over every element, shifted by the current maximum (a
/// constant, which leaves value and gradient unchanged).
fn logsumexp(tape: &mut Tape, x: Var) -> Result<Var, ObjectiveError> {
    let m = tape.value(x).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(x, -m)?;
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let l = tape.log(s);
    Ok(tape.add_scalar(l, m)?)
}

/// Symmetric InfoNCE over the `B x B` cosine matrix between pooled videos
/// and pooled queries (both `[B, d]`); row `i` of each is a positive pair.
pub fn alignment_loss(tape: &mut Tape, video: Var, text: Var, tau: f64) -> Result<Var, ObjectiveError> {
    let b = tape.shape(video)[0];
    if b < 2 {
        return Err(ObjectiveError::DegenerateBatch(b));
    }
    let sims = tape.cosine(video, text)?;
    let logits = tape.scale(sims, 1.0 / tau);
    // cosines are bounded, so a fixed shift of 1/tau keeps exp in range
    let shifted = tape.add_scalar(logits, -1.0 / tau)?;
    let e = tape.exp(shifted);
    let eye = tape.constant(Tensor::eye(b));
    let diag_m = tape.mul(logits, eye)?;
    let diag = tape.sum(diag_m);
    let mut dirs = Vec::with_capacity(2);
    for axis in [1, 0] {
        let s = tape.sum_axis(e, axis)?;
        let l = tape.log(s);
        let lse = tape.sum(l);
        let lse = tape.add_scalar(lse, b as f64 / tau)?;
        let ce = tape.sub(lse, diag)?;
        dirs.push(tape.scale(ce, 1.0 / b as f64));
    }
    let both = tape.add(dirs[0], dirs[1])?;
    Ok(tape.scale(both, 0.5))
}
