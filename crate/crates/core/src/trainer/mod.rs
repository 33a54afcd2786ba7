//! Deterministic training and evaluation: Adam on the weighted objective,
//! per-epoch validation, best-checkpoint tracking and codebook snapshots.

mod checkpoint;
mod optimizer;

use std::io::{BufRead, Write};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint};
pub use optimizer::{Adam, AdamConfig};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::codebook::{self, commitment_loss, codebook_loss, kmeans_init, CodebookError};
use crate::data::{DataError, VideoSample};
use crate::metrics::MetricsReport;
use crate::model::{DecodeConfig, Model, ModelConfig, ModelError, MomentPrediction, CODEBOOK_ENTRIES, CODEBOOK_PROJ_B, CODEBOOK_PROJ_W};
use crate::objectives::{
    alignment_loss, clip_targets, moment_retrieval_loss, saliency_loss, LossBreakdown, LossSettings, LossVars, LossWeights,
    ObjectiveError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no training videos")]
    EmptyDataset,
    #[error("batch {batch}: {source}")]
    NonFinite { batch: usize, source: ObjectiveError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How codewords are initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// Standard normal entries.
    Random,
    /// `K` training feature rows drawn without replacement.
    Selection,
    /// k-means centers of training features.
    Kmeans,
}

/// Which features feed the selection / k-means priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    /// Training clip features after the input projection.
    Clip,
    /// Features at the active quantization site of the untrained model.
    Site,
}

impl CodebookInit {
    pub fn name(self) -> &'static str {
        match self {
            CodebookInit::Random => "random",
            CodebookInit::Selection => "selection",
            CodebookInit::Kmeans => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub losses: LossSettings,
    pub optimizer: AdamConfig,
    pub decode: DecodeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub codebook_init: CodebookInit,
    pub prior_source: PriorSource,
    pub kmeans_iters: usize,
    /// Freezes the codeword matrix.
    pub codebook_frozen: bool,
    /// Trains the joint projector; off keeps it at the identity.
    pub projector_trainable: bool,
    /// Snapshot period in epochs; 0 keeps only the first and last.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            losses: LossSettings::default(),
            optimizer: AdamConfig::default(),
            decode: DecodeConfig::default(),
            epochs: 20,
            batch_size: 8,
            seed: 0,
            codebook_init: CodebookInit::Kmeans,
            prior_source: PriorSource::Clip,
            kmeans_iters: 50,
            codebook_frozen: false,
            projector_trainable: true,
            snapshot_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.weights.validate()?;
        self.losses.validate()?;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (alignment needs two pairs)");
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.eps > 0.0) {
            return bad("optimizer lr and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        if !(self.decode.nms_iou > 0.0 && self.decode.nms_iou <= 1.0) || self.decode.top_k == 0 {
            return bad("decode needs nms_iou in (0, 1] and top_k >= 1");
        }
        if self.kmeans_iters == 0 {
            return bad("kmeans_iters must be at least 1");
        }
        Ok(())
    }

    /// Whether `name` receives gradient updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        match name {
            CODEBOOK_ENTRIES => !self.codebook_frozen,
            CODEBOOK_PROJ_W | CODEBOOK_PROJ_B => self.projector_trainable,
            _ => true,
        }
    }
}

/// Per-epoch training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub loss: LossBreakdown,
    pub train_utilization: f64,
    /// Videos whose saliency loss was skipped for lack of positives.
    pub saliency_skipped: usize,
    pub val: Option<MetricsReport>,
}

/// Codebook state at the end of an epoch (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub entries: Tensor,
    pub projected: Tensor,
    /// Validation assignments, all clips of all videos in order.
    pub assignments: Vec<usize>,
    /// Codewords with at least one validation assignment.
    pub effective: Vec<usize>,
    pub utilization: f64,
}

impl Snapshot {
    fn capture(model: &Model, epoch: usize, assignments: Vec<usize>) -> Option<Self> {
        let cb = model.codebook()?;
        let counts = codebook::histogram(&assignments, cb.k());
        Some(Self {
            epoch,
            entries: cb.entries().clone(),
            projected: cb.project(),
            effective: codebook::effective_codewords(&counts),
            utilization: codebook::utilization(&counts),
            assignments,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    epoch: usize,
    utilization: f64,
    effective: Vec<usize>,
    assignments: Vec<usize>,
    entries: Vec<Vec<f64>>,
    projected: Vec<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Snapshots as JSON Lines.
pub fn write_snapshots(snapshots: &[Snapshot], out: &mut impl Write) -> Result<(), TrainError> {
    for s in snapshots {
        let rec = SnapshotRecord {
            epoch: s.epoch,
            utilization: s.utilization,
            effective: s.effective.clone(),
            assignments: s.assignments.clone(),
            entries: rows_of(&s.entries),
            projected: rows_of(&s.projected),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshots(input: &mut impl BufRead) -> Result<Vec<Snapshot>, TrainError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SnapshotRecord = serde_json::from_str(&line)?;
        out.push(Snapshot {
            epoch: r.epoch,
            entries: Tensor::from_rows(&r.entries),
            projected: Tensor::from_rows(&r.projected),
            assignments: r.assignments,
            effective: r.effective,
            utilization: r.utilization,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last epoch.
    pub last: Checkpoint,
    /// State after the epoch with the best validation `map_avg` (the last
    /// epoch when there is no validation split).
    pub best: Checkpoint,
    pub best_map_avg: Option<f64>,
    pub log: Vec<EpochRecord>,
    /// Weighted total of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainOutcome {
    /// The log as JSON Lines.
    pub fn write_log(&self, out: &mut impl Write) -> Result<(), TrainError> {
        for rec in &self.log {
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Features used for codebook priors, `[n, d]`.
pub fn prior_features(model: &Model, samples: &[VideoSample], source: PriorSource) -> Result<Tensor, TrainError> {
    let d = model.config().d;
    let mut data = Vec::new();
    match source {
        PriorSource::Clip => {
            let w = model.params().get("input.w").expect("input projection exists");
            let b = model.params().get("input.b").expect("input projection exists");
            let mut tape = Tape::new();
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            for s in samples {
                let x = tape.constant(s.clip_features.clone());
                let z = tape.linear(x, wv, bv)?;
                data.extend_from_slice(tape.value(z).data());
            }
        }
        PriorSource::Site => {
            for s in samples {
                if let Some(site) = model.infer(s)?.site_features {
                    data.extend_from_slice(site.data());
                }
            }
        }
    }
    Ok(Tensor::new(&[data.len() / d, d], data))
}

/// Sets the codeword matrix according to `config.codebook_init`.
pub fn init_codebook(model: &mut Model, config: &TrainConfig, train: &[VideoSample]) -> Result<(), TrainError> {
    if !model.config().quantized() || config.codebook_init == CodebookInit::Random {
        return Ok(());
    }
    let k = model.config().codebook_size;
    let feats = prior_features(model, train, config.prior_source)?;
    let entries = match config.codebook_init {
        CodebookInit::Random => unreachable!(),
        CodebookInit::Selection => {
            if feats.rows() < k {
                return Err(CodebookError::TooFewPoints { n: feats.rows(), k }.into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(2);
            let picks = rand::seq::index::sample(&mut rng, feats.rows(), k);
            let rows: Vec<Vec<f64>> = picks.iter().map(|i| feats.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)
        }
        CodebookInit::Kmeans => kmeans_init(&feats, k, config.kmeans_iters, config.seed)?,
    };
    model.set_codebook_entries(entries)?;
    Ok(())
}

/// Groups shuffled indices into batches; a trailing singleton joins the
/// previous batch so every batch has at least two pairs.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("at least one batch").extend(tail);
    }
    out
}

struct StepResult {
    breakdown: LossBreakdown,
    assignments: Vec<usize>,
    saliency_skipped: usize,
}

fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    config: &TrainConfig,
    batch: &[&VideoSample],
    batch_id: usize,
) -> Result<StepResult, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |n| config.is_trainable(n));
    let zero = tape.constant(Tensor::scalar(0.0));
    let (mut l_mr, mut l_hd, mut l_cb, mut l_cmt) = (zero, zero, zero, zero);
    let (mut videos, mut texts) = (Vec::new(), Vec::new());
    let mut assignments = Vec::new();
    let mut saliency_skipped = 0;
    let acc = |tape: &mut Tape, a: Var, b: Var| tape.add(a, b);
    for s in batch {
        let pass = model.forward(&mut tape, &bound, s)?;
        let targets = clip_targets(&s.gt_windows, s.num_clips(), s.clip_len());
        let h = pass.heads;
        let mr = moment_retrieval_loss(&mut tape, h.confidence, h.start_offset, h.end_offset, &targets, &config.losses)?;
        l_mr = acc(&mut tape, l_mr, mr)?;
        match saliency_loss(&mut tape, h.saliency, &s.saliency_labels, config.losses.saliency_temperature)? {
            Some(hd) => l_hd = acc(&mut tape, l_hd, hd)?,
            None => {
                debug!("{}: no positive clips, saliency loss skipped", s.vid);
                saliency_skipped += 1;
            }
        }
        if let Some(q) = &pass.quant {
            let cb = codebook_loss(&mut tape, q.z, q.projected, &q.assignment)?;
            let cmt = commitment_loss(&mut tape, q.z, q.projected, &q.assignment)?;
            l_cb = acc(&mut tape, l_cb, cb)?;
            l_cmt = acc(&mut tape, l_cmt, cmt)?;
            assignments.extend_from_slice(&q.assignment.indices);
        }
        videos.push(pass.video_pooled);
        texts.push(pass.text_pooled);
    }
    let inv = 1.0 / batch.len() as f64;
    let v = tape.concat(&videos, 0)?;
    let t = tape.concat(&texts, 0)?;
    let vars = LossVars {
        l_mr: tape.scale(l_mr, inv),
        l_hd: tape.scale(l_hd, inv),
        l_cb: tape.scale(l_cb, inv),
        l_cmt: tape.scale(l_cmt, inv),
        l_align: alignment_loss(&mut tape, v, t, config.losses.alignment_temperature)?,
    };
    let total = vars
        .total(&mut tape, &config.weights)
        .map_err(|source| TrainError::NonFinite { batch: batch_id, source })?;
    let breakdown = crate::objectives::total_loss(&vars.values(&tape), &config.weights)?;
    let grads = tape.backward(total)?;
    let grad_list: Vec<Option<Tensor>> = bound
        .vars()
        .iter()
        .map(|&var| tape.requires_grad(var).then(|| grads.get_or_zeros(var)))
        .collect();
    adam.update(model.params_mut().tensors_mut(), &grad_list);
    model.params_mut().round_to_f32();
    adam.round_to_f32();
    Ok(StepResult {
        breakdown,
        assignments,
        saliency_skipped,
    })
}

/// Produces predictions (and codeword ids, when quantizing) for evaluation.
pub trait Predictor {
    fn predict(&self, sample: &VideoSample) -> Result<(MomentPrediction, Option<Vec<usize>>), TrainError>;
    /// Codebook size for utilization, if any.
    fn codebook_size(&self) -> Option<usize> {
        None
    }
}

/// A model paired with its decoding settings.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub decode: DecodeConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &VideoSample) -> Result<(MomentPrediction, Option<Vec<usize>>), TrainError> {
        let inf = self.model.infer(sample)?;
        let pred = crate::model::decode_moments(&inf.heads, sample.clip_len(), sample.duration, &self.decode);
        Ok((pred, inf.assignment.map(|a| a.indices)))
    }

    fn codebook_size(&self) -> Option<usize> {
        self.model.config().quantized().then_some(self.model.config().codebook_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<MomentPrediction>,
    /// Codeword ids per video; empty without a codebook.
    pub assignments: Vec<Vec<usize>>,
}

pub fn evaluate_predictor(predictor: &dyn Predictor, samples: &[VideoSample]) -> Result<Evaluation, TrainError> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut assignments = Vec::new();
    for s in samples {
        let (pred, codes) = predictor.predict(s)?;
        predictions.push(pred);
        if let Some(c) = codes {
            assignments.push(c);
        }
    }
    let spans: Vec<_> = predictions.iter().map(|p| p.spans.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.gt_windows.clone()).collect();
    let saliency: Vec<_> = predictions.iter().map(|p| p.saliency.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.saliency_labels.clone()).collect();
    let util = match predictor.codebook_size() {
        Some(k) => codebook::utilization(&codebook::histogram(&assignments.concat(), k)),
        None => 0.0,
    };
    Ok(Evaluation {
        report: MetricsReport::compute(&spans, &gts, &saliency, &labels, util),
        predictions,
        assignments,
    })
}

pub fn evaluate(model: &Model, samples: &[VideoSample], decode: &DecodeConfig) -> Result<Evaluation, TrainError> {
    let width = model.config().input_dim;
    if let Some(s) = samples.iter().find(|s| s.clip_features.cols() != width) {
        return Err(ModelError::Shape(format!(
            "{}: feature width {} does not match the model's {width}",
            s.vid,
            s.clip_features.cols()
        ))
        .into());
    }
    evaluate_predictor(&ModelPredictor { model, decode: *decode }, samples)
}

/// Trains from scratch on `train`, validating on `val` after every epoch.
pub fn train(config: &TrainConfig, train: &[VideoSample], val: &[VideoSample]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    init_codebook(&mut model, config, train)?;
    let mut adam = Adam::new(config.optimizer, model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);

    let mut snapshots = Vec::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    let val_eval = |model: &Model| -> Result<Option<Evaluation>, TrainError> {
        if val.is_empty() {
            return Ok(None);
        }
        evaluate(model, val, &config.decode).map(Some)
    };
    if config.model.quantized() {
        let ev = val_eval(&model)?;
        let codes = ev.map(|e| e.assignments.concat()).unwrap_or_default();
        snapshots.extend(Snapshot::capture(&model, 0, codes));
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_id = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0.0;
        let mut train_codes = Vec::new();
        let mut skipped = 0;
        for b in batches(&order, config.batch_size) {
            let batch: Vec<&VideoSample> = b.iter().map(|&i| &train[i]).collect();
            let r = train_step(&mut model, &mut adam, config, &batch, batch_id)?;
            batch_id += 1;
            step_losses.push(r.breakdown.total);
            sums.l_mr += r.breakdown.l_mr;
            sums.l_hd += r.breakdown.l_hd;
            sums.l_mq += r.breakdown.l_mq;
            sums.l_align += r.breakdown.l_align;
            sums.total += r.breakdown.total;
            n_batches += 1.0;
            train_codes.extend(r.assignments);
            skipped += r.saliency_skipped;
        }
        if skipped > 0 {
            warn!("epoch {epoch}: {skipped} videos without positive clips skipped the saliency loss");
        }
        let loss = LossBreakdown {
            l_mr: sums.l_mr / n_batches,
            l_hd: sums.l_hd / n_batches,
            l_mq: sums.l_mq / n_batches,
            l_align: sums.l_align / n_batches,
            total: sums.total / n_batches,
        };
        let train_utilization = if config.model.quantized() {
            codebook::utilization(&codebook::histogram(&train_codes, config.model.codebook_size))
        } else {
            0.0
        };
        let ev = val_eval(&model)?;
        let report = ev.as_ref().map(|e| e.report);
        debug!("epoch {epoch}: total {:.5}, val {:?}", loss.total, report.as_ref().map(|r| r.map_avg));

        let checkpoint = || Checkpoint {
            config: config.clone(),
            model: model.clone(),
            optimizer: adam.clone(),
            epoch,
        };
        let score = report.as_ref().map_or(f64::NEG_INFINITY, |r| r.map_avg);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, checkpoint()));
        }
        let snap_due = config.snapshot_every > 0 && epoch % config.snapshot_every == 0;
        if config.model.quantized() && (snap_due || epoch == config.epochs) {
            let codes = ev.map(|e| e.assignments.concat()).unwrap_or_default();
            snapshots.extend(Snapshot::capture(&model, epoch, codes));
        }
        log.push(EpochRecord {
            epoch,
            loss,
            train_utilization,
            saliency_skipped: skipped,
            val: report,
        });
    }
    let last = Checkpoint {
        config: config.clone(),
        model,
        optimizer: adam,
        epoch: config.epochs,
    };
    let (score, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: if val.is_empty() { last.clone() } else { best },
        last,
        best_map_avg: (!val.is_empty()).then_some(score),
        log,
        step_losses,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_absorb_singleton_tail() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], vec![4, 5, 6, 7, 8]);
        assert_eq!(batches(&order[..6], 3).len(), 2);
    }

    #[test]
    fn config_rejects_small_batches() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn trainable_flags() {
        let cfg = TrainConfig {
            codebook_frozen: true,
            projector_trainable: false,
            ..Default::default()
        };
        assert!(!cfg.is_trainable(CODEBOOK_ENTRIES));
        assert!(!cfg.is_trainable(CODEBOOK_PROJ_W));
        assert!(cfg.is_trainable("head.conf.w"));
    }
}
