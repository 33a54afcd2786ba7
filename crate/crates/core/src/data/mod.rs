//! Datasets: the synthetic generator, JSONL annotations and MQFT features.

mod annotations;
pub mod mqft;
mod synthetic;

use std::fs;
use std::path::Path;

pub use annotations::{load_annotations, parse_annotations, write_annotations, AnnotationLoad, AnnotationRecord};
pub use mqft::{read_features, write_features, FeatureFile};
pub use synthetic::{generate_synthetic, ClipSource, SyntheticDataset, SyntheticSpec, SyntheticTruth};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::metrics::Window;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not an MQFT file")]
    BadMagic,
    #[error("unsupported MQFT version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated MQFT payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after MQFT payload")]
    TrailingBytes(usize),
    #[error("extent {0} does not fit in 32 bits")]
    TooLarge(usize),
    #[error("refusing to write non-finite features")]
    NonFinite,
    #[error("line {line}: malformed annotation: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One video paired with one query.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub qid: u64,
    pub vid: String,
    /// Seconds.
    pub duration: f64,
    /// `[T, d]`.
    pub clip_features: Tensor,
    /// `[T, P, d]`, when available.
    pub patch_features: Option<Tensor>,
    /// `[N, d]` query token features.
    pub query_features: Tensor,
    pub gt_windows: Vec<Window>,
    /// One label per clip; positive inside ground-truth windows.
    pub saliency_labels: Vec<f64>,
    pub query: Option<String>,
}

impl VideoSample {
    pub fn num_clips(&self) -> usize {
        self.clip_features.rows()
    }

    pub fn clip_len(&self) -> f64 {
        self.duration / self.num_clips() as f64
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let t = self.num_clips();
        if t == 0 || self.clip_features.ndim() != 2 {
            return Err(DataError::Invalid(format!("{}: clip features must be T x d", self.vid)));
        }
        if self.saliency_labels.len() != t {
            return Err(DataError::Invalid(format!(
                "{}: {} saliency labels for {t} clips",
                self.vid,
                self.saliency_labels.len()
            )));
        }
        if let Some(p) = &self.patch_features {
            if p.ndim() != 3 || p.shape()[0] != t || p.shape()[2] != self.clip_features.cols() {
                return Err(DataError::Invalid(format!(
                    "{}: patch features {:?} do not match clips {:?}",
                    self.vid,
                    p.shape(),
                    self.clip_features.shape()
                )));
            }
        }
        if self.query_features.ndim() != 2 || self.query_features.rows() == 0 {
            return Err(DataError::Invalid(format!("{}: query features must be N x d", self.vid)));
        }
        for w in &self.gt_windows {
            if !(w[0] < w[1] && w[0] >= 0.0 && w[1] <= self.duration) {
                return Err(DataError::Invalid(format!(
                    "{}: window [{}, {}] invalid for duration {}",
                    self.vid, w[0], w[1], self.duration
                )));
            }
        }
        Ok(())
    }

    /// Whether clip `t`'s center falls inside some ground-truth window.
    pub fn clip_in_window(&self, t: usize) -> bool {
        let center = (t as f64 + 0.5) * self.clip_len();
        self.gt_windows.iter().any(|w| center >= w[0] && center <= w[1])
    }

    /// `label > 0` exactly on clips whose center lies in a window.
    pub fn check_label_consistency(&self) -> Result<(), DataError> {
        for (t, &l) in self.saliency_labels.iter().enumerate() {
            if (l > 0.0) != self.clip_in_window(t) {
                return Err(DataError::Invalid(format!(
                    "{}: clip {t} label {l} disagrees with windows",
                    self.vid
                )));
            }
        }
        Ok(())
    }

    pub fn annotation(&self) -> AnnotationRecord {
        AnnotationRecord {
            qid: self.qid,
            vid: self.vid.clone(),
            duration: self.duration,
            relevant_windows: self.gt_windows.clone(),
            saliency: self.saliency_labels.clone(),
            query: self.query.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
}

const TRAIN_FILE: &str = "train.jsonl";
const VAL_FILE: &str = "val.jsonl";
const FEATURE_DIR: &str = "features";

impl Dataset {
    /// Writes `train.jsonl`, `val.jsonl` and `features/` under `dir`.
    ///
    /// Per query: `<vid>.clip.mqft`, optional `<vid>.patch.mqft`, and
    /// `q<qid>.text.mqft`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let feats = dir.join(FEATURE_DIR);
        fs::create_dir_all(&feats)?;
        for (file, split) in [(TRAIN_FILE, &self.train), (VAL_FILE, &self.val)] {
            let records: Vec<AnnotationRecord> = split.iter().map(VideoSample::annotation).collect();
            write_annotations(&dir.join(file), &records)?;
            for s in split {
                write_features(&feats.join(format!("{}.clip.mqft", s.vid)), &s.clip_features, None)?;
                if let Some(p) = &s.patch_features {
                    mqft::write_patch_features(&feats.join(format!("{}.patch.mqft", s.vid)), p)?;
                }
                write_features(&feats.join(format!("q{}.text.mqft", s.qid)), &s.query_features, None)?;
            }
        }
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`] (or laid out the same
    /// way from precomputed features).
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let feats = dir.join(FEATURE_DIR);
        let split = |file: &str| -> Result<Vec<VideoSample>, DataError> {
            let path = dir.join(file);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let load = load_annotations(&path)?;
            load.records
                .into_iter()
                .map(|r| {
                    let clip = read_features(&feats.join(format!("{}.clip.mqft", r.vid)))?.matrix;
                    let patch_path = feats.join(format!("{}.patch.mqft", r.vid));
                    let patch = if patch_path.exists() {
                        Some(mqft::read_patch_features(&patch_path)?)
                    } else {
                        None
                    };
                    let text = read_features(&feats.join(format!("q{}.text.mqft", r.qid)))?.matrix;
                    let sample = VideoSample {
                        qid: r.qid,
                        vid: r.vid,
                        duration: r.duration,
                        clip_features: clip,
                        patch_features: patch,
                        query_features: text,
                        gt_windows: r.relevant_windows,
                        saliency_labels: r.saliency,
                        query: r.query,
                    };
                    sample.validate()?;
                    Ok(sample)
                })
                .collect()
        };
        let data = Self {
            train: split(TRAIN_FILE)?,
            val: split(VAL_FILE)?,
        };
        if data.train.is_empty() && data.val.is_empty() {
            return Err(DataError::Invalid(format!("no annotations found under {}", dir.display())));
        }
        Ok(data)
    }

    /// Clip features of every training video stacked into `[sum T, d]`.
    pub fn train_clip_matrix(&self) -> Tensor {
        let d = self.train.first().map_or(0, |s| s.clip_features.cols());
        let mut data = Vec::new();
        for s in &self.train {
            data.extend_from_slice(s.clip_features.data());
        }
        Tensor::new(&[data.len() / d.max(1), d], data)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.train.iter().chain(&self.val).next().map(|s| s.clip_features.cols())
    }
}
