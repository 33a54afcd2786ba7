//! Synthetic moment-grounding benchmark with known ground truth.
//!
//! A fixed vocabulary of unit-norm scene prototypes is drawn once. Each
//! prototype gets a "hard" background partner at a controlled cosine from
//! it. A video picks a foreground prototype; its query tokens are noisy
//! copies of that prototype, its moments are runs of noisy foreground clips,
//! and the remaining clips come in background runs drawn either from the
//! hard partner or from other prototypes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, VideoSample};
use crate::autodiff::{dot, norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Total videos, validation included.
    pub num_videos: usize,
    /// Videos taken from the end for validation.
    pub val_videos: usize,
    /// Clips per video (T).
    pub clips: usize,
    /// Patches per clip (P); 0 skips patch features.
    pub patches: usize,
    pub dim: usize,
    pub num_prototypes: usize,
    /// Inclusive range of moments per video.
    pub moments_per_video: [usize; 2],
    /// Inclusive range of moment lengths, in clips.
    pub moment_len: [usize; 2],
    pub query_tokens: usize,
    /// Noise standard deviation relative to the unit prototype norm; each
    /// component gets `noise_sigma / sqrt(dim)`.
    pub noise_sigma: f64,
    /// Cosine between a foreground prototype and its hard background partner.
    pub foreground_similarity: f64,
    /// Seconds per clip.
    pub clip_len: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 250,
            val_videos: 50,
            clips: 32,
            patches: 0,
            dim: 64,
            num_prototypes: 16,
            moments_per_video: [1, 3],
            moment_len: [3, 8],
            query_tokens: 4,
            noise_sigma: 0.5,
            foreground_similarity: 0.7,
            clip_len: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_prototypes < 2 {
            return bad("num_prototypes must be at least 2".into());
        }
        if self.clips < 4 {
            return bad(format!("clips (T) must be at least 4, got {}", self.clips));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if !(-1.0..=1.0).contains(&self.foreground_similarity) {
            return bad("foreground_similarity must lie in [-1, 1]".into());
        }
        let [lo, hi] = self.moment_len;
        if lo == 0 || lo > hi {
            return bad(format!("moment_len range {lo}..={hi} is empty"));
        }
        if hi > self.clips {
            return bad(format!("moments of up to {hi} clips do not fit T={}", self.clips));
        }
        let [mlo, mhi] = self.moments_per_video;
        if mlo == 0 || mlo > mhi {
            return bad(format!("moments_per_video range {mlo}..={mhi} is empty"));
        }
        if mlo * (lo + 1) - 1 > self.clips {
            return bad(format!("{mlo} moments of {lo} clips cannot fit T={}", self.clips));
        }
        if self.dim == 0 || self.query_tokens == 0 {
            return bad("dim and query_tokens must be positive".into());
        }
        if self.val_videos >= self.num_videos {
            return bad("need at least one training video".into());
        }
        if !(self.clip_len > 0.0 && self.clip_len.is_finite()) {
            return bad("clip_len must be positive".into());
        }
        Ok(())
    }
}

/// Where a clip's clean feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipSource {
    Foreground(usize),
    HardBackground(usize),
    Background(usize),
}

/// Generator-side ground truth, not written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub prototypes: Tensor,
    /// Row `k` is the hard background partner of prototype `k`.
    pub hard_partners: Tensor,
    /// Per video (train then val): foreground prototype id.
    pub foreground: Vec<usize>,
    /// Per video: the source of every clip.
    pub sources: Vec<Vec<ClipSource>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub truth: SyntheticTruth,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at cosine `cos` from unit `anchor`, rotated toward `toward`.
fn partner(anchor: &[f64], toward: &[f64], cos: f64) -> Vec<f64> {
    let along = dot(anchor, toward);
    let mut ortho: Vec<f64> = toward.iter().zip(anchor).map(|(t, a)| t - along * a).collect();
    let n = norm(&ortho);
    for v in &mut ortho {
        *v /= n;
    }
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    anchor.iter().zip(&ortho).map(|(a, o)| cos * a + sin * o).collect()
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    rng.set_stream(1);
    rng
}

/// Non-overlapping `[start, end)` clip runs separated by at least one clip.
fn place_moments(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let [mlo, mhi] = spec.moments_per_video;
    let [llo, lhi] = spec.moment_len;
    let wanted = rng.random_range(mlo..=mhi);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < wanted && attempts < 200 {
        attempts += 1;
        let len = rng.random_range(llo..=lhi);
        let start = rng.random_range(0..=spec.clips - len);
        let (s, e) = (start, start + len);
        if placed.iter().all(|&(ps, pe)| e < ps || s > pe) {
            placed.push((s, e));
        }
    }
    if placed.len() < mlo {
        // deterministic fallback: pack the minimum count left to right
        placed = (0..mlo).map(|i| (i * (llo + 1), i * (llo + 1) + llo)).collect();
    }
    placed.sort_unstable();
    placed
}

fn noisy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = sigma / (base.len() as f64).sqrt();
    base.iter()
        .map(|b| {
            let g: f64 = rng.sample(StandardNormal);
            b + scale * g
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let (n_proto, d, t) = (spec.num_prototypes, spec.dim, spec.clips);
    let mut base_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<Vec<f64>> = (0..n_proto).map(|_| unit_vector(d, &mut base_rng)).collect();
    let partners: Vec<Vec<f64>> = (0..n_proto)
        .map(|k| partner(&protos[k], &protos[(k + 1) % n_proto], spec.foreground_similarity))
        .collect();

    let mut samples = Vec::with_capacity(spec.num_videos);
    let mut foreground = Vec::with_capacity(spec.num_videos);
    let mut all_sources = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let mut rng = video_rng(spec.seed, i);
        let fg = rng.random_range(0..n_proto);
        let moments = place_moments(spec, &mut rng);

        let mut sources = vec![ClipSource::Background(0); t];
        let mut c = 0;
        while c < t {
            if let Some(&(s, e)) = moments.iter().find(|&&(s, _)| s == c) {
                for src in &mut sources[s..e] {
                    *src = ClipSource::Foreground(fg);
                }
                c = e;
                continue;
            }
            let run = rng.random_range(2..=6usize);
            let next_fg = moments.iter().map(|&(s, _)| s).filter(|&s| s > c).min().unwrap_or(t);
            let end = (c + run).min(next_fg);
            let src = if rng.random_bool(0.5) {
                ClipSource::HardBackground(fg)
            } else {
                let other = (fg + 1 + rng.random_range(0..n_proto - 1)) % n_proto;
                ClipSource::Background(other)
            };
            for s in &mut sources[c..end] {
                *s = src;
            }
            c = end;
        }

        let base_of = |s: ClipSource| match s {
            ClipSource::Foreground(k) | ClipSource::Background(k) => &protos[k],
            ClipSource::HardBackground(k) => &partners[k],
        };
        let mut clip_data = Vec::with_capacity(t * d);
        let mut patch_data = Vec::with_capacity(t * spec.patches * d);
        for &src in &sources {
            let base = base_of(src);
            if spec.patches == 0 {
                clip_data.extend(noisy(base, spec.noise_sigma, &mut rng));
            } else {
                let mut pooled = vec![f64::NEG_INFINITY; d];
                for _ in 0..spec.patches {
                    let p = noisy(base, spec.noise_sigma, &mut rng);
                    for (m, v) in pooled.iter_mut().zip(&p) {
                        *m = m.max(*v);
                    }
                    patch_data.extend(p);
                }
                clip_data.extend(pooled);
            }
        }
        let query: Vec<f64> = (0..spec.query_tokens)
            .flat_map(|_| noisy(&protos[fg], spec.noise_sigma, &mut rng))
            .collect();

        let mut clip = Tensor::new(&[t, d], clip_data);
        clip.round_to_f32();
        let patch = (spec.patches > 0).then(|| {
            let mut p = Tensor::new(&[t, spec.patches, d], patch_data);
            p.round_to_f32();
            p
        });
        let mut query = Tensor::new(&[spec.query_tokens, d], query);
        query.round_to_f32();

        let gt_windows: Vec<[f64; 2]> = moments
            .iter()
            .map(|&(s, e)| [s as f64 * spec.clip_len, e as f64 * spec.clip_len])
            .collect();
        let saliency_labels = (0..t)
            .map(|c| f64::from(u8::from(moments.iter().any(|&(s, e)| c >= s && c < e))))
            .collect();
        samples.push(VideoSample {
            qid: i as u64,
            vid: format!("syn{}_{i:05}", spec.seed),
            duration: t as f64 * spec.clip_len,
            clip_features: clip,
            patch_features: patch,
            query_features: query,
            gt_windows,
            saliency_labels,
            query: None,
        });
        foreground.push(fg);
        all_sources.push(sources);
    }
    let val = samples.split_off(spec.num_videos - spec.val_videos);
    let to_tensor = |rows: &[Vec<f64>]| Tensor::from_rows(rows);
    Ok(SyntheticDataset {
        dataset: Dataset { train: samples, val },
        truth: SyntheticTruth {
            prototypes: to_tensor(&protos),
            hard_partners: to_tensor(&partners),
            foreground,
            sources: all_sources,
        },
    })
}
