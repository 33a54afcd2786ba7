//! Encoder-only grounding model: input projection, attention encoder,
//! quantization placement and fusion, and the three prediction heads.

mod decode;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::{candidate_spans, decode_moments, nms, DecodeConfig, MomentPrediction};
pub(crate) use params::xavier;
pub use params::{BoundParams, ParamStore};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::codebook::{lookup, Assignment, Codebook, CodebookError};
use crate::data::VideoSample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// Where the codebook lookup happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// No quantization.
    None,
    /// On projected patch features, before max-pooling over patches.
    Image,
    /// On pooled clip features, before the temporal encoder.
    Clip,
    /// On encoder outputs.
    Moment,
}

/// How quantized rows combine with the continuous features they replace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Quantized rows replace the features (straight-through gradient).
    Hard,
    /// Continuous features pass on unchanged; the codebook only shapes them
    /// through its losses.
    Soft,
    Add,
    /// `[z, q]` projected back to `d`.
    Concat,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::None, Placement::Image, Placement::Clip, Placement::Moment];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Image => "image",
            Placement::Clip => "clip",
            Placement::Moment => "moment",
        }
    }
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Hard, Fusion::Soft, Fusion::Add, Fusion::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Hard => "hard",
            Fusion::Soft => "soft",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    /// Width of the incoming clip/patch/text features.
    pub input_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub ff_hidden: usize,
    pub placement: Placement,
    /// `None` picks soft for moment placement and hard otherwise.
    pub fusion: Option<Fusion>,
    pub codebook_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            input_dim: 64,
            encoder_layers: 1,
            attention_heads: 4,
            ff_hidden: 128,
            placement: Placement::Moment,
            fusion: None,
            codebook_size: 128,
        }
    }
}

impl ModelConfig {
    pub fn resolved_fusion(&self) -> Fusion {
        self.fusion.unwrap_or(match self.placement {
            Placement::Moment => Fusion::Soft,
            _ => Fusion::Hard,
        })
    }

    pub fn quantized(&self) -> bool {
        self.placement != Placement::None
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d == 0 || self.input_dim == 0 {
            return bad("d and input_dim must be positive".into());
        }
        if self.attention_heads == 0 || !self.d.is_multiple_of(self.attention_heads) {
            return bad(format!("d={} is not divisible by {} heads", self.d, self.attention_heads));
        }
        if self.ff_hidden == 0 {
            return bad("ff_hidden must be positive".into());
        }
        if self.quantized() && self.codebook_size == 0 {
            return bad("codebook_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-clip head values for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// Foreground probability per clip.
    pub confidence: Vec<f64>,
    /// Distance from the clip center to the span start, in clips.
    pub start_offset: Vec<f64>,
    pub end_offset: Vec<f64>,
    pub saliency: Vec<f64>,
}

/// Head outputs still on the tape, each `[T, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub confidence: Var,
    pub start_offset: Var,
    pub end_offset: Var,
    pub saliency: Var,
}

impl HeadVars {
    pub fn values(&self, tape: &Tape) -> HeadOutputs {
        let col = |v: Var| tape.value(v).data().to_vec();
        HeadOutputs {
            confidence: col(self.confidence),
            start_offset: col(self.start_offset),
            end_offset: col(self.end_offset),
            saliency: col(self.saliency),
        }
    }
}

/// The active lookup site of one forward pass.
#[derive(Debug, Clone)]
pub struct QuantSite {
    /// Features that were quantized (`[.., d]`).
    pub z: Var,
    /// Projected codebook `C'` on the tape.
    pub projected: Var,
    pub assignment: Assignment,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub heads: HeadVars,
    /// Encoder output `[T, d]`.
    pub z_t: Var,
    /// Features the heads read (`z_t` after fusion under moment placement).
    pub features: Var,
    /// Mean of `features` over clips, `[1, d]`.
    pub video_pooled: Var,
    /// Mean of projected query tokens, `[1, d]`.
    pub text_pooled: Var,
    pub quant: Option<QuantSite>,
}

/// Forward values without a tape.
#[derive(Debug, Clone)]
pub struct Inference {
    pub heads: HeadOutputs,
    pub z_t: Tensor,
    /// Rows that were quantized, `[n, d]`.
    pub site_features: Option<Tensor>,
    pub assignment: Option<Assignment>,
}

pub const CODEBOOK_ENTRIES: &str = "codebook.entries";
pub const CODEBOOK_PROJ_W: &str = "codebook.proj_w";
pub const CODEBOOK_PROJ_B: &str = "codebook.proj_b";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[t, d], data)
}

impl Model {
    /// Fresh model with Glorot weights; the codebook starts as `N(0, 1)`
    /// entries with an identity projector.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, din) = (config.d, config.input_dim);
        let dh = d / config.attention_heads;
        let mut p = ParamStore::new();
        let proj = |rng: &mut ChaCha8Rng| if din == d { Tensor::eye(d) } else { xavier(din, d, rng) };
        p.insert("input.w", proj(&mut rng));
        p.insert("input.b", Tensor::zeros(&[d]));
        p.insert("text.w", proj(&mut rng));
        p.insert("text.b", Tensor::zeros(&[d]));
        for l in 0..config.encoder_layers {
            for block in ["self", "cross"] {
                for h in 0..config.attention_heads {
                    for m in ["q", "k", "v"] {
                        p.insert(format!("enc.{l}.{block}.{h}.{m}"), xavier(d, dh, &mut rng));
                    }
                }
                p.insert(format!("enc.{l}.{block}.o"), xavier(d, d, &mut rng));
                p.insert(format!("enc.{l}.{block}.o_b"), Tensor::zeros(&[d]));
            }
            for n in 1..=3 {
                p.insert(format!("enc.{l}.ln{n}.g"), Tensor::ones(&[d]));
                p.insert(format!("enc.{l}.ln{n}.b"), Tensor::zeros(&[d]));
            }
            p.insert(format!("enc.{l}.ff.w1"), xavier(d, config.ff_hidden, &mut rng));
            p.insert(format!("enc.{l}.ff.b1"), Tensor::zeros(&[config.ff_hidden]));
            p.insert(format!("enc.{l}.ff.w2"), xavier(config.ff_hidden, d, &mut rng));
            p.insert(format!("enc.{l}.ff.b2"), Tensor::zeros(&[d]));
        }
        for head in ["conf", "start", "end"] {
            p.insert(format!("head.{head}.w"), xavier(d, 1, &mut rng));
            p.insert(format!("head.{head}.b"), Tensor::zeros(&[1]));
        }
        p.insert("head.sal_scale", Tensor::ones(&[1]));
        if config.quantized() {
            if config.resolved_fusion() == Fusion::Concat {
                // [I; 0] so the fused output starts equal to the continuous half
                let mut w = Tensor::zeros(&[2 * d, d]);
                for i in 0..d {
                    w.data_mut()[i * d + i] = 1.0;
                }
                p.insert("fuse.w", w);
                p.insert("fuse.b", Tensor::zeros(&[d]));
            }
            p.insert(CODEBOOK_ENTRIES, Tensor::randn(&[config.codebook_size, d], &mut rng));
            p.insert(CODEBOOK_PROJ_W, Tensor::eye(d));
            p.insert(CODEBOOK_PROJ_B, Tensor::zeros(&[d]));
        }
        p.round_to_f32();
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a freshly initialized one.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if got.shape() != t.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked above").clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> Option<Codebook> {
        let e = self.params.get(CODEBOOK_ENTRIES)?;
        let w = self.params.get(CODEBOOK_PROJ_W)?;
        let b = self.params.get(CODEBOOK_PROJ_B)?;
        Codebook::with_projector(e.clone(), w.clone(), b.clone()).ok()
    }

    /// Replaces the codeword matrix (rounded onto the `f32` grid).
    pub fn set_codebook_entries(&mut self, mut entries: Tensor) -> Result<(), ModelError> {
        let cur = self
            .params
            .get(CODEBOOK_ENTRIES)
            .ok_or_else(|| ModelError::MissingParam(CODEBOOK_ENTRIES.into()))?;
        if cur.shape() != entries.shape() {
            return Err(ModelError::Shape(format!(
                "codebook entries {:?}, expected {:?}",
                entries.shape(),
                cur.shape()
            )));
        }
        entries.round_to_f32();
        self.params.insert(CODEBOOK_ENTRIES, entries);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    fn check_sample(&self, sample: &VideoSample) -> Result<(), ModelError> {
        let din = self.config.input_dim;
        if sample.clip_features.cols() != din || sample.query_features.cols() != din {
            return Err(ModelError::Shape(format!(
                "{}: features have width {} / {}, model expects {din}",
                sample.vid,
                sample.clip_features.cols(),
                sample.query_features.cols()
            )));
        }
        if self.config.placement == Placement::Image && sample.patch_features.is_none() {
            return Err(ModelError::Shape(format!(
                "{}: image placement needs patch features",
                sample.vid
            )));
        }
        Ok(())
    }

    /// Self-attention over clips, cross-attention to text, feed-forward;
    /// each with a residual and an affine layer norm. Zero layers is the
    /// identity.
    pub fn encode_video(&self, tape: &mut Tape, bound: &BoundParams, pooled: Var, text: Var) -> Result<Var, ModelError> {
        let mut x = pooled;
        for l in 0..self.config.encoder_layers {
            let sa = self.attention(tape, bound, &format!("enc.{l}.self"), x, x)?;
            let r = tape.add(x, sa)?;
            x = self.norm(tape, bound, &format!("enc.{l}.ln1"), r)?;
            let ca = self.attention(tape, bound, &format!("enc.{l}.cross"), x, text)?;
            let r = tape.add(x, ca)?;
            x = self.norm(tape, bound, &format!("enc.{l}.ln2"), r)?;
            let h = tape.linear(x, p(bound, &format!("enc.{l}.ff.w1"))?, p(bound, &format!("enc.{l}.ff.b1"))?)?;
            let h = tape.relu(h);
            let f = tape.linear(h, p(bound, &format!("enc.{l}.ff.w2"))?, p(bound, &format!("enc.{l}.ff.b2"))?)?;
            let r = tape.add(x, f)?;
            x = self.norm(tape, bound, &format!("enc.{l}.ln3"), r)?;
        }
        Ok(x)
    }

    fn norm(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let n = tape.layer_norm(x)?;
        let g = tape.mul(n, p(bound, &format!("{prefix}.g"))?)?;
        Ok(tape.add(g, p(bound, &format!("{prefix}.b"))?)?)
    }

    fn attention(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var, ctx: Var) -> Result<Var, ModelError> {
        let dh = self.config.d / self.config.attention_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.attention_heads);
        for h in 0..self.config.attention_heads {
            let q = tape.matmul(x, p(bound, &format!("{prefix}.{h}.q"))?)?;
            let k = tape.matmul(ctx, p(bound, &format!("{prefix}.{h}.k"))?)?;
            let v = tape.matmul(ctx, p(bound, &format!("{prefix}.{h}.v"))?)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, inv_sqrt);
            let a = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(a, v)?);
        }
        let cat = tape.concat(&heads, 1)?;
        Ok(tape.linear(cat, p(bound, &format!("{prefix}.o"))?, p(bound, &format!("{prefix}.o_b"))?)?)
    }

    /// Looks up the nearest projected codewords of `z` and fuses them in.
    pub fn apply_quantization(&self, tape: &mut Tape, bound: &BoundParams, z: Var) -> Result<(Var, QuantSite), ModelError> {
        let entries = p(bound, CODEBOOK_ENTRIES)?;
        let w = p(bound, CODEBOOK_PROJ_W)?;
        let b = p(bound, CODEBOOK_PROJ_B)?;
        let projected = tape.linear(entries, w, b)?;
        let shape = tape.shape(z).to_vec();
        let d = *shape.last().expect("features have a feature axis");
        let flat = tape.value(z).clone().reshaped(&[tape.value(z).numel() / d, d]);
        let mut assignment = lookup(&flat, tape.value(projected))?;
        assignment.quantized = assignment.quantized.reshaped(&shape);
        let prefix = &shape[..shape.len() - 1];
        let fused = match self.config.resolved_fusion() {
            Fusion::Soft => z,
            Fusion::Hard => {
                // sg(q) + (z - sg(z)): forward is q exactly, gradient reaches z
                let q = tape.gather_shaped(projected, &assignment.indices, prefix)?;
                let qs = tape.stop_gradient(q)?;
                let zs = tape.stop_gradient(z)?;
                let zero = tape.sub(z, zs)?;
                tape.add(qs, zero)?
            }
            Fusion::Add => {
                let q = tape.gather_shaped(projected, &assignment.indices, prefix)?;
                tape.add(z, q)?
            }
            Fusion::Concat => {
                let q = tape.gather_shaped(projected, &assignment.indices, prefix)?;
                let axis = shape.len() - 1;
                let cat = tape.concat(&[z, q], axis)?;
                tape.linear(cat, p(bound, "fuse.w")?, p(bound, "fuse.b")?)?
            }
        };
        Ok((
            fused,
            QuantSite {
                z,
                projected,
                assignment,
            },
        ))
    }

    /// Confidence, start/end offsets and saliency for `[T, d]` features.
    pub fn predict_heads(&self, tape: &mut Tape, bound: &BoundParams, z: Var, text_pooled: Var) -> Result<HeadVars, ModelError> {
        let conf = tape.linear(z, p(bound, "head.conf.w")?, p(bound, "head.conf.b")?)?;
        let confidence = tape.sigmoid(conf);
        let s = tape.linear(z, p(bound, "head.start.w")?, p(bound, "head.start.b")?)?;
        let start_offset = tape.softplus(s)?;
        let e = tape.linear(z, p(bound, "head.end.w")?, p(bound, "head.end.b")?)?;
        let end_offset = tape.softplus(e)?;
        let cos = tape.cosine(z, text_pooled)?;
        let saliency = tape.mul(cos, p(bound, "head.sal_scale")?)?;
        Ok(HeadVars {
            confidence,
            start_offset,
            end_offset,
            saliency,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, sample: &VideoSample) -> Result<ForwardPass, ModelError> {
        self.check_sample(sample)?;
        let (t, d) = (sample.num_clips(), self.config.d);
        let placement = self.config.placement;
        let mut quant = None;

        let (iw, ib) = (p(bound, "input.w")?, p(bound, "input.b")?);
        let mut z_s = if placement == Placement::Image {
            let patches = tape.constant(sample.patch_features.clone().expect("checked in check_sample"));
            let zp = tape.linear(patches, iw, ib)?;
            let (fused, site) = self.apply_quantization(tape, bound, zp)?;
            quant = Some(site);
            tape.max_pool(fused, 1)?
        } else {
            let clips = tape.constant(sample.clip_features.clone());
            tape.linear(clips, iw, ib)?
        };
        if placement == Placement::Clip {
            let (fused, site) = self.apply_quantization(tape, bound, z_s)?;
            quant = Some(site);
            z_s = fused;
        }
        let pe = tape.constant(positional_encoding(t, d));
        let z_in = tape.add(z_s, pe)?;

        let words = tape.constant(sample.query_features.clone());
        let text = tape.linear(words, p(bound, "text.w")?, p(bound, "text.b")?)?;
        let n = sample.query_features.rows();
        let text_avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let text_pooled = tape.matmul(text_avg, text)?;

        let z_t = self.encode_video(tape, bound, z_in, text)?;
        let features = if placement == Placement::Moment {
            let (fused, site) = self.apply_quantization(tape, bound, z_t)?;
            quant = Some(site);
            fused
        } else {
            z_t
        };
        let heads = self.predict_heads(tape, bound, features, text_pooled)?;
        let clip_avg = tape.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        let video_pooled = tape.matmul(clip_avg, features)?;
        Ok(ForwardPass {
            heads,
            z_t,
            features,
            video_pooled,
            text_pooled,
            quant,
        })
    }

    /// Forward pass with every parameter constant.
    pub fn infer(&self, sample: &VideoSample) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let pass = self.forward(&mut tape, &bound, sample)?;
        Ok(Inference {
            heads: pass.heads.values(&tape),
            z_t: tape.value(pass.z_t).clone(),
            site_features: pass.quant.as_ref().map(|q| {
                let z = tape.value(q.z).clone();
                let (n, d) = (z.rows(), z.cols());
                z.reshaped(&[n, d])
            }),
            assignment: pass.quant.map(|q| q.assignment),
        })
    }

    pub fn predict(&self, sample: &VideoSample, decode: &DecodeConfig) -> Result<MomentPrediction, ModelError> {
        let inf = self.infer(sample)?;
        Ok(decode_moments(&inf.heads, sample.clip_len(), sample.duration, decode))
    }
}

fn p(bound: &BoundParams, name: &str) -> Result<Var, ModelError> {
    bound.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}
