//! Checks shared by the acceptance runner and the per-module test files.
//! Each returns an [`Outcome`] so callers can either assert or report.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use mqvtg::autodiff::{compare_gradients, AutodiffError, Tape, Tensor, Var};
use mqvtg::codebook::{codebook_loss, commitment_loss, kmeans, lookup};
use mqvtg::data::{generate_synthetic, SyntheticSpec, VideoSample};
use mqvtg::metrics::{map_moments, recall_at_1, ScoredSpan, Window, MAP_THRESHOLDS};
use mqvtg::model::{Fusion, Model, ModelConfig, Placement, CODEBOOK_ENTRIES, CODEBOOK_PROJ_B, CODEBOOK_PROJ_W};
use mqvtg::objectives::{alignment_loss, clip_targets, moment_retrieval_loss, saliency_loss, LossSettings};

pub const GRAD_TOL: f64 = 1e-4;
pub const PARTITION_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

#[derive(Clone, Copy)]
enum Domain {
    Normal,
    Positive,
    /// Magnitudes kept at least 0.1 away from the relu kink.
    AwayFromZero,
}

pub struct GradCase {
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
    f: LossFn,
}

impl GradCase {
    fn new(
        name: &'static str,
        shapes: &[&[usize]],
        domain: Domain,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'static,
    ) -> Self {
        Self {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            domain,
            f: Box::new(f),
        }
    }

    pub fn point(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.shapes
            .iter()
            .map(|s| {
                let t = Tensor::randn(s, rng);
                match self.domain {
                    Domain::Normal => t,
                    Domain::Positive => t.map(|x| 0.2 + x.abs()),
                    Domain::AwayFromZero => t.map(|x| x + 0.1 * x.signum()),
                }
            })
            .collect()
    }

    /// Worst relative error over `points` random points.
    pub fn worst_error(&self, points: usize, seed: u64) -> Result<f64, AutodiffError> {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let p = self.point(&mut r);
            let cmp = compare_gradients(&self.f, &p, 1e-5)?;
            worst = worst.max(cmp.max_relative_error());
        }
        Ok(worst)
    }
}

/// `sum(w ⊙ x)` with fixed, uneven weights so every output element matters.
fn probe(tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| 0.5 + (0.37 * i as f64 + 0.1).cos()).collect());
    let wv = tape.constant(w);
    let m = tape.mul(x, wv)?;
    Ok(tape.sum(m))
}

fn column(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len(), 1], v.to_vec())
}

/// One case per catalog primitive (some with several axes or broadcast
/// forms), then one per training loss.
pub fn gradient_cases() -> Vec<GradCase> {
    use Domain::*;
    vec![
        GradCase::new("matmul", &[&[2, 3, 4], &[4, 2]], Normal, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("matmul_nt", &[&[3, 4], &[5, 4]], Normal, |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("add", &[&[3, 4], &[4]], Normal, |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("mul", &[&[2, 3, 4], &[3, 4]], Normal, |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("sub", &[&[3, 4], &[3, 4]], Normal, |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("scale", &[&[3, 4]], Normal, |t, v| {
            let y = t.scale(v[0], -2.5);
            probe(t, y)
        }),
        GradCase::new("relu", &[&[3, 4]], AwayFromZero, |t, v| {
            let y = t.relu(v[0]);
            probe(t, y)
        }),
        GradCase::new("sigmoid", &[&[3, 4]], Normal, |t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y)
        }),
        GradCase::new("exp", &[&[3, 4]], Normal, |t, v| {
            let y = t.exp(v[0]);
            probe(t, y)
        }),
        GradCase::new("log", &[&[3, 4]], Positive, |t, v| {
            let y = t.log(v[0]);
            probe(t, y)
        }),
        GradCase::new("softmax/0", &[&[3, 4]], Normal, |t, v| {
            let y = t.softmax(v[0], 0)?;
            probe(t, y)
        }),
        GradCase::new("softmax/1", &[&[2, 3, 4]], Normal, |t, v| {
            let y = t.softmax(v[0], 1)?;
            probe(t, y)
        }),
        GradCase::new("layer_norm", &[&[3, 5]], Normal, |t, v| {
            let y = t.layer_norm(v[0])?;
            probe(t, y)
        }),
        GradCase::new("mean", &[&[3, 4]], Normal, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
        GradCase::new("mean/1", &[&[2, 3, 4]], Normal, |t, v| {
            let y = t.mean_axis(v[0], 1)?;
            probe(t, y)
        }),
        GradCase::new("sum", &[&[3, 4]], Normal, |t, v| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        }),
        GradCase::new("sum/0", &[&[3, 4]], Normal, |t, v| {
            let y = t.sum_axis(v[0], 0)?;
            probe(t, y)
        }),
        GradCase::new("sq_dist", &[&[3, 4], &[2, 4]], Normal, |t, v| {
            let y = t.sq_dist(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("concat/0", &[&[2, 3], &[1, 3]], Normal, |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            probe(t, y)
        }),
        GradCase::new("concat/1", &[&[3, 2], &[3, 4]], Normal, |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            probe(t, y)
        }),
        GradCase::new("gather", &[&[4, 3]], Normal, |t, v| {
            let y = t.gather(v[0], &[2, 0, 2, 3])?;
            probe(t, y)
        }),
        GradCase::new("max_pool", &[&[3, 4, 2]], Normal, |t, v| {
            let y = t.max_pool(v[0], 1)?;
            probe(t, y)
        }),
        GradCase::new("cosine", &[&[3, 4], &[2, 4]], Normal, |t, v| {
            let y = t.cosine(v[0], v[1])?;
            probe(t, y)
        }),
        GradCase::new("stop_gradient", &[&[3, 4]], Normal, |t, v| {
            let s = t.stop_gradient(v[0])?;
            let y = t.mul(s, v[0])?;
            probe(t, y)
        }),
        GradCase::new("loss/codebook", &[&[6, 4], &[5, 4], &[4, 4], &[4]], Normal, |t, v| {
            let projected = t.linear(v[1], v[2], v[3])?;
            let a = lookup(t.value(v[0]), t.value(projected)).expect("shapes agree");
            codebook_loss(t, v[0], projected, &a)
        }),
        GradCase::new("loss/commitment", &[&[6, 4], &[5, 4], &[4, 4], &[4]], Normal, |t, v| {
            let projected = t.linear(v[1], v[2], v[3])?;
            let a = lookup(t.value(v[0]), t.value(projected)).expect("shapes agree");
            commitment_loss(t, v[0], projected, &a)
        }),
        GradCase::new("loss/focal+l1", &[&[8, 1], &[8, 1], &[8, 1]], Normal, |t, v| {
            let targets = clip_targets(&[[2.6, 11.0]], 8, 2.0);
            let conf = t.sigmoid(v[0]);
            let s = t.softplus(v[1])?;
            let e = t.softplus(v[2])?;
            moment_retrieval_loss(t, conf, s, e, &targets, &LossSettings::default()).map_err(objective)
        }),
        GradCase::new("loss/saliency", &[&[8, 1]], Normal, |t, v| {
            // scores in [-0.25, 0.25]: at tau = 0.07 wider ranges give softmax
            // gradients near 1e-9, below the finite-difference noise floor
            let s = t.sigmoid(v[0]);
            let s = t.scale(s, 0.5);
            let s = t.add_scalar(s, -0.25)?;
            let labels = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
            let l = saliency_loss(t, s, &labels, LossSettings::default().saliency_temperature).map_err(objective)?;
            Ok(l.expect("has positives"))
        }),
        GradCase::new("loss/infonce", &[&[4, 6], &[4, 6]], Normal, |t, v| {
            alignment_loss(t, v[0], v[1], LossSettings::default().alignment_temperature).map_err(objective)
        }),
    ]
}

fn objective(e: mqvtg::objectives::ObjectiveError) -> AutodiffError {
    match e {
        mqvtg::objectives::ObjectiveError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument {
            detail: other.to_string(),
        },
    }
}

/// Every case at `points` random points; reports the worst case.
pub fn gradient_suite(points: usize) -> Outcome {
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    for (i, case) in gradient_cases().iter().enumerate() {
        match case.worst_error(points, 1000 + i as u64) {
            Ok(e) => {
                if e > worst.1 {
                    worst = (case.name, e);
                }
                if e.is_nan() || e >= GRAD_TOL {
                    failures.push(format!("{}={e:.2e}", case.name));
                }
            }
            Err(err) => failures.push(format!("{}: {err}", case.name)),
        }
    }
    let n = gradient_cases().len();
    if failures.is_empty() {
        Outcome::new(true, format!("{n} cases x {points} points, worst {} {:.2e}", worst.0, worst.1))
    } else {
        Outcome::new(false, format!("failing: {}", failures.join(", ")))
    }
}

// ---------------------------------------------------------------- model fixtures

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 6,
        val_videos: 2,
        clips: 8,
        patches: 3,
        dim: 8,
        num_prototypes: 4,
        moments_per_video: [1, 2],
        moment_len: [2, 3],
        query_tokens: 3,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_config(placement: Placement, fusion: Option<Fusion>) -> ModelConfig {
    ModelConfig {
        d: 8,
        input_dim: 8,
        encoder_layers: 1,
        attention_heads: 2,
        ff_hidden: 16,
        placement,
        fusion,
        codebook_size: 6,
    }
}

pub fn tiny_samples(seed: u64) -> Vec<VideoSample> {
    generate_synthetic(&tiny_spec(seed)).expect("valid spec").dataset.train
}

fn is_codebook(name: &str) -> bool {
    matches!(name, CODEBOOK_ENTRIES | CODEBOOK_PROJ_W | CODEBOOK_PROJ_B)
}

/// Analytic and finite-difference gradients of the codebook or commitment
/// loss with respect to the parameters picked by `leaf`.
fn partition_gradients(
    model: &Model,
    sample: &VideoSample,
    commitment: bool,
    leaf: fn(&str) -> bool,
) -> Result<(f64, f64), AutodiffError> {
    let params = model.params();
    let point: Vec<Tensor> = params.iter().filter(|(n, _)| leaf(n)).map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var, AutodiffError> {
        let mut next = leaves.iter();
        let vars: Vec<Var> = params
            .iter()
            .map(|(n, t)| if leaf(n) { *next.next().unwrap() } else { tape.constant(t.clone()) })
            .collect();
        let bound = params.bind_vars(vars).expect("one var per param");
        let pass = model.forward(tape, &bound, sample).map_err(|e| AutodiffError::InvalidArgument {
            detail: e.to_string(),
        })?;
        let q = pass.quant.expect("quantized config");
        if commitment {
            commitment_loss(tape, q.z, q.projected, &q.assignment)
        } else {
            codebook_loss(tape, q.z, q.projected, &q.assignment)
        }
    };
    let cmp = compare_gradients(f, &point, 1e-5)?;
    let max_abs = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    Ok((max_abs(&cmp.numeric), max_abs(&cmp.analytic)))
}

/// Codebook loss is flat in encoder parameters and commitment loss is flat
/// in codebook parameters, over `configs` random model configurations.
pub fn stop_gradient_partition(configs: usize) -> Outcome {
    let placements = [Placement::Moment, Placement::Clip, Placement::Image];
    let mut r = rng(77);
    let mut worst_cb: f64 = 0.0;
    let mut worst_cmt: f64 = 0.0;
    let mut flow = (f64::INFINITY, f64::INFINITY);
    for c in 0..configs {
        let placement = placements[c % placements.len()];
        let fusion = Fusion::ALL[r.random_range(0..Fusion::ALL.len())];
        let model = Model::new(tiny_config(placement, Some(fusion)), r.random()).expect("valid config");
        let samples = tiny_samples(c as u64);
        let sample = &samples[r.random_range(0..samples.len())];
        let run = |commitment, leaf| partition_gradients(&model, sample, commitment, leaf);
        let (Ok(cb_enc), Ok(cmt_cb), Ok(cb_cb), Ok(cmt_enc)) = (
            run(false, |n| !is_codebook(n)),
            run(true, is_codebook),
            run(false, is_codebook),
            run(true, |n| !is_codebook(n)),
        ) else {
            return Outcome::new(false, format!("config {c}: gradient evaluation failed"));
        };
        worst_cb = worst_cb.max(cb_enc.0).max(cb_enc.1);
        worst_cmt = worst_cmt.max(cmt_cb.0).max(cmt_cb.1);
        // the losses must still reach their own side
        flow = (flow.0.min(cb_cb.0), flow.1.min(cmt_enc.0));
    }
    let pass = worst_cb < PARTITION_TOL && worst_cmt < PARTITION_TOL && flow.0 > 0.0 && flow.1 > 0.0;
    Outcome::new(
        pass,
        format!(
            "max |dL_cb/d enc| {worst_cb:.1e}, max |dL_cmt/d codebook| {worst_cmt:.1e}, own-side min {:.1e}/{:.1e}",
            flow.0, flow.1
        ),
    )
}

// ---------------------------------------------------------------- soft invariance

/// Head values and `L_cb + L_cmt` for one forward pass.
pub fn heads_and_mq(model: &Model, sample: &VideoSample) -> (mqvtg::model::HeadOutputs, f64) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| true);
    let pass = model.forward(&mut tape, &bound, sample).unwrap();
    let q = pass.quant.as_ref().unwrap();
    let cb = codebook_loss(&mut tape, q.z, q.projected, &q.assignment).unwrap();
    let cmt = commitment_loss(&mut tape, q.z, q.projected, &q.assignment).unwrap();
    let mq = tape.value(cb).item() + tape.value(cmt).item();
    (pass.heads.values(&tape), mq)
}

pub fn soft_invariance(trials: usize) -> Outcome {
    let mut model = Model::new(tiny_config(Placement::Moment, Some(Fusion::Soft)), 5).unwrap();
    let samples = tiny_samples(5);
    let sample = &samples[0];
    let (heads0, mq0) = heads_and_mq(&model, sample);
    let mut r = rng(55);
    let (mut identical, mut changed) = (0, 0);
    for _ in 0..trials {
        let k = model.config().codebook_size;
        let scale = r.random_range(0.1..5.0);
        model
            .set_codebook_entries(Tensor::randn(&[k, 8], &mut r).map(|x| x * scale))
            .unwrap();
        let (heads, mq) = heads_and_mq(&model, sample);
        identical += usize::from(heads == heads0);
        changed += usize::from(mq != mq0);
    }
    Outcome::new(
        identical == trials && changed == trials,
        format!("{identical}/{trials} head outputs bit-identical, {changed}/{trials} L_mq changed"),
    )
}

// ---------------------------------------------------------------- lookup oracle

/// Exhaustive nearest-codeword scan, lowest index on ties.
pub fn brute_force_nearest(z: &[f64], codewords: &Tensor) -> usize {
    let dists: Vec<f64> = (0..codewords.rows())
        .map(|j| z.iter().zip(codewords.row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

/// A random lookup instance. Odd seeds use small integer grids with
/// duplicated codewords, which makes exact ties common.
pub fn lookup_instance(seed: u64) -> (Tensor, Tensor, usize) {
    let mut r = rng(seed);
    let (t, k, d) = (r.random_range(1..=64), r.random_range(1..=64), r.random_range(1..=64));
    if seed.is_multiple_of(2) {
        return (Tensor::randn(&[t, d], &mut r), Tensor::randn(&[k, d], &mut r), 0);
    }
    let d = d.min(4);
    let grid = |r: &mut ChaCha8Rng, n: usize| {
        Tensor::new(&[n, d], (0..n * d).map(|_| r.random_range(-1i32..=1) as f64).collect())
    };
    let z = grid(&mut r, t);
    let mut c = grid(&mut r, k);
    for j in 1..k {
        if r.random_bool(0.3) {
            let src = r.random_range(0..j);
            let row = c.row(src).to_vec();
            c.data_mut()[j * d..(j + 1) * d].copy_from_slice(&row);
        }
    }
    let ties = (0..t)
        .filter(|&i| {
            let dists: Vec<f64> = (0..k)
                .map(|j| z.row(i).iter().zip(c.row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let m = dists.iter().copied().fold(f64::INFINITY, f64::min);
            dists.iter().filter(|&&x| x == m).count() > 1
        })
        .count();
    (z, c, ties)
}

pub fn lookup_oracle(instances: usize) -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for s in 0..instances as u64 {
        let (z, c, t) = lookup_instance(s);
        ties += t;
        let a = lookup(&z, &c).unwrap();
        for i in 0..z.rows() {
            let j = brute_force_nearest(z.row(i), &c);
            if a.indices[i] != j || a.quantized.row(i) != c.row(j) {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        mismatches == 0 && ties > 0,
        format!("{instances} instances, {ties} tied rows, {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- metric oracle

fn oracle_iou(a: Window, b: Window) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = a[1].max(b[1]) - a[0].min(b[0]);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Interpolated AP written out from the definition: rank by score (stable),
/// match greedily, and at each hit take the best precision at that rank or
/// any later one.
pub fn brute_force_ap(preds: &[ScoredSpan], gts: &[Window], threshold: f64) -> f64 {
    if preds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut hit = Vec::new();
    for &i in &order {
        let w = [preds[i].start, preds[i].end];
        let mut best: Option<usize> = None;
        for j in 0..gts.len() {
            if !taken[j] && best.is_none_or(|b| oracle_iou(w, gts[j]) > oracle_iou(w, gts[b])) {
                best = Some(j);
            }
        }
        let ok = best.is_some_and(|j| oracle_iou(w, gts[j]) >= threshold);
        if ok {
            taken[best.unwrap()] = true;
        }
        hit.push(ok);
    }
    let precision_at = |m: usize| hit[..=m].iter().filter(|&&h| h).count() as f64 / (m + 1) as f64;
    let mut ap = 0.0;
    for n in 0..hit.len() {
        if hit[n] {
            let best = (n..hit.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / gts.len() as f64;
        }
    }
    ap
}

/// Random queries on a half-second grid, with repeated scores.
pub fn metric_instance(seed: u64) -> (Vec<Vec<ScoredSpan>>, Vec<Vec<Window>>) {
    let mut r = rng(seed);
    let queries = r.random_range(1..=5);
    let span = |r: &mut ChaCha8Rng| {
        let s = r.random_range(0..20) as f64 * 0.5;
        let e = s + r.random_range(1..10) as f64 * 0.5;
        [s, e]
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..queries {
        let g = (0..r.random_range(1..=3)).map(|_| span(&mut r)).collect();
        let p = (0..r.random_range(0..=6))
            .map(|_| {
                let [s, e] = span(&mut r);
                ScoredSpan::new(s, e, r.random_range(0..4) as f64 * 0.25)
            })
            .collect();
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

pub fn metric_oracle(instances: usize) -> Outcome {
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for s in 0..instances as u64 {
        let (preds, gts) = metric_instance(s);
        let got = map_moments(&preds, &gts, &MAP_THRESHOLDS);
        for &(t, v) in &got.per_threshold {
            let want: f64 =
                preds.iter().zip(&gts).map(|(p, g)| brute_force_ap(p, g, t)).sum::<f64>() / preds.len() as f64;
            if v != want {
                mismatches += 1;
            }
        }
        let recalls: Vec<f64> = (0..=10).map(|i| recall_at_1(&preds, &gts, i as f64 / 10.0)).collect();
        if recalls.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && non_monotone == 0,
        format!("{instances} instances, {mismatches} AP mismatches, {non_monotone} non-monotone recall curves"),
    )
}

// ---------------------------------------------------------------- k-means

pub fn kmeans_properties(datasets: usize) -> Outcome {
    let mut increases = 0;
    for s in 0..datasets as u64 {
        let mut r = rng(300 + s);
        let n = r.random_range(10..80);
        let d = r.random_range(1..6);
        let k = r.random_range(1..=n.min(8));
        let x = Tensor::randn(&[n, d], &mut r);
        let res = kmeans(&x, k, 50, s).unwrap();
        if res.cost_history.windows(2).any(|w| w[1] > w[0]) {
            increases += 1;
        }
    }
    let (err, sigma) = two_blob_error(9);
    Outcome::new(
        increases == 0 && err <= 0.5 * sigma,
        format!("{increases}/{datasets} cost increases, two-blob center error {err:.3} (limit {:.3})", 0.5 * sigma),
    )
}

/// Largest distance between a recovered center and its blob mean for two
/// unit-variance blobs 10 sigma apart.
pub fn two_blob_error(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let sigma = 1.0;
    let d = 3;
    let means = [vec![0.0; d], {
        let mut m = vec![0.0; d];
        m[0] = 10.0 * sigma;
        m
    }];
    let mut rows = Vec::new();
    for m in &means {
        for _ in 0..200 {
            let noise = Tensor::randn(&[d], &mut r);
            rows.push(m.iter().zip(noise.data()).map(|(a, b)| a + sigma * b).collect::<Vec<_>>());
        }
    }
    let x = Tensor::from_rows(&rows);
    let res = kmeans(&x, 2, 100, seed).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let err = means
        .iter()
        .map(|m| (0..2).map(|c| dist(res.centers.row(c), m)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    (err, sigma)
}

// ---------------------------------------------------------------- utilization

pub fn set_count(indices: &[usize]) -> usize {
    indices.iter().collect::<BTreeSet<_>>().len()
}

/// `utilization` from a random histogram against a direct set count.
pub fn utilization_oracle(instances: usize) -> usize {
    let mut mismatches = 0;
    for s in 0..instances as u64 {
        let mut r = rng(900 + s);
        let k = r.random_range(1..200);
        let n = r.random_range(0..300);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let got = mqvtg::codebook::utilization(&mqvtg::codebook::histogram(&idx, k));
        if got != set_count(&idx) as f64 / k as f64 {
            mismatches += 1;
        }
    }
    mismatches
}

// ---------------------------------------------------------------- training fixtures

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 24,
        val_videos: 8,
        clips: 10,
        dim: 8,
        num_prototypes: 4,
        moments_per_video: [1, 2],
        moment_len: [2, 4],
        query_tokens: 3,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_train_config(epochs: usize, seed: u64) -> mqvtg::trainer::TrainConfig {
    mqvtg::trainer::TrainConfig {
        model: ModelConfig {
            codebook_size: 16,
            ..tiny_config(Placement::Moment, None)
        },
        epochs,
        batch_size: 4,
        seed,
        optimizer: mqvtg::trainer::AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn utilization_reporting() -> Outcome {
    use mqvtg::analysis::{evolution_report, write_evolution_csv};
    use mqvtg::trainer::{evaluate, train};

    let oracle_mismatches = utilization_oracle(200);
    let data = generate_synthetic(&small_spec(3)).unwrap().dataset;
    let cfg = small_train_config(3, 3);
    let k = cfg.model.codebook_size;
    let out = train(&cfg, &data.train, &data.val).unwrap();
    let ev = evaluate(&out.best.model, &data.val, &cfg.decode).unwrap();
    let report_ok = ev.report.codebook_utilization == set_count(&ev.assignments.concat()) as f64 / k as f64;

    let mut csv = Vec::new();
    write_evolution_csv(&evolution_report(&out.snapshots), &mut csv).unwrap();
    let counts: Vec<usize> = String::from_utf8(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let recount: Vec<usize> = out.snapshots.iter().map(|s| set_count(&s.assignments)).collect();
    let snap_util_ok = out
        .snapshots
        .iter()
        .all(|s| s.utilization == set_count(&s.assignments) as f64 / k as f64);
    let pass = oracle_mismatches == 0 && report_ok && snap_util_ok && counts == recount && !counts.is_empty();
    Outcome::new(
        pass,
        format!(
            "oracle mismatches {oracle_mismatches}, report match {report_ok}, {} snapshots, effective counts {counts:?} vs recount {recount:?}",
            out.snapshots.len()
        ),
    )
}

pub fn determinism_and_persistence() -> Outcome {
    use mqvtg::data::mqft::{decode_matrix, encode_matrix};
    use mqvtg::trainer::{train, Checkpoint};

    let data = generate_synthetic(&small_spec(4)).unwrap().dataset;
    let cfg = small_train_config(2, 11);
    let run = || {
        let out = train(&cfg, &data.train, &data.val).unwrap();
        let mut log = Vec::new();
        out.write_log(&mut log).unwrap();
        (out, log)
    };
    let (out_a, log_a) = run();
    let (_, log_b) = run();
    let logs_ok = log_a == log_b && !log_a.is_empty();

    let mut bytes = Vec::new();
    out_a.last.write(&mut bytes).unwrap();
    let back = Checkpoint::read(&mut bytes.as_slice(), &cfg).unwrap();
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    let mqck_ok = bytes == again;
    let forward_ok = data.val.iter().all(|s| {
        let a = out_a.last.model.infer(s).unwrap();
        let b = back.model.infer(s).unwrap();
        a.heads == b.heads && a.z_t == b.z_t
    });

    let mut r = rng(21);
    let mut mqft_ok = true;
    for _ in 0..20 {
        let (n, d) = (r.random_range(1..40), r.random_range(1..40));
        let mut m = Tensor::randn(&[n, d], &mut r);
        m.round_to_f32();
        let mut buf = Vec::new();
        encode_matrix(&mut buf, &m).unwrap();
        let got = decode_matrix(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        encode_matrix(&mut buf2, &got).unwrap();
        mqft_ok &= got == m && buf == buf2;
    }
    Outcome::new(
        logs_ok && mqck_ok && forward_ok && mqft_ok,
        format!("logs identical {logs_ok}, MQCK bytes {mqck_ok}, forward after reload {forward_ok}, MQFT {mqft_ok}"),
    )
}
