//! Lloyd's k-means with k-means++ seeding, used to build codebook priors.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{nearest, CodebookError};
use crate::autodiff::Tensor;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    /// Assignment cost (sum of squared distances) after each assignment step.
    pub cost_history: Vec<f64>,
}

impl KMeansResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("at least one assignment step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = features.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), features.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen center
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("n >= k"),
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), features.row(next)));
        }
    }
    chosen
}

fn assign(features: &Tensor, centers: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (0..features.rows()).map(|i| nearest(features.row(i), centers)).unzip()
}

/// Clusters the rows of `features` into `k` groups.
///
/// Empty clusters are re-seeded to the point farthest from its own center.
pub fn kmeans(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult, CodebookError> {
    if features.ndim() != 2 {
        return Err(CodebookError::DimensionMismatch(format!(
            "features must be N x d, got {:?}",
            features.shape()
        )));
    }
    if k == 0 {
        return Err(CodebookError::Empty);
    }
    let (n, d) = (features.rows(), features.cols());
    if n < k {
        return Err(CodebookError::TooFewPoints { n, k });
    }
    if !features.is_finite() {
        return Err(CodebookError::NonFinite("k-means features"));
    }
    let max_iters = max_iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = seed_plus_plus(features, k, &mut rng);
    let mut centers = Tensor::new(
        &[k, d],
        seeds.iter().flat_map(|&i| features.row(i).to_vec()).collect(),
    );

    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut converged = false;
    for _ in 0..max_iters {
        let (labels, dists) = assign(features, &centers);
        history.push(dists.iter().sum());
        if previous.as_ref() == Some(&labels) {
            converged = true;
            break;
        }
        centers = update_centers(features, &labels, &dists, k);
        previous = Some(labels);
    }
    let (labels, dists) = if converged {
        (previous.expect("converged after one step"), Vec::new())
    } else {
        assign(features, &centers)
    };
    if !converged {
        history.push(dists.iter().sum());
    }
    Ok(KMeansResult {
        centers,
        assignments: labels,
        cost_history: history,
    })
}

fn update_centers(features: &Tensor, labels: &[usize], dists: &[f64], k: usize) -> Tensor {
    let d = features.cols();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let mut spare: Vec<f64> = dists.to_vec();
    for c in 0..k {
        if counts[c] == 0 {
            let far = spare
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > spare[best] { i } else { best });
            sums[c * d..(c + 1) * d].copy_from_slice(features.row(far));
            counts[c] = 1;
            spare[far] = 0.0;
        } else {
            let inv = counts[c] as f64;
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= inv;
            }
        }
    }
    Tensor::new(&[k, d], sums)
}

/// Cluster centers to use as codebook priors.
pub fn kmeans_init(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Tensor, CodebookError> {
    Ok(kmeans(features, k, max_iters, seed)?.centers)
}
