//! Codebook diagnostics: 2-D PCA maps of clip features and codewords,
//! foreground/background separation statistics, and codebook evolution.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{norm, Tensor};
use crate::trainer::Snapshot;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("all points are identical; no principal directions")]
    RankDeficient,
    #[error("point sets disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-2 principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[M, 2]`.
    pub coords: Tensor,
    /// Unit principal directions, `[2, d]`.
    pub components: Tensor,
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
}

fn to_matrix(points: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(points.rows(), points.cols(), points.data())
}

/// Projects centered points onto the top two covariance eigenvectors. Each
/// eigenvector's largest-magnitude component is made positive.
pub fn project_2d(points: &Tensor) -> Result<Projection, AnalysisError> {
    let (m, d) = (points.rows(), points.cols());
    if m < 2 {
        return Err(AnalysisError::TooFewPoints { need: 2, got: m });
    }
    let x = to_matrix(points);
    let mean = x.row_mean();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let total = cov.trace();
    if total <= 0.0 {
        return Err(AnalysisError::RankDeficient);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(2 * d);
    let mut explained = [0.0; 2];
    for (slot, &j) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = eig.eigenvalues[j].max(0.0) / total;
        comps.extend(v);
    }
    // one-dimensional input only has a single direction
    comps.resize(2 * d, 0.0);
    let w = DMatrix::from_row_slice(2, d, &comps);
    let coords = centered * w.transpose();
    let mut data = Vec::with_capacity(m * 2);
    for r in 0..m {
        data.push(coords[(r, 0)]);
        data.push(coords[(r, 1)]);
    }
    Ok(Projection {
        coords: Tensor::new(&[m, 2], data),
        components: Tensor::new(&[2, d], comps),
        explained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationStats {
    /// Mean silhouette of the foreground/background 2-partition.
    pub silhouette: f64,
    /// L2 distance between the two centroids.
    pub centroid_gap: f64,
    /// In-sample accuracy of a least-squares linear probe.
    pub linear_probe_accuracy: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Silhouette coefficient averaged over every point of a two-cluster
/// partition.
pub fn silhouette(fg: &Tensor, bg: &Tensor) -> f64 {
    let sets = [fg, bg];
    let mut total = 0.0;
    let mut count = 0.0;
    for (own, other) in [(0, 1), (1, 0)] {
        let (a_set, b_set) = (sets[own], sets[other]);
        for i in 0..a_set.rows() {
            let p = a_set.row(i);
            let a: f64 = (0..a_set.rows()).filter(|&j| j != i).map(|j| dist(p, a_set.row(j))).sum::<f64>()
                / (a_set.rows() - 1) as f64;
            let b: f64 = (0..b_set.rows()).map(|j| dist(p, b_set.row(j))).sum::<f64>() / b_set.rows() as f64;
            let denom = a.max(b);
            total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
            count += 1.0;
        }
    }
    total / count
}

/// Fits `[x, 1] w ≈ ±1` by least squares (SVD pseudo-inverse) and reports
/// the fraction of points on the right side of zero.
pub fn linear_probe_accuracy(fg: &Tensor, bg: &Tensor) -> f64 {
    let d = fg.cols();
    let n = fg.rows() + bg.rows();
    let mut x = DMatrix::zeros(n, d + 1);
    let mut y = DVector::zeros(n);
    for (r, (row, label)) in (0..fg.rows())
        .map(|i| (fg.row(i), 1.0))
        .chain((0..bg.rows()).map(|i| (bg.row(i), -1.0)))
        .enumerate()
    {
        for c in 0..d {
            x[(r, c)] = row[c];
        }
        x[(r, d)] = 1.0;
        y[r] = label;
    }
    let svd = x.clone().svd(true, true);
    let w = svd.solve(&y, 1e-10).expect("both factors computed");
    let pred = x * w;
    let correct = (0..n).filter(|&r| (pred[r] >= 0.0) == (y[r] > 0.0)).count();
    correct as f64 / n as f64
}

pub fn separation_stats(fg: &Tensor, bg: &Tensor) -> Result<SeparationStats, AnalysisError> {
    for set in [fg, bg] {
        if set.rows() < 2 {
            return Err(AnalysisError::TooFewPoints { need: 2, got: set.rows() });
        }
    }
    if fg.cols() != bg.cols() {
        return Err(AnalysisError::DimensionMismatch(fg.cols(), bg.cols()));
    }
    let centroid = |t: &Tensor| -> Vec<f64> {
        let mut c = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (acc, v) in c.iter_mut().zip(t.row(r)) {
                *acc += v;
            }
        }
        c.iter().map(|v| v / t.rows() as f64).collect()
    };
    let (cf, cb) = (centroid(fg), centroid(bg));
    let gap: Vec<f64> = cf.iter().zip(&cb).map(|(a, b)| a - b).collect();
    Ok(SeparationStats {
        silhouette: silhouette(fg, bg),
        centroid_gap: norm(&gap),
        linear_probe_accuracy: linear_probe_accuracy(fg, bg),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
    Codeword,
}

impl PointLabel {
    pub fn name(self) -> &'static str {
        match self {
            PointLabel::Foreground => "foreground",
            PointLabel::Background => "background",
            PointLabel::Codeword => "codeword",
        }
    }
}

/// 2-D coordinates for clip features and effective codewords in a shared
/// PCA frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub labels: Vec<PointLabel>,
    pub coords: Tensor,
    pub explained: [f64; 2],
}

pub fn embedding_map(fg: &Tensor, bg: &Tensor, codewords: &Tensor) -> Result<EmbeddingMap, AnalysisError> {
    let d = fg.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (set, label) in [
        (fg, PointLabel::Foreground),
        (bg, PointLabel::Background),
        (codewords, PointLabel::Codeword),
    ] {
        if set.numel() == 0 {
            continue;
        }
        if set.cols() != d {
            return Err(AnalysisError::DimensionMismatch(d, set.cols()));
        }
        data.extend_from_slice(set.data());
        labels.extend(std::iter::repeat_n(label, set.rows()));
    }
    let proj = project_2d(&Tensor::new(&[labels.len(), d], data))?;
    Ok(EmbeddingMap {
        labels,
        coords: proj.coords,
        explained: proj.explained,
    })
}

impl EmbeddingMap {
    /// `point_id,label,x,y`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<(), AnalysisError> {
        writeln!(out, "point_id,label,x,y")?;
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", l.name(), self.coords.get2(i, 0), self.coords.get2(i, 1))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvolutionPoint {
    pub epoch: usize,
    pub effective_count: usize,
    /// Mean pairwise L2 distance among effective projected codewords.
    pub dispersion: f64,
}

/// Mean pairwise L2 distance between the given rows; 0 for fewer than two.
pub fn dispersion(points: &Tensor, rows: &[usize]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in rows.iter().enumerate() {
        for &b in &rows[i + 1..] {
            sum += dist(points.row(a), points.row(b));
            pairs += 1.0;
        }
    }
    sum / pairs
}

pub fn evolution_report(snapshots: &[Snapshot]) -> Vec<EvolutionPoint> {
    snapshots
        .iter()
        .map(|s| EvolutionPoint {
            epoch: s.epoch,
            effective_count: s.effective.len(),
            dispersion: dispersion(&s.projected, &s.effective),
        })
        .collect()
}

/// `epoch,effective_count,dispersion`.
pub fn write_evolution_csv(points: &[EvolutionPoint], out: &mut impl Write) -> Result<(), AnalysisError> {
    writeln!(out, "epoch,effective_count,dispersion")?;
    for p in points {
        writeln!(out, "{},{},{}", p.epoch, p.effective_count, p.dispersion)?;
    }
    Ok(())
}
