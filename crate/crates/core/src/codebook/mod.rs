//! The moment codebook: codeword storage, joint projection, nearest-codeword
//! lookup, the codebook/commitment losses and utilization statistics.

mod kmeans;

pub use kmeans::{kmeans, kmeans_init, KMeansResult};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodebookError {
    #[error("codebook needs at least one codeword")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("k-means needs at least K={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `K` codewords of width `d` plus a `d -> d` linear projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    projector_weight: Tensor,
    projector_bias: Tensor,
}

impl Codebook {
    /// Codebook with an identity projector and zero bias.
    pub fn new(entries: Tensor) -> Result<Self, CodebookError> {
        let d = entries.cols();
        Self::with_projector(entries, Tensor::eye(d), Tensor::zeros(&[d]))
    }

    pub fn with_projector(entries: Tensor, weight: Tensor, bias: Tensor) -> Result<Self, CodebookError> {
        if entries.ndim() != 2 {
            return Err(CodebookError::DimensionMismatch(format!(
                "entries must be K x d, got {:?}",
                entries.shape()
            )));
        }
        if entries.rows() == 0 {
            return Err(CodebookError::Empty);
        }
        let d = entries.cols();
        if weight.shape() != [d, d] || bias.shape() != [d] {
            return Err(CodebookError::DimensionMismatch(format!(
                "projector {:?} + {:?} does not fit d={d}",
                weight.shape(),
                bias.shape()
            )));
        }
        if !entries.is_finite() || !weight.is_finite() || !bias.is_finite() {
            return Err(CodebookError::NonFinite("codebook"));
        }
        Ok(Self {
            entries,
            projector_weight: weight,
            projector_bias: bias,
        })
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn d(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn projector_weight(&self) -> &Tensor {
        &self.projector_weight
    }

    pub fn projector_bias(&self) -> &Tensor {
        &self.projector_bias
    }

    /// `C' = C · W + b`, computed on a throwaway tape.
    pub fn project(&self) -> Tensor {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = vars.project(&mut tape).expect("codebook shapes validated at construction");
        tape.value(out).clone()
    }

    /// Puts the codebook on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CodebookVars {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        CodebookVars {
            entries: leaf(tape, &self.entries),
            weight: leaf(tape, &self.projector_weight),
            bias: leaf(tape, &self.projector_bias),
        }
    }
}

/// Tape handles for a bound [`Codebook`].
#[derive(Debug, Clone, Copy)]
pub struct CodebookVars {
    pub entries: Var,
    pub weight: Var,
    pub bias: Var,
}

impl CodebookVars {
    /// Projected codebook `C'` on the tape.
    pub fn project(&self, tape: &mut Tape) -> Result<Var, AutodiffError> {
        tape.linear(self.entries, self.weight, self.bias)
    }
}

/// Nearest-codeword selection for a set of feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// One codeword id per feature row.
    pub indices: Vec<usize>,
    /// Selected rows of the projected codebook, shaped like the features.
    pub quantized: Tensor,
}

/// Index and squared distance of the codeword nearest to `row`; ties go to
/// the lowest index.
pub fn nearest(row: &[f64], codewords: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..codewords.rows() {
        let dist: f64 = row
            .iter()
            .zip(codewords.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

/// Assigns every row of `z` (last axis = feature width) to its nearest row
/// of `projected`.
pub fn lookup(z: &Tensor, projected: &Tensor) -> Result<Assignment, CodebookError> {
    if projected.ndim() != 2 || projected.rows() == 0 {
        return Err(CodebookError::Empty);
    }
    if z.cols() != projected.cols() {
        return Err(CodebookError::DimensionMismatch(format!(
            "features of width {} vs codewords of width {}",
            z.cols(),
            projected.cols()
        )));
    }
    let d = z.cols();
    let mut indices = Vec::with_capacity(z.rows());
    let mut data = Vec::with_capacity(z.numel());
    for r in 0..z.rows() {
        let (idx, _) = nearest(z.row(r), projected);
        indices.push(idx);
        data.extend_from_slice(projected.row(idx));
    }
    debug_assert_eq!(data.len(), z.rows() * d);
    Ok(Assignment {
        indices,
        quantized: Tensor::new(z.shape(), data),
    })
}

fn gather_like(tape: &mut Tape, z: Var, projected: Var, assignment: &Assignment) -> Result<Var, AutodiffError> {
    let shape = tape.shape(z);
    let prefix = shape[..shape.len() - 1].to_vec();
    tape.gather_shaped(projected, &assignment.indices, &prefix)
}

/// `mean((C'[idx] - sg(z))²)`: moves codewords toward the features.
pub fn codebook_loss(tape: &mut Tape, z: Var, projected: Var, assignment: &Assignment) -> Result<Var, AutodiffError> {
    let q = gather_like(tape, z, projected, assignment)?;
    let zs = tape.stop_gradient(z)?;
    let diff = tape.sub(q, zs)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq))
}

/// `mean((sg(C'[idx]) - z)²)`: pulls features toward their codewords.
pub fn commitment_loss(tape: &mut Tape, z: Var, projected: Var, assignment: &Assignment) -> Result<Var, AutodiffError> {
    let q = gather_like(tape, z, projected, assignment)?;
    let qs = tape.stop_gradient(q)?;
    let diff = tape.sub(qs, z)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq))
}

/// Per-codeword assignment counts.
pub fn histogram(indices: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &i in indices {
        counts[i] += 1;
    }
    counts
}

/// Fraction of codewords with at least one assignment.
pub fn utilization(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64
}

/// Ids of codewords with at least one assignment, ascending.
pub fn effective_codewords(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_projector_returns_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Codebook::new(Tensor::randn(&[5, 3], &mut rng)).unwrap();
        assert_eq!(c.project(), *c.entries());
    }

    #[test]
    fn zero_projector_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
        let c = Codebook::with_projector(Tensor::randn(&[4, 3], &mut rng), Tensor::zeros(&[3, 3]), b.clone()).unwrap();
        let p = c.project();
        for r in 0..4 {
            assert_eq!(p.row(r), b.data());
        }
    }

    #[test]
    fn projection_matches_hand_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::randn(&[4, 3], &mut rng);
        let w = Tensor::randn(&[3, 3], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let c = Codebook::with_projector(e.clone(), w.clone(), b.clone()).unwrap();
        let p = c.project();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += e.get2(i, k) * w.get2(k, j);
                }
                acc += b.data()[j];
                assert_eq!(p.get2(i, j), acc);
            }
        }
    }

    #[test]
    fn exact_match_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cw = Tensor::randn(&[8, 4], &mut rng);
        let z = Tensor::new(&[1, 4], cw.row(5).to_vec());
        let a = lookup(&z, &cw).unwrap();
        assert_eq!(a.indices, vec![5]);
        assert_eq!(nearest(z.row(0), &cw).1, 0.0);

        // codewords 2 and 7 mirror each other around z = 0
        let mut data = vec![10.0; 8 * 2];
        data[4..6].copy_from_slice(&[1.0, 0.0]);
        data[14..16].copy_from_slice(&[-1.0, 0.0]);
        let cw = Tensor::new(&[8, 2], data);
        let a = lookup(&Tensor::zeros(&[1, 2]), &cw).unwrap();
        assert_eq!(a.indices, vec![2]);
    }

    #[test]
    fn lookup_rejects_width_mismatch() {
        let err = lookup(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        assert!(matches!(err, CodebookError::DimensionMismatch(_)));
    }

    #[test]
    fn loss_arithmetic() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::new(&[1, 1], vec![1.0]));
        let cw = tape.param(Tensor::new(&[1, 1], vec![3.0]));
        let a = lookup(tape.value(z), tape.value(cw)).unwrap();
        let cb = codebook_loss(&mut tape, z, cw, &a).unwrap();
        let cmt = commitment_loss(&mut tape, z, cw, &a).unwrap();
        assert_eq!(tape.value(cb).item(), 4.0);
        assert_eq!(tape.value(cmt).item(), 4.0);

        let mut tape = Tape::new();
        let cw = tape.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let z = tape.param(Tensor::new(&[2, 2], vec![3.0, 4.0, 1.0, 2.0]));
        let a = lookup(tape.value(z), tape.value(cw)).unwrap();
        let cmt = commitment_loss(&mut tape, z, cw, &a).unwrap();
        assert_eq!(tape.value(cmt).item(), 0.0);
    }

    #[test]
    fn utilization_counts() {
        assert_eq!(utilization(&[0, 0, 0]), 0.0);
        let mut counts = vec![0; 1024];
        for c in counts.iter_mut().take(90) {
            *c = 3;
        }
        let u = utilization(&counts);
        assert!((u - 90.0 / 1024.0).abs() < 1e-15 && u < 0.10);
        assert_eq!(effective_codewords(&histogram(&[3, 1, 3], 4)), vec![1, 3]);
    }
}
