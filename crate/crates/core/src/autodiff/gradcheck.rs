//! Central finite-difference verification of tape gradients.
//!
//! Stop-gradient nodes are replayed with the values they produced at the
//! base point, so the finite differences measure exactly the derivative the
//! tape is meant to compute: stop-gradient outputs are treated as constants.

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Per-leaf analytic and numeric gradients at one point.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradComparison {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every leaf element.
    pub fn max_relative_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                let denom = x.abs().max(y.abs()).max(REL_FLOOR);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }
}

fn check_inputs(point: &[Tensor], eps: f64) -> Result<(), AutodiffError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidArgument {
            detail: format!("finite-difference step {eps} outside (0, 1e-2]"),
        });
    }
    if let Some(i) = point.iter().position(|t| !t.is_finite()) {
        return Err(AutodiffError::NonFinite {
            node: format!("leaf {i}"),
        });
    }
    Ok(())
}

fn evaluate<F>(f: &F, point: &[Tensor], stops: Option<&[Tensor]>) -> Result<(Tape, Vec<Var>, Var), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = match stops {
        Some(s) => Tape::replaying(s.to_vec()),
        None => Tape::new(),
    };
    let leaves: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    tape.check_finite()?;
    if tape.value(out).numel() != 1 {
        return Err(AutodiffError::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    Ok((tape, leaves, out))
}

/// Central-difference gradient of `f` at `point`, with stop-gradient outputs
/// frozen at their base-point values.
pub fn numeric_gradient<F>(f: F, point: &[Tensor], eps: f64) -> Result<Vec<Tensor>, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    check_inputs(point, eps)?;
    let (base, _, _) = evaluate(&f, point, None)?;
    let stops = base.stop_values();
    numeric_with_stops(&f, point, eps, &stops)
}

fn numeric_with_stops<F>(f: &F, point: &[Tensor], eps: f64, stops: &[Tensor]) -> Result<Vec<Tensor>, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for leaf in 0..point.len() {
        let mut g = Tensor::zeros(point[leaf].shape());
        for j in 0..point[leaf].numel() {
            let orig = point[leaf].data()[j];
            work[leaf].data_mut()[j] = orig + eps;
            let (tp, _, op) = evaluate(f, &work, Some(stops))?;
            work[leaf].data_mut()[j] = orig - eps;
            let (tm, _, om) = evaluate(f, &work, Some(stops))?;
            work[leaf].data_mut()[j] = orig;
            g.data_mut()[j] = (tp.value(op).item() - tm.value(om).item()) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic and central-difference gradients of `f` at `point`.
pub fn compare_gradients<F>(f: F, point: &[Tensor], eps: f64) -> Result<GradComparison, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    check_inputs(point, eps)?;
    let (tape, leaves, out) = evaluate(&f, point, None)?;
    let grads = tape.backward(out)?;
    let analytic = leaves.iter().map(|&l| grads.get_or_zeros(l)).collect();
    let stops = tape.stop_values();
    let numeric = numeric_with_stops(&f, point, eps, &stops)?;
    Ok(GradComparison { analytic, numeric })
}

/// Maximum relative error between analytic and central-difference gradients
/// over every element of every leaf in `point`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    Ok(compare_gradients(f, point, eps)?.max_relative_error())
}
