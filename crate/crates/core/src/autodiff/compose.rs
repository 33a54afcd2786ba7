//! Composite operations built only from catalog primitives.

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};

impl Tape {
    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// `ln(1 + e^x)` in the overflow-free form `relu(x) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let pos = self.relu(x);
        let negx = self.scale(x, -1.0);
        let neg = self.relu(negx);
        let abs = self.add(pos, neg)?;
        let nabs = self.scale(abs, -1.0);
        let e = self.exp(nabs);
        let onep = self.add_scalar(e, 1.0)?;
        let l = self.log(onep);
        self.add(pos, l)
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.mul(x, x)
    }
}
