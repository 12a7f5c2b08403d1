//! Smooth objectives accessed through sampled component gradients.
//!
//! A problem exposes `f(x) = E[F(x, theta)]` over a sample space of component
//! ids, plus exact full-information counterparts used by reference solves and
//! oracle controllers. The nonsmooth term `h` lives in [`crate::prox`] and is
//! paired with a problem at the solver level.

mod logistic;
mod quadratic;

pub use logistic::LogisticL1Instance;
pub use quadratic::{PoolQuadraticSpec, StochasticQuadraticInstance};

use crate::error::Error;
use crate::prox::ProxFunction;
use crate::vector::DenseVector;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSpace {
    /// Component ids `0..n`; full-batch enumeration is possible.
    Finite(usize),
    /// Placeholder for streaming sources; samplers reject it.
    Continuous,
}

impl SampleSpace {
    pub fn size(&self) -> Option<usize> {
        match self {
            SampleSpace::Finite(n) => Some(*n),
            SampleSpace::Continuous => None,
        }
    }
}

pub trait StochasticProblem: Send + Sync {
    fn dimension(&self) -> usize;

    fn sample_space(&self) -> SampleSpace;

    /// `F(x, theta_id)`
    fn component_value(&self, x: &DenseVector, id: usize) -> f64;

    /// `grad F(x, theta_id)` accumulated into `out` (overwrites it).
    fn component_gradient_into(&self, x: &DenseVector, id: usize, out: &mut DenseVector);

    /// `f(x)` computed with full information.
    fn exact_value(&self, x: &DenseVector) -> f64;

    /// `grad f(x)` computed with full information.
    fn exact_gradient(&self, x: &DenseVector) -> DenseVector;

    /// `f(x)` and `grad f(x)` together; override when one data pass can
    /// produce both.
    fn exact_value_and_gradient(&self, x: &DenseVector) -> (f64, DenseVector) {
        (self.exact_value(x), self.exact_gradient(x))
    }

    /// Gradient Lipschitz constant (or a usable estimate), when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    /// Strong-convexity modulus when known and positive.
    fn strong_convexity(&self) -> Option<f64> {
        None
    }

    /// Natural upper bound on a batch (dataset size for finite sums; none
    /// for synthetic noise pools, where repeated draws stay meaningful).
    fn batch_cap(&self) -> Option<usize> {
        None
    }

    fn component_gradient(&self, x: &DenseVector, id: usize) -> DenseVector {
        let mut out = DenseVector::zeros(self.dimension());
        self.component_gradient_into(x, id, &mut out);
        out
    }
}

/// `phi(x) = f(x) + h(x)`, extended-real valued.
pub fn exact_phi(p: &dyn StochasticProblem, h: &ProxFunction, x: &DenseVector) -> Result<f64> {
    if p.dimension() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: h.dim(),
        });
    }
    if x.dim() != p.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: x.dim(),
        });
    }
    Ok(p.exact_value(x) + h.evaluate(x)?)
}
